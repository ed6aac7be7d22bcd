//! Probe records on disk (CSV plus a JSON mirror), per-layer aggregation and
//! SVG error-versus-layer charts.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "scenario",
    "run",
    "checkpoint_step",
    "probe_point",
    "layer_index",
    "split",
    "error_rate",
    "probe_epochs_used",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub scenario: String,
    pub run: usize,
    pub checkpoint_step: usize,
    pub probe_point: String,
    pub layer_index: usize,
    pub split: Split,
    pub error_rate: f64,
    pub probe_epochs_used: usize,
}

impl ProbeRecord {
    fn key(&self) -> (&str, usize, usize, &str, Split) {
        (
            &self.scenario,
            self.run,
            self.checkpoint_step,
            &self.probe_point,
            self.split,
        )
    }
}

/// Checks the error range and key uniqueness.
pub fn validate_records(records: &[ProbeRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.error_rate) {
            return Err(Error::Records {
                line: i as u64 + 2,
                reason: format!("error rate {} outside [0, 1]", r.error_rate),
            });
        }
        if !seen.insert(r.key()) {
            return Err(Error::Records {
                line: i as u64 + 2,
                reason: format!(
                    "duplicate record for {}/run {}/step {}/{}/{}",
                    r.scenario, r.run, r.checkpoint_step, r.probe_point, r.split
                ),
            });
        }
    }
    Ok(())
}

/// Path of the JSON mirror written next to a CSV file.
pub fn json_mirror_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the CSV (error rates with 6 decimals) and its JSON mirror.
pub fn write_records(records: &[ProbeRecord], path: &Path) -> Result<()> {
    validate_records(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.run.to_string(),
            r.checkpoint_step.to_string(),
            r.probe_point.clone(),
            r.layer_index.to_string(),
            r.split.to_string(),
            format!("{:.6}", r.error_rate),
            r.probe_epochs_used.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))?;
    let rounded: Vec<ProbeRecord> = records
        .iter()
        .map(|r| ProbeRecord {
            error_rate: round6(r.error_rate),
            ..r.clone()
        })
        .collect();
    let json_path = json_mirror_path(path);
    let json = serde_json::to_vec_pretty(&rounded)?;
    fs::write(&json_path, json).map_err(|e| Error::file(&json_path, e))?;
    Ok(())
}

fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap_or(v)
}

/// Reads a CSV written by [`write_records`]. Errors carry the 1-based file
/// line.
pub fn read_records(path: &Path) -> Result<Vec<ProbeRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_records(&bytes)
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<ProbeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut rows = rdr.records();
    let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line());
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(CSV_HEADER) => {}
        Some(Ok(h)) => {
            return Err(Error::Records {
                line: 1,
                reason: format!("unexpected header `{}`", h.iter().collect::<Vec<_>>().join(",")),
            })
        }
        Some(Err(e)) => {
            return Err(Error::Records {
                line: line_of(&e).max(1),
                reason: e.to_string(),
            })
        }
        None => {
            return Err(Error::Records {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        let row = row.map_err(|e| Error::Records {
            line: line_of(&e),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Records { line, reason };
        if row.len() != CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", CSV_HEADER.len(), row.len())));
        }
        let int = |i: usize| -> Result<usize> {
            row[i]
                .parse()
                .map_err(|_| bad(format!("{} `{}` is not an integer", CSV_HEADER[i], &row[i])))
        };
        let error_rate: f64 = row[6]
            .parse()
            .map_err(|_| bad(format!("error_rate `{}` is not a number", &row[6])))?;
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(bad(format!("error rate {error_rate} outside [0, 1]")));
        }
        let record = ProbeRecord {
            scenario: row[0].to_string(),
            run: int(1)?,
            checkpoint_step: int(2)?,
            probe_point: row[3].to_string(),
            layer_index: int(4)?,
            split: row[5].parse().map_err(|_| bad(format!("unknown split `{}`", &row[5])))?,
            error_rate,
            probe_epochs_used: int(7)?,
        };
        let key = (
            record.scenario.clone(),
            record.run,
            record.checkpoint_step,
            record.probe_point.clone(),
            record.split,
        );
        if !seen.insert(key) {
            return Err(bad(format!(
                "duplicate record for {}/run {}/step {}/{}/{}",
                record.scenario, record.run, record.checkpoint_step, record.probe_point, record.split
            )));
        }
        out.push(record);
    }
    Ok(out)
}

/// Statistics of one probe point's error over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub probe_point: String,
    pub layer_index: usize,
    pub split: Split,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

/// Mean, minimum and maximum error per `(probe point, split)` across runs,
/// ordered by layer index. All records must share scenario and checkpoint.
pub fn aggregate_mean(records: &[ProbeRecord]) -> Result<Vec<LayerAggregate>> {
    let first = records
        .first()
        .ok_or_else(|| Error::input("aggregate_mean", "no records to aggregate"))?;
    if let Some(r) = records
        .iter()
        .find(|r| r.scenario != first.scenario || r.checkpoint_step != first.checkpoint_step)
    {
        return Err(Error::input(
            "aggregate_mean",
            format!(
                "records mix {}@{} and {}@{}",
                first.scenario, first.checkpoint_step, r.scenario, r.checkpoint_step
            ),
        ));
    }
    let mut groups: BTreeMap<(usize, &str, Split), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.layer_index, &r.probe_point, r.split))
            .or_default()
            .push(r.error_rate);
    }
    Ok(groups
        .into_iter()
        .map(|((layer_index, point, split), mut errs)| {
            // Sorting makes the sum independent of run order.
            errs.sort_by(f64::total_cmp);
            LayerAggregate {
                probe_point: point.to_string(),
                layer_index,
                split,
                mean: errs.iter().sum::<f64>() / errs.len() as f64,
                min: errs[0],
                max: errs[errs.len() - 1],
                runs: errs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    /// Only plot this split; both when `None`.
    pub split: Option<Split>,
    /// Dashed horizontal line at error 0.5.
    pub chance_line: bool,
    pub title: Option<String>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            split: None,
            chance_line: true,
            title: None,
        }
    }
}

/// Plot area geometry in SVG user units.
pub const PLOT_LEFT: f64 = 70.0;
pub const PLOT_TOP: f64 = 40.0;
pub const PLOT_WIDTH: f64 = 560.0;
pub const PLOT_HEIGHT: f64 = 300.0;
const SVG_WIDTH: f64 = 660.0;
const SVG_HEIGHT: f64 = 400.0;

/// Vertical coordinate of an error rate; affine, with 0 at the bottom edge.
pub fn y_of(error: f64) -> f64 {
    PLOT_TOP + (1.0 - error) * PLOT_HEIGHT
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Error-versus-layer chart for one checkpoint. Several runs of the same
/// point are drawn at their mean.
pub fn render_svg(records: &[ProbeRecord], options: &PlotOptions) -> Result<String> {
    let selected: Vec<ProbeRecord> = records
        .iter()
        .filter(|r| options.split.is_none_or(|s| s == r.split))
        .cloned()
        .collect();
    if selected.is_empty() {
        return Err(Error::input("render_layer_curve", "no records to plot"));
    }
    let agg = aggregate_mean(&selected)?;
    let lo = agg.iter().map(|a| a.layer_index).min().unwrap_or(0);
    let hi = agg.iter().map(|a| a.layer_index).max().unwrap_or(0);
    let x_of = |layer: usize| {
        if hi == lo {
            PLOT_LEFT + PLOT_WIDTH / 2.0
        } else {
            PLOT_LEFT + (layer - lo) as f64 / (hi - lo) as f64 * PLOT_WIDTH
        }
    };
    let first = &selected[0];
    let title = options.title.clone().unwrap_or_else(|| {
        format!("{} at step {}", first.scenario, first.checkpoint_step)
    });

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        PLOT_LEFT + PLOT_WIDTH / 2.0,
        escape(&title)
    );
    let _ = writeln!(
        s,
        r#"<rect class="plot-area" x="{PLOT_LEFT:.2}" y="{PLOT_TOP:.2}" width="{PLOT_WIDTH:.2}" height="{PLOT_HEIGHT:.2}" fill="none" stroke="black"/>"#
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(tick);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{tick:.2}</text>"#,
            PLOT_LEFT - 6.0,
            y + 4.0
        );
    }
    let mut layers: Vec<usize> = agg.iter().map(|a| a.layer_index).collect();
    layers.dedup();
    let step = layers.len().div_ceil(16).max(1);
    for &layer in layers.iter().step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{layer}</text>"#,
            x_of(layer),
            PLOT_TOP + PLOT_HEIGHT + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">layer index</text>"#,
        PLOT_LEFT + PLOT_WIDTH / 2.0,
        PLOT_TOP + PLOT_HEIGHT + 40.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.2})">probe error rate</text>"#,
        PLOT_TOP + PLOT_HEIGHT / 2.0,
        PLOT_TOP + PLOT_HEIGHT / 2.0
    );
    if options.chance_line {
        let y = y_of(0.5);
        let _ = writeln!(
            s,
            r#"<line class="chance" x1="{PLOT_LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="6 4"/>"#,
            PLOT_LEFT + PLOT_WIDTH
        );
    }
    for (split, colour) in [(Split::Train, "#1f77b4"), (Split::Test, "#d62728")] {
        let series: Vec<&LayerAggregate> = agg.iter().filter(|a| a.split == split).collect();
        if series.is_empty() {
            continue;
        }
        let points: Vec<String> = series
            .iter()
            .map(|a| format!("{:.2},{:.2}", x_of(a.layer_index), y_of(a.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series {split}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        for a in &series {
            let _ = writeln!(
                s,
                r#"<circle class="mark {split}" cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"><title>{} {split}: {:.6}</title></circle>"#,
                x_of(a.layer_index),
                y_of(a.mean),
                escape(&a.probe_point),
                a.mean
            );
        }
        let legend_y = PLOT_TOP + 14.0 + if split == Split::Train { 0.0 } else { 16.0 };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{legend_y:.2}" font-family="sans-serif" font-size="11" fill="{colour}" text-anchor="end">{split}</text>"#,
            PLOT_LEFT + PLOT_WIDTH - 8.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes [`render_svg`] output to `path`.
pub fn render_layer_curve(records: &[ProbeRecord], path: &Path, options: &PlotOptions) -> Result<()> {
    let svg = render_svg(records, options)?;
    fs::write(path, svg).map_err(|e| Error::file(path, e))
}

/// File name of a checkpoint's chart.
pub fn svg_file_name(scenario: &str, step: usize) -> String {
    format!("{scenario}_step{step}.svg")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(point: &str, layer: usize, split: Split, err: f64, run: usize) -> ProbeRecord {
        ProbeRecord {
            scenario: "s".into(),
            run,
            checkpoint_step: 0,
            probe_point: point.into(),
            layer_index: layer,
            split,
            error_rate: err,
            probe_epochs_used: 3,
        }
    }

    #[test]
    fn empty_set_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_records(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), CSV_HEADER.join(",") + "\n");
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_key_rejected_on_read() {
        let csv = format!("{}\ns,0,0,a,0,test,0.5,1\ns,0,0,a,0,test,0.25,1\n", CSV_HEADER.join(","));
        match parse_records(csv.as_bytes()) {
            Err(Error::Records { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_position() {
        let csv = format!("{}\ns,0,0,a,0,test,0.5,1\ns,x,0,a,0,test,0.5,1\n", CSV_HEADER.join(","));
        match parse_records(csv.as_bytes()) {
            Err(Error::Records { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("run"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aggregate_two_runs() {
        let r = [rec("a", 0, Split::Test, 0.4, 0), rec("a", 0, Split::Test, 0.6, 1)];
        let agg = aggregate_mean(&r).unwrap();
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.5).abs() < 1e-12);
        assert_eq!((agg[0].min, agg[0].max), (0.4, 0.6));
        assert!(aggregate_mean(&[]).is_err());
    }

    #[test]
    fn one_mark_per_split() {
        let svg = render_svg(&[rec("a", 3, Split::Test, 0.2, 0)], &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("<circle class=\"mark test\"").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 1);
    }

    #[test]
    fn split_filter() {
        let r = [rec("a", 0, Split::Test, 0.2, 0), rec("a", 0, Split::Train, 0.1, 0)];
        let opts = PlotOptions {
            split: Some(Split::Train),
            ..Default::default()
        };
        let svg = render_svg(&r, &opts).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains("mark train"));
    }
}
