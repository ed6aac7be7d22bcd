//! Binary checkpoint files.
//!
//! Layout, all integers little-endian: magic `LCP1`, format version `u32`,
//! entry count `u32`, then per entry a `u16` name length, the UTF-8 name, a
//! `u8` rank, `rank` dimensions as `u32` and the raw `f32` values. Run
//! metadata travels as one extra entry named
//! `__meta__/scenario=..;run=..;seed=..;step=..` holding zero values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCP1";
pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "__meta__/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scenario: String,
    pub run: usize,
    pub seed: u64,
    pub step: usize,
    pub parameters: Parameters,
}

fn meta_name(c: &Checkpoint) -> Result<String> {
    if c.scenario.contains([';', '=']) {
        return Err(Error::Checkpoint(format!(
            "scenario name `{}` may not contain `;` or `=`",
            c.scenario
        )));
    }
    Ok(format!(
        "{META_PREFIX}scenario={};run={};seed={};step={}",
        c.scenario, c.run, c.seed, c.step
    ))
}

fn push_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("entry name `{name}` is too long")))?;
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Checkpoint(format!("entry `{name}` has rank {}", shape.len())))?;
    out.extend(len.to_le_bytes());
    out.extend(name.as_bytes());
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Checkpoint(format!("entry `{name}` dimension {d} too large")))?;
        out.extend(d.to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(c.parameters.len() + 1)
        .map_err(|_| Error::Checkpoint("too many entries".into()))?;
    out.extend(count.to_le_bytes());
    push_entry(&mut out, &meta_name(c)?, &[0], &[])?;
    for (name, t) in c.parameters.iter() {
        if name.starts_with(META_PREFIX) {
            return Err(Error::Checkpoint(format!("reserved parameter name `{name}`")));
        }
        push_entry(&mut out, name, t.shape(), t.data())?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

fn parse_meta(name: &str) -> Result<(String, usize, u64, usize)> {
    let bad = || Error::Checkpoint(format!("malformed metadata entry `{name}`"));
    let body = name.strip_prefix(META_PREFIX).ok_or_else(bad)?;
    let mut scenario = None;
    let (mut run, mut seed, mut step) = (None, None, None);
    for field in body.split(';') {
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "scenario" => scenario = Some(v.to_string()),
            "run" => run = Some(v.parse().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse().map_err(|_| bad())?),
            "step" => step = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    match (scenario, run, seed, step) {
        (Some(s), Some(r), Some(sd), Some(st)) => Ok((s, r, sd, st)),
        _ => Err(bad()),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = cur.u32()?;
    let mut meta = None;
    let mut parameters = Parameters::default();
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("two bytes")) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?;
        let data = cur
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        if name.starts_with(META_PREFIX) {
            if meta.is_some() {
                return Err(Error::Checkpoint("duplicate metadata entry".into()));
            }
            meta = Some(parse_meta(&name)?);
        } else if parameters.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    if cur.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.at
        )));
    }
    let (scenario, run, seed, step) =
        meta.ok_or_else(|| Error::Checkpoint("missing metadata entry".into()))?;
    Ok(Checkpoint {
        scenario,
        run,
        seed,
        step,
        parameters,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = Parameters::default();
        p.insert("fc1/weight", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.1 - 0.2));
        p.insert("fc1/bias", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap());
        Checkpoint {
            scenario: "mnist".into(),
            run: 2,
            seed: u64::MAX,
            step: 781,
            parameters: p,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back.parameters.checksum(), c.parameters.checksum());
        assert_eq!((back.scenario.as_str(), back.run, back.seed, back.step), ("mnist", 2, u64::MAX, 781));
    }

    #[test]
    fn empty_parameters_round_trip() {
        let c = Checkpoint {
            parameters: Parameters::default(),
            ..sample()
        };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut flipped = bytes.clone();
        flipped[0] ^= 0x20;
        assert!(decode_checkpoint(&flipped).unwrap_err().to_string().contains("magic"));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(decode_checkpoint(&version).unwrap_err().to_string().contains("version"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }
}
