//! Binary checkpoint container.
//!
//! ```text
//! "MSPST" | version u32 | phase u8 | step u64 | fingerprint u64
//! count u32 | count x (name_len u32, name, rank u32, dims u64..., f64 LE payload)
//! has_adam u8 | [adam_step u64 | m table | v table]
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::numcore::{AdamState, Tensor};

pub const MAGIC: &[u8; 5] = b"MSPST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub fingerprint: u64,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.phase.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        write_table(&mut out, &self.params);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                write_table(&mut out, &a.m);
                write_table(&mut out, &a.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let phase = Phase::from_tag(r.u8()?)?;
        let step = r.u64()?;
        let fingerprint = r.u64()?;
        let params = read_table(&mut r)?;
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = read_table(&mut r)?;
                let v = read_table(&mut r)?;
                Some(AdamState { m, v, step })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { phase, step, fingerprint, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a checkpoint that cannot start `next`: ASR follows MT, ST
    /// follows ASR.
    pub fn check_handoff(&self, next: Phase) -> Result<()> {
        let expected = match next {
            Phase::Mt => return Ok(()),
            Phase::Asr => Phase::Mt,
            Phase::St => Phase::Asr,
        };
        if self.phase != expected {
            return Err(Error::PhaseMismatch {
                expected: expected.to_string(),
                found: self.phase.to_string(),
            });
        }
        Ok(())
    }
}

/// Elementwise mean of parameter sets; optimizer state is dropped and the
/// header is taken from the last checkpoint.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts
        .last()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let mut sum: BTreeMap<String, Tensor> = last.params.clone();
    for c in &ckpts[..ckpts.len() - 1] {
        if c.params.len() != sum.len() {
            return Err(Error::Checkpoint("parameter name sets differ".into()));
        }
        for (name, t) in &c.params {
            let acc = sum
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if acc.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            acc.add_assign(t);
        }
    }
    let inv = 1.0 / ckpts.len() as f64;
    for t in sum.values_mut() {
        t.scale_in_place(inv);
    }
    Ok(Checkpoint {
        phase: last.phase,
        step: last.step,
        fingerprint: last.fingerprint,
        params: sum,
        adam: None,
    })
}

pub fn average_checkpoint_files(paths: &[&Path]) -> Result<Checkpoint> {
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

fn write_table(out: &mut Vec<u8>, table: &BTreeMap<String, Tensor>) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Cursor<'_>) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    Ok(table)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(phase: Phase, scale: f64) -> Checkpoint {
        let mut params = BTreeMap::new();
        params.insert("a.weight".into(), Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap().map(|x| x * scale));
        params.insert("b".into(), Tensor::scalar(4.0 * scale));
        Checkpoint { phase, step: 42, fingerprint: 0xdead_beef, params, adam: None }
    }

    #[test]
    fn byte_exact_round_trip() {
        let mut c = sample(Phase::Asr, 1.0);
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::scalar(0.25));
        c.adam = Some(AdamState { m: m.clone(), v: m, step: 9 });
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corruption_is_reported() {
        let mut bytes = sample(Phase::Mt, 1.0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut v = sample(Phase::Mt, 1.0).to_bytes();
        v[5] = 9;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }

    #[test]
    fn handoff_rules() {
        assert!(sample(Phase::Mt, 1.0).check_handoff(Phase::Asr).is_ok());
        assert!(matches!(
            sample(Phase::St, 1.0).check_handoff(Phase::Asr),
            Err(Error::PhaseMismatch { .. })
        ));
        assert!(sample(Phase::Asr, 1.0).check_handoff(Phase::St).is_ok());
        assert!(sample(Phase::Mt, 1.0).check_handoff(Phase::St).is_err());
    }

    #[test]
    fn averaging() {
        let one = sample(Phase::St, 1.0);
        assert_eq!(average_checkpoints(std::slice::from_ref(&one)).unwrap().params, one.params);
        let avg = average_checkpoints(&[sample(Phase::St, 1.0), sample(Phase::St, -1.0)]).unwrap();
        assert!(avg.params.values().all(|t| t.data().iter().all(|&x| x == 0.0)));
        let mut other = sample(Phase::St, 1.0);
        other.params.insert("c".into(), Tensor::scalar(1.0));
        assert!(average_checkpoints(&[one.clone(), other]).is_err());
        let mut bad = one.clone();
        bad.params.insert("b".into(), Tensor::vector(vec![1.0, 2.0]));
        assert!(average_checkpoints(&[one, bad]).is_err());
        assert!(average_checkpoints(&[]).is_err());
    }

    proptest! {
        #[test]
        fn averaging_ignores_name_order(vals in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let mk = |names: &[&str], vals: &[f64]| {
                let mut params = BTreeMap::new();
                for (n, v) in names.iter().zip(vals) {
                    params.insert(n.to_string(), Tensor::scalar(*v));
                }
                Checkpoint { phase: Phase::St, step: 0, fingerprint: 0, params, adam: None }
            };
            let a = mk(&["x", "y", "z"], &vals[..3]);
            let b = mk(&["z", "x", "y"], &[vals[5], vals[3], vals[4]]);
            let ab = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
            let ba = average_checkpoints(&[b, a]).unwrap();
            prop_assert_eq!(ab.params, ba.params);
        }
    }
}
