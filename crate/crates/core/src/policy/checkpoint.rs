//! Binary model checkpoints: magic `CATKMDL1`, little-endian u64/f64 fields,
//! optional optimizer state so interrupted runs resume bit-identically.

use super::optim::Adam;
use super::{param_count, PolicyKind, PolicyModel};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"CATKMDL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// Optimizer and schedule position carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub next_epoch: u64,
    pub global_step: u64,
}

impl TrainState {
    pub fn fresh(n_params: usize) -> Self {
        Self {
            adam_m: vec![0.0; n_params],
            adam_v: vec![0.0; n_params],
            adam_t: 0,
            next_epoch: 0,
            global_step: 0,
        }
    }

    pub fn to_adam(&self) -> Adam {
        let mut adam = Adam::new(self.adam_m.len());
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        adam.t = self.adam_t;
        adam
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub train_state: Option<TrainState>,
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    w.inner.write_all(MAGIC)?;
    let model = &ckpt.model;
    let (kind_tag, head, sigma) = match model.kind {
        PolicyKind::Categorical { vocab_size } => (0u64, vocab_size as u64, 0.0),
        PolicyKind::Gmm { n_modes, sigma } => (1u64, n_modes as u64, sigma),
    };
    w.u64(kind_tag)?;
    w.u64(model.feature_dim as u64)?;
    w.u64(model.hidden_dim as u64)?;
    w.u64(head)?;
    w.f64(sigma)?;
    w.u64(model.params.len() as u64)?;
    w.f64s(&model.params)?;
    match &ckpt.train_state {
        None => w.u64(0)?,
        Some(ts) => {
            w.u64(1)?;
            w.u64(ts.adam_t)?;
            w.u64(ts.next_epoch)?;
            w.u64(ts.global_step)?;
            w.f64s(&ts.adam_m)?;
            w.f64s(&ts.adam_v)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let kind_tag = r.u64()?;
    let feature_dim = r.u64()? as usize;
    let hidden_dim = r.u64()? as usize;
    let head = r.u64()? as usize;
    let sigma = r.f64()?;
    let kind = match kind_tag {
        0 => PolicyKind::Categorical { vocab_size: head },
        1 => PolicyKind::Gmm { n_modes: head, sigma },
        other => return Err(CheckpointError::Format(format!("unknown kind tag {other}"))),
    };
    let n_params = r.u64()? as usize;
    let expected = param_count(&kind, feature_dim, hidden_dim);
    if n_params != expected {
        return Err(CheckpointError::Format(format!(
            "parameter count {n_params} does not match architecture (expected {expected})"
        )));
    }
    let params = r.f64s(n_params)?;
    let model = PolicyModel {
        kind,
        feature_dim,
        hidden_dim,
        params,
    };
    let train_state = match r.u64()? {
        0 => None,
        1 => {
            let adam_t = r.u64()?;
            let next_epoch = r.u64()?;
            let global_step = r.u64()?;
            let adam_m = r.f64s(n_params)?;
            let adam_v = r.f64s(n_params)?;
            Some(TrainState {
                adam_m,
                adam_v,
                adam_t,
                next_epoch,
                global_step,
            })
        }
        other => {
            return Err(CheckpointError::Format(format!(
                "bad train-state flag {other}"
            )))
        }
    };
    Ok(Checkpoint { model, train_state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = PolicyModel::new_categorical(29, 16, 24, 3);
        let ckpt = Checkpoint {
            model: model.clone(),
            train_state: None,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
        // File bytes are reproducible too.
        let path2 = dir.path().join("model2.bin");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn round_trip_with_train_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = PolicyModel::new_gmm(10, 8, 4, 0.2, 9);
        let mut ts = TrainState::fresh(model.params.len());
        ts.adam_t = 17;
        ts.next_epoch = 3;
        ts.global_step = 123;
        ts.adam_m[5] = 0.25;
        ts.adam_v[7] = 1e-9;
        let ckpt = Checkpoint {
            model,
            train_state: Some(ts),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Format(_))
        ));
        std::fs::write(&path, b"CATK").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Io(_))));
    }
}
