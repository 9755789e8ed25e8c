//! Binary policy checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "IGPOCKPT" | version u32 | seed u64 | step u64
//! feature_dim u64 | vocab_size u64 | window u64 | temperature f64 | vocab_hash u64
//! theta: feature_dim * vocab_size f64, row-major
//! has_adam u8 | [t u64 | beta1 f64 | beta2 f64 | eps f64 | m f64 * n | v f64 * n]
//! ```

use std::fs;
use std::path::Path;

use igpo_core::objective::AdamState;
use igpo_core::PolicyParams;

pub const MAGIC: &[u8; 8] = b"IGPOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("vocabulary hash {found:#018x} does not match {expected:#018x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub vocab_hash: u64,
    pub params: PolicyParams,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(80 + 8 * p.theta.len() * if self.adam.is_some() { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.seed, self.step, p.feature_dim as u64, p.vocab_size as u64, p.window as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.temperature.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        put_f64s(&mut out, &p.theta);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.t.to_le_bytes());
                for v in [a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_f64s(&mut out, &a.m);
                put_f64s(&mut out, &a.v);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let feature_dim = r.usize()?;
        let vocab_size = r.usize()?;
        let window = r.usize()?;
        let temperature = r.f64()?;
        let vocab_hash = r.u64()?;
        let n = feature_dim.checked_mul(vocab_size).ok_or(CheckpointError::Truncated)?;
        if feature_dim == 0 || vocab_size == 0 {
            return Err(CheckpointError::Invalid("empty parameter matrix".into()));
        }
        // Validates window and temperature without allocating the full matrix.
        PolicyParams::zeros(1, 1, window, temperature).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let theta = r.f64s(n)?;
        let params = PolicyParams { feature_dim, vocab_size, window, temperature, theta };
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(AdamState { m, v, t, beta1, beta2, eps })
            }
            b => return Err(CheckpointError::Invalid(format!("adam flag {b}"))),
        };
        if !r.buf.is_empty() {
            return Err(CheckpointError::Trailing(r.buf.len()));
        }
        Ok(Checkpoint { seed, step, vocab_hash, params, adam })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn check_vocab(&self, expected: u64) -> Result<(), CheckpointError> {
        if self.vocab_hash != expected {
            return Err(CheckpointError::VocabMismatch { expected, found: self.vocab_hash });
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Invalid("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
