//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VPFCKPT1" | u32 version
//! u64 len | config text (UTF-8, output_dir omitted)
//! u64 data_dim
//! u64 n_params, then per parameter:
//!     u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[∏dims]
//! adam: f64 beta1 | f64 beta2 | f64 eps | u64 t | f64 m[..] | f64 v[..]  (per parameter, in order)
//! u64 epoch | f64 best_val_elbo
//! rng: u8 seed[32] | u64 stream | u128 word_pos
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Model, ParamStore};
use crate::tensor_ad::Tensor;

pub const MAGIC: &[u8; 8] = b"VPFCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub data_dim: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epoch at which the parameters were captured.
    pub epoch: u64,
    pub best_val_elbo: f64,
    /// Training noise generator as of `epoch`.
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint describes.
    pub fn model(&self) -> Result<Model> {
        let spec = self.config.model_spec(self.data_dim)?;
        Model::from_params(spec, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.experiment_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.data_dim as u64);

        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }

        let a = &self.adam;
        for x in [a.beta1, a.beta2, a.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        put_u64(&mut out, a.t);
        for m in &a.m {
            put_f64s(&mut out, m);
        }
        for v in &a.v {
            put_f64s(&mut out, v);
        }

        put_u64(&mut out, self.epoch);
        out.extend_from_slice(&self.best_val_elbo.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut out, self.rng.get_stream());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)
            .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        let data_dim = r.len()?;

        let n_params = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
            let values = r.f64s(n)?;
            let t = Tensor::new(&shape, values).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            params
                .add(name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }

        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
        let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        let adam = AdamState { beta1, beta2, eps, t, m, v };

        let epoch = r.u64()?;
        let best_val_elbo = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            data_dim,
            params,
            adam,
            epoch,
            best_val_elbo,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
