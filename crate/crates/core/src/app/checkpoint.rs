//! Bit-exact binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DYSI" | u32 version | u32 tensor count | tensors
//! u8 has_optimizer [ f32 beta1 | f32 beta2 | f32 eps | u64 adam step
//!                    | u32 count | tensors ]
//! u64 global step | 32-byte run digest
//! tensor = u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 values...
//! ```
//!
//! Optimizer moments are stored as tensors named `m/<param>` and `v/<param>`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DYSI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub step: u64,
    pub digest: [u8; 32],
}

/// Fingerprint of everything a checkpoint is only valid together with:
/// the model shape and the vocabulary.
pub fn run_digest(model: &ModelConfig, vocab: &Vocabulary) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!(
        "vocab_size={}\nd_model={}\nn_heads={}\nn_layers={}\nffn_dim={}\nmax_positions={}\nmode={}\n",
        model.vocab_size, model.d_model, model.n_heads, model.n_layers, model.ffn_dim, model.max_positions, model.mode
    ));
    h.update(vocab.to_text());
    h.finalize().into()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                    return Err(Error::Checkpoint("optimizer does not match parameters".into()));
                }
                out.push(1);
                out.extend_from_slice(&opt.config.beta1.to_le_bytes());
                out.extend_from_slice(&opt.config.beta2.to_le_bytes());
                out.extend_from_slice(&opt.config.eps.to_le_bytes());
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&(2 * self.params.len() as u32).to_le_bytes());
                for (i, (name, _)) in self.params.iter().enumerate() {
                    put_tensor(&mut out, &format!("m/{name}"), &opt.m[i])?;
                    put_tensor(&mut out, &format!("v/{name}"), &opt.v[i])?;
                }
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    beta1: r.f32()?,
                    beta2: r.f32()?,
                    eps: r.f32()?,
                };
                let step = r.u64()?;
                let n = r.u32()? as usize;
                if n != 2 * count {
                    return Err(Error::Checkpoint(format!(
                        "{n} optimizer tensors for {count} parameters"
                    )));
                }
                let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
                for (name, p) in params.iter() {
                    let (mn, mt) = r.tensor()?;
                    let (vn, vt) = r.tensor()?;
                    if mn != format!("m/{name}")
                        || vn != format!("v/{name}")
                        || mt.shape() != p.shape()
                        || vt.shape() != p.shape()
                    {
                        return Err(Error::Checkpoint(format!("optimizer entry for {name} is malformed")));
                    }
                    m.push(mt);
                    v.push(vt);
                }
                Some(Adam { config, step, m, v })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        let step = r.u64()?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            params,
            optimizer,
            step,
            digest,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint was written for this model and vocabulary.
    pub fn verify(&self, digest: &[u8; 32]) -> Result<()> {
        if &self.digest != digest {
            return Err(Error::Checkpoint(
                "run digest mismatch: checkpoint was trained with a different model shape or vocabulary".into(),
            ));
        }
        Ok(())
    }

    /// Element-wise mean of the parameters; optimizer state is dropped and
    /// the step is the latest one.
    pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::Input("no checkpoints to average".into()))?;
        if checkpoints.iter().any(|c| c.digest != first.digest) {
            return Err(Error::Checkpoint("cannot average checkpoints of different runs".into()));
        }
        let stores: Vec<ParamStore> = checkpoints.iter().map(|c| c.params.clone()).collect();
        Ok(Checkpoint {
            params: ParamStore::average(&stores)?,
            optimizer: None,
            step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
            digest: first.digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample(with_opt: bool) -> Checkpoint {
        let model = Model::new(ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            max_positions: 8,
            mode: crate::model::ModelMode::EncoderDecoder,
        })
        .unwrap();
        let params = model.init_params(3);
        let mut opt = Adam::new(&params, AdamConfig::default());
        opt.step = 17;
        opt.m[0].data_mut()[0] = 0.125;
        opt.v[1].data_mut()[0] = f32::MIN_POSITIVE;
        let vocab = Vocabulary::synthetic(10).unwrap();
        Checkpoint {
            params,
            optimizer: with_opt.then_some(opt),
            step: 17,
            digest: run_digest(model.config(), &vocab),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for with_opt in [false, true] {
            let c = sample(with_opt);
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.ckpt");
            let b = dir.path().join("b.ckpt");
            c.save(&a).unwrap();
            let loaded = Checkpoint::load(&a).unwrap();
            assert_eq!(loaded, c);
            loaded.save(&b).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }

    #[test]
    fn header_is_as_documented() {
        let bytes = sample(false).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DYSI");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let n = sample(false).params.len() as u32;
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), n);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"embed");
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample(true).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version 9"));
        let bytes = sample(true).to_bytes().unwrap();
        assert_eq!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().code(),
            "E_CHECKPOINT"
        );
        assert_eq!(Checkpoint::from_bytes(b"NOPE").unwrap_err().code(), "E_CHECKPOINT");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn digest_detects_vocabulary_change() {
        let c = sample(false);
        let other = Vocabulary::synthetic(11).unwrap();
        let cfg = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(c.verify(&run_digest(&cfg, &other)).is_err());
    }

    #[test]
    fn averaging_identities() {
        let c = sample(true);
        let one = Checkpoint::average(std::slice::from_ref(&c)).unwrap();
        assert_eq!(one.params, c.params);
        assert!(one.optimizer.is_none());
        let three = Checkpoint::average(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(three.params, c.params);

        let mut zero = c.clone();
        let mut two = c.clone();
        for (z, t) in zero.params.ids().zip(two.params.ids()).collect::<Vec<_>>() {
            zero.params.get_mut(z).data_mut().fill(0.0);
            two.params.get_mut(t).data_mut().fill(2.0);
        }
        let avg = Checkpoint::average(&[zero, two]).unwrap();
        assert!(avg.params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
    }
}
