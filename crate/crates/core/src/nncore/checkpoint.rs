use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet, SeededRng};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "stagealloc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SeededRng) -> Self {
        let seed_hex = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed_hex,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<SeededRng> {
        let bad = || Error::Serde(format!("malformed rng state {:?}", self.seed_hex));
        if self.seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = SeededRng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Self-describing JSON container of named parameter arrays plus metadata
/// and RNG positions. Floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub rng: BTreeMap<String, RngState>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            meta: BTreeMap::new(),
            rng: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Matrix) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.iter().copied().collect(),
        });
    }

    pub fn push_params<P: ParamSet>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.tensor_names().into_iter().zip(params.tensors()) {
            self.push_tensor(format!("{prefix}.{name}"), t);
        }
    }

    fn find(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Serde(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn read_tensor(&self, name: &str, dst: &mut Matrix) -> Result<()> {
        let t = self.find(name)?;
        if t.shape != dst.shape() {
            return Err(Error::shape(
                "checkpoint tensor",
                format!("{:?}", dst.shape()),
                format!("{name}: {:?}", t.shape),
            ));
        }
        for (d, s) in dst.iter_mut().zip(&t.data) {
            *d = *s;
        }
        Ok(())
    }

    pub fn load_params<P: ParamSet>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let names = params.tensor_names();
        for (name, t) in names.into_iter().zip(params.tensors_mut()) {
            self.read_tensor(&format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }

    pub fn put_rng(&mut self, name: &str, rng: &SeededRng) {
        self.rng.insert(name.into(), RngState::capture(rng));
    }

    pub fn get_rng(&self, name: &str) -> Result<SeededRng> {
        self.rng
            .get(name)
            .ok_or_else(|| Error::Serde(format!("checkpoint has no rng {name:?}")))?
            .restore()
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Serde(format!("checkpoint meta {key:?} missing or malformed")))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        for t in &c.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Serde(format!(
                    "tensor {} length/shape mismatch",
                    t.name
                )));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{seeded_rng, Mlp};
    use rand::Rng;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let mut rng = seeded_rng(12);
        let mlp = Mlp::new(&[5, 7, 3], &mut rng);
        let _: f64 = rng.random();
        let mut ckpt = Checkpoint::new("mlp");
        ckpt.push_params("net", &mlp);
        ckpt.put_rng("train", &rng);
        ckpt.meta.insert("seed".into(), "12".into());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);

        let mut restored = Mlp::new(&[5, 7, 3], &mut seeded_rng(999));
        back.load_params("net", &mut restored).unwrap();
        let x = ndarray::Array2::from_shape_fn((4, 5), |(i, j)| (i as f64 - j as f64) * 0.37);
        let a = mlp.forward(&x);
        let b = restored.forward(&x);
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));

        let mut r2 = back.get_rng("train").unwrap();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn shape_mismatch_on_load_is_rejected() {
        let mut ckpt = Checkpoint::new("mlp");
        ckpt.push_params("net", &Mlp::new(&[2, 3], &mut seeded_rng(0)));
        let mut other = Mlp::new(&[2, 4], &mut seeded_rng(0));
        assert!(ckpt.load_params("net", &mut other).is_err());
    }
}
