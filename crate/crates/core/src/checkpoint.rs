//! Per-stage checkpoint files. Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "AFCCKPT\0"
//! version      u32      1
//! config_hash  32 bytes raw SHA-256 of the experiment configuration
//! stage        u32
//! n_t          u32      classes seen after this stage
//! proxies/cls  u32      J
//! tensors      u32      count T, then per tensor: rank u32, rank × u32 extents
//! layers       u32      count L, then per layer: block u32, channels u32
//! samples      u64      examples accumulated into the importance table
//! normalized   u8       1 if normalized importances follow the raw ones
//! classes      u32      count K, then per class: id u32, count u32, count × u32 indices
//! blob         f64 LE   tensor data in order, raw importances, normalized importances
//! ```
//!
//! Tensors follow [`Model::state`]: for each block kernel, γ, β, running
//! mean, running variance; then the proxies `[n·J, d]` and `η`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::memory::ExemplarStore;
use crate::network::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AFCCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub stage: usize,
    pub n_t: usize,
    pub proxies_per_class: usize,
    pub state: Vec<Tensor>,
    pub importance: ImportanceTable,
    pub exemplars: BTreeMap<usize, Vec<usize>>,
}

impl Checkpoint {
    pub fn capture(
        config_hash: &str,
        stage: usize,
        model: &Model,
        importance: &ImportanceTable,
        store: &ExemplarStore,
    ) -> Result<Self> {
        let bytes = hex::decode(config_hash).map_err(|e| Error::Contract(format!("config hash: {e}")))?;
        let config_hash: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Contract("config hash must be 32 bytes".into()))?;
        Ok(Checkpoint {
            config_hash,
            stage,
            n_t: model.num_classes(),
            proxies_per_class: model.head.proxies_per_class(),
            state: model.state(),
            importance: importance.clone(),
            exemplars: store.per_class.clone(),
        })
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(&mut out, VERSION as usize);
        out.extend_from_slice(&self.config_hash);
        u32le(&mut out, self.stage);
        u32le(&mut out, self.n_t);
        u32le(&mut out, self.proxies_per_class);
        u32le(&mut out, self.state.len());
        for t in &self.state {
            u32le(&mut out, t.rank());
            for &d in t.shape() {
                u32le(&mut out, d);
            }
        }
        let imp = &self.importance;
        u32le(&mut out, imp.layers.len());
        for (&l, raw) in imp.layers.iter().zip(&imp.raw) {
            u32le(&mut out, l);
            u32le(&mut out, raw.len());
        }
        out.extend_from_slice(&(imp.sample_count as u64).to_le_bytes());
        out.push(u8::from(imp.normalized.is_some()));
        u32le(&mut out, self.exemplars.len());
        for (&k, idx) in &self.exemplars {
            u32le(&mut out, k);
            u32le(&mut out, idx.len());
            for &i in idx {
                u32le(&mut out, i);
            }
        }
        let values = self
            .state
            .iter()
            .flat_map(|t| t.data().iter())
            .chain(imp.raw.iter().flatten())
            .chain(imp.normalized.iter().flatten().flatten());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stage = r.u32()?;
        let n_t = r.u32()?;
        let proxies_per_class = r.u32()?;
        let shapes: Vec<Vec<usize>> = (0..r.u32()?)
            .map(|_| {
                let rank = r.u32()?;
                (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let layers: Vec<(usize, usize)> = (0..r.u32()?)
            .map(|_| Ok((r.u32()?, r.u32()?)))
            .collect::<Result<_>>()?;
        let sample_count = r.u64()? as usize;
        let has_norm = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(r.err(&format!("normalized flag {f}"))),
        };
        let mut exemplars = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.u32()?;
            let n = r.u32()?;
            exemplars.insert(k, (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
        }
        let mut state = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n: usize = s.iter().product();
            state.push(Tensor::new(s, r.f64s(n)?)?);
        }
        let raw: Vec<Vec<f64>> = layers.iter().map(|&(_, c)| r.f64s(c)).collect::<Result<_>>()?;
        let normalized = if has_norm {
            Some(layers.iter().map(|&(_, c)| r.f64s(c)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.err(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            stage,
            n_t,
            proxies_per_class,
            state,
            importance: ImportanceTable {
                stage,
                layers: layers.iter().map(|&(l, _)| l).collect(),
                raw,
                normalized,
                sample_count,
            },
            exemplars,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Restores the stored weights into a model of the same architecture.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if model.head.proxies_per_class() != self.proxies_per_class {
            return Err(Error::Contract(format!(
                "checkpoint has J = {}, model has J = {}",
                self.proxies_per_class,
                model.head.proxies_per_class()
            )));
        }
        model.load_state(&self.state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: &str) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.to_path_buf(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
