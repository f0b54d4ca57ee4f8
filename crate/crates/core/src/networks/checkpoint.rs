//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header
//! (network kind, config, dtype, tensor names and shapes), then every parameter and
//! buffer as little-endian scalars in header order. The file must end exactly there.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Classifier, ClassifierConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NamedTensor, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 8] = b"SSTNET\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A network that can be written to and restored from a checkpoint.
pub trait Network<T: Float>: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug;

    fn network_config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore<T>;
    fn from_parts(config: &Self::Config, store: ParamStore<T>) -> Result<Self>;
}

macro_rules! network_impl {
    ($ty:ident, $cfg:ident, $kind:literal) => {
        impl<T: Float> Network<T> for $ty<T> {
            const KIND: &'static str = $kind;
            type Config = $cfg;

            fn network_config(&self) -> &$cfg {
                self.config()
            }

            fn store(&self) -> &ParamStore<T> {
                self.params()
            }

            fn from_parts(config: &$cfg, store: ParamStore<T>) -> Result<Self> {
                $ty::with_params(config, store)
            }
        }
    };
}

network_impl!(Generator, GeneratorConfig, "generator");
network_impl!(Discriminator, DiscriminatorConfig, "discriminator");
network_impl!(Classifier, ClassifierConfig, "classifier");

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    config: serde_json::Value,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

fn entries<T>(items: &[NamedTensor<T>]) -> Vec<TensorEntry>
where
    T: Float,
{
    items.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.value.shape().to_vec() }).collect()
}

pub fn save_checkpoint<T: Float, N: Network<T>>(model: &N, path: &Path) -> Result<()> {
    let store = model.store();
    let header = Header {
        kind: N::KIND.into(),
        dtype: T::DTYPE.into(),
        config: serde_json::to_value(model.network_config())?,
        params: entries(store.params()),
        buffers: entries(store.buffers()),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + header.len() + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in store.params().iter().chain(store.buffers()) {
        for &v in t.value.data() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn read_tensors<T: Float>(r: &mut Reader<'_>, entries: Vec<TensorEntry>) -> Result<Vec<NamedTensor<T>>> {
    let width = std::mem::size_of::<T>();
    entries
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            Ok(NamedTensor { name: e.name, value: Tensor::new(e.shape, data) })
        })
        .collect()
}

/// Restores a network; the stored kind and dtype must match `N` and `T`.
pub fn load_checkpoint<T: Float, N: Network<T>>(path: &Path) -> Result<N> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint(format!("{} is not a network checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(r.take(usize::try_from(len).unwrap_or(usize::MAX))?)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.kind != N::KIND {
        return Err(Error::Checkpoint(format!("expected a {} checkpoint, found {}", N::KIND, header.kind)));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("expected dtype {}, found {}", T::DTYPE, header.dtype)));
    }
    let config: N::Config =
        serde_json::from_value(header.config).map_err(|e| Error::Checkpoint(format!("corrupt config: {e}")))?;
    let params = read_tensors(&mut r, header.params)?;
    let buffers = read_tensors(&mut r, header.buffers)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    N::from_parts(&config, ParamStore { params, buffers })
}

/// Like [`load_checkpoint`], but the stored config must equal `expected`.
pub fn load_checkpoint_expecting<T: Float, N: Network<T>>(path: &Path, expected: &N::Config) -> Result<N> {
    let model = load_checkpoint::<T, N>(path)?;
    if model.network_config() != expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has {:?}, expected {:?}",
            model.network_config(),
            expected
        )));
    }
    Ok(model)
}

/// Replaces `target` with `source` when names and shapes agree one to one.
pub(crate) fn replace_store<T: Float>(target: &mut ParamStore<T>, source: ParamStore<T>) -> Result<()> {
    let same = |a: &[NamedTensor<T>], b: &[NamedTensor<T>]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
    };
    if !same(target.params(), source.params()) || !same(target.buffers(), source.buffers()) {
        return Err(Error::Checkpoint("stored tensors do not match the network built from its config".into()));
    }
    if !source.all_finite() {
        return Err(Error::Checkpoint("stored tensors contain non-finite values".into()));
    }
    *target = source;
    Ok(())
}
