//! Versioned parameter snapshots tied to a model signature.
//!
//! Layout (little endian): magic `DYGKTCKP`, `u32` version, the 32-byte
//! signature hash, `u64` length plus the signature as JSON, `u64` parameter
//! count, then per parameter a length-prefixed name, `u64` rank, `u64` dims
//! and the values as `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{DyGkt, ModelSignature};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DYGKTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub signature: ModelSignature,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &DyGkt<T>) -> Self {
        Self {
            signature: model.signature(),
            tensors: model.store.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.signature.hash())?;
        let json = serde_json::to_vec(&self.signature)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
            Ok(buf)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash = take(32)?;
        let len = u64_at(&mut take)?;
        let signature: ModelSignature = serde_json::from_slice(&take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint signature: {e}")))?;
        if signature.hash().as_slice() != hash.as_slice() {
            return Err(Error::Format("checkpoint signature hash does not match its contents".into()));
        }
        let count = u64_at(&mut take)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = u64_at(&mut take)?;
            let name = String::from_utf8(take(n)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = u64_at(&mut take)?;
            let shape = (0..rank).map(|_| u64_at(&mut take)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = take(len * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { signature, tensors })
    }

    /// Rebuilds the model. With `expected`, refuses to load unless the
    /// signatures agree, listing every differing field.
    pub fn into_model<T: Scalar>(self, expected: Option<&ModelSignature>) -> Result<DyGkt<T>> {
        if let Some(want) = expected {
            if want.hash() != self.signature.hash() {
                return Err(Error::ConfigMismatch(signature_diff(want, &self.signature)));
            }
        }
        if self.signature.scalar != T::NAME {
            return Err(Error::ConfigMismatch(format!(
                "scalar: checkpoint {} vs requested {}",
                self.signature.scalar,
                T::NAME
            )));
        }
        let sig = &self.signature;
        let mut model = DyGkt::<T>::new(sig.config.clone(), sig.num_questions, sig.num_concepts, 0)?;
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(crate::param::Parameter::new(name.clone(), t.cast(), false));
        }
        model.store.load_values(&store)?;
        Ok(model)
    }
}

fn u64_at(take: &mut dyn FnMut(usize) -> Result<Vec<u8>>) -> Result<usize> {
    let v = u64::from_le_bytes(take(8)?.try_into().unwrap());
    usize::try_from(v)
        .ok()
        .filter(|&v| v < 1 << 40)
        .ok_or_else(|| Error::Format("implausible length".into()))
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// One `field: expected vs found` line per differing leaf.
pub fn signature_diff(expected: &ModelSignature, found: &ModelSignature) -> String {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(expected).expect("serializes"), &mut a);
    flatten("", &serde_json::to_value(found).expect("serializes"), &mut b);
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let none = "-".to_string();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| format!("  {k}: expected {} vs checkpoint {}", a.get(k).unwrap_or(&none), b.get(k).unwrap_or(&none)))
        .collect::<Vec<_>>()
        .join("\n")
}
