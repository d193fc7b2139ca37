//! Binary checkpoint files.
//!
//! Layout: 8-byte magic `CPXCKPT1`, u32 entry count, then per entry a u32
//! name length, the UTF-8 name, a dtype code (0 = f32, 1 = f64), a u8 rank,
//! u64 dims, and the raw little-endian values. A reserved `__meta__` entry
//! (dtype code 2, rank 1, dim = byte length) carries `key=value` lines of
//! free-form metadata and is always written last.
//!
//! Loading is strict: wrong magic, truncated data, dtype mismatches, unknown
//! names, and trailing bytes are all errors. There are no silent casts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CPXCKPT1";
pub const META_NAME: &str = "__meta__";
const META_CODE: u8 = 2;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u8 = 8;

pub struct Checkpoint<T: Scalar> {
    pub entries: Vec<(String, Tensor<T>)>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Write every parameter (weights and buffers) in store order, then metadata.
pub fn save<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let entries: Vec<(&str, &Tensor<T>)> = store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    save_entries(path, &entries, meta)
}

pub fn save_entries<T: Scalar>(
    path: &Path,
    entries: &[(&str, &Tensor<T>)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    for (name, _) in entries {
        if *name == META_NAME {
            return Err(Error::Checkpoint(format!(
                "{META_NAME} is reserved for metadata"
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let count = entries.len() as u32 + 1;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        write_header(&mut w, name, T::DTYPE.code(), tensor.shape())?;
        let mut buf = Vec::with_capacity(tensor.numel() * T::DTYPE.byte_size());
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    let mut meta_bytes = Vec::new();
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "metadata key/value contains reserved character: {k}"
            )));
        }
        meta_bytes.extend_from_slice(k.as_bytes());
        meta_bytes.push(b'=');
        meta_bytes.extend_from_slice(v.as_bytes());
        meta_bytes.push(b'\n');
    }
    write_header(&mut w, META_NAME, META_CODE, &[meta_bytes.len()])?;
    w.write_all(&meta_bytes)?;
    w.flush()?;
    Ok(())
}

fn write_header<W: Write>(w: &mut W, name: &str, code: u8, shape: &[usize]) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() as u32 > MAX_NAME_LEN {
        return Err(Error::Checkpoint(format!("name too long: {name}")));
    }
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[code, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

/// Read a checkpoint whose tensor entries must all have scalar type `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::new();
    let mut meta = BTreeMap::new();
    let mut seen_meta = false;
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!(
                "entry name length {name_len} exceeds limit"
            )));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_buf, "entry name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let mut hdr = [0u8; 2];
        read_exact(&mut r, &mut hdr, "dtype and rank")?;
        let (code, rank) = (hdr[0], hdr[1]);
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank} exceeds limit")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            read_exact(&mut r, &mut d, "dimension")?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        if name == META_NAME {
            if code != META_CODE || rank != 1 {
                return Err(Error::Checkpoint("malformed metadata entry".into()));
            }
            let mut bytes = vec![0u8; numel];
            read_exact(&mut r, &mut bytes, "metadata")?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
            for line in text.lines() {
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("metadata line without '=': {line}")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            seen_meta = true;
            continue;
        }
        if code != T::DTYPE.code() {
            return Err(Error::Checkpoint(format!(
                "entry {name} has dtype code {code}, expected {} ({:?})",
                T::DTYPE.code(),
                T::DTYPE
            )));
        }
        let mut bytes = vec![0u8; numel * T::DTYPE.byte_size()];
        read_exact(&mut r, &mut bytes, "tensor values")?;
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes.chunks_exact(T::DTYPE.byte_size()) {
            data.push(T::read_le(chunk));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
        entries.push((name, tensor));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    if !seen_meta {
        return Err(Error::Checkpoint("missing metadata entry".into()));
    }
    Ok(Checkpoint { entries, meta })
}

/// Load a checkpoint into an existing store. Every file entry must match a
/// stored parameter by name and shape, and every parameter must be present.
pub fn load_into_store<T: Scalar>(
    path: &Path,
    store: &mut ParamStore<T>,
) -> Result<BTreeMap<String, String>> {
    let ckpt = load::<T>(path)?;
    let mut loaded = vec![false; store.len()];
    for (name, tensor) in ckpt.entries {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter in file: {name}")))?;
        store.load_value(id, tensor)?;
        loaded[id.0] = true;
    }
    for (id, p) in store.iter() {
        if !loaded[id.0] {
            return Err(Error::Checkpoint(format!(
                "parameter {} missing from checkpoint",
                p.name
            )));
        }
    }
    Ok(ckpt.meta)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32 field")?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add_weight("layer.w", Tensor::rand_normal(vec![3, 4], 1.0, &mut rng));
        store.add_buffer("layer.stat", Tensor::rand_uniform(vec![4], 0.0, 1.0, &mut rng));
        store.add_weight("head.b", Tensor::zeros(vec![2]));
        store
    }

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = sample_store();
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "42".to_string());
        meta.insert("mode".to_string(), "moco".to_string());
        save(&path, &store, &meta).unwrap();

        let ckpt = load::<f32>(&path).unwrap();
        assert_eq!(ckpt.meta, meta);
        assert_eq!(ckpt.entries.len(), 3);
        assert_eq!(
            ckpt.tensor("layer.w").unwrap().data(),
            store.value(store.find("layer.w").unwrap()).data()
        );

        let mut store2 = sample_store();
        for id in store2.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store2.value(id).shape().to_vec());
            store2.load_value(id, z).unwrap();
        }
        let meta2 = load_into_store(&path, &mut store2).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(
            store2.value(store2.find("layer.stat").unwrap()).data(),
            store.value(store.find("layer.stat").unwrap()).data()
        );
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut store = sample_store();
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        save(&p1, &store, &meta).unwrap();
        let loaded_meta = load_into_store(&p1, &mut store).unwrap();
        save(&p2, &store, &loaded_meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &sample_store(), &BTreeMap::new()).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &sample_store(), &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = bytes.clone();
            b[0] ^= 0xff;
            b
        };
        let p_bad = dir.path().join("bad.ckpt");
        std::fs::write(&p_bad, bad_magic).unwrap();
        assert!(load::<f32>(&p_bad).is_err());

        let truncated = &bytes[..bytes.len() - 7];
        let p_trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&p_trunc, truncated).unwrap();
        assert!(load::<f32>(&p_trunc).is_err());

        let mut extended = bytes.clone();
        extended.push(0);
        let p_ext = dir.path().join("ext.ckpt");
        std::fs::write(&p_ext, extended).unwrap();
        assert!(load::<f32>(&p_ext).is_err());
    }

    #[test]
    fn missing_and_unknown_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &sample_store(), &BTreeMap::new()).unwrap();

        let mut smaller = ParamStore::<f32>::new();
        smaller.add_weight("layer.w", Tensor::zeros(vec![3, 4]));
        assert!(load_into_store(&path, &mut smaller).is_err());

        let mut bigger = sample_store();
        bigger.add_weight("extra", Tensor::zeros(vec![1]));
        assert!(load_into_store(&path, &mut bigger).is_err());
    }
}
