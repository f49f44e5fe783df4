//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "RRESMCK1"
//! offset 8   u32       manifest length M in bytes
//! offset 12  M bytes   UTF-8 manifest, one line per tensor:
//!                      name \t dtype \t shape \t byte_offset \t value_count \n
//!                      shape is the extents joined by 'x' (e.g. 16x3x3x3),
//!                      dtype is always "f32", byte_offset is relative to the
//!                      first payload byte
//! offset 12+M          payload: the tensors' values as f32, in manifest order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{NumericsError, ParamStore, Real, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"RRESMCK1";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

fn format_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Format(msg.into())
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut manifest = String::new();
    let mut payload = Vec::with_capacity(store.num_scalars() * 4);
    for p in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|e| e.to_string()).collect();
        manifest.push_str(&format!(
            "{}\tf32\t{}\t{}\t{}\n",
            p.name,
            shape.join("x"),
            payload.len(),
            p.value.numel()
        ));
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses the manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(format_err("not a checkpoint file (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let text = bytes
        .get(12..12 + len)
        .ok_or_else(|| format_err("truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|_| format_err("manifest is not UTF-8"))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, offset, count] = fields[..] else {
            return Err(format_err(format!("manifest line {} has {} fields", i + 1, fields.len())));
        };
        let bad = |what: &str| format_err(format!("manifest line {}: bad {what}", i + 1));
        let shape: Vec<usize> = shape
            .split('x')
            .map(|e| e.parse::<usize>().map_err(|_| bad("shape")))
            .collect::<Result<_>>()?;
        let entry = ManifestEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            offset: offset.parse().map_err(|_| bad("offset"))?,
            count: count.parse().map_err(|_| bad("count"))?,
            shape,
        };
        if entry.dtype != "f32" {
            return Err(format_err(format!("unsupported dtype {} for {}", entry.dtype, entry.name)));
        }
        if entry.shape.iter().product::<usize>() != entry.count {
            return Err(bad("count (does not match shape)"));
        }
        entries.push(entry);
    }
    Ok((entries, 12 + len))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let (entries, start) = read_manifest(bytes)?;
    let payload = &bytes[start..];
    entries
        .into_iter()
        .map(|e| {
            let raw = payload
                .get(e.offset..e.offset + 4 * e.count)
                .ok_or_else(|| format_err(format!("payload of {} is truncated", e.name)))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Ok((e.name, Tensor::new(&e.shape, data)?))
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| format_err("output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(store))
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = decode(&fs::read(path)?)?;
    if tensors.len() != store.len() {
        return Err(format_err(format!(
            "incompatible checkpoint: {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| format_err(format!("incompatible checkpoint: unknown tensor {name}")))?;
        store
            .set_value(id, t.cast())
            .map_err(|e| format_err(format!("incompatible checkpoint: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("enc.conv0.weight", Tensor::randn(&[4, 3, 3, 3], 1.0, 1));
        s.add("enc.conv0.bias", Tensor::randn(&[4], 1.0, 2));
        s.add("prelu", Tensor::scalar(0.25));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let store = sample_store();
        save(&store, &path).unwrap();
        let mut other = sample_store();
        other.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        load_into(&mut other, &path).unwrap();
        for (a, b) in store.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }
        let (manifest, _) = read_manifest(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(manifest[0].shape, vec![4, 3, 3, 3]);
        assert_eq!(manifest[1].offset, 4 * 108);
        let total: usize = manifest.iter().map(|e| e.count).sum();
        assert_eq!(total, store.num_scalars());
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&sample_store(), &path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("enc.conv0.weight", Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(load_into(&mut other, &path), Err(NumericsError::Format(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode(b"definitely not a checkpoint").is_err());
    }
}
