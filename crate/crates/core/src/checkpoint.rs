//! On-disk parameter checkpoints: a versioned binary container holding a
//! named tensor map (f64, little-endian) plus a JSON metadata blob.
//!
//! Layout: magic `NIAC`, u32 version, u32 tensor count, then per tensor
//! `{u32 name_len, name, u8 ndim, u64 dims.., f64 data..}`, then
//! `{u32 meta_len, meta json}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NIAC";
const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

pub fn write_checkpoint(path: &Path, tensors: &TensorMap, meta_json: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        // Standard (row-major) iteration order matches the reader below.
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(meta).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<(TensorMap, String)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version"))?;
    if version != VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated tensor count"))?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(|_| bad("truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| bad("truncated name"))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|_| bad("truncated ndim"))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut d = [0u8; 8];
            r.read_exact(&mut d).map_err(|_| bad("truncated dims"))?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product::<usize>().max(1);
        let n = if shape.is_empty() { 1 } else { n };
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| bad(&format!("shape mismatch: {e}")))?;
        tensors.insert(name, tensor);
    }
    let meta_len = read_u32(&mut r).map_err(|_| bad("truncated meta length"))? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| bad("truncated meta"))?;
    let meta = String::from_utf8(meta_bytes).map_err(|_| bad("meta is not UTF-8"))?;
    Ok((tensors, meta))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut tensors = TensorMap::new();
        tensors.insert(
            "nia/conv_in/weight".into(),
            ArrayD::from_shape_fn(IxDyn(&[2, 3, 3, 3]), |ix| {
                (ix[0] * 100 + ix[1] * 10 + ix[2] + ix[3]) as f64 * 0.123456789
            }),
        );
        tensors.insert("detector/stem/bias".into(), ArrayD::zeros(IxDyn(&[7])));
        tensors.insert(
            "scalars/check".into(),
            ArrayD::from_elem(IxDyn(&[]), std::f64::consts::PI),
        );
        write_checkpoint(&path, &tensors, r#"{"kind":"test"}"#).unwrap();
        let (loaded, meta) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, r#"{"kind":"test"}"#);
        assert_eq!(loaded.len(), tensors.len());
        for (name, t) in &tensors {
            let l = &loaded[name];
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.iter().zip(t.iter()) {
                assert!(a.to_bits() == b.to_bits(), "{name} not bit-exact");
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
