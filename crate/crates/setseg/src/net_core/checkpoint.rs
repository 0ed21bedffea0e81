//! Binary parameter checkpoints.
//!
//! Layout: the magic string `SSEG1`, then for each named tensor
//! `name_len: u64 LE | name bytes (UTF-8) | rank: u64 LE | dims: u64 LE each |
//! values: f64 LE each`. Entries repeat until end of file. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"SSEG1";

/// Write named tensors in the given order.
pub fn write_tensors<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every named tensor in file order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: expected SSEG1",
            path.display()
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut len_buf)?;
        let rank = u64::from_le_bytes(len_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len_buf)?;
            shape.push(u64::from_le_bytes(len_buf) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut len_buf)?;
            data.push(f64::from_le_bytes(len_buf));
        }
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Save every parameter of a store, in insertion order.
pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    write_tensors(path, store.ids().map(|id| (store.name(id), store.value(id))))
}

/// Load parameter values into an already-constructed store.
///
/// Every store parameter must be present in the file with a matching shape;
/// extra file entries (e.g. optimizer state) are returned to the caller.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<Vec<(String, Tensor)>> {
    let entries = read_tensors(path)?;
    let mut extra = Vec::new();
    let mut seen = vec![false; store.len()];
    for (name, tensor) in entries {
        match store.lookup(&name) {
            Some(id) => {
                if !store.value(id).same_shape(&tensor) {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {}: file {:?} vs store {:?}",
                        name,
                        tensor.shape(),
                        store.value(id).shape()
                    )));
                }
                *store.value_mut(id) = tensor;
                seen[id.0] = true;
            }
            None => extra.push((name, tensor)),
        }
    }
    for id in store.ids() {
        if !seen[id.0] {
            return Err(Error::Checkpoint(format!(
                "checkpoint missing parameter {}",
                store.name(id)
            )));
        }
    }
    Ok(extra)
}
