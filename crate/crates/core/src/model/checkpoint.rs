//! Binary checkpoint format.
//!
//! ```text
//! magic      5 bytes   "LVSM1"
//! n_dims     u32 LE    always 7
//! dims       7 × u64 LE  e, n_enc, n_dec, n_a, d, v_src, v_tgt
//! n_tensors  u32 LE    always 28
//! tensors    f64 LE, row-major, in TENSOR_NAMES order
//! ```
//!
//! Tensor shapes follow from the dimension table, so no per-tensor header is
//! stored. Writes go to a sibling temporary file that is renamed into place.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::{LayerDims, ModelParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::io::write_atomic_with;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LVSM1";
const N_DIMS: u32 = 7;

pub fn write_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic_with(path, |w| write_to(params, w))
}

pub(crate) fn write_to(params: &ModelParams, w: &mut (impl Write + ?Sized)) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&N_DIMS.to_le_bytes())?;
    for d in params.dims.as_array() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (_, data) in tensors {
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_from(r: &mut impl Read) -> Result<ModelParams> {
    let magic: [u8; 5] = read_exact(r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not an LVSM1 checkpoint".into()));
    }
    let n_dims = u32::from_le_bytes(read_exact(r, "dimension count")?);
    if n_dims != N_DIMS {
        return Err(Error::Checkpoint(format!("expected {N_DIMS} dimensions, found {n_dims}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        let v = u64::from_le_bytes(read_exact(r, "dimension table")?);
        *d = usize::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} too large")))?;
    }
    let [e, n_enc, n_dec, n_a, d, v_src, v_tgt] = dims;
    let dims = LayerDims { e, n_enc, n_dec, n_a, d }.with_vocab(v_src, v_tgt);
    dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_tensors = u32::from_le_bytes(read_exact(r, "tensor count")?);
    if n_tensors as usize != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {n_tensors}", TENSOR_NAMES.len())));
    }
    let mut params = ModelParams::zeros(dims)?;
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = f64::from_le_bytes(read_exact(r, t.name)?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn params() -> ModelParams {
        init_params(LayerDims { e: 3, n_enc: 4, n_dec: 5, n_a: 2, d: 3 }.with_vocab(7, 9), 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let p = params();
        write_checkpoint(&p, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn layout_matches_header_and_size() {
        let p = params();
        let mut bytes = Vec::new();
        write_to(&p, &mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"LVSM1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 3);
        let floats: usize = p.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(bytes.len(), 5 + 4 + 7 * 8 + 4 + 8 * floats);
        // First float is src_embeddings[0][0].
        let first = f64::from_le_bytes(bytes[69..77].try_into().unwrap());
        assert_eq!(first, p.src_embeddings[[0, 0]]);
    }

    #[test]
    fn rejects_corrupt_files() {
        let p = params();
        let mut bytes = Vec::new();
        write_to(&p, &mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_from(&mut bad_magic.as_slice()), Err(Error::Checkpoint(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_from(&mut &truncated[..]), Err(Error::Checkpoint(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(read_from(&mut trailing.as_slice()), Err(Error::Checkpoint(_))));

        let mut zero_dim = bytes;
        zero_dim[9..17].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(read_from(&mut zero_dim.as_slice()), Err(Error::Checkpoint(_))));
    }
}
