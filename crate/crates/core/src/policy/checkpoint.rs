//! Binary checkpoint format, all integers and floats little endian:
//!
//! ```text
//! magic    8 bytes  "CMPOLICY"
//! version  u32
//! vocab    u64      vocabulary hash
//! config   u64 × 6  vocab_size, context, d_model, layers, heads, ff
//!          f64 × 3  dropout, gamma, delta
//! count    u32      number of tensor blocks
//! block    u32 name length, name bytes, u64 rows, u64 cols, rows·cols × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PolicyConfig, PolicyError, PolicyParams, Tensor};
use crate::minilang::Vocabulary;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CMPOLICY";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(params: &PolicyParams<S>, mut out: W) -> Result<(), PolicyError> {
    if !params.is_finite() {
        return Err(PolicyError::NonFiniteParameters);
    }
    let c = &params.config;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&Vocabulary::standard().hash().to_le_bytes())?;
    for v in [c.vocab_size, c.context, c.d_model, c.layers, c.heads, c.ff] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in [c.dropout, c.gamma, c.delta] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    for t in &params.tensors {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.rows as u64).to_le_bytes())?;
        out.write_all(&(t.cols as u64).to_le_bytes())?;
        for x in &t.data {
            out.write_all(&x.to_f64_lossless().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], PolicyError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PolicyError::Format("unexpected end of checkpoint".into()),
        _ => PolicyError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PolicyError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, PolicyError> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<PolicyParams<S>, PolicyError> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(PolicyError::Format("not a policy checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(PolicyError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let vocab = read_u64(&mut r)?;
    let expected = Vocabulary::standard().hash();
    if vocab != expected {
        return Err(PolicyError::VocabHashMismatch { found: vocab, expected });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = read_u64(&mut r)? as usize;
    }
    let config = PolicyConfig {
        vocab_size: dims[0],
        context: dims[1],
        d_model: dims[2],
        layers: dims[3],
        heads: dims[4],
        ff: dims[5],
        dropout: read_f64(&mut r)?,
        gamma: read_f64(&mut r)?,
        delta: read_f64(&mut r)?,
    };
    config.validate()?;
    let shapes = config.tensor_shapes();
    let count = read_u32(&mut r)? as usize;
    if count != shapes.len() {
        return Err(PolicyError::Format(format!("expected {} tensors, found {count}", shapes.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, rows, cols) in shapes {
        let len = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; len];
        r.read_exact(&mut raw).map_err(|_| PolicyError::Format("truncated tensor name".into()))?;
        let found = String::from_utf8(raw).map_err(|_| PolicyError::Format("tensor name is not UTF-8".into()))?;
        let (fr, fc) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
        if found != name || fr != rows || fc != cols {
            return Err(PolicyError::Format(format!("tensor {found} {fr}x{fc}, expected {name} {rows}x{cols}")));
        }
        let data = (0..rows * cols).map(|_| read_f64(&mut r).map(S::of)).collect::<Result<_, _>>()?;
        tensors.push(Tensor { name, rows, cols, data });
    }
    Ok(PolicyParams { config, tensors })
}

pub fn save_checkpoint<S: Scalar>(params: &PolicyParams<S>, path: &Path) -> Result<(), PolicyError> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<PolicyParams<S>, PolicyError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
