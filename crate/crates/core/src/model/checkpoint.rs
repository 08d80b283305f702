//! `EVSG` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVSG" | u32 version | u32 len | config JSON (len bytes) | u64 step
//! | u32 count | count x ( u32 name_len | name | u32 ndim | ndim x u32 dim | f32 data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{EvSegSnn, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"EVSG";

/// A model together with the optimiser step it was saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EvSegSnn<f32>,
    pub step: u64,
}

pub fn write_checkpoint<W: Write>(mut out: W, model: &EvSegSnn<f32>, step: u64) -> Result<(), ModelError> {
    let config = serde_json::to_vec(model.config())?;
    out.write_all(&MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&u32_len(config.len())?.to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&step.to_le_bytes())?;
    let params = model.named_params();
    out.write_all(&u32_len(params.len())?.to_le_bytes())?;
    for (name, t) in params {
        out.write_all(&u32_len(name.len())?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&u32_len(t.shape().len())?.to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&u32_len(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &EvSegSnn<f32>, step: u64) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, step)
}

fn u32_len(n: usize) -> Result<u32, ModelError> {
    u32::try_from(n).map_err(|_| ModelError::Malformed(format!("length {n} exceeds u32")))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut buf = Vec::new();
        // `take` keeps a corrupt length from forcing a huge allocation
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(ModelError::Truncated);
        }
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => ModelError::Truncated,
            _ => ModelError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Parse a checkpoint and rebuild the model it describes.
pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { inner: input };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: version });
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(len)?)?;
    let step = r.u64()?;
    let mut model = EvSegSnn::<f32>::new(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(ModelError::Malformed(format!(
            "{count} parameter records, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| ModelError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(ModelError::Malformed(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(ModelError::Malformed(format!(
                "record {name} {shape:?} where {want_name} {want_shape:?} was expected"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push(Tensor::new(shape, data)?);
    }
    for (slot, t) in model.params_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(Checkpoint { model, step })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
