//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RLV2"  u32 version
//! u32 n, n × u32   encoder widths
//! u32 n, n × u32   projector widths
//! u8               normalize flag
//! f64              gamma
//! f64 ...          online parameters in declaration order
//! f64 ...          target parameters in declaration order
//! u32 n, then n × (u64 len, len × f64)   optimizer momentum buffers
//! u64 step, u64 seed
//! ```
//!
//! Every random stream is derived from `(seed, step, ...)`, so the seed and
//! step counter are the complete random state.

use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{NetworkPair, NetworkSpec};
use crate::optimizer::LarsState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLV2";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkPair,
    pub optimizer: LarsState,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, xs: impl IntoIterator<Item = &'a f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let spec = ck.net.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for widths in [&spec.encoder, &spec.projector] {
        put_u32(&mut out, widths.len())?;
        for &w in widths {
            put_u32(&mut out, w)?;
        }
    }
    out.push(spec.normalize_embeddings as u8);
    out.extend_from_slice(&ck.net.gamma().to_le_bytes());
    for p in ck.net.online_params().into_iter().chain(ck.net.target_params()) {
        put_f64s(&mut out, p.data());
    }
    put_u32(&mut out, ck.optimizer.momentum.len())?;
    for buf in &ck.optimizer.momentum {
        out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
        put_f64s(&mut out, buf);
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 1024 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
}

/// Decodes a checkpoint; any defect yields an error and no partial state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let encoder = r.widths()?;
    let projector = r.widths()?;
    let normalize = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad normalize flag {other}"))),
    };
    let gamma = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let spec = NetworkSpec {
        encoder,
        projector,
        normalize_embeddings: normalize,
    };
    spec.validate().map_err(|e| Error::Format(format!("bad network spec: {e}")))?;

    let shapes: Vec<Vec<usize>> = layer_shapes(&spec);
    let read_side = |r: &mut Reader| -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), r.f64s(s.iter().product())?))
            .collect()
    };
    let online = read_side(&mut r)?;
    let target = read_side(&mut r)?;
    let n_bufs = r.u32()? as usize;
    if n_bufs != 0 && n_bufs != shapes.len() {
        return Err(Error::Format(format!(
            "{n_bufs} optimizer buffers for {} parameters",
            shapes.len()
        )));
    }
    let mut momentum = Vec::with_capacity(n_bufs);
    for s in shapes.iter().take(n_bufs) {
        let len = r.u64()? as usize;
        if len != s.iter().product::<usize>() {
            return Err(Error::Format("optimizer buffer size mismatch".into()));
        }
        momentum.push(r.f64s(len)?);
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let net = NetworkPair::from_params(spec, gamma, online, target)
        .map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))?;
    Ok(Checkpoint {
        net,
        optimizer: LarsState { momentum },
        step,
        seed,
    })
}

fn layer_shapes(spec: &NetworkSpec) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for widths in [&spec.encoder, &spec.projector] {
        for w in widths.windows(2) {
            shapes.push(vec![w[0], w[1]]);
            shapes.push(vec![w[1]]);
        }
    }
    shapes
}

/// Writes via a temporary file and rename so a crash never leaves a torn
/// checkpoint at `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
