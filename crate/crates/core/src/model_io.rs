//! Binary model files and training checkpoints.
//!
//! Model file layout, all integers and reals little-endian:
//!
//! ```text
//! "LCNM"  u32 version
//! payload:
//!   arch name        u32 len, UTF-8
//!   num_classes      u32
//!   width            f64
//!   nin_mfm          u8
//!   activation       u8    (0 = mfm, 1 = relu)
//!   pixel_scale      f32
//!   crop policy      u8    (0 = none, 1 = random crop + mirror) then u32 source size
//!   block count      u32
//!   per block: name (u32 len, UTF-8), 4 × u32 extents, f32 values
//! u32 CRC32 of payload
//! ```
//!
//! A checkpoint is a model file plus a `.solver` sidecar with the same
//! framing (magic `"LCNS"`) holding the iteration, seed and momentum buffers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::{Shape, Tensor};
use crate::zoo::{ArchConfig, NetworkModel};

pub const MODEL_MAGIC: &[u8; 4] = b"LCNM";
pub const SOLVER_MAGIC: &[u8; 4] = b"LCNS";
pub const FORMAT_VERSION: u32 = 1;

/// How training inputs were cropped from the stored images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPolicy {
    /// Images were already at the network input size.
    None,
    /// Random crop from a `source`-sized square plus horizontal mirroring;
    /// evaluation uses the center crop.
    RandomCropMirror { source: u32 },
}

/// Input preprocessing a model was trained with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    /// Multiplier applied to raw 0–255 pixel values.
    pub pixel_scale: f32,
    pub crop: CropPolicy,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            pixel_scale: 1.0 / 255.0,
            crop: CropPolicy::RandomCropMirror { source: 144 },
        }
    }
}

/// Solver state that, together with the weights, lets training resume.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Next iteration to run.
    pub iteration: u64,
    pub seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        for d in t.shape().dims() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let len = shape.len();
        if len.checked_mul(4).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Format(format!("block {name}: extents {shape} exceed file size")));
        }
        let data = self
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Format(format!("block {name}: {e}")))?;
        Ok((name, t))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn frame(magic: &[u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

/// Checks magic, version and checksum; returns the payload.
fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?} (expected {:?})",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (payload, tail) = bytes[8..].split_at(bytes.len() - 12);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(payload)
}

/// Serializes a model; identical models give identical bytes.
pub fn encode_model(model: &NetworkModel<f32>, prep: &Preprocessing) -> Vec<u8> {
    let cfg = model.config();
    let mut w = Writer { buf: Vec::new() };
    w.str(&cfg.arch.to_string());
    w.u32(cfg.num_classes as u32);
    w.f64(cfg.width);
    w.u8(cfg.nin_mfm as u8);
    w.u8(match cfg.activation {
        Activation::Relu => 1,
        _ => 0,
    });
    w.f32(prep.pixel_scale);
    match prep.crop {
        CropPolicy::None => {
            w.u8(0);
            w.u32(0);
        }
        CropPolicy::RandomCropMirror { source } => {
            w.u8(1);
            w.u32(source);
        }
    }
    let params = model.params();
    w.u32(params.len() as u32);
    for (name, p) in params {
        w.tensor(&name, &p.value);
    }
    frame(MODEL_MAGIC, &w.buf)
}

/// Rebuilds a model from [`encode_model`] output. Every parameter block of
/// the architecture must be present exactly once with its exact shape.
pub fn decode_model(bytes: &[u8]) -> Result<(NetworkModel<f32>, Preprocessing)> {
    let mut r = Reader {
        buf: unframe(MODEL_MAGIC, bytes)?,
        pos: 0,
    };
    let arch = r.str()?.parse()?;
    let mut config = ArchConfig::new(arch);
    config.num_classes = r.u32()? as usize;
    config.width = r.f64()?;
    config.nin_mfm = r.u8()? != 0;
    config.activation = match r.u8()? {
        0 => Activation::Mfm,
        1 => Activation::Relu,
        other => return Err(Error::Format(format!("unknown activation tag {other}"))),
    };
    let pixel_scale = r.f32()?;
    let crop = match (r.u8()?, r.u32()?) {
        (0, _) => CropPolicy::None,
        (1, source) => CropPolicy::RandomCropMirror { source },
        (tag, _) => return Err(Error::Format(format!("unknown crop policy tag {tag}"))),
    };
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        blocks.push(r.tensor()?);
    }
    r.finish()?;

    let mut model = NetworkModel::<f32>::from_config(config)?;
    install_blocks(&mut model, blocks, |p| &mut p.value)?;
    Ok((model, Preprocessing { pixel_scale, crop }))
}

fn install_blocks(
    model: &mut NetworkModel<f32>,
    mut blocks: Vec<(String, Tensor<f32>)>,
    field: impl Fn(&mut crate::layers::Param<f32>) -> &mut Tensor<f32>,
) -> Result<()> {
    for p in model.params_mut() {
        let matches: Vec<usize> = blocks
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| *n == p.name)
            .map(|(i, _)| i)
            .collect();
        let idx = match matches.as_slice() {
            [i] => *i,
            [] => return Err(Error::Format(format!("missing parameter block {}", p.name))),
            _ => return Err(Error::Format(format!("duplicate parameter block {}", p.name))),
        };
        let (_, t) = blocks.swap_remove(idx);
        let slot = field(p.param);
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "block {} has shape {}, architecture expects {}",
                p.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some((name, _)) = blocks.first() {
        return Err(Error::Format(format!("unexpected parameter block {name}")));
    }
    Ok(())
}

pub fn save(model: &NetworkModel<f32>, prep: &Preprocessing, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model, prep))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetworkModel<f32>, Preprocessing)> {
    decode_model(&fs::read(path)?)
}

/// Path of the solver sidecar next to a checkpoint.
pub fn solver_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".solver");
    PathBuf::from(s)
}

pub fn encode_solver(model: &NetworkModel<f32>, state: &SolverState) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.u64(state.iteration);
    w.u64(state.seed);
    let params = model.params();
    w.u32(params.len() as u32);
    for (name, p) in params {
        w.tensor(&name, &p.momentum);
    }
    frame(SOLVER_MAGIC, &w.buf)
}

/// Restores momentum buffers into `model` and returns the solver state.
pub fn decode_solver(bytes: &[u8], model: &mut NetworkModel<f32>) -> Result<SolverState> {
    let mut r = Reader {
        buf: unframe(SOLVER_MAGIC, bytes)?,
        pos: 0,
    };
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        blocks.push(r.tensor()?);
    }
    r.finish()?;
    install_blocks(model, blocks, |p| &mut p.momentum)?;
    Ok(SolverState { iteration, seed })
}

pub fn save_checkpoint(model: &NetworkModel<f32>, prep: &Preprocessing, state: &SolverState, path: &Path) -> Result<()> {
    save(model, prep, path)?;
    fs::write(solver_path(path), encode_solver(model, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkModel<f32>, Preprocessing, SolverState)> {
    let (mut model, prep) = load(path)?;
    let state = decode_solver(&fs::read(solver_path(path))?, &mut model)?;
    Ok((model, prep, state))
}
