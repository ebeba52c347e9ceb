//! Binary checkpoint (`BL58`) and packed ternary export (`BL58T`) formats.
//!
//! All multi-byte fields are little-endian. Checkpoint layout:
//!
//! ```text
//! "BL58" | version u32 | mode u8 | flags u8 | bits u32 | epsilon f64 | layers u32
//! per layer: in u32 | out u32 | flags u8 | weight f32[in*out] (row-major [in, out])
//!            | bias f32[out]? | norm gain f32[in]? | norm bias f32[in]?
//! ```
//!
//! Ternary export layout:
//!
//! ```text
//! "BL58T" | version u32 | mode u8 | flags u8 | bits u32 | epsilon f64 | layers u32
//! per layer: rows u32 | cols u32 | flags u8 | w_scale f32 | packed u8[ceil(rows*cols/4)]
//!            | bias f32[cols]? | norm gain f32[rows]? | norm bias f32[rows]?
//! ```
//!
//! Header flags: bit 0 = bias added after dequantization. Layer flags:
//! bit 0 = bias present, bit 1 = norm present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kernel::{packed_len, KernelError, PackedTernary};
use crate::layer::{BitLinear, LayerOptions, NormParams, TernaryLayer};
use crate::model::{Classifier, ModelError, ModelSpec, NetworkMode, TernaryClassifier};
use crate::quant::QuantConfig;
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BL58";
pub const TERNARY_MAGIC: &[u8; 5] = b"BL58T";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_BIAS_AFTER_DEQUANT: u8 = 1;
const LAYER_BIAS: u8 = 1;
const LAYER_NORM: u8 = 2;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: &'static str, found: Vec<u8> },
    #[error("unsupported format version {0} (this build reads version 1)")]
    Version(u32),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("layer extents {rows}x{cols} overflow the addressable size")]
    ExtentOverflow { rows: u32, cols: u32 },
    #[error("unknown mode byte {0}")]
    UnknownMode(u8),
    #[error("unknown flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("inconsistent model: {0}")]
    Inconsistent(String),
    #[error("only ternary models can be exported")]
    NotTernary,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for ModelIoError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = ModelIoError> = std::result::Result<T, E>;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn header(&mut self, magic: &[u8], mode: NetworkMode, after: bool, quant: &QuantConfig, layers: usize) {
        self.0.extend_from_slice(magic);
        self.u32(FORMAT_VERSION as usize);
        self.u8(mode.code());
        self.u8(if after { FLAG_BIAS_AFTER_DEQUANT } else { 0 });
        self.u32(quant.bits as usize);
        self.0.extend_from_slice(&quant.epsilon.to_le_bytes());
        self.u32(layers);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Header {
    mode: NetworkMode,
    bias_after_dequant: bool,
    bits: u32,
    epsilon: f64,
    layers: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ModelIoError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or(ModelIoError::Inconsistent("payload size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn extents(&mut self) -> Result<(usize, usize, usize)> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let count = (rows as usize)
            .checked_mul(cols as usize)
            .filter(|&c| c.checked_mul(4).is_some())
            .ok_or(ModelIoError::ExtentOverflow { rows, cols })?;
        Ok((rows as usize, cols as usize, count))
    }
    fn layer_flags(&mut self) -> Result<(bool, bool)> {
        let f = self.u8()?;
        if f & !(LAYER_BIAS | LAYER_NORM) != 0 {
            return Err(ModelIoError::UnknownFlags(f));
        }
        Ok((f & LAYER_BIAS != 0, f & LAYER_NORM != 0))
    }
    fn header(&mut self, magic: &'static [u8], name: &'static str) -> Result<Header> {
        let found = self.bytes.get(..magic.len()).unwrap_or(self.bytes);
        if found != magic {
            return Err(ModelIoError::Magic {
                expected: name,
                found: found.to_vec(),
            });
        }
        self.pos = magic.len();
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelIoError::Version(version));
        }
        let code = self.u8()?;
        let mode = NetworkMode::from_code(code).ok_or(ModelIoError::UnknownMode(code))?;
        let flags = self.u8()?;
        if flags & !FLAG_BIAS_AFTER_DEQUANT != 0 {
            return Err(ModelIoError::UnknownFlags(flags));
        }
        Ok(Header {
            mode,
            bias_after_dequant: flags & FLAG_BIAS_AFTER_DEQUANT != 0,
            bits: self.u32()?,
            epsilon: self.f64()?,
            layers: self.u32()? as usize,
        })
    }
    fn norm(&mut self, present: bool, width: usize) -> Result<Option<NormParams<f32>>> {
        if !present {
            return Ok(None);
        }
        Ok(Some(NormParams {
            gain: Tensor::new(vec![width], self.f32s(width)?)?,
            bias: Tensor::new(vec![width], self.f32s(width)?)?,
        }))
    }
    fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ModelIoError::TrailingBytes(n)),
        }
    }
}

fn layer_flags(bias: bool, norm: bool) -> u8 {
    (if bias { LAYER_BIAS } else { 0 }) | (if norm { LAYER_NORM } else { 0 })
}

fn uniform_flags(flags: &[(bool, bool)]) -> Result<(bool, bool)> {
    let first = flags.first().copied().ok_or(ModelIoError::Inconsistent("no layers".into()))?;
    if flags.iter().any(|&f| f != first) {
        return Err(ModelIoError::Inconsistent("layers disagree on bias/norm presence".into()));
    }
    Ok(first)
}

pub fn checkpoint_to_bytes(model: &Classifier) -> Vec<u8> {
    let quant = model.layers.first().map(|l| l.quant).unwrap_or_default();
    let mut w = Writer(Vec::new());
    w.header(CHECKPOINT_MAGIC, model.spec.mode, model.spec.bias_after_dequant, &quant, model.layers.len());
    for l in &model.layers {
        w.u32(l.in_features());
        w.u32(l.out_features());
        w.u8(layer_flags(l.bias.is_some(), l.norm.is_some()));
        w.f32s(l.weight.data());
        if let Some(b) = &l.bias {
            w.f32s(b.data());
        }
        if let Some(n) = &l.norm {
            w.f32s(n.gain.data());
            w.f32s(n.bias.data());
        }
    }
    w.0
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let mut r = Reader { bytes, pos: 0 };
    let h = r.header(CHECKPOINT_MAGIC, "BL58")?;
    let mut layers = Vec::with_capacity(h.layers.min(1024));
    let mut flags = Vec::new();
    let mut widths = Vec::new();
    let quant = QuantConfig::new(h.bits, h.mode.measure(), h.epsilon).map_err(ModelError::from)?;
    for _ in 0..h.layers {
        let (inf, outf, count) = r.extents()?;
        let (bias, norm) = r.layer_flags()?;
        let weight = Tensor::new(vec![inf, outf], r.f32s(count)?)?;
        let b = if bias { Some(Tensor::new(vec![outf], r.f32s(outf)?)?) } else { None };
        let n = r.norm(norm, inf)?;
        let opts = LayerOptions {
            mode: h.mode.layer_mode(),
            quant,
            bias,
            norm,
            bias_after_dequant: h.bias_after_dequant,
        };
        if widths.is_empty() {
            widths.push(inf);
        }
        widths.push(outf);
        flags.push((bias, norm));
        layers.push(BitLinear::from_weights(weight, b, n, opts).map_err(ModelError::from)?);
    }
    r.finish()?;
    let (bias, norm) = uniform_flags(&flags)?;
    let spec = ModelSpec {
        widths,
        mode: h.mode,
        bias,
        bias_after_dequant: h.bias_after_dequant,
        norm,
        bits: h.bits,
        epsilon: h.epsilon,
    };
    Ok(Classifier::from_layers(spec, layers)?)
}

pub fn ternary_to_bytes(model: &TernaryClassifier) -> Vec<u8> {
    let first = model.layers.first();
    let quant = first.map(|l| l.quant).unwrap_or_default();
    let after = first.is_some_and(|l| l.bias_after_dequant);
    let mut w = Writer(Vec::new());
    w.header(TERNARY_MAGIC, model.mode, after, &quant, model.layers.len());
    for l in &model.layers {
        w.u32(l.in_features());
        w.u32(l.out_features());
        w.u8(layer_flags(l.bias.is_some(), l.norm.is_some()));
        w.f32s(&[l.packed.w_scale()]);
        w.0.extend_from_slice(l.packed.bytes());
        if let Some(b) = &l.bias {
            w.f32s(b);
        }
        if let Some(n) = &l.norm {
            w.f32s(n.gain.data());
            w.f32s(n.bias.data());
        }
    }
    w.0
}

pub fn ternary_from_bytes(bytes: &[u8]) -> Result<TernaryClassifier> {
    let mut r = Reader { bytes, pos: 0 };
    let h = r.header(TERNARY_MAGIC, "BL58T")?;
    if !h.mode.is_ternary() {
        return Err(ModelIoError::NotTernary);
    }
    let quant = QuantConfig::new(h.bits, h.mode.measure(), h.epsilon).map_err(ModelError::from)?;
    let mut layers: Vec<TernaryLayer> = Vec::with_capacity(h.layers.min(1024));
    for i in 0..h.layers {
        let (rows, cols, _) = r.extents()?;
        let (bias, norm) = r.layer_flags()?;
        let w_scale = r.f32()?;
        let packed = PackedTernary::from_bytes(rows, cols, r.take(packed_len(rows, cols))?.to_vec(), w_scale)?;
        let bias = if bias { Some(r.f32s(cols)?) } else { None };
        let norm = r.norm(norm, rows)?;
        if let Some(prev) = layers.last() {
            if prev.out_features() != rows {
                return Err(ModelIoError::Inconsistent(format!(
                    "layer {i} expects {rows} inputs but the previous layer emits {}",
                    prev.out_features()
                )));
            }
        }
        layers.push(TernaryLayer {
            packed,
            bias,
            norm,
            quant,
            bias_after_dequant: h.bias_after_dequant,
        });
    }
    r.finish()?;
    if layers.is_empty() {
        return Err(ModelIoError::Inconsistent("no layers".into()));
    }
    Ok(TernaryClassifier { mode: h.mode, layers })
}

/// Writes to a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    checkpoint_from_bytes(&read(path)?)
}

/// Quantizes and packs `model`, then writes the export file.
pub fn export_ternary(model: &Classifier, path: &Path) -> Result<TernaryClassifier> {
    if !model.spec.mode.is_ternary() {
        return Err(ModelIoError::NotTernary);
    }
    let exported = model.export()?;
    write_atomic(path, &ternary_to_bytes(&exported))?;
    Ok(exported)
}

pub fn load_ternary(path: &Path) -> Result<TernaryClassifier> {
    ternary_from_bytes(&read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Checkpoint,
    Ternary,
}

/// Identifies a model file by its magic.
pub fn sniff(path: &Path) -> Result<FileKind> {
    let bytes = read(path)?;
    if bytes.starts_with(TERNARY_MAGIC) {
        Ok(FileKind::Ternary)
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        Ok(FileKind::Checkpoint)
    } else {
        Err(ModelIoError::Magic {
            expected: "BL58 or BL58T",
            found: bytes.iter().take(5).copied().collect(),
        })
    }
}
