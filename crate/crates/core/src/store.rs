//! Logit dump files.
//!
//! Binary layout, little-endian throughout:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0 | 4 | magic `CLD1` |
//! | 4 | 2 | format version (`u16`, = 1) |
//! | 6 | 1 | dtype code (0 = f32, 1 = f64) |
//! | 7 | 1 | reserved (= 0) |
//! | 8 | 4 | layers `L` (`u32`) |
//! | 12 | 4 | tokens `N` (`u32`) |
//! | 16 | 4 | vocab `V` (`u32`) |
//! | 20 | `L·N·V·size` | logits, `[layer][token][vocab]` row-major |
//!
//! Metadata lives in a JSON sidecar next to the binary: `run.cld` pairs with
//! `run.manifest.json`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLD1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 20;
/// Largest accepted `L·N·V`; anything bigger is treated as a corrupt header.
pub const MAX_ENTRIES: u64 = 1 << 40;

const IO_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Structured,
    Shuffled,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

fn default_beta() -> f64 {
    1.0
}

/// Sidecar metadata for a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u16,
    pub model_name: String,
    pub prompt_id: String,
    pub variant: Variant,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dtype: Dtype,
    /// Inverse softmax temperature.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub lens: String,
    #[serde(default)]
    pub checkpoint_step: Option<i64>,
    #[serde(default)]
    pub group_label: Option<String>,
}

impl DumpManifest {
    /// Manifest for a synthetic dump with default metadata.
    pub fn synthetic(layers: usize, tokens: usize, vocab: usize, dtype: Dtype) -> Self {
        DumpManifest {
            format_version: FORMAT_VERSION,
            model_name: "synthetic".into(),
            prompt_id: "synthetic".into(),
            variant: Variant::Synthetic,
            shuffle_seed: None,
            num_layers: layers,
            num_tokens: tokens,
            vocab_size: vocab,
            dtype,
            beta: 1.0,
            lens: "raw".into(),
            checkpoint_step: None,
            group_label: None,
        }
    }

    /// Number of logits in the payload, `None` on overflow.
    pub fn entries(&self) -> Option<u64> {
        (self.num_layers as u64)
            .checked_mul(self.num_tokens as u64)?
            .checked_mul(self.vocab_size as u64)
    }

    pub fn payload_bytes(&self) -> Option<u64> {
        self.entries()?.checked_mul(self.dtype.size() as u64)
    }

    /// Invariant violations that only depend on metadata.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.format_version != FORMAT_VERSION {
            out.push(Violation::new(
                "format_version",
                format!("must be {FORMAT_VERSION}, got {}", self.format_version),
            ));
        }
        if self.num_layers < 1 {
            out.push(Violation::new("num_layers", "must be >= 1"));
        }
        if self.num_tokens < 1 {
            out.push(Violation::new("num_tokens", "must be >= 1"));
        }
        if self.vocab_size < 2 {
            out.push(Violation::new(
                "vocab_size",
                format!("must be >= 2, got {}", self.vocab_size),
            ));
        }
        for (field, dim) in [
            ("num_layers", self.num_layers),
            ("num_tokens", self.num_tokens),
            ("vocab_size", self.vocab_size),
        ] {
            if dim > u32::MAX as usize {
                out.push(Violation::new(field, "does not fit in u32"));
            }
        }
        match self.entries() {
            Some(n) if n <= MAX_ENTRIES => {}
            _ => out.push(Violation::new(
                "num_layers",
                "L*N*V exceeds the 2^40 entry limit",
            )),
        }
        if self.variant == Variant::Shuffled && self.shuffle_seed.is_none() {
            out.push(Violation::new(
                "shuffle_seed",
                "required when variant is shuffled",
            ));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            out.push(Violation::new(
                "beta",
                format!("must be finite and > 0, got {}", self.beta),
            ));
        }
        out
    }
}

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// Floating-point element type of a dump.
pub trait Logit: Copy + Send + Sync + PartialEq + fmt::Debug + 'static {
    const DTYPE: Dtype;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Logit for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Logit for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Logit payload in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum LogitData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl LogitData {
    pub fn dtype(&self) -> Dtype {
        match self {
            LogitData::F32(_) => Dtype::F32,
            LogitData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LogitData::F32(v) => v.len(),
            LogitData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index and value of the first non-finite entry, plus how many there are.
    fn non_finite(&self) -> Option<(usize, f64, usize)> {
        fn scan<T: Logit>(v: &[T]) -> Option<(usize, f64, usize)> {
            let mut first = None;
            let mut count = 0;
            for (i, x) in v.iter().enumerate() {
                if !x.is_finite() {
                    count += 1;
                    first.get_or_insert((i, x.to_f64()));
                }
            }
            first.map(|(i, x)| (i, x, count))
        }
        match self {
            LogitData::F32(v) => scan(v),
            LogitData::F64(v) => scan(v),
        }
    }

    fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (LogitData::F32(a), LogitData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (LogitData::F64(a), LogitData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Borrowed logits of one layer, `tokens × vocab` row-major.
#[derive(Debug, Clone, Copy)]
pub enum LayerLogits<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

impl LayerLogits<'_> {
    pub fn len(&self) -> usize {
        match self {
            LayerLogits::F32(v) => v.len(),
            LayerLogits::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logit `index` of the layer, upcast to f64.
    pub fn at(&self, index: usize) -> f64 {
        match self {
            LayerLogits::F32(v) => v[index] as f64,
            LayerLogits::F64(v) => v[index],
        }
    }

    /// Token row upcast to f64.
    pub fn row_f64(&self, token: usize, vocab: usize) -> Vec<f64> {
        let r = token * vocab..(token + 1) * vocab;
        match self {
            LayerLogits::F32(v) => v[r].iter().map(|&x| x as f64).collect(),
            LayerLogits::F64(v) => v[r].to_vec(),
        }
    }
}

/// A `layers × tokens × vocab` logit tensor with its manifest.
///
/// Immutable once built; share it freely across threads.
#[derive(Debug, Clone)]
pub struct LogitDump {
    manifest: DumpManifest,
    data: LogitData,
}

impl PartialEq for LogitDump {
    /// Bit-level equality of the payload (so NaN payloads compare by bits).
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.data.bit_eq(&other.data)
    }
}

impl LogitDump {
    /// Builds a dump, rejecting it if any invariant is broken.
    pub fn new(manifest: DumpManifest, data: LogitData) -> Result<Self> {
        let dump = LogitDump { manifest, data };
        let violations = validate(&dump);
        if violations.is_empty() {
            Ok(dump)
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Builds a dump without checking invariants; [`validate`] reports them.
    pub fn new_unchecked(manifest: DumpManifest, data: LogitData) -> Self {
        LogitDump { manifest, data }
    }

    /// f64 dump from nested `[layer][token][vocab]` rows; mainly for tests.
    pub fn from_rows(rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let layers = rows.len();
        let tokens = rows.first().map_or(0, Vec::len);
        let vocab = rows.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(layers * tokens * vocab);
        for layer in rows {
            if layer.len() != tokens {
                return Err(Error::ShapeMismatch(layer.len(), tokens));
            }
            for row in layer {
                if row.len() != vocab {
                    return Err(Error::ShapeMismatch(row.len(), vocab));
                }
                data.extend_from_slice(row);
            }
        }
        let manifest = DumpManifest::synthetic(layers, tokens, vocab, Dtype::F64);
        LogitDump::new(manifest, LogitData::F64(data))
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn data(&self) -> &LogitData {
        &self.data
    }

    pub fn layers(&self) -> usize {
        self.manifest.num_layers
    }

    pub fn tokens(&self) -> usize {
        self.manifest.num_tokens
    }

    pub fn vocab(&self) -> usize {
        self.manifest.vocab_size
    }

    pub fn beta(&self) -> f64 {
        self.manifest.beta
    }

    /// Same payload with a different manifest; dimensions must still match.
    pub fn with_manifest(self, manifest: DumpManifest) -> Result<Self> {
        LogitDump::new(manifest, self.data)
    }

    pub fn layer(&self, layer: usize) -> Result<LayerLogits<'_>> {
        if layer >= self.layers() {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: self.layers(),
            });
        }
        let stride = self.tokens() * self.vocab();
        let r = layer * stride..(layer + 1) * stride;
        Ok(match &self.data {
            LogitData::F32(v) => LayerLogits::F32(&v[r]),
            LogitData::F64(v) => LayerLogits::F64(&v[r]),
        })
    }

    /// Single logit, upcast to f64.
    pub fn get(&self, layer: usize, token: usize, vocab: usize) -> f64 {
        let i = (layer * self.tokens() + token) * self.vocab() + vocab;
        match &self.data {
            LogitData::F32(v) => v[i] as f64,
            LogitData::F64(v) => v[i],
        }
    }
}

/// Lists every broken invariant; empty means the dump is well formed.
pub fn validate(dump: &LogitDump) -> Vec<Violation> {
    let m = &dump.manifest;
    let mut out = m.violations();
    if dump.data.dtype() != m.dtype {
        out.push(Violation::new(
            "dtype",
            format!(
                "manifest says {}, payload is {}",
                m.dtype,
                dump.data.dtype()
            ),
        ));
    }
    if let Some(expected) = m.entries() {
        if dump.data.len() as u64 != expected {
            out.push(Violation::new(
                "data",
                format!(
                    "has {} entries, expected L*N*V = {expected}",
                    dump.data.len()
                ),
            ));
        }
    }
    if let Some((index, value, count)) = dump.data.non_finite() {
        out.push(Violation::new(
            "data",
            format!("{count} non-finite entries, first {value} at flat index {index}"),
        ));
    }
    out
}

/// [`validate`] on a file, reading one layer at a time. Structural problems
/// (magic, version, length, header/manifest disagreement) are errors rather
/// than violations, since the payload cannot be interpreted past them.
pub fn validate_file(path: &Path) -> Result<Vec<Violation>> {
    let mut reader = DumpReader::open(path)?;
    let m = reader.manifest().clone();
    let mut out = m.violations();
    if !out.is_empty() {
        return Ok(out);
    }
    let per_layer = m.num_tokens * m.vocab_size;
    let mut first = None;
    let mut count = 0;
    for l in 0..m.num_layers {
        if let Some((i, x, c)) = reader.read_layer(l)?.non_finite() {
            count += c;
            first.get_or_insert((l * per_layer + i, x));
        }
    }
    if let Some((index, value)) = first {
        out.push(Violation::new(
            "data",
            format!("{count} non-finite entries, first {value} at flat index {index}"),
        ));
    }
    Ok(out)
}

/// Sidecar manifest path: same basename, `.manifest.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn encode_header(m: &DumpManifest) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[6] = m.dtype.code();
    h[7] = 0;
    h[8..12].copy_from_slice(&(m.num_layers as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(m.num_tokens as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(m.vocab_size as u32).to_le_bytes());
    h
}

#[derive(Debug, Clone, Copy)]
struct Header {
    dtype: Dtype,
    layers: u32,
    tokens: u32,
    vocab: u32,
}

impl Header {
    fn entries(&self) -> u64 {
        self.layers as u64 * self.tokens as u64 * self.vocab as u64
    }
}

fn decode_header(path: &Path, bytes: &[u8; HEADER_LEN as usize]) -> Result<Header> {
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dtype = Dtype::from_code(bytes[6]).ok_or_else(|| Error::Manifest {
        path: path.into(),
        reason: format!("unknown dtype code {} in header", bytes[6]),
    })?;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let header = Header {
        dtype,
        layers: u32_at(8),
        tokens: u32_at(12),
        vocab: u32_at(16),
    };
    if header.entries() > MAX_ENTRIES {
        return Err(Error::Manifest {
            path: path.into(),
            reason: format!(
                "header dimensions {}x{}x{} exceed the 2^40 entry limit",
                header.layers, header.tokens, header.vocab
            ),
        });
    }
    Ok(header)
}

fn write_manifest(path: &Path, manifest: &DumpManifest) -> Result<()> {
    let sidecar = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    json.push('\n');
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

/// Reads and parses the sidecar manifest of `path`.
pub fn read_manifest(path: &Path) -> Result<DumpManifest> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: sidecar,
        reason: e.to_string(),
    })
}

fn encode_into<T: Logit>(values: &[T], out: &mut impl Write, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(IO_CHUNK);
    let per_chunk = IO_CHUNK / T::DTYPE.size();
    for chunk in values.chunks(per_chunk) {
        buf.clear();
        for &x in chunk {
            x.write_le(&mut buf);
        }
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn decode_from<T: Logit>(input: &mut impl Read, count: usize, path: &Path) -> Result<Vec<T>> {
    let size = T::DTYPE.size();
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; IO_CHUNK.min(count * size).max(size)];
    let mut remaining = count;
    while remaining > 0 {
        let take = remaining.min(buf.len() / size);
        let bytes = &mut buf[..take * size];
        input.read_exact(bytes).map_err(|e| Error::io(path, e))?;
        out.extend(bytes.chunks_exact(size).map(T::read_le));
        remaining -= take;
    }
    Ok(out)
}

/// Writes the binary dump to `path` and its manifest to the sidecar.
///
/// The dump is validated first; nothing is created if it is malformed.
pub fn write_dump(dump: &LogitDump, path: &Path) -> Result<()> {
    let violations = validate(dump);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode_header(&dump.manifest))
        .map_err(|e| Error::io(path, e))?;
    match &dump.data {
        LogitData::F32(v) => encode_into(v, &mut out, path)?,
        LogitData::F64(v) => encode_into(v, &mut out, path)?,
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    write_manifest(path, &dump.manifest)
}

/// Reads a dump written by [`write_dump`]; the result is bit-identical.
pub fn read_dump(path: &Path) -> Result<LogitDump> {
    let mut reader = DumpReader::open(path)?;
    let count = reader.manifest.entries().expect("checked in open") as usize;
    reader
        .file
        .seek(SeekFrom::Start(HEADER_LEN))
        .map_err(|e| Error::io(path, e))?;
    let data = match reader.manifest.dtype {
        Dtype::F32 => LogitData::F32(decode_from(&mut reader.file, count, path)?),
        Dtype::F64 => LogitData::F64(decode_from(&mut reader.file, count, path)?),
    };
    Ok(LogitDump::new_unchecked(reader.manifest, data))
}

/// Layer-at-a-time access to a dump on disk, for dumps too large to load.
#[derive(Debug)]
pub struct DumpReader {
    path: PathBuf,
    manifest: DumpManifest,
    file: BufReader<File>,
}

impl DumpReader {
    /// Opens `path`, checking header, payload length and manifest agreement.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut file = BufReader::with_capacity(IO_CHUNK, file);
        let mut head = [0u8; HEADER_LEN as usize];
        if file_len < HEADER_LEN {
            let mut magic = [0u8; 4];
            let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
            if n < 4 || magic != MAGIC {
                return Err(Error::BadMagic {
                    path: path.into(),
                    found: magic,
                });
            }
            return Err(Error::LengthMismatch {
                path: path.into(),
                expected: HEADER_LEN,
                actual: file_len,
            });
        }
        file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        let header = decode_header(path, &head)?;
        let expected = header.entries() * header.dtype.size() as u64;
        let actual = file_len - HEADER_LEN;
        if actual != expected {
            return Err(Error::LengthMismatch {
                path: path.into(),
                expected,
                actual,
            });
        }
        let manifest = read_manifest(path)?;
        let checks: [(&'static str, String, String); 4] = [
            (
                "num_layers",
                manifest.num_layers.to_string(),
                header.layers.to_string(),
            ),
            (
                "num_tokens",
                manifest.num_tokens.to_string(),
                header.tokens.to_string(),
            ),
            (
                "vocab_size",
                manifest.vocab_size.to_string(),
                header.vocab.to_string(),
            ),
            ("dtype", manifest.dtype.to_string(), header.dtype.to_string()),
        ];
        for (field, m, h) in checks {
            if m != h {
                return Err(Error::DimensionMismatch {
                    path: path.into(),
                    field,
                    manifest: m,
                    header: h,
                });
            }
        }
        Ok(DumpReader {
            path: path.into(),
            manifest,
            file,
        })
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Loads one layer's `tokens × vocab` logits.
    pub fn read_layer(&mut self, layer: usize) -> Result<LogitData> {
        let m = &self.manifest;
        if layer >= m.num_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: m.num_layers,
            });
        }
        let count = m.num_tokens * m.vocab_size;
        let offset = HEADER_LEN + (layer * count * m.dtype.size()) as u64;
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(match m.dtype {
            Dtype::F32 => LogitData::F32(decode_from(&mut self.file, count, &self.path)?),
            Dtype::F64 => LogitData::F64(decode_from(&mut self.file, count, &self.path)?),
        })
    }
}

/// Writes a dump one layer at a time.
#[derive(Debug)]
pub struct DumpWriter {
    path: PathBuf,
    manifest: DumpManifest,
    out: BufWriter<File>,
    written: usize,
}

impl DumpWriter {
    pub fn create(path: &Path, manifest: DumpManifest) -> Result<Self> {
        let violations = manifest.violations();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::with_capacity(IO_CHUNK, file);
        out.write_all(&encode_header(&manifest))
            .map_err(|e| Error::io(path, e))?;
        Ok(DumpWriter {
            path: path.into(),
            manifest,
            out,
            written: 0,
        })
    }

    /// Appends the next layer; its dtype and length must match the manifest.
    pub fn write_layer<T: Logit>(&mut self, values: &[T]) -> Result<()> {
        let m = &self.manifest;
        if T::DTYPE != m.dtype {
            return Err(Error::Invalid(format!(
                "layer dtype {} does not match manifest dtype {}",
                T::DTYPE,
                m.dtype
            )));
        }
        if self.written >= m.num_layers {
            return Err(Error::LayerOutOfRange {
                layer: self.written,
                layers: m.num_layers,
            });
        }
        let expected = m.num_tokens * m.vocab_size;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(values.len(), expected));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "layer {} entry {i} is {:?}",
                self.written, values[i]
            )));
        }
        encode_into(values, &mut self.out, &self.path)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes the payload and writes the sidecar manifest.
    pub fn finish(mut self) -> Result<()> {
        if self.written != self.manifest.num_layers {
            return Err(Error::Invalid(format!(
                "wrote {} of {} layers",
                self.written, self.manifest.num_layers
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        write_manifest(&self.path, &self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(l: usize, n: usize, v: usize, dtype: Dtype) -> LogitDump {
        let count = l * n * v;
        let manifest = DumpManifest::synthetic(l, n, v, dtype);
        let data = match dtype {
            Dtype::F32 => LogitData::F32((0..count).map(|i| i as f32 * 0.25 - 3.0).collect()),
            Dtype::F64 => LogitData::F64((0..count).map(|i| (i as f64).sin() * 7.0).collect()),
        };
        LogitDump::new(manifest, data).unwrap()
    }

    #[test]
    fn one_by_one_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        let dump = LogitDump::new(
            DumpManifest::synthetic(1, 1, 2, Dtype::F32),
            LogitData::F32(vec![0.0, 0.0]),
        )
        .unwrap();
        write_dump(&dump, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_LEN + 8);
        assert_eq!(read_dump(&path).unwrap(), dump);
        assert!(sidecar_path(&path).exists());
        assert_eq!(
            sidecar_path(&path).file_name().unwrap(),
            "d.manifest.json"
        );
    }

    #[test]
    fn payload_length_2x3x4_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(2, 3, 4, Dtype::F32), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() - HEADER_LEN, 96);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(2, 3, 4, Dtype::F64), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CLD1");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
        assert_eq!(&bytes[8..20], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        let first = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(first, 0.0);
    }

    #[test]
    fn nan_rejected_before_any_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        let dump = LogitDump::new_unchecked(
            DumpManifest::synthetic(1, 1, 2, Dtype::F32),
            LogitData::F32(vec![0.0, f32::NAN]),
        );
        assert!(matches!(write_dump(&dump, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
        assert!(!sidecar_path(&path).exists());
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(1, 2, 3, Dtype::F32), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, bytes).unwrap();
        let err = read_dump(&path).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"XXXX"));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(1, 2, 3, Dtype::F32), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_dump(&path).unwrap_err(),
            Error::VersionMismatch { found: 2, .. }
        ));
    }

    #[test]
    fn truncated_payload_names_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(2, 3, 4, Dtype::F32), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_dump(&path).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                expected: 96,
                actual: 91,
                ..
            }
        ));
        let msg = err.to_string();
        assert!(msg.contains("96") && msg.contains("91"), "{msg}");
    }

    #[test]
    fn manifest_header_disagreement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        write_dump(&small(2, 3, 4, Dtype::F32), &path).unwrap();
        let mut m = read_manifest(&path).unwrap();
        m.num_tokens = 4;
        m.vocab_size = 3;
        write_manifest(&path, &m).unwrap();
        assert!(matches!(
            read_dump(&path).unwrap_err(),
            Error::DimensionMismatch {
                field: "num_tokens",
                ..
            }
        ));
    }

    #[test]
    fn oversized_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cld");
        let mut bytes = b"CLD1".to_vec();
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        for d in [1u32 << 20, 1 << 20, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dump(&path).unwrap_err(), Error::Manifest { .. }));
    }

    #[test]
    fn validate_reports_each_violation() {
        assert!(validate(&small(2, 3, 4, Dtype::F64)).is_empty());

        let mut m = DumpManifest::synthetic(1, 1, 2, Dtype::F64);
        m.variant = Variant::Shuffled;
        let d = LogitDump::new_unchecked(m, LogitData::F64(vec![0.0; 2]));
        let v = validate(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "shuffle_seed");

        let d = LogitDump::new_unchecked(
            DumpManifest::synthetic(1, 1, 1, Dtype::F64),
            LogitData::F64(vec![0.0]),
        );
        let v = validate(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "vocab_size");
    }

    #[test]
    fn manifest_json_has_exactly_the_fields() {
        let m = DumpManifest::synthetic(1, 2, 3, Dtype::F32);
        let value = serde_json::to_value(&m).unwrap();
        let mut keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "beta",
                "checkpoint_step",
                "dtype",
                "format_version",
                "group_label",
                "lens",
                "model_name",
                "num_layers",
                "num_tokens",
                "prompt_id",
                "shuffle_seed",
                "variant",
                "vocab_size"
            ]
        );
        assert_eq!(value["variant"], "synthetic");
        assert_eq!(value["dtype"], "f32");
        assert!(value["shuffle_seed"].is_null());
    }

    #[test]
    fn manifest_tolerates_extra_keys() {
        let text = r#"{"format_version":1,"model_name":"gpt2","prompt_id":"3218",
            "variant":"shuffled","shuffle_seed":18446744073709551615,"num_layers":1,
            "num_tokens":2,"vocab_size":3,"dtype":"f32","beta":1.0,"lens":"tuned-lens",
            "checkpoint_step":null,"group_label":"Pile-CC","permutation":[1,0]}"#;
        let m: DumpManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.shuffle_seed, Some(u64::MAX));
        assert!(m.violations().is_empty());
    }

    #[test]
    fn streaming_writer_matches_write_dump() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.cld");
        let b = dir.path().join("b.cld");
        let dump = small(3, 2, 5, Dtype::F32);
        write_dump(&dump, &a).unwrap();
        let mut w = DumpWriter::create(&b, dump.manifest().clone()).unwrap();
        let LogitData::F32(v) = dump.data() else { unreachable!() };
        for layer in v.chunks(10) {
            w.write_layer(layer).unwrap();
        }
        w.finish().unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let mut r = DumpReader::open(&b).unwrap();
        assert_eq!(r.read_layer(1).unwrap(), LogitData::F32(v[10..20].to_vec()));
    }

    #[test]
    fn validate_file_reports_non_finite_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.cld");
        let dump = LogitDump::from_rows(&[vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]]).unwrap();
        write_dump(&dump, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = HEADER_LEN as usize + 16;
        bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let v = validate_file(&path).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("flat index 2"), "{}", v[0]);

        let good = dir.path().join("good.cld");
        write_dump(&small(2, 3, 4, Dtype::F32), &good).unwrap();
        assert!(validate_file(&good).unwrap().is_empty());
    }
}
