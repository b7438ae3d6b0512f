//! Synthetic logit dumps with known statistical structure.
//!
//! Every logit is a pure function of `(seed, layer, token, vocab index)`, so
//! generation is reproducible regardless of worker count or write order.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{standard_normal, standard_normals, substream_seed};
use crate::store::{Dtype, DumpManifest, DumpWriter, LogitData, LogitDump, Logit};
use crate::{Error, Result};

const BACKGROUND_STREAM: u64 = u64::MAX;
const DIRECTION_STREAM: u64 = u64::MAX - 1;
const COEFFICIENT_STREAM: u64 = u64::MAX - 2;
const ROWS_PER_TASK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SynthMode {
    /// Every token of a layer has the same logits.
    Constant,
    /// Independent `N(0, sigma²)` logits.
    IidGaussian { sigma: f64 },
    /// Unit Gaussian background per token (shared by all layers) plus
    /// `(strength + ramp · layer) · z_t · d`, where `d` is one Gaussian
    /// vocabulary direction and `z_t` a Gaussian per-token coefficient.
    SharedDirection { strength: f64, ramp: f64 },
    /// Vocabulary 2, tokens alternating between logits `(0, d)` and `(d, 0)`.
    /// The center is uniform, and with `β = ln(p / (1 − p)) / d` every token's
    /// deviation is `d · Bernoulli(p)` up to a constant.
    TwoPoint { p: f64, d: f64 },
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthMode::Constant => write!(f, "constant"),
            SynthMode::IidGaussian { sigma } => write!(f, "iid_gaussian(sigma={sigma})"),
            SynthMode::SharedDirection { strength, ramp } => {
                write!(f, "shared_direction(strength={strength},ramp={ramp})")
            }
            SynthMode::TwoPoint { p, d } => write!(f, "two_point(p={p},d={d})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub mode: SynthMode,
    pub seed: u64,
    pub dtype: Dtype,
}

impl SynthSpec {
    pub fn new(layers: usize, tokens: usize, vocab: usize, mode: SynthMode, seed: u64) -> Self {
        SynthSpec {
            layers,
            tokens,
            vocab,
            mode,
            seed,
            dtype: Dtype::F64,
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    /// Inverse temperature recorded in the generated manifest.
    pub fn beta(&self) -> f64 {
        match self.mode {
            SynthMode::TwoPoint { p, d } => (p / (1.0 - p)).ln() / d,
            _ => 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers == 0 || self.tokens == 0 || self.vocab == 0 {
            problems.push("dimensions must be positive".to_string());
        }
        match self.mode {
            SynthMode::Constant => {}
            SynthMode::IidGaussian { sigma } => {
                if !sigma.is_finite() {
                    problems.push(format!("sigma must be finite, got {sigma}"));
                }
            }
            SynthMode::SharedDirection { strength, ramp } => {
                if !(strength.is_finite() && ramp.is_finite()) {
                    problems.push("strength and ramp must be finite".to_string());
                }
            }
            SynthMode::TwoPoint { p, d } => {
                if !(p > 0.0 && p < 1.0) || p == 0.5 {
                    problems.push(format!("p must be in (0, 1) and != 0.5, got {p}"));
                }
                if !d.is_finite() || d == 0.0 {
                    problems.push(format!("d must be finite and nonzero, got {d}"));
                } else if (p - 0.5) * d <= 0.0 {
                    problems.push("d must have the sign of p - 0.5".to_string());
                }
                if self.vocab != 2 {
                    problems.push(format!("two_point needs vocab 2, got {}", self.vocab));
                }
                if self.tokens % 2 != 0 {
                    problems.push(format!(
                        "two_point needs an even token count, got {}",
                        self.tokens
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "bad synth spec: {}",
                problems.join("; ")
            )))
        }
    }

    fn manifest(&self) -> DumpManifest {
        let mut m = DumpManifest::synthetic(self.layers, self.tokens, self.vocab, self.dtype);
        m.prompt_id = format!("{}:seed={}", self.mode, self.seed);
        m.beta = self.beta();
        m
    }

    /// Fills token rows `first_token..` of `layer` into `out`.
    fn fill_rows<T: Logit>(&self, layer: usize, first_token: usize, out: &mut [T]) {
        let v = self.vocab;
        let seed = self.seed;
        match self.mode {
            SynthMode::Constant => {
                let s = substream_seed(seed, layer as u64);
                let row: Vec<T> = (0..v)
                    .map(|j| T::from_f64(standard_normal(s, j as u64)))
                    .collect();
                for chunk in out.chunks_exact_mut(v) {
                    chunk.copy_from_slice(&row);
                }
            }
            SynthMode::IidGaussian { sigma } => {
                let s = substream_seed(seed, layer as u64);
                let mut row = vec![0.0; v];
                for (i, chunk) in out.chunks_exact_mut(v).enumerate() {
                    standard_normals(s, ((first_token + i) * v) as u64, &mut row);
                    for (o, g) in chunk.iter_mut().zip(&row) {
                        *o = T::from_f64(sigma * g);
                    }
                }
            }
            SynthMode::SharedDirection { strength, ramp } => {
                let bg = substream_seed(seed, BACKGROUND_STREAM);
                let dir = substream_seed(seed, DIRECTION_STREAM);
                let coef = substream_seed(seed, COEFFICIENT_STREAM);
                let a = strength + ramp * layer as f64;
                let mut direction = vec![0.0; v];
                standard_normals(dir, 0, &mut direction);
                let mut row = vec![0.0; v];
                for (i, chunk) in out.chunks_exact_mut(v).enumerate() {
                    let t = first_token + i;
                    let z = a * standard_normal(coef, t as u64);
                    standard_normals(bg, (t * v) as u64, &mut row);
                    for ((o, g), d) in chunk.iter_mut().zip(&row).zip(&direction) {
                        *o = T::from_f64(g + z * d);
                    }
                }
            }
            SynthMode::TwoPoint { d, .. } => {
                for (i, chunk) in out.chunks_exact_mut(2).enumerate() {
                    let t = first_token + i;
                    let (a, b) = if t % 2 == 0 { (0.0, d) } else { (d, 0.0) };
                    chunk[0] = T::from_f64(a);
                    chunk[1] = T::from_f64(b);
                }
            }
        }
    }

    /// Fills one whole layer, splitting token rows across workers.
    fn fill_layer<T: Logit>(&self, layer: usize, out: &mut [T]) {
        let rows = ROWS_PER_TASK;
        out.par_chunks_mut(rows * self.vocab)
            .enumerate()
            .for_each(|(block, chunk)| self.fill_rows(layer, block * rows, chunk));
    }

    fn fill_all<T: Logit + Default>(&self) -> Vec<T> {
        let stride = self.tokens * self.vocab;
        let mut data = vec![T::default(); self.layers * stride];
        for (l, chunk) in data.chunks_mut(stride).enumerate() {
            self.fill_layer(l, chunk);
        }
        data
    }
}

/// Generates the dump described by `spec` in memory.
pub fn generate(spec: &SynthSpec) -> Result<LogitDump> {
    spec.check()?;
    let manifest = spec.manifest();
    let violations = manifest.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let data = match spec.dtype {
        Dtype::F32 => LogitData::F32(spec.fill_all()),
        Dtype::F64 => LogitData::F64(spec.fill_all()),
    };
    LogitDump::new(manifest, data)
}

/// Generates straight to disk one layer at a time, for dumps larger than memory.
pub fn write_synthetic(spec: &SynthSpec, path: &Path) -> Result<()> {
    spec.check()?;
    let mut writer = DumpWriter::create(path, spec.manifest())?;
    let stride = spec.tokens * spec.vocab;
    match spec.dtype {
        Dtype::F32 => write_layers::<f32>(spec, &mut writer, stride)?,
        Dtype::F64 => write_layers::<f64>(spec, &mut writer, stride)?,
    }
    writer.finish()
}

fn write_layers<T: Logit + Default>(
    spec: &SynthSpec,
    writer: &mut DumpWriter,
    stride: usize,
) -> Result<()> {
    let mut buf = vec![T::default(); stride];
    for layer in 0..spec.layers {
        spec.fill_layer(layer, &mut buf);
        writer.write_layer(&buf)?;
    }
    Ok(())
}
