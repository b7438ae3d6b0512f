//! Experiment harness: per-dump analysis, aggregation across dumps, group
//! comparison, and plot-ready long-form tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cumulant::CumulantProfile;
use crate::layer::{analyze_layer, LayerParams};
use crate::prob::EntropyReport;
use crate::store::{DumpManifest, DumpReader, LayerLogits, LogitData, LogitDump};
use crate::{Error, Result, DEFAULT_MAX_ORDER};

pub const RELATIVE_DEPTH_CONVENTION: &str =
    "layer_index / (L - 1) over the dumped layers (0 when L = 1); embeddings are not counted unless dumped";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyzeOptions {
    pub max_order: usize,
    /// Overrides the manifest's inverse temperature.
    pub beta: Option<f64>,
    pub keep_per_token: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            max_order: DEFAULT_MAX_ORDER,
            beta: None,
            keep_per_token: false,
        }
    }
}

/// Layer index scaled to `[0, 1]`.
pub fn relative_depth(layer: usize, layers: usize) -> f64 {
    if layers <= 1 {
        0.0
    } else {
        layer as f64 / (layers - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub relative_depth: f64,
    pub entropy: EntropyReport,
    pub profile: CumulantProfile,
}

/// Analysis of one dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpAnalysis {
    pub manifest: DumpManifest,
    pub beta: f64,
    pub layers: Vec<LayerReport>,
}

fn layer_params(m: &DumpManifest, layer: usize, beta: f64, opts: &AnalyzeOptions) -> LayerParams {
    LayerParams {
        layer,
        tokens: m.num_tokens,
        vocab: m.vocab_size,
        beta,
        max_order: opts.max_order,
        keep_per_token: opts.keep_per_token,
    }
}

fn layer_report(
    m: &DumpManifest,
    layer: usize,
    logits: LayerLogits<'_>,
    beta: f64,
    opts: &AnalyzeOptions,
) -> Result<LayerReport> {
    let stats = analyze_layer(logits, &layer_params(m, layer, beta, opts))?;
    Ok(LayerReport {
        layer,
        relative_depth: relative_depth(layer, m.num_layers),
        entropy: stats.entropy,
        profile: stats.profile,
    })
}

/// Entropy decomposition and cumulant profile for every layer of a dump.
pub fn analyze(dump: &LogitDump, opts: &AnalyzeOptions) -> Result<DumpAnalysis> {
    let violations = crate::store::validate(dump);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let m = dump.manifest();
    let beta = opts.beta.unwrap_or(m.beta);
    let layers = (0..dump.layers())
        .map(|l| layer_report(m, l, dump.layer(l)?, beta, opts))
        .collect::<Result<_>>()?;
    Ok(DumpAnalysis {
        manifest: m.clone(),
        beta,
        layers,
    })
}

/// [`analyze`] on a file, holding at most two layers in memory. The next
/// layer is read on a background thread while the current one is analyzed.
pub fn analyze_file(path: &Path, opts: &AnalyzeOptions) -> Result<DumpAnalysis> {
    let mut reader = DumpReader::open(path)?;
    let m = reader.manifest().clone();
    let violations = m.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let beta = opts.beta.unwrap_or(m.beta);
    let layers = m.num_layers;
    let (tx, rx) = mpsc::sync_channel::<Result<LogitData>>(1);
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for l in 0..layers {
                let layer = reader.read_layer(l);
                let failed = layer.is_err();
                if tx.send(layer).is_err() || failed {
                    break;
                }
            }
        });
        let mut reports = Vec::with_capacity(layers);
        for l in 0..layers {
            let data = rx
                .recv()
                .map_err(|_| Error::Invalid("layer reader stopped early".into()))??;
            let logits = match &data {
                LogitData::F32(v) => LayerLogits::F32(v),
                LogitData::F64(v) => LayerLogits::F64(v),
            };
            reports.push(layer_report(&m, l, logits, beta, opts)?);
        }
        Ok(DumpAnalysis {
            manifest: m.clone(),
            beta,
            layers: reports,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    MeanEntropy,
    CenterEntropy,
    MeanKl,
    KappaRaw,
    KappaNormalized,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::MeanEntropy => "mean_entropy",
            Statistic::CenterEntropy => "center_entropy",
            Statistic::MeanKl => "mean_kl",
            Statistic::KappaRaw => "kappa_raw",
            Statistic::KappaNormalized => "kappa_normalized",
        }
    }
}

/// One `(statistic, order, value)` entry of a layer, in output order.
fn layer_values(r: &LayerReport) -> Vec<(Statistic, Option<usize>, f64)> {
    let mut out = vec![
        (Statistic::MeanEntropy, None, r.entropy.mean_entropy),
        (Statistic::CenterEntropy, None, r.entropy.center_entropy),
        (Statistic::MeanKl, None, r.entropy.mean_kl),
    ];
    for (i, k) in r.profile.raw.iter().enumerate() {
        out.push((Statistic::KappaRaw, Some(i + 2), *k));
    }
    for (i, k) in r.profile.normalized.iter().enumerate() {
        out.push((Statistic::KappaNormalized, Some(i + 2), *k));
    }
    out
}

fn order_cell(order: Option<usize>) -> String {
    order.map(|o| o.to_string()).unwrap_or_default()
}

impl DumpAnalysis {
    /// Long-form CSV: `layer,relative_depth,statistic,order,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,relative_depth,statistic,order,value\n");
        for r in &self.layers {
            for (stat, order, value) in layer_values(r) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.layer,
                    r.relative_depth,
                    stat.as_str(),
                    order_cell(order),
                    value
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "meta": {
                "relative_depth_convention": RELATIVE_DEPTH_CONVENTION,
                "beta": self.beta,
                "manifest": self.manifest,
            },
            "layers": self.layers,
        });
        serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn stat(&self) -> Stat {
        let std = if self.count > 1 {
            (self.m2.max(0.0) / (self.count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat {
            mean: self.mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateLayer {
    pub layer: usize,
    pub relative_depth: f64,
    pub mean_entropy: Stat,
    pub center_entropy: Stat,
    pub mean_kl: Stat,
    /// Orders `2..=max_order`.
    pub kappa_normalized: Vec<Stat>,
}

impl AggregateLayer {
    fn values(&self) -> Vec<(Statistic, Option<usize>, Stat)> {
        let mut out = vec![
            (Statistic::MeanEntropy, None, self.mean_entropy),
            (Statistic::CenterEntropy, None, self.center_entropy),
            (Statistic::MeanKl, None, self.mean_kl),
        ];
        for (i, s) in self.kappa_normalized.iter().enumerate() {
            out.push((Statistic::KappaNormalized, Some(i + 2), *s));
        }
        out
    }
}

/// Elementwise mean and spread over several dumps of one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub group_label: String,
    pub dump_count: usize,
    pub max_order: usize,
    pub layers: Vec<AggregateLayer>,
}

/// Aggregates analyses sharing layer count and maximum order.
pub fn aggregate(reports: &[Vec<LayerReport>], group_label: &str) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::Empty("aggregate of zero dumps"))?;
    let layers = first.len();
    if layers == 0 {
        return Err(Error::Empty("dump with zero layers"));
    }
    let max_order = first[0].profile.max_order;
    for r in reports {
        if r.len() != layers {
            return Err(Error::Invalid(format!(
                "cannot aggregate dumps with {} and {layers} layers",
                r.len()
            )));
        }
        if let Some(bad) = r.iter().find(|l| l.profile.max_order != max_order) {
            return Err(Error::Invalid(format!(
                "cannot aggregate max orders {} and {max_order}",
                bad.profile.max_order
            )));
        }
    }
    let orders = max_order - 1;
    let per_layer = (0..layers)
        .map(|l| {
            let mut h = Running::default();
            let mut c = Running::default();
            let mut kl = Running::default();
            let mut kappa = vec![Running::default(); orders];
            for r in reports {
                let lr = &r[l];
                h.push(lr.entropy.mean_entropy);
                c.push(lr.entropy.center_entropy);
                kl.push(lr.entropy.mean_kl);
                for (acc, v) in kappa.iter_mut().zip(&lr.profile.normalized) {
                    acc.push(*v);
                }
            }
            AggregateLayer {
                layer: l,
                relative_depth: relative_depth(l, layers),
                mean_entropy: h.stat(),
                center_entropy: c.stat(),
                mean_kl: kl.stat(),
                kappa_normalized: kappa.iter().map(Running::stat).collect(),
            }
        })
        .collect();
    Ok(AggregateReport {
        group_label: group_label.to_string(),
        dump_count: reports.len(),
        max_order,
        layers: per_layer,
    })
}

/// CSV of one or more aggregates, sorted by group, layer, then order.
pub fn aggregates_to_csv(reports: &[AggregateReport]) -> String {
    let mut sorted: Vec<&AggregateReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.group_label.cmp(&b.group_label));
    let mut out = String::from("group,layer,relative_depth,statistic,order,mean,std,count\n");
    for r in sorted {
        for l in &r.layers {
            for (stat, order, s) in l.values() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&r.group_label),
                    l.layer,
                    l.relative_depth,
                    stat.as_str(),
                    order_cell(order),
                    s.mean,
                    s.std,
                    r.dump_count
                );
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub layer: usize,
    pub relative_depth: f64,
    pub statistic: Statistic,
    pub order: Option<usize>,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a − mean_b`.
    pub difference: f64,
    pub pooled_std: f64,
    /// Sign of the difference: 1, -1 or 0.
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub group_a: String,
    pub group_b: String,
    pub rows: Vec<CompareRow>,
}

fn pooled_std(a: Stat, na: usize, b: Stat, nb: usize) -> f64 {
    if na + nb <= 2 {
        return 0.0;
    }
    let num = (na as f64 - 1.0) * a.std * a.std + (nb as f64 - 1.0) * b.std * b.std;
    (num / (na + nb - 2) as f64).sqrt()
}

/// Per-layer, per-order differences `a − b` with pooled standard deviations.
pub fn compare_groups(a: &AggregateReport, b: &AggregateReport) -> Result<Comparison> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Invalid(format!(
            "groups have {} and {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    if a.max_order != b.max_order {
        return Err(Error::Invalid(format!(
            "groups have max order {} and {}",
            a.max_order, b.max_order
        )));
    }
    let mut rows = Vec::new();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for ((stat, order, sa), (_, _, sb)) in la.values().into_iter().zip(lb.values()) {
            let difference = sa.mean - sb.mean;
            rows.push(CompareRow {
                layer: la.layer,
                relative_depth: la.relative_depth,
                statistic: stat,
                order,
                mean_a: sa.mean,
                mean_b: sb.mean,
                difference,
                pooled_std: pooled_std(sa, a.dump_count, sb, b.dump_count),
                sign: if difference > 0.0 {
                    1
                } else if difference < 0.0 {
                    -1
                } else {
                    0
                },
            });
        }
    }
    Ok(Comparison {
        group_a: a.group_label.clone(),
        group_b: b.group_label.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,relative_depth,statistic,order,mean_a,mean_b,difference,pooled_std,sign\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.layer,
                r.relative_depth,
                r.statistic.as_str(),
                order_cell(r.order),
                r.mean_a,
                r.mean_b,
                r.difference,
                r.pooled_std,
                r.sign
            );
        }
        out
    }

    /// Difference for one statistic, layer and order.
    pub fn difference(&self, layer: usize, statistic: Statistic, order: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.statistic == statistic && r.order == order)
            .map(|r| r.difference)
    }
}

/// One dump listed in a sweep index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative paths are resolved against the index file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub group_label: Option<String>,
    #[serde(default)]
    pub checkpoint_step: Option<i64>,
}

/// Sweep index written by the extractor: produced dumps and failed jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub dumps: Vec<IndexEntry>,
    #[serde(default)]
    pub failures: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Label,
    CheckpointStep,
}

impl DumpIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index: DumpIndex = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut index.dumps {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
        }
        Ok(index)
    }
}

/// Key a dump is grouped under; entry fields win over the manifest's.
fn group_key(entry: &IndexEntry, manifest: &DumpManifest, by: GroupBy) -> String {
    match by {
        GroupBy::Label => entry
            .group_label
            .clone()
            .or_else(|| manifest.group_label.clone())
            .unwrap_or_else(|| "ungrouped".into()),
        GroupBy::CheckpointStep => entry
            .checkpoint_step
            .or(manifest.checkpoint_step)
            .map(|s| s.to_string())
            .unwrap_or_else(|| "unknown".into()),
    }
}

/// Analyzes every dump (in parallel across files), returning results in
/// input order.
pub fn analyze_files(paths: &[PathBuf], opts: &AnalyzeOptions) -> Result<Vec<DumpAnalysis>> {
    paths.par_iter().map(|p| analyze_file(p, opts)).collect()
}

/// Analyzes and aggregates every dump of an index, one report per group,
/// sorted by group key.
pub fn aggregate_index(
    index: &DumpIndex,
    by: GroupBy,
    opts: &AnalyzeOptions,
) -> Result<Vec<AggregateReport>> {
    let paths: Vec<PathBuf> = index.dumps.iter().map(|e| e.path.clone()).collect();
    let analyses = analyze_files(&paths, opts)?;
    let mut groups: BTreeMap<String, Vec<Vec<LayerReport>>> = BTreeMap::new();
    for (entry, analysis) in index.dumps.iter().zip(analyses) {
        groups
            .entry(group_key(entry, &analysis.manifest, by))
            .or_default()
            .push(analysis.layers);
    }
    groups
        .iter()
        .map(|(label, reports)| aggregate(reports, label))
        .collect()
}
