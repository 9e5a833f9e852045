//! Staged experiment runs with resumable on-disk artifacts.
//!
//! Stages always read their inputs from the output directory, so any suffix
//! of the pipeline can be rerun against artifacts left by an earlier run.
//! Every CSV starts with a `# config_sha256=<hex>` line identifying the
//! configuration that produced it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackError, AttackMethod, AttackResult};
use crate::corruption::{NoiseKind, NoiseSpec, LEVELS};
use crate::data::{self, DataError, Dataset};
use crate::hyperparams::{HpMask, HyperParams};
use crate::io::write_atomic;
use crate::network::{BaselineNet, BaselineVariant, FixedUnroll, NetworkError, PcNet};
use crate::pcoder::ErrorGradient;
use crate::training::{self, Regime, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("stage {stage} needs {path}, which does not exist; run the stage that produces it first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("relative hyper-parameters for mask {0} need a clean-condition run")]
    MissingClean(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainFf,
    TrainFb,
    TrainHp,
    Ablate,
    Eval,
    Attack,
    Report,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Self::TrainFf => "train-ff",
            Self::TrainFb => "train-fb",
            Self::TrainHp => "train-hp",
            Self::Ablate => "ablate",
            Self::Eval => "eval",
            Self::Attack => "attack",
            Self::Report => "report",
        }
    }
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::TrainFf, Stage::TrainFb, Stage::TrainHp, Stage::Eval, Stage::Attack, Stage::Report]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the CIFAR-10 binary batch files.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Leading images of the training files used for training.
    pub train_size: usize,
    /// Leading images of the test file used for validation and evaluation.
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, train_size: 10_000, val_size: 2_000 }
    }
}

/// A noise kind and level; the seed is the experiment's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub kind: NoiseKind,
    pub level: u8,
}

impl Condition {
    pub const CLEAN: Self = Self { kind: NoiseKind::Clean, level: 0 };

    pub fn noise(&self, seed: u64) -> NoiseSpec {
        NoiseSpec { kind: self.kind, level: self.level, seed }
    }

    pub fn label(&self) -> String {
        if self.level == 0 {
            "clean".into()
        } else {
            format!("{}_{}", self.kind.label(), self.level)
        }
    }

    fn is_clean(&self) -> bool {
        self.kind == NoiseKind::Clean || self.level == 0
    }
}

/// Clean plus Gaussian and salt-and-pepper at every level.
pub fn full_grid() -> Vec<Condition> {
    let mut grid = vec![Condition::CLEAN];
    for kind in [NoiseKind::Gaussian, NoiseKind::SaltPepper] {
        grid.extend((1..=LEVELS).map(|level| Condition { kind, level }));
    }
    grid
}

/// A fixed coefficient configuration: one set shared by every PCoder, or one
/// per PCoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedHps {
    pub name: String,
    pub hps: Vec<HyperParams>,
}

impl NamedHps {
    fn new(name: &str, hp: HyperParams) -> Self {
        Self { name: name.into(), hps: vec![hp] }
    }

    /// One set per PCoder.
    pub fn expand(&self, pcoders: usize) -> Vec<HyperParams> {
        if self.hps.len() == 1 {
            vec![self.hps[0]; pcoders]
        } else {
            self.hps.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub timesteps: usize,
    pub batch_size: usize,
    /// Fixed configurations evaluated under every condition.
    pub fixed: Vec<NamedHps>,
    /// Also evaluate the ablation-mask runs.
    pub include_ablation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            timesteps: 10,
            batch_size: 256,
            fixed: vec![NamedHps::new("feedforward", HyperParams::feedforward())],
            include_ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub config: AttackConfig,
    /// Number of validation images attacked; they are the first ones every
    /// configuration classifies correctly.
    pub images: usize,
    pub configurations: Vec<NamedHps>,
}

/// Feed-forward, feedback-heavy without error correction, and feed-forward
/// with error correction.
pub fn default_attack_configurations() -> Vec<NamedHps> {
    vec![
        NamedHps::new("feedforward", HyperParams::feedforward()),
        NamedHps::new("feedback", HyperParams { mu: 0.2, gamma: 0.3, beta: 0.5, alpha: 0.0 }),
        NamedHps::new("feedforward_error", HyperParams { mu: 0.0, gamma: 1.0, beta: 0.0, alpha: 0.1 }),
    ]
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { config: AttackConfig::new(AttackMethod::Bim), images: 100, configurations: default_attack_configurations() }
    }
}

fn default_ff() -> TrainConfig {
    TrainConfig::ff_supervised(30)
}

fn default_fb() -> TrainConfig {
    TrainConfig::fb_unsupervised(20)
}

fn default_hp() -> TrainConfig {
    TrainConfig::hp_only(5, NoiseSpec::clean(), HpMask::NONE)
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_masks() -> Vec<HpMask> {
    vec![HpMask::NONE]
}

fn default_ablation_masks() -> Vec<HpMask> {
    vec![HpMask::ZERO_BETA, HpMask::ZERO_ALPHA]
}

/// Everything a run depends on besides the input data. Stage seeds inside
/// `ff`, `fb`, `hp` and `attack` are replaced by `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    /// Feed-forward comparison networks trained alongside the PC backbone.
    #[serde(default)]
    pub baselines: Vec<BaselineVariant>,
    #[serde(default = "default_ff")]
    pub ff: TrainConfig,
    #[serde(default = "default_fb")]
    pub fb: TrainConfig,
    #[serde(default = "default_hp")]
    pub hp: TrainConfig,
    #[serde(default = "full_grid")]
    pub conditions: Vec<Condition>,
    #[serde(default = "default_masks")]
    pub masks: Vec<HpMask>,
    #[serde(default = "default_ablation_masks")]
    pub ablation_masks: Vec<HpMask>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub attack: AttackSection,
}

impl ExperimentConfig {
    /// Defaults for every field but the id.
    pub fn new(id: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "id": id })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_json(&text).map_err(|source| HarnessError::Json { path: path.into(), source })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form with `out_dir`, `data.dir` and
    /// `stages` cleared, lower-case hex. Moving a run or its inputs, or
    /// splitting it over several invocations, keeps the hash.
    pub fn hash(&self) -> String {
        let mut portable = self.clone();
        portable.out_dir = PathBuf::new();
        portable.stages.clear();
        portable.data.dir = None;
        hex(&Sha256::digest(serde_json::to_vec(&portable).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("id {:?} must be non-empty and use only [A-Za-z0-9._-]", self.id));
        }
        if self.data.train_size == 0 || self.data.val_size == 0 {
            return bad("data.train_size and data.val_size must be positive".into());
        }
        for (name, cfg, ok) in [
            ("ff", &self.ff, self.ff.regime == Regime::FfSupervised),
            ("fb", &self.fb, matches!(self.fb.regime, Regime::FbUnsupervised | Regime::FbSupervised)),
            ("hp", &self.hp, self.hp.regime == Regime::HpOnly),
        ] {
            if !ok {
                return bad(format!("{name} has regime {:?}", cfg.regime));
            }
            cfg.validate()?;
        }
        if self.conditions.is_empty() || self.masks.is_empty() {
            return bad("conditions and masks must be non-empty".into());
        }
        for c in &self.conditions {
            c.noise(self.seed).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.eval.timesteps == 0 || self.eval.batch_size == 0 {
            return bad("eval.timesteps and eval.batch_size must be positive".into());
        }
        for n in self.eval.fixed.iter().chain(&self.attack.configurations) {
            if n.hps.is_empty() {
                return bad(format!("configuration {:?} has no hyper-parameters", n.name));
            }
            for h in &n.hps {
                h.validate().map_err(|e| HarnessError::Config(format!("{}: {e}", n.name)))?;
            }
        }
        if self.attack.images == 0 {
            return bad("attack.images must be positive".into());
        }
        self.attack.config.validate()?;
        Ok(())
    }

    fn stage_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, ..base.clone() }
    }

    fn eval_masks(&self) -> Vec<HpMask> {
        let mut masks = self.masks.clone();
        if self.eval.include_ablation {
            masks.extend(self.ablation_masks.iter().filter(|m| !self.masks.contains(m)));
        }
        masks
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Output file names, relative to the run directory.
pub mod artifacts {
    use super::*;

    pub const CONFIG: &str = "config.json";
    pub const FF_WEIGHTS: &str = "ff.pcw";
    pub const FF_REPORT: &str = "ff_report.json";
    pub const METRICS: &str = "metrics.csv";
    pub const RELATIVE_HP: &str = "relative_hp.csv";
    pub const ATTACK_TABLE: &str = "attack.csv";

    pub fn fb_weights(regime: Regime) -> &'static str {
        match regime {
            Regime::FbSupervised => "fb_sup.pcw",
            _ => "fb_unsup.pcw",
        }
    }

    pub fn baseline_weights(v: BaselineVariant) -> String {
        format!("baseline_{}.pcw", v.label())
    }

    pub fn baseline_report(v: BaselineVariant) -> String {
        format!("baseline_{}_report.json", v.label())
    }

    pub fn hp_report(mask: HpMask, c: &Condition) -> String {
        format!("hp_{}_{}.json", mask.label(), c.label())
    }

    pub fn attack_report(name: &str) -> String {
        format!("attack_{name}.json")
    }

    pub fn accuracy_chart(mask: HpMask) -> String {
        format!("accuracy_{}.svg", mask.label())
    }

    pub fn relative_hp_chart(mask: HpMask, kind: NoiseKind) -> String {
        format!("relative_hp_{}_{}.svg", mask.label(), kind.label())
    }

    /// Curves of a stage report: `x.json` → `x_curves.csv`.
    pub fn curves(report: &str) -> String {
        format!("{}_curves.csv", report.trim_end_matches(".json").trim_end_matches("_report"))
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub experiment: String,
    /// `hp_only`, `fixed_<name>` or `baseline_<variant>`.
    pub regime: String,
    pub kind: NoiseKind,
    pub level: u8,
    /// Mask label for hp runs, empty otherwise.
    pub mask: String,
    pub restart: usize,
    pub timestep: usize,
    pub accuracy: f64,
    /// Mean prediction error per PCoder; empty for baselines.
    pub errors: Vec<f64>,
    /// Coefficients per PCoder; empty for baselines.
    pub hps: Vec<HyperParams>,
}

/// Best-restart coefficients of one hp run.
#[derive(Debug, Clone, PartialEq)]
pub struct HpSummary {
    pub mask: HpMask,
    pub condition: Condition,
    pub hps: Vec<HyperParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeHpRow {
    pub mask: HpMask,
    pub kind: NoiseKind,
    pub level: u8,
    pub pcoder: usize,
    pub hp: &'static str,
    pub value: f64,
    /// `value` over the clean-condition value; NaN when that is zero.
    pub relative: f64,
}

pub const HP_NAMES: [&str; 4] = ["mu", "gamma", "beta", "alpha"];

/// Each coefficient divided by its clean-condition value, for every noisy
/// kind present and every level 0..=3 (level 0 is the clean run itself).
pub fn relative_hp_table(summaries: &[HpSummary]) -> Result<Vec<RelativeHpRow>> {
    let masks: BTreeSet<(bool, bool)> = summaries.iter().map(|s| (s.mask.zero_beta, s.mask.zero_alpha)).collect();
    let mut rows = Vec::new();
    for (zero_beta, zero_alpha) in masks {
        let mask = HpMask { zero_beta, zero_alpha };
        let of_mask: Vec<&HpSummary> = summaries.iter().filter(|s| s.mask == mask).collect();
        let clean = of_mask.iter().find(|s| s.condition.is_clean()).ok_or(HarnessError::MissingClean(mask.label()))?;
        let mut kinds: Vec<NoiseKind> = Vec::new();
        for s in &of_mask {
            if !s.condition.is_clean() && !kinds.contains(&s.condition.kind) {
                kinds.push(s.condition.kind);
            }
        }
        for kind in kinds {
            for level in 0..=LEVELS {
                let cell = if level == 0 {
                    Some(*clean)
                } else {
                    of_mask.iter().copied().find(|s| s.condition == Condition { kind, level })
                };
                let Some(cell) = cell else { continue };
                for (p, (hp, base)) in cell.hps.iter().zip(&clean.hps).enumerate() {
                    for ((name, v), b) in HP_NAMES.iter().zip(hp.as_array()).zip(base.as_array()) {
                        let relative = if b == 0.0 { f64::NAN } else { v / b };
                        rows.push(RelativeHpRow { mask, kind, level, pcoder: p + 1, hp: name, value: v, relative });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Writes `relative_hp.csv` and one chart per (mask, kind) into `dir`;
/// returns the written paths.
pub fn emit_relative_hp_table(summaries: &[HpSummary], dir: &Path, config_hash: &str) -> Result<Vec<PathBuf>> {
    let rows = relative_hp_table(summaries)?;
    let mut w = csv_writer(config_hash, &["mask", "kind", "level", "pcoder", "hp", "value", "relative"])?;
    for r in &rows {
        w.write_record([
            r.mask.label().to_string(),
            r.kind.label().into(),
            r.level.to_string(),
            r.pcoder.to_string(),
            r.hp.into(),
            r.value.to_string(),
            r.relative.to_string(),
        ])?;
    }
    let mut written = vec![write_file(&dir.join(artifacts::RELATIVE_HP), &finish_csv(w)?)?];
    let mut charts: Vec<(HpMask, NoiseKind)> = Vec::new();
    for r in &rows {
        if !charts.contains(&(r.mask, r.kind)) {
            charts.push((r.mask, r.kind));
        }
    }
    for (mask, kind) in charts {
        let mut series: Vec<Series> = Vec::new();
        for r in rows.iter().filter(|r| r.mask == mask && r.kind == kind) {
            let name = format!("{} (PCoder {})", r.hp, r.pcoder);
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((f64::from(r.level), r.relative)),
                None => series.push(Series { name, points: vec![(f64::from(r.level), r.relative)] }),
            }
        }
        let title = format!("Learned hyper-parameters relative to clean ({}, {})", kind.label(), mask.label());
        let svg = line_chart(&title, "noise level", "value / clean value", &series);
        written.push(write_file(&dir.join(artifacts::relative_hp_chart(mask, kind)), svg.as_bytes())?);
    }
    Ok(written)
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A self-contained SVG line chart. Non-finite points are left out.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 70.0, 200.0, 40.0, 50.0);
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{fy:.3}</text>"#, left - 6.0, sy(fy) + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{fx:.2}</text>"#, sx(fx), top + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        xml_escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, left + pw + 16.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="12">{}</text>"#, left + pw + 34.0, xml_escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn csv_writer(config_hash: &str, header: &[&str]) -> Result<csv::Writer<Vec<u8>>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# config_sha256={config_hash}\n").as_bytes());
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(header)?;
    Ok(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    write_atomic(path, bytes).map_err(|source| HarnessError::Io { path: path.into(), source })?;
    Ok(path.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| HarnessError::Json { path: path.into(), source })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(stage: Stage, path: &Path) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(HarnessError::MissingArtifact { stage: stage.label(), path: path.into() })
        }
        Err(source) => return Err(HarnessError::Io { path: path.into(), source }),
    };
    serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.into(), source })
}

fn require(stage: Stage, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact { stage: stage.label(), path: path.into() })
    }
}

fn write_curves(dir: &Path, report_name: &str, report: &TrainReport, config_hash: &str) -> Result<PathBuf> {
    let mut w = csv_writer(config_hash, &["epoch", "split", "metric", "value"])?;
    for (epoch, split, metric, value) in report.curve_rows() {
        w.write_record([epoch.to_string(), split.into(), metric, value.to_string()])?;
    }
    write_file(&dir.join(artifacts::curves(report_name)), &finish_csv(w)?)
}

/// Files written and metrics produced by [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    pub records: Vec<MetricsRecord>,
    pub attacks: Vec<(String, AttackResult)>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    hash: String,
    data: Option<(Dataset, Dataset)>,
    summary: RunSummary,
}

impl Run<'_> {
    fn data(&mut self) -> Result<(Dataset, Dataset)> {
        if self.data.is_none() {
            self.data = Some(load_data(&self.cfg.data)?);
        }
        Ok(self.data.clone().expect("just loaded"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fresh_net(&self) -> PcNet {
        PcNet::shallow(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed))
    }

    fn load_net(&self, stage: Stage, file: &str) -> Result<PcNet> {
        let path = self.path(file);
        require(stage, &path)?;
        let mut net = self.fresh_net();
        net.load_weights(&path)?;
        Ok(net)
    }

    fn record(&mut self, path: PathBuf) {
        self.summary.artifacts.push(path);
    }

    fn save_report(&mut self, name: &str, report: &TrainReport) -> Result<()> {
        let p = write_json(&self.path(name), report)?;
        self.record(p);
        let c = write_curves(&self.dir, name, report, &self.hash)?;
        self.record(c);
        Ok(())
    }

    fn train_ff(&mut self) -> Result<()> {
        let (train, val) = self.data()?;
        let cfg = self.cfg.stage_config(&self.cfg.ff);
        let mut net = self.fresh_net();
        let report = training::train_feedforward(&mut net, &train, &val, &cfg)?;
        net.save(&self.path(artifacts::FF_WEIGHTS))?;
        self.record(self.path(artifacts::FF_WEIGHTS));
        self.save_report(artifacts::FF_REPORT, &report)?;
        for (i, &variant) in self.cfg.baselines.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(1 + i as u64);
            let mut base = BaselineNet::new(&mut rng, variant);
            let report = training::train_baseline(&mut base, &train, &val, &cfg)?;
            let path = self.path(&artifacts::baseline_weights(variant));
            base.save(&path)?;
            self.record(path);
            self.save_report(&artifacts::baseline_report(variant), &report)?;
        }
        Ok(())
    }

    fn train_fb(&mut self) -> Result<()> {
        let mut net = self.load_net(Stage::TrainFb, artifacts::FF_WEIGHTS)?;
        let (train, val) = self.data()?;
        let cfg = self.cfg.stage_config(&self.cfg.fb);
        let report = match cfg.regime {
            Regime::FbSupervised => training::train_feedback_supervised(&mut net, &train, &val, &cfg)?,
            _ => training::train_feedback_unsupervised(&mut net, &train, &val, &cfg)?,
        };
        let file = artifacts::fb_weights(cfg.regime);
        net.save(&self.path(file))?;
        self.record(self.path(file));
        self.save_report(&format!("{}_report.json", file.trim_end_matches(".pcw")), &report)
    }

    fn frozen_backbone(&self, stage: Stage) -> Result<PcNet> {
        let mut net = self.load_net(stage, artifacts::fb_weights(self.cfg.fb.regime))?;
        net.set_trainable(false, false);
        Ok(net)
    }

    fn train_hp(&mut self, stage: Stage, masks: &[HpMask]) -> Result<()> {
        let net = self.frozen_backbone(stage)?;
        let (train, val) = self.data()?;
        for &mask in masks {
            for c in &self.cfg.conditions {
                let cfg = TrainConfig { noise: c.noise(self.cfg.seed), mask, ..self.cfg.stage_config(&self.cfg.hp) };
                let report = training::train_hyperparams(&net, &train, &val, &cfg)?;
                self.save_report(&artifacts::hp_report(mask, c), &report)?;
            }
        }
        Ok(())
    }

    fn hp_reports(&self, stage: Stage) -> Result<Vec<(HpMask, Condition, TrainReport)>> {
        let mut out = Vec::new();
        for mask in self.cfg.eval_masks() {
            for c in &self.cfg.conditions {
                let report: TrainReport = read_json(stage, &self.path(&artifacts::hp_report(mask, c)))?;
                out.push((mask, *c, report));
            }
        }
        Ok(out)
    }

    fn eval(&mut self) -> Result<()> {
        let net = self.frozen_backbone(Stage::Eval)?;
        let reports = self.hp_reports(Stage::Eval)?;
        for &v in &self.cfg.baselines {
            require(Stage::Eval, &self.path(&artifacts::baseline_weights(v)))?;
        }
        let (train, val) = self.data()?;
        let (steps, batch) = (self.cfg.eval.timesteps, self.cfg.eval.batch_size);
        let id = self.cfg.id.clone();
        let mut records = Vec::new();
        let course_rows = |records: &mut Vec<MetricsRecord>, regime: String, c: &Condition, mask: String, restart, hps: &[HyperParams], tc: training::TimeCourse| {
            for (t, (acc, errs)) in tc.accuracy.iter().zip(tc.errors).enumerate() {
                records.push(MetricsRecord {
                    experiment: id.clone(),
                    regime: regime.clone(),
                    kind: c.kind,
                    level: c.level,
                    mask: mask.clone(),
                    restart,
                    timestep: t,
                    accuracy: *acc,
                    errors: errs,
                    hps: hps.to_vec(),
                });
            }
        };
        for c in &self.cfg.conditions {
            let noisy = training::corrupt_dataset(&val, &c.noise(self.cfg.seed), train.len() as u64)?;
            for (mask, _, report) in reports.iter().filter(|(_, rc, _)| rc == c) {
                for r in &report.restarts {
                    let hps = expand(&r.learned, net.len());
                    let tc = training::evaluate_unrolled(&net, &noisy, &hps, steps, batch)?;
                    course_rows(&mut records, "hp_only".into(), c, mask.label().into(), r.restart, &hps, tc);
                }
            }
            for f in &self.cfg.eval.fixed {
                let hps = f.expand(net.len());
                let tc = training::evaluate_unrolled(&net, &noisy, &hps, steps, batch)?;
                course_rows(&mut records, format!("fixed_{}", f.name), c, String::new(), 0, &hps, tc);
            }
            for &v in &self.cfg.baselines {
                let mut base = BaselineNet::new(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed), v);
                base.load_weights(&self.path(&artifacts::baseline_weights(v)))?;
                let accuracy = training::evaluate(&base, &noisy, batch)?;
                records.push(MetricsRecord {
                    experiment: id.clone(),
                    regime: format!("baseline_{}", v.label()),
                    kind: c.kind,
                    level: c.level,
                    mask: String::new(),
                    restart: 0,
                    timestep: 0,
                    accuracy,
                    errors: Vec::new(),
                    hps: Vec::new(),
                });
            }
        }
        let bytes = metrics_csv(&records, net.len(), &self.hash)?;
        let p = write_file(&self.path(artifacts::METRICS), &bytes)?;
        self.record(p);
        self.summary.records = records;
        Ok(())
    }

    fn attack(&mut self) -> Result<()> {
        let mut net = self.frozen_backbone(Stage::Attack)?;
        net.error_gradient = ErrorGradient::Differentiable;
        let (_, val) = self.data()?;
        let sec = &self.cfg.attack;
        let cfg = AttackConfig { seed: self.cfg.seed, ..sec.config.clone() };
        let models: Vec<(String, FixedUnroll)> = sec
            .configurations
            .iter()
            .map(|n| (n.name.clone(), FixedUnroll { net: &net, hps: n.expand(net.len()), steps: cfg.timesteps }))
            .collect();
        let mut chosen = Vec::new();
        for j in 0..val.len() {
            if chosen.len() == sec.images {
                break;
            }
            let image = val.images.slice_outer(j, j + 1).map_err(TrainError::from)?;
            let mut ok = true;
            for (_, m) in &models {
                ok &= attacks::predict(m, &image)? == val.labels[j];
            }
            if ok {
                chosen.push(j);
            }
        }
        if chosen.is_empty() {
            return Err(AttackError::NoEligibleImages.into());
        }
        let subset = val.select(&chosen)?;
        let mut w = csv_writer(&self.hash, &["configuration", "index", "label", "target", "min_epsilon"])?;
        let mut results = Vec::new();
        for (name, model) in &models {
            let mut result = attacks::median_min_perturbation(model, &subset, &cfg)?;
            for r in &mut result.images {
                r.index = chosen[r.index];
            }
            for r in &result.images {
                let eps = r.min_epsilon.map_or_else(|| "inf".to_string(), |e| e.to_string());
                w.write_record([name.clone(), r.index.to_string(), r.label.to_string(), r.target.to_string(), eps])?;
            }
            let p = write_json(&self.path(&artifacts::attack_report(name)), &result)?;
            self.record(p);
            results.push((name.clone(), result));
        }
        let p = write_file(&self.path(artifacts::ATTACK_TABLE), &finish_csv(w)?)?;
        self.record(p);
        self.summary.attacks = results;
        Ok(())
    }

    fn report(&mut self) -> Result<()> {
        let reports = self.hp_reports(Stage::Report)?;
        let summaries: Vec<HpSummary> = reports
            .iter()
            .filter_map(|(mask, c, r)| r.best_hps().map(|h| HpSummary { mask: *mask, condition: *c, hps: h.to_vec() }))
            .collect();
        let written = emit_relative_hp_table(&summaries, &self.dir, &self.hash)?;
        self.summary.artifacts.extend(written);
        for mask in self.cfg.eval_masks() {
            let series: Vec<Series> = reports
                .iter()
                .filter(|(m, _, _)| *m == mask)
                .map(|(_, c, r)| Series {
                    name: c.label(),
                    points: r.final_accuracy.iter().enumerate().map(|(t, &a)| (t as f64, a)).collect(),
                })
                .collect();
            let title = format!("Validation accuracy over time-steps ({})", mask.label());
            let svg = line_chart(&title, "time-step", "accuracy", &series);
            let p = write_file(&self.path(&artifacts::accuracy_chart(mask)), svg.as_bytes())?;
            self.record(p);
        }
        Ok(())
    }
}

fn expand(hps: &[HyperParams], pcoders: usize) -> Vec<HyperParams> {
    if hps.len() == 1 {
        vec![hps[0]; pcoders]
    } else {
        hps.to_vec()
    }
}

/// Serializes records with one error column per PCoder and four coefficient
/// columns per PCoder; baseline rows leave those empty.
pub fn metrics_csv(records: &[MetricsRecord], pcoders: usize, config_hash: &str) -> Result<Vec<u8>> {
    let mut header: Vec<String> =
        ["experiment", "regime", "kind", "level", "mask", "restart", "timestep", "accuracy"].map(String::from).to_vec();
    header.extend((1..=pcoders).map(|i| format!("error_pcoder{i}")));
    for i in 1..=pcoders {
        header.extend(HP_NAMES.iter().map(|n| format!("{n}_pcoder{i}")));
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = csv_writer(config_hash, &refs)?;
    for r in records {
        let mut row = vec![
            r.experiment.clone(),
            r.regime.clone(),
            r.kind.label().into(),
            r.level.to_string(),
            r.mask.clone(),
            r.restart.to_string(),
            r.timestep.to_string(),
            r.accuracy.to_string(),
        ];
        row.extend((0..pcoders).map(|i| r.errors.get(i).map_or_else(String::new, f64::to_string)));
        let hps = expand(&r.hps, pcoders);
        for i in 0..pcoders {
            match hps.get(i) {
                Some(h) => row.extend(h.as_array().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}

/// Leading `train_size` training images and leading `val_size` test images.
pub fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.dir.as_ref().ok_or_else(|| HarnessError::Config("no data directory (set data.dir or pass --data)".into()))?;
    let (train, test) = data::ingest_cifar10(dir)?;
    if train.len() < cfg.train_size || test.len() < cfg.val_size {
        return Err(HarnessError::Config(format!(
            "{} has {} training and {} test images; {} and {} requested",
            dir.display(),
            train.len(),
            test.len(),
            cfg.train_size,
            cfg.val_size
        )));
    }
    Ok((train.slice(0, cfg.train_size)?, test.slice(0, cfg.val_size)?))
}

/// Runs the configured stages in pipeline order, writing into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
    let mut run = Run { cfg, dir, hash: cfg.hash(), data: None, summary: RunSummary::default() };
    let p = write_file(&run.path(artifacts::CONFIG), format!("{}\n", cfg.to_json()).as_bytes())?;
    run.record(p);
    let stages: BTreeSet<Stage> = cfg.stages.iter().copied().collect();
    for stage in stages {
        match stage {
            Stage::TrainFf => run.train_ff()?,
            Stage::TrainFb => run.train_fb()?,
            Stage::TrainHp => run.train_hp(Stage::TrainHp, &cfg.masks)?,
            Stage::Ablate => run.train_hp(Stage::Ablate, &cfg.ablation_masks)?,
            Stage::Eval => run.eval()?,
            Stage::Attack => run.attack()?,
            Stage::Report => run.report()?,
        }
    }
    Ok(run.summary)
}
