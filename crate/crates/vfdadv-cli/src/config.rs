//! Run configuration: a sectioned text file with every field optional,
//! named presets, flag overlays, and a deterministic fully resolved echo.
//!
//! Precedence is declared defaults, then `--preset`, then `--config`,
//! then command-line flags. The resolved snapshot is written into the
//! output directory before any work starts; re-running a subcommand from
//! that snapshot alone reproduces the run.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vfdadv::data::{load_container, load_idx, load_rows, split};
use vfdadv::{
    synthesize, ArchDescriptor, ArchId, AttackKind, AttackSpec, Dataset, Error, Gamma, LossSpec,
    NormKind, Phi, Reduction, Result, Scalar, SgdConfig, SweepSpec, SynthKind, SynthSpec,
    TrainConfig,
};

/// Training mode: the four defended variants plus the plain baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    #[value(name = "vanilla")]
    Vanilla,
    #[value(name = "alp")]
    Alp,
    #[value(name = "trades")]
    Trades,
    #[value(name = "alp+vfd")]
    AlpVfd,
    #[value(name = "trades+vfd")]
    TradesVfd,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Alp => "alp",
            Method::Trades => "trades",
            Method::AlpVfd => "alp+vfd",
            Method::TradesVfd => "trades+vfd",
        }
    }

    /// Robustness-term flavor; `None` for the undefended baseline.
    pub fn phi(&self) -> Option<Phi> {
        match self {
            Method::Vanilla => None,
            Method::Alp | Method::AlpVfd => Some(Phi::AlpCe),
            Method::Trades | Method::TradesVfd => Some(Phi::TradesKl),
        }
    }

    /// Whether the feature-distillation term is available.
    pub fn distills(&self) -> bool {
        matches!(self, Method::AlpVfd | Method::TradesVfd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "alp" => Ok(Method::Alp),
            "trades" => Ok(Method::Trades),
            "alp+vfd" => Ok(Method::AlpVfd),
            "trades+vfd" => Ok(Method::TradesVfd),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

fn pick<T>(base: Option<T>, over: Option<T>) -> Option<T> {
    over.or(base)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl ArchSection {
    fn overlay(self, over: ArchSection) -> ArchSection {
        ArchSection {
            id: pick(self.id, over.id),
            input_shape: pick(self.input_shape, over.input_shape),
            num_classes: pick(self.num_classes, over.num_classes),
            widths: pick(self.widths, over.widths),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// One of `synth`, `idx`, `rows`, `container`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Stratified train:test ratio; synthetic sets default to `[6, 5]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<[u32; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Per-example `[channels, height, width]` for the rows source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
}

impl DatasetSection {
    fn overlay(self, over: DatasetSection) -> DatasetSection {
        DatasetSection {
            source: pick(self.source, over.source),
            kind: pick(self.kind, over.kind),
            num_classes: pick(self.num_classes, over.num_classes),
            per_class: pick(self.per_class, over.per_class),
            sigma: pick(self.sigma, over.sigma),
            seed: pick(self.seed, over.seed),
            split: pick(self.split, over.split),
            images: pick(self.images, over.images),
            labels: pick(self.labels, over.labels),
            path: pick(self.path, over.path),
            shape: pick(self.shape, over.shape),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Budget as a fraction like `"8/255"`; exclusive with `epsilon`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_frac: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl AttackSection {
    fn overlay(self, over: AttackSection) -> AttackSection {
        AttackSection {
            kind: pick(self.kind, over.kind),
            norm: pick(self.norm, over.norm),
            epsilon: pick(self.epsilon, over.epsilon),
            epsilon_frac: pick(self.epsilon_frac, over.epsilon_frac),
            steps: pick(self.steps, over.steps),
            step_size: pick(self.step_size, over.step_size),
            random_start: pick(self.random_start, over.random_start),
            kappa: pick(self.kappa, over.kappa),
            lr: pick(self.lr, over.lr),
        }
    }

    fn from_spec(spec: &AttackSpec) -> AttackSection {
        AttackSection {
            kind: Some(spec.kind.as_str().into()),
            norm: Some(spec.norm.as_str().into()),
            epsilon: Some(spec.epsilon),
            epsilon_frac: None,
            steps: Some(spec.steps),
            step_size: Some(spec.step_size),
            random_start: Some(spec.random_start),
            kappa: Some(spec.kappa),
            lr: Some(spec.lr),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Vanilla-teacher checkpoint distilled when λ > 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Inner attack crafting the training-time adversarials.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
}

impl TrainSection {
    fn overlay(self, over: TrainSection) -> TrainSection {
        let attack = match (self.attack, over.attack) {
            (Some(a), Some(b)) => Some(a.overlay(b)),
            (a, b) => b.or(a),
        };
        TrainSection {
            epochs: pick(self.epochs, over.epochs),
            batch_size: pick(self.batch_size, over.batch_size),
            learning_rate: pick(self.learning_rate, over.learning_rate),
            momentum: pick(self.momentum, over.momentum),
            weight_decay: pick(self.weight_decay, over.weight_decay),
            seed: pick(self.seed, over.seed),
            checkpoint_every: pick(self.checkpoint_every, over.checkpoint_every),
            teacher: pick(self.teacher, over.teacher),
            attack,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap: Option<String>,
}

impl LossSection {
    fn overlay(self, over: LossSection) -> LossSection {
        LossSection {
            beta: pick(self.beta, over.beta),
            lambda: pick(self.lambda, over.lambda),
            tap: pick(self.tap, over.tap),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Surrogate checkpoint enabling the black-box threat model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<PathBuf>,
    /// Per-class example cap for feature export.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_per_class: Option<usize>,
}

impl EvalSection {
    fn overlay(self, over: EvalSection) -> EvalSection {
        EvalSection {
            seed: pick(self.seed, over.seed),
            model_id: pick(self.model_id, over.model_id),
            surrogate: pick(self.surrogate, over.surrogate),
            max_per_class: pick(self.max_per_class, over.max_per_class),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// One of `beta`, `lambda`, `tap`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    /// `start:end:step`, a comma list, or comma-separated tap names.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl SweepSection {
    fn overlay(self, over: SweepSection) -> SweepSection {
        SweepSection {
            param: pick(self.param, over.param),
            grid: pick(self.grid, over.grid),
            jobs: pick(self.jobs, over.jobs),
        }
    }
}

/// Every knob of a run; all fields optional until resolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Checkpoint under attack or evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub arch: ArchSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub loss: LossSection,
    /// Evaluation attack suite; the first entry drives `attack` and sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacks: Option<Vec<AttackSection>>,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

pub const PRESET_NAMES: [&str; 2] = ["desk-trend", "desk-distill"];

/// Robustness/accuracy trade-off study: 120 training examples per class.
const DESK_TREND: &str = r#"
method = "trades"

[arch]
id = "cnn-small"
input_shape = [1, 8, 8]
num_classes = 3

[dataset]
source = "synth"
kind = "rasterized-blobs"
num_classes = 3
per_class = 220
sigma = 0.5
seed = 100
split = [6, 5]

[train]
epochs = 20
batch_size = 32
learning_rate = 0.01
seed = 1

[train.attack]
kind = "pgd"
epsilon = 0.25
steps = 7

[loss]
beta = 6.0
lambda = 0.0
tap = "block2"

[[attacks]]
kind = "pgd"
epsilon = 0.25
steps = 20

[[attacks]]
kind = "fgsm"
epsilon = 0.25

[[attacks]]
kind = "cw_l2"
steps = 100
"#;

/// Distillation study: 60 training examples per class, λ = 0.01.
const DESK_DISTILL: &str = r#"
method = "trades+vfd"

[arch]
id = "cnn-small"
input_shape = [1, 8, 8]
num_classes = 3

[dataset]
source = "synth"
kind = "rasterized-blobs"
num_classes = 3
per_class = 160
sigma = 0.5
seed = 100
split = [3, 5]

[train]
epochs = 20
batch_size = 32
learning_rate = 0.01
seed = 1

[train.attack]
kind = "pgd"
epsilon = 0.25
steps = 7

[loss]
beta = 6.0
lambda = 0.01
tap = "block2"

[[attacks]]
kind = "pgd"
epsilon = 0.25
steps = 20

[[attacks]]
kind = "fgsm"
epsilon = 0.25

[[attacks]]
kind = "cw_l2"
steps = 100
"#;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| {
            let msg = e.to_string().replace('\n', " ");
            Error::Config(format!("config parse error: {}", msg.trim()))
        })
    }

    /// Named baseline configuration.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let text = match name {
            "desk-trend" => DESK_TREND,
            "desk-distill" => DESK_DISTILL,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; available: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        RunConfig::from_toml(text)
    }

    /// Field-wise merge; `over`'s set fields win.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        let attacks = pick(self.attacks, over.attacks);
        RunConfig {
            method: pick(self.method, over.method),
            model: pick(self.model, over.model),
            arch: self.arch.overlay(over.arch),
            dataset: self.dataset.overlay(over.dataset),
            train: self.train.overlay(over.train),
            loss: self.loss.overlay(over.loss),
            attacks,
            eval: self.eval.overlay(over.eval),
            sweep: self.sweep.overlay(over.sweep),
        }
    }
}

/// Parses `"a/b"` into a decimal budget.
pub fn parse_fraction(text: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse fraction {text:?}; expected a/b"));
    let (num, den) = text.split_once('/').ok_or_else(bad)?;
    let num: f64 = num.trim().parse().map_err(|_| bad())?;
    let den: f64 = den.trim().parse().map_err(|_| bad())?;
    if !num.is_finite() || !den.is_finite() || den == 0.0 {
        return Err(bad());
    }
    Ok(num / den)
}

/// Small-denominator fraction matching `x` within 1e-9, if one exists.
pub fn fraction_label(x: f64) -> Option<String> {
    if !(x > 0.0) || !x.is_finite() {
        return None;
    }
    for den in 1u32..=4096 {
        let num = (x * den as f64).round();
        if num >= 1.0 && (num / den as f64 - x).abs() <= 1e-9 {
            return Some(format!("{num}/{den}"));
        }
    }
    None
}

/// Human-facing budget echo with both decimal and fractional forms.
pub fn epsilon_echo(epsilon: f64) -> String {
    match fraction_label(epsilon) {
        Some(frac) => format!("{epsilon} (= {frac})"),
        None => format!("{epsilon}"),
    }
}

/// Expands a grid string for the given sweep parameter.
pub fn parse_grid(param: &str, grid: &str) -> Result<SweepSpec> {
    let spec = match param {
        "tap" => SweepSpec::Tap(
            grid.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        ),
        "beta" | "lambda" => {
            let values = parse_numeric_grid(grid)?;
            if param == "beta" {
                SweepSpec::Beta(values)
            } else {
                SweepSpec::Lambda(values)
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected beta, lambda or tap"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_numeric_grid(grid: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Config(format!("bad grid {grid:?}: {msg}"));
    if grid.contains(':') {
        let parts: Vec<&str> = grid.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:step".into()));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if step == 0.0 {
            if start == end {
                return Ok(vec![start]);
            }
            return Err(bad("step must be nonzero".into()));
        }
        if !(step > 0.0) || end < start {
            return Err(bad("expected start <= end with a positive step".into()));
        }
        let count = ((end - start) / step).round();
        if (start + count * step - end).abs() > step * 1e-6 {
            return Err(bad("step does not divide the range".into()));
        }
        Ok((0..=count as usize)
            .map(|i| start + i as f64 * step)
            .collect())
    } else {
        grid.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{:?}: {e}", p.trim())))
            })
            .collect()
    }
}

/// Where the examples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synth(SynthSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Rows { path: PathBuf, shape: [usize; 3], num_classes: usize },
    Container(PathBuf),
}

/// Fully resolved dataset recipe: a source plus an optional split.
#[derive(Debug, Clone)]
pub struct DataPlan {
    pub source: DataSource,
    pub split: Option<(u32, u32)>,
    pub seed: u64,
}

impl DataPlan {
    /// Loads the full set and applies the stratified split when configured.
    pub fn load<S: Scalar>(&self) -> Result<(Dataset<S>, Option<Dataset<S>>)> {
        let full = match &self.source {
            DataSource::Synth(spec) => synthesize(spec)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
            DataSource::Rows { path, shape, num_classes } => {
                load_rows(path, shape[0], shape[1], shape[2], *num_classes)?
            }
            DataSource::Container(path) => load_container(path)?,
        };
        match self.split {
            Some(ratio) => {
                let (train, test) = split(&full, ratio, self.seed)?;
                Ok((train, Some(test)))
            }
            None => Ok((full, None)),
        }
    }

    /// Short identifier used in report rows.
    pub fn label(&self) -> String {
        match &self.source {
            DataSource::Synth(spec) => format!("{}-s{}", spec.kind.as_str(), spec.seed),
            DataSource::Idx { images, .. } => stem(images),
            DataSource::Rows { path, .. } | DataSource::Container(path) => stem(path),
        }
    }
}

/// File-stem label for paths used in report rows.
pub fn stem(path: &std::path::Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

/// Everything a subcommand needs, plus the canonical echo text.
#[derive(Debug)]
pub struct Resolved {
    pub method: Method,
    pub desc: ArchDescriptor,
    pub data: DataPlan,
    pub train: TrainConfig,
    pub eval_attacks: Vec<AttackSpec>,
    pub eval_seed: u64,
    pub model: Option<PathBuf>,
    pub model_id: String,
    pub surrogate: Option<PathBuf>,
    pub max_per_class: usize,
    pub sweep: Option<SweepSpec>,
    pub jobs: usize,
    pub echo: String,
}

enum AttackRole {
    Train,
    Eval,
}

fn resolve_attack(section: &AttackSection, role: AttackRole) -> Result<AttackSpec> {
    let kind = match &section.kind {
        Some(k) => AttackKind::from_str(k)?,
        None => AttackKind::Pgd,
    };
    let epsilon = match (&section.epsilon, &section.epsilon_frac) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give epsilon or epsilon_frac, not both".into(),
            ))
        }
        (Some(e), None) => *e,
        (None, Some(f)) => parse_fraction(f)?,
        (None, None) => match kind {
            AttackKind::CwL2 => 0.0,
            _ => 0.25,
        },
    };
    let steps = section.steps.unwrap_or(match kind {
        AttackKind::Fgsm => 1,
        AttackKind::CwL2 => 100,
        AttackKind::Pgd | AttackKind::TradesInner => match role {
            AttackRole::Train => 7,
            AttackRole::Eval => 20,
        },
    });
    let step_size = section.step_size.unwrap_or(match kind {
        AttackKind::Fgsm => epsilon,
        AttackKind::CwL2 => 0.0,
        _ => match role {
            AttackRole::Train => epsilon / 3.0,
            AttackRole::Eval => epsilon / 4.0,
        },
    });
    let norm = match &section.norm {
        Some(n) => NormKind::from_str(n)?,
        None => match kind {
            AttackKind::CwL2 => NormKind::L2,
            _ => NormKind::LInf,
        },
    };
    let random_start = section
        .random_start
        .unwrap_or(matches!(kind, AttackKind::Pgd | AttackKind::TradesInner));
    let spec = AttackSpec {
        kind,
        norm,
        epsilon,
        steps,
        step_size,
        random_start,
        kappa: section.kappa.unwrap_or(0.0),
        lr: section.lr.unwrap_or(match kind {
            AttackKind::CwL2 => 0.05,
            _ => 0.0,
        }),
        clamp: (0.0, 1.0),
    };
    spec.validate()?;
    Ok(spec)
}

fn resolve_dataset(sec: &DatasetSection) -> Result<DataPlan> {
    let source = sec.source.as_deref().unwrap_or("synth");
    let seed = sec.seed.unwrap_or(100);
    let require = |field: Option<&PathBuf>, name: &str| {
        field.cloned().ok_or_else(|| {
            Error::Config(format!("dataset.{name} is required for source {source:?}"))
        })
    };
    let (data_source, default_split) = match source {
        "synth" => {
            let kind = match &sec.kind {
                Some(k) => SynthKind::from_str(k)?,
                None => SynthKind::RasterizedBlobs,
            };
            let spec = SynthSpec {
                kind,
                num_classes: sec.num_classes.unwrap_or(3),
                per_class: sec.per_class.unwrap_or(220),
                sigma: sec.sigma.unwrap_or(0.5),
                seed,
            };
            spec.validate()?;
            (DataSource::Synth(spec), Some([6u32, 5u32]))
        }
        "idx" => (
            DataSource::Idx {
                images: require(sec.images.as_ref(), "images")?,
                labels: require(sec.labels.as_ref(), "labels")?,
            },
            None,
        ),
        "rows" => (
            DataSource::Rows {
                path: require(sec.path.as_ref(), "path")?,
                shape: sec.shape.ok_or_else(|| {
                    Error::Config("dataset.shape is required for source \"rows\"".into())
                })?,
                num_classes: sec.num_classes.unwrap_or(3),
            },
            None,
        ),
        "container" => (
            DataSource::Container(require(sec.path.as_ref(), "path")?),
            None,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown dataset source {other:?}; expected synth, idx, rows or container"
            )))
        }
    };
    let split = sec.split.or(default_split);
    Ok(DataPlan {
        source: data_source,
        split: split.map(|[a, b]| (a, b)),
        seed,
    })
}

impl RunConfig {
    /// Applies every default, validates cross-field rules, and renders the
    /// canonical snapshot.
    pub fn resolve(&self) -> Result<Resolved> {
        let method = match &self.method {
            Some(m) => Method::from_str(m)?,
            None => Method::Vanilla,
        };

        let arch = match &self.arch.id {
            Some(id) => ArchId::from_str(id)?,
            None => ArchId::CnnSmall,
        };
        let input_shape = self.arch.input_shape.clone().unwrap_or(vec![1, 8, 8]);
        let num_classes = self.arch.num_classes.unwrap_or(3);
        let mut desc = ArchDescriptor::new(arch, input_shape, num_classes);
        if let Some(widths) = &self.arch.widths {
            desc = desc.with_widths(widths.clone());
        }
        desc.validate()?;

        let data = resolve_dataset(&self.dataset)?;

        let lambda = self
            .loss
            .lambda
            .unwrap_or(if method.distills() { 0.01 } else { 0.0 });
        if lambda > 0.0 && !method.distills() {
            return Err(Error::Config(format!(
                "method {method} has no distillation term; use {}+vfd for lambda > 0",
                match method {
                    Method::Alp => "alp",
                    _ => "trades",
                }
            )));
        }
        let loss = LossSpec {
            beta: self.loss.beta.unwrap_or(6.0),
            lambda,
            phi: method.phi().unwrap_or(Phi::TradesKl),
            tap: self.loss.tap.clone().unwrap_or_else(|| "block2".into()),
            gamma: Gamma::Euclidean,
            reduction: Reduction::BatchMean,
        };

        let train_attack =
            resolve_attack(self.train.attack.as_ref().unwrap_or(&AttackSection::default()), AttackRole::Train)?;
        let train = TrainConfig {
            epochs: self.train.epochs.unwrap_or(10),
            batch_size: self.train.batch_size.unwrap_or(32),
            sgd: SgdConfig {
                learning_rate: self.train.learning_rate.unwrap_or(0.01),
                momentum: self.train.momentum.unwrap_or(0.9),
                weight_decay: self.train.weight_decay.unwrap_or(0.0),
            },
            attack: train_attack,
            loss,
            seed: self.train.seed.unwrap_or(1),
            checkpoint_every: self.train.checkpoint_every.unwrap_or(0),
            vanilla_ckpt: self.train.teacher.clone(),
        };
        train.validate()?;

        let default_suite = || {
            vec![
                AttackSection {
                    kind: Some("pgd".into()),
                    ..AttackSection::default()
                },
                AttackSection {
                    kind: Some("fgsm".into()),
                    ..AttackSection::default()
                },
                AttackSection {
                    kind: Some("cw_l2".into()),
                    ..AttackSection::default()
                },
            ]
        };
        let attack_sections = self.attacks.clone().unwrap_or_else(default_suite);
        if attack_sections.is_empty() {
            return Err(Error::Config("attack suite must be non-empty".into()));
        }
        let eval_attacks: Vec<AttackSpec> = attack_sections
            .iter()
            .map(|s| resolve_attack(s, AttackRole::Eval))
            .collect::<Result<_>>()?;

        let sweep = match (&self.sweep.param, &self.sweep.grid) {
            (Some(param), Some(grid)) => Some(parse_grid(param, grid)?),
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Config("sweep.param given without sweep.grid".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Config("sweep.grid given without sweep.param".into()))
            }
        };

        let model_id = self.eval.model_id.clone().unwrap_or_else(|| {
            self.model
                .as_deref()
                .map(stem)
                .unwrap_or_else(|| method.as_str().into())
        });
        let eval_seed = self.eval.seed.unwrap_or(1000);
        let max_per_class = self.eval.max_per_class.unwrap_or(50);
        let jobs = self.sweep.jobs.unwrap_or(1).max(1);

        let echo_cfg = RunConfig {
            method: Some(method.as_str().into()),
            model: self.model.clone(),
            arch: ArchSection {
                id: Some(desc.arch.as_str().into()),
                input_shape: Some(desc.input_shape.clone()),
                num_classes: Some(desc.num_classes),
                widths: Some(desc.block_widths.clone()),
            },
            dataset: canonical_dataset(&data),
            train: TrainSection {
                epochs: Some(train.epochs),
                batch_size: Some(train.batch_size),
                learning_rate: Some(train.sgd.learning_rate),
                momentum: Some(train.sgd.momentum),
                weight_decay: Some(train.sgd.weight_decay),
                seed: Some(train.seed),
                checkpoint_every: Some(train.checkpoint_every),
                teacher: train.vanilla_ckpt.clone(),
                attack: Some(AttackSection::from_spec(&train.attack)),
            },
            loss: LossSection {
                beta: Some(train.loss.beta),
                lambda: Some(train.loss.lambda),
                tap: Some(train.loss.tap.clone()),
            },
            attacks: Some(eval_attacks.iter().map(AttackSection::from_spec).collect()),
            eval: EvalSection {
                seed: Some(eval_seed),
                model_id: Some(model_id.clone()),
                surrogate: self.eval.surrogate.clone(),
                max_per_class: Some(max_per_class),
            },
            sweep: SweepSection {
                param: sweep.as_ref().map(|s| s.param_name().into()),
                grid: self.sweep.grid.clone(),
                jobs: Some(jobs),
            },
        };
        let echo = toml::to_string(&echo_cfg)
            .map_err(|e| Error::Config(format!("cannot render config snapshot: {e}")))?;

        Ok(Resolved {
            method,
            desc,
            data,
            train,
            eval_attacks,
            eval_seed,
            model: self.model.clone(),
            model_id,
            surrogate: self.eval.surrogate.clone(),
            max_per_class,
            sweep,
            jobs,
            echo,
        })
    }
}

fn canonical_dataset(plan: &DataPlan) -> DatasetSection {
    let mut sec = DatasetSection {
        seed: Some(plan.seed),
        split: plan.split.map(|(a, b)| [a, b]),
        ..DatasetSection::default()
    };
    match &plan.source {
        DataSource::Synth(spec) => {
            sec.source = Some("synth".into());
            sec.kind = Some(spec.kind.as_str().into());
            sec.num_classes = Some(spec.num_classes);
            sec.per_class = Some(spec.per_class);
            sec.sigma = Some(spec.sigma);
        }
        DataSource::Idx { images, labels } => {
            sec.source = Some("idx".into());
            sec.images = Some(images.clone());
            sec.labels = Some(labels.clone());
        }
        DataSource::Rows { path, shape, num_classes } => {
            sec.source = Some("rows".into());
            sec.path = Some(path.clone());
            sec.shape = Some(*shape);
            sec.num_classes = Some(*num_classes);
        }
        DataSource::Container(path) => {
            sec.source = Some("container".into());
            sec.path = Some(path.clone());
        }
    }
    sec
}
