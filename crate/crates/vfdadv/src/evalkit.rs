//! Robustness evaluation, hyperparameter sweeps, and feature export.
//!
//! `evaluate` measures clean and per-attack robust accuracy under a
//! white-box threat (adversarials crafted against the victim) or a
//! black-box threat (crafted against a surrogate, scored on the victim).
//! `sweep` retrains the model across a β, λ, or tap grid and evaluates
//! every point. `export_features` dumps tapped embeddings for clean and
//! perturbed inputs so an external projector can visualize them.

use std::fmt::Write as _;

use crate::attacks::{run_attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::models::{argmax_rows, TappedModel};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::trainer::{train_vfd_adv, Checkpoint, TrainConfig};

/// Exact rational accuracy; the fraction is derived only when formatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub hits: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Who the adversary gets gradients from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThreatModel {
    WhiteBox,
    BlackBox { surrogate: String },
}

impl ThreatModel {
    pub fn label(&self) -> String {
        match self {
            ThreatModel::WhiteBox => "white-box".into(),
            ThreatModel::BlackBox { surrogate } => format!("black-box:{surrogate}"),
        }
    }
}

/// One attack's echoed spec and measured robust accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub spec: AttackSpec,
    pub robust: Accuracy,
}

/// Clean plus per-attack accuracy for one victim under one threat model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub threat: ThreatModel,
    pub seed: u64,
    pub clean: Accuracy,
    pub attacks: Vec<AttackOutcome>,
}

pub const EVAL_CSV_HEADER: &str =
    "defense,threat,attack,epsilon,steps,robust_acc,clean_acc,seed";

impl EvalReport {
    /// One CSV row per attack, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for a in &self.attacks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.model_id,
                self.threat.label(),
                a.spec.kind.as_str(),
                a.spec.epsilon,
                a.spec.steps,
                a.robust.fraction(),
                self.clean.fraction(),
                self.seed
            );
        }
        out
    }
}

/// Concatenates several reports into one CSV with a single header.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for line in r.to_csv().lines().skip(1) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Renders reports as an aligned text matrix: one row per defense, one
/// column per (threat, attack) pair, and a final clean-accuracy column.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        for a in &r.attacks {
            let key = format!("{} {}", r.threat.label(), a.spec.kind.as_str());
            if !columns.contains(&key) {
                columns.push(key);
            }
        }
    }
    columns.push("acc".into());
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for r in reports {
        let row = match rows.iter_mut().find(|(id, _)| *id == r.model_id) {
            Some((_, cells)) => cells,
            None => {
                rows.push((r.model_id.clone(), vec![String::new(); columns.len()]));
                &mut rows.last_mut().unwrap().1
            }
        };
        for a in &r.attacks {
            let key = format!("{} {}", r.threat.label(), a.spec.kind.as_str());
            let col = columns.iter().position(|c| *c == key).unwrap();
            row[col] = format!("{:.2}", 100.0 * a.robust.fraction());
        }
        let acc_col = columns.len() - 1;
        row[acc_col] = format!("{:.2}", 100.0 * r.clean.fraction());
    }

    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    let mut defense_w = "defense".len();
    for (id, cells) in &rows {
        defense_w = defense_w.max(id.len());
        for (w, cell) in widths.iter_mut().zip(cells) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = format!("{:<defense_w$}", "defense");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (id, cells) in &rows {
        let _ = write!(out, "{id:<defense_w$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Examples per evaluation batch; fixed so seeded attack streams line up
/// across commands.
pub const EVAL_BATCH: usize = 128;

fn count_hits<S: Scalar>(
    model: &TappedModel<S>,
    x: &crate::tensor::Tensor<S>,
    y: &[usize],
) -> Result<usize> {
    let pred = argmax_rows(&model.forward(x)?);
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count())
}

/// Measures clean accuracy and per-attack robust accuracy. Adversarials
/// are crafted against the surrogate when one is given, otherwise against
/// the victim; they are always scored on the victim.
pub fn evaluate<S: Scalar>(
    victim: &TappedModel<S>,
    victim_id: &str,
    dataset: &Dataset<S>,
    dataset_id: &str,
    attacks: &[AttackSpec],
    surrogate: Option<(&TappedModel<S>, &str)>,
    seed: u64,
) -> Result<EvalReport> {
    for spec in attacks {
        spec.validate()?;
    }
    let threat = match surrogate {
        Some((model, id)) => {
            if model.descriptor().input_shape != victim.descriptor().input_shape {
                return Err(Error::Config(format!(
                    "surrogate input shape {:?} does not match victim {:?}",
                    model.descriptor().input_shape,
                    victim.descriptor().input_shape
                )));
            }
            ThreatModel::BlackBox {
                surrogate: id.to_string(),
            }
        }
        None => ThreatModel::WhiteBox,
    };
    let crafter = surrogate.map(|(m, _)| m).unwrap_or(victim);

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut clean_hits = 0usize;
    let mut robust_hits = vec![0usize; attacks.len()];
    for (b, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let (x, y) = dataset.batch(chunk)?;
        clean_hits += count_hits(victim, &x, &y)?;
        for (a, spec) in attacks.iter().enumerate() {
            let mut rng = derive_rng(seed, &format!("eval/attack{a}/batch{b}"));
            let x_adv = run_attack(crafter, &x, &y, spec, &mut rng)?;
            robust_hits[a] += count_hits(victim, &x_adv, &y)?;
        }
    }
    Ok(EvalReport {
        model_id: victim_id.to_string(),
        dataset_id: dataset_id.to_string(),
        threat,
        seed,
        clean: Accuracy {
            hits: clean_hits,
            total: dataset.len(),
        },
        attacks: attacks
            .iter()
            .zip(robust_hits)
            .map(|(spec, hits)| AttackOutcome {
                spec: *spec,
                robust: Accuracy {
                    hits,
                    total: dataset.len(),
                },
            })
            .collect(),
    })
}

/// Which knob a sweep turns.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepSpec {
    Beta(Vec<f64>),
    Lambda(Vec<f64>),
    Tap(Vec<String>),
}

impl SweepSpec {
    pub fn param_name(&self) -> &'static str {
        match self {
            SweepSpec::Beta(_) => "beta",
            SweepSpec::Lambda(_) => "lambda",
            SweepSpec::Tap(_) => "tap",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepSpec::Beta(g) | SweepSpec::Lambda(g) => g.len(),
            SweepSpec::Tap(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_label(&self, i: usize) -> String {
        match self {
            SweepSpec::Beta(g) | SweepSpec::Lambda(g) => g[i].to_string(),
            SweepSpec::Tap(g) => g[i].clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("sweep grid must be non-empty".into()));
        }
        let ordered = match self {
            SweepSpec::Beta(g) | SweepSpec::Lambda(g) => {
                g.iter().all(|v| v.is_finite() && *v >= 0.0)
                    && g.windows(2).all(|w| w[0] < w[1])
            }
            SweepSpec::Tap(g) => g.windows(2).all(|w| w[0] < w[1]),
        };
        if !ordered {
            return Err(Error::Config(
                "sweep grid must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn apply(&self, i: usize, loss: &mut LossSpec) {
        match self {
            SweepSpec::Beta(g) => loss.beta = g[i],
            SweepSpec::Lambda(g) => loss.lambda = g[i],
            SweepSpec::Tap(g) => loss.tap = g[i].clone(),
        }
    }
}

/// One trained and evaluated grid point.
#[derive(Debug)]
pub struct SweepPoint<S: Scalar> {
    pub value: String,
    pub clean: Accuracy,
    pub robust: Accuracy,
    pub checkpoint: Checkpoint<S>,
}

/// Every grid point's outcome plus the fixed base configuration.
#[derive(Debug)]
pub struct SweepResult<S: Scalar> {
    pub param: &'static str,
    pub points: Vec<SweepPoint<S>>,
    /// Serialized base config the grid varied around.
    pub base_config: String,
}

pub const SWEEP_CSV_HEADER: &str = "param,value,clean_acc,robust_acc";

impl<S: Scalar> SweepResult<S> {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.param,
                p.value,
                p.clean.fraction(),
                p.robust.fraction()
            );
        }
        out
    }
}

/// Thread-movable dataset payload; tensors themselves are single-threaded.
#[derive(Clone)]
struct RawDataset<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    tag: crate::data::SplitTag,
}

impl<S: Scalar> RawDataset<S> {
    fn capture(ds: &Dataset<S>) -> Self {
        RawDataset {
            data: ds.inputs().to_vec(),
            shape: ds.inputs().shape().to_vec(),
            labels: ds.labels().to_vec(),
            num_classes: ds.num_classes(),
            tag: ds.tag(),
        }
    }

    fn hydrate(&self) -> Result<Dataset<S>> {
        Dataset::new(
            crate::tensor::Tensor::new(self.data.clone(), self.shape.clone())?,
            self.labels.clone(),
            self.num_classes,
            self.tag,
        )
    }
}

/// Trains one model per grid value (no warm starts) and evaluates each
/// against `eval_attack` on the test split. Grid points run on up to
/// `jobs` worker threads; results keep grid order.
#[allow(clippy::too_many_arguments)]
pub fn sweep<S: Scalar>(
    spec: &SweepSpec,
    base: &TrainConfig,
    desc: &crate::models::ArchDescriptor,
    teacher: Option<&Checkpoint<S>>,
    train: &Dataset<S>,
    test: &Dataset<S>,
    eval_attack: &AttackSpec,
    jobs: usize,
) -> Result<SweepResult<S>> {
    spec.validate()?;
    base.validate()?;
    let jobs = jobs.max(1);

    let run_point = |i: usize,
                     train: &Dataset<S>,
                     test: &Dataset<S>|
     -> Result<SweepPoint<S>> {
        let mut cfg = base.clone();
        spec.apply(i, &mut cfg.loss);
        let run = train_vfd_adv(teacher, desc, train, &cfg)?;
        let model = run.checkpoint.instantiate()?;
        let report = evaluate(
            &model,
            "sweep-point",
            test,
            "sweep-test",
            std::slice::from_ref(eval_attack),
            None,
            cfg.seed,
        )?;
        Ok(SweepPoint {
            value: spec.value_label(i),
            clean: report.clean,
            robust: report.attacks[0].robust,
            checkpoint: run.checkpoint,
        })
    };

    let n = spec.len();
    let mut points: Vec<Option<SweepPoint<S>>> = (0..n).map(|_| None).collect();
    if jobs == 1 {
        for (i, slot) in points.iter_mut().enumerate() {
            *slot = Some(run_point(i, train, test)?);
        }
    } else {
        let raw_train = RawDataset::capture(train);
        let raw_test = RawDataset::capture(test);
        let run_point = &run_point;
        for wave in (0..n).collect::<Vec<_>>().chunks(jobs) {
            let outcomes = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&i| {
                        let raw_train = raw_train.clone();
                        let raw_test = raw_test.clone();
                        scope.spawn(move || {
                            run_point(i, &raw_train.hydrate()?, &raw_test.hydrate()?)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep worker panicked"))
                    .collect::<Vec<_>>()
            });
            for (&i, outcome) in wave.iter().zip(outcomes) {
                points[i] = Some(outcome?);
            }
        }
    }
    Ok(SweepResult {
        param: spec.param_name(),
        points: points.into_iter().map(Option::unwrap).collect(),
        base_config: toml::to_string(base).unwrap_or_default(),
    })
}

/// Writes tapped features for up to `max_per_class` clean examples per
/// class and their adversarial counterparts. Rows are
/// `example,label,is_adversarial,f0..f{D-1}` where D is the tap's
/// flattened size.
pub fn export_features<S: Scalar>(
    model: &TappedModel<S>,
    dataset: &Dataset<S>,
    tap: &str,
    max_per_class: usize,
    attack: &AttackSpec,
    seed: u64,
) -> Result<String> {
    if !model.has_tap(tap) {
        return Err(Error::Config(format!("unknown feature tap {tap:?}")));
    }
    let dim = model.tap_dim(tap)?;
    let mut taken = vec![0usize; dataset.num_classes()];
    let mut picked: Vec<usize> = Vec::new();
    for (i, &y) in dataset.labels().iter().enumerate() {
        if taken[y] < max_per_class {
            taken[y] += 1;
            picked.push(i);
        }
    }

    let mut out = String::from("example,label,is_adversarial");
    for d in 0..dim {
        let _ = write!(out, ",f{d}");
    }
    out.push('\n');

    let mut write_rows = |x: &crate::tensor::Tensor<S>,
                          chunk: &[usize],
                          labels: &[usize],
                          adversarial: bool|
     -> Result<()> {
        let (_, features) = model.forward_tapped(x, &[tap])?;
        let f = features.get(tap).expect("tap was requested").to_vec();
        for (r, (&idx, &y)) in chunk.iter().zip(labels).enumerate() {
            let _ = write!(out, "{idx},{y},{}", u8::from(adversarial));
            for v in &f[r * dim..(r + 1) * dim] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        Ok(())
    };

    for (b, chunk) in picked.chunks(EVAL_BATCH).enumerate() {
        let (x, y) = dataset.batch(chunk)?;
        write_rows(&x, chunk, &y, false)?;
        let mut rng = derive_rng(seed, &format!("export/batch{b}"));
        let x_adv = run_attack(model, &x, &y, attack, &mut rng)?;
        write_rows(&x_adv, chunk, &y, true)?;
    }
    Ok(out)
}
