//! Subcommand surface: argument definitions, dispatch, and the mapping
//! from error categories to exit codes.
//!
//! Every subcommand assembles its configuration as defaults, preset,
//! config file, then flags; writes the resolved snapshot into the output
//! directory; and only then starts working. Nothing is written outside
//! the output directory.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vfdadv::attacks::run_attack;
use vfdadv::data::save_container;
use vfdadv::evalkit::{AttackOutcome, EVAL_BATCH};
use vfdadv::models::argmax_rows;
use vfdadv::seeding::derive_rng;
use vfdadv::{
    evaluate, export_features, load_checkpoint, render_table, reports_csv, save_checkpoint,
    sweep, train_vanilla, train_vfd_adv, Accuracy, Checkpoint, Dataset, Error, EvalReport,
    SweepSpec, Tensor, ThreatModel, TrainRun,
};

use crate::config::{
    epsilon_echo, stem, AttackSection, EvalSection, LossSection, Method, Resolved, RunConfig,
    SweepSection, TrainSection,
};

/// Adversarial training with vanilla-feature distillation.
#[derive(Parser)]
#[command(name = "vfdadv", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a standard classifier on clean examples.
    TrainVanilla(TrainArgs),
    /// Adversarially train, optionally distilling a vanilla teacher.
    Train(TrainArgs),
    /// Craft adversarial examples against a checkpoint and report accuracy.
    Attack(AttackArgs),
    /// Measure clean and robust accuracy under the configured attack suite.
    Eval(EvalArgs),
    /// Retrain across a parameter grid and tabulate the trade-off.
    Sweep(SweepArgs),
    /// Export tapped features for clean and adversarial inputs.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
pub struct Common {
    /// Run-config file layered over the preset and under the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named baseline configuration: desk-trend or desk-distill.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory; defaults to $VFDADV_OUT/<subcommand>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override: the training seed for training subcommands, the
    /// evaluation seed otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training mode (ignored by train-vanilla).
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Architecture id: mlp-small, cnn-small or cnn-mid.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feature tap distilled by the kd term.
    #[arg(long)]
    pub tap: Option<String>,
    /// Vanilla-teacher checkpoint required when lambda > 0.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Training-attack budget in input scale.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Budget as a fraction like 8/255.
    #[arg(long, conflicts_with = "eps")]
    pub eps_frac: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint under attack.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Attack kind: fgsm, pgd or cw_l2.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, conflicts_with = "eps")]
    pub eps_frac: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint under evaluation.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Row label for the model in reports.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Surrogate checkpoint; adds a black-box pass over the same suite.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training mode the grid retrains with.
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Swept parameter: beta, lambda or tap.
    #[arg(long)]
    pub param: Option<String>,
    /// Grid: start:end:step, a comma list, or comma-separated tap names.
    #[arg(long)]
    pub grid: Option<String>,
    /// Parallel training workers.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint whose features are exported.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature tap to read.
    #[arg(long)]
    pub tap: Option<String>,
    #[arg(long)]
    pub max_per_class: Option<usize>,
}

/// Anything that ends a run unsuccessfully.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) => match e.category() {
                "config" => 3,
                "data" => 4,
                "contract" => 5,
                "training-abort" => 6,
                "io" => 7,
                _ => 1,
            },
        }
    }

    /// Single-line machine-parsable report: `error[category]: message`.
    pub fn line(&self) -> String {
        match self {
            Failure::Usage(msg) => format!("error[usage]: {msg}"),
            Failure::Lib(e) => {
                format!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "))
            }
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

pub fn dispatch(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::TrainVanilla(a) => train_cmd(a, true),
        Command::Train(a) => train_cmd(a, false),
        Command::Attack(a) => attack_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ExportFeatures(a) => export_cmd(a),
    }
}

/// Defaults, then preset, then config file, then the flag overlay.
fn assemble(common: &Common, overlay: RunConfig) -> CmdResult<Resolved> {
    let mut cfg = RunConfig::default();
    if let Some(name) = &common.preset {
        cfg = cfg.overlay(RunConfig::preset(name)?);
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| {
            Failure::Lib(Error::Config(format!(
                "cannot read config {}: {e}",
                path.display()
            )))
        })?;
        cfg = cfg.overlay(RunConfig::from_toml(&text)?);
    }
    Ok(cfg.overlay(overlay).resolve()?)
}

/// Creates the output directory and writes the resolved snapshot into it
/// before any work starts.
fn prepare_out(common: &Common, subcommand: &str, resolved: &Resolved) -> CmdResult<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => match std::env::var_os("VFDADV_OUT") {
            Some(root) => PathBuf::from(root).join(subcommand),
            None => {
                return Err(Failure::Usage(
                    "--out is required (or set VFDADV_OUT)".into(),
                ))
            }
        },
    };
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.toml"), &resolved.echo).map_err(Error::from)?;
    Ok(dir)
}

fn required_model(resolved: &Resolved) -> CmdResult<PathBuf> {
    resolved.model.clone().ok_or_else(|| {
        Failure::Lib(Error::Config(
            "model checkpoint path is required (--model or `model` in the config)".into(),
        ))
    })
}

/// Test split when the plan splits, the full set otherwise.
fn eval_split<'a>(train: &'a Dataset<f64>, test: &'a Option<Dataset<f64>>) -> &'a Dataset<f64> {
    test.as_ref().unwrap_or(train)
}

fn train_cmd(a: TrainArgs, vanilla: bool) -> CmdResult<()> {
    if vanilla && a.method.is_some() {
        return Err(Failure::Usage(
            "train-vanilla has a fixed method; use `train --method ...` instead".into(),
        ));
    }
    let name = if vanilla { "train-vanilla" } else { "train" };
    let overlay = RunConfig {
        method: if vanilla {
            Some("vanilla".into())
        } else {
            a.method.map(|m| m.as_str().into())
        },
        arch: crate::config::ArchSection {
            id: a.arch.clone(),
            ..Default::default()
        },
        train: TrainSection {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            seed: a.common.seed,
            teacher: a.teacher.clone(),
            attack: Some(AttackSection {
                epsilon: a.eps,
                epsilon_frac: a.eps_frac.clone(),
                steps: a.steps,
                step_size: a.step_size,
                ..Default::default()
            }),
            ..Default::default()
        },
        loss: LossSection {
            beta: a.beta,
            lambda: a.lambda,
            tap: a.tap.clone(),
        },
        ..Default::default()
    };
    let resolved = assemble(&a.common, overlay)?;
    let out = prepare_out(&a.common, name, &resolved)?;

    let (train_ds, _test) = resolved.data.load::<f64>()?;
    let run = run_training(&resolved, &train_ds)?;
    save_checkpoint(&run.checkpoint, &out.join("checkpoint.bin"))?;
    for snap in &run.snapshots {
        save_checkpoint(snap, &out.join(format!("checkpoint-epoch{}.bin", snap.epoch)))?;
    }
    fs::write(
        out.join("train_log.csv"),
        vfdadv::trainer::log_to_csv(&run.log),
    )
    .map_err(Error::from)?;

    println!(
        "{} [{}]: {} epochs on {} examples",
        name,
        resolved.method,
        resolved.train.epochs,
        train_ds.len()
    );
    if let Some(last) = run.log.last() {
        println!(
            "final losses: clean {:.6} adv {:.6} kd {:.6} total {:.6}",
            last.l_clean, last.l_adv, last.l_kd, last.l_total
        );
    }
    println!("checkpoint {} -> {}", run.checkpoint.checksum(), out.display());
    Ok(())
}

/// Runs the configured training mode; loads the teacher only when the
/// distillation weight is active.
fn run_training(resolved: &Resolved, train_ds: &Dataset<f64>) -> CmdResult<TrainRun<f64>> {
    if resolved.method == Method::Vanilla {
        return Ok(train_vanilla(&resolved.desc, train_ds, &resolved.train)?);
    }
    let teacher: Option<Checkpoint<f64>> = if resolved.train.loss.lambda > 0.0 {
        match &resolved.train.vanilla_ckpt {
            Some(path) => Some(load_checkpoint(path)?),
            None => {
                return Err(Failure::Lib(Error::Config(
                    "lambda > 0 requires --teacher (a vanilla checkpoint)".into(),
                )))
            }
        }
    } else {
        None
    };
    Ok(train_vfd_adv(
        teacher.as_ref(),
        &resolved.desc,
        train_ds,
        &resolved.train,
    )?)
}

fn attack_cmd(a: AttackArgs) -> CmdResult<()> {
    let flagged = a.method.is_some()
        || a.eps.is_some()
        || a.eps_frac.is_some()
        || a.steps.is_some()
        || a.step_size.is_some();
    let overlay = RunConfig {
        model: a.model.clone(),
        attacks: flagged.then(|| {
            vec![AttackSection {
                kind: a.method.clone(),
                epsilon: a.eps,
                epsilon_frac: a.eps_frac.clone(),
                steps: a.steps,
                step_size: a.step_size,
                ..Default::default()
            }]
        }),
        eval: EvalSection {
            seed: a.common.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let resolved = assemble(&a.common, overlay)?;
    let model_path = required_model(&resolved)?;
    let out = prepare_out(&a.common, "attack", &resolved)?;

    let victim = load_checkpoint::<f64>(&model_path)?.instantiate()?;
    let (train_ds, test_ds) = resolved.data.load::<f64>()?;
    let ds = eval_split(&train_ds, &test_ds);
    let spec = resolved.eval_attacks[0];
    println!(
        "attack {}: epsilon = {}, steps = {}",
        spec.kind,
        epsilon_echo(spec.epsilon),
        spec.steps
    );

    let per = ds.example_numel();
    let mut adv_data: Vec<f64> = Vec::with_capacity(ds.len() * per);
    let mut clean_hits = 0usize;
    let mut robust_hits = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for (b, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let (x, y) = ds.batch(chunk)?;
        let pred = argmax_rows(&victim.forward(&x)?);
        clean_hits += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        let mut rng = derive_rng(resolved.eval_seed, &format!("eval/attack0/batch{b}"));
        let x_adv = run_attack(&victim, &x, &y, &spec, &mut rng)?;
        let pred = argmax_rows(&victim.forward(&x_adv)?);
        robust_hits += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        adv_data.extend_from_slice(&x_adv.to_vec());
    }
    let mut shape = vec![ds.len()];
    shape.extend(ds.example_shape());
    let adv_ds = Dataset::new(
        Tensor::new(adv_data, shape)?,
        ds.labels().to_vec(),
        ds.num_classes(),
        ds.tag(),
    )?;
    save_container(&adv_ds, &out.join("adversarial.bin"))?;

    let total = ds.len();
    let report = EvalReport {
        model_id: resolved.model_id.clone(),
        dataset_id: resolved.data.label(),
        threat: ThreatModel::WhiteBox,
        seed: resolved.eval_seed,
        clean: Accuracy {
            hits: clean_hits,
            total,
        },
        attacks: vec![AttackOutcome {
            spec,
            robust: Accuracy {
                hits: robust_hits,
                total,
            },
        }],
    };
    fs::write(out.join("attack_report.csv"), report.to_csv()).map_err(Error::from)?;
    println!(
        "clean accuracy {}/{}; robust accuracy {}/{}",
        clean_hits, total, robust_hits, total
    );
    println!("adversarials -> {}", out.join("adversarial.bin").display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult<()> {
    let overlay = RunConfig {
        model: a.model.clone(),
        eval: EvalSection {
            seed: a.common.seed,
            model_id: a.model_id.clone(),
            surrogate: a.surrogate.clone(),
            ..Default::default()
        },
        ..Default::default()
    };
    let resolved = assemble(&a.common, overlay)?;
    let model_path = required_model(&resolved)?;
    let out = prepare_out(&a.common, "eval", &resolved)?;

    let victim = load_checkpoint::<f64>(&model_path)?.instantiate()?;
    let (train_ds, test_ds) = resolved.data.load::<f64>()?;
    let ds = eval_split(&train_ds, &test_ds);
    let label = resolved.data.label();

    let mut reports = vec![evaluate(
        &victim,
        &resolved.model_id,
        ds,
        &label,
        &resolved.eval_attacks,
        None,
        resolved.eval_seed,
    )?];
    if let Some(path) = &resolved.surrogate {
        let surrogate = load_checkpoint::<f64>(path)?.instantiate()?;
        let sid = stem(path);
        reports.push(evaluate(
            &victim,
            &resolved.model_id,
            ds,
            &label,
            &resolved.eval_attacks,
            Some((&surrogate, &sid)),
            resolved.eval_seed,
        )?);
    }

    fs::write(out.join("eval.csv"), reports_csv(&reports)).map_err(Error::from)?;
    let table = render_table(&reports);
    fs::write(out.join("eval.txt"), &table).map_err(Error::from)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CmdResult<()> {
    let overlay = RunConfig {
        method: a.method.map(|m| m.as_str().into()),
        train: TrainSection {
            epochs: a.epochs,
            seed: a.common.seed,
            teacher: a.teacher.clone(),
            ..Default::default()
        },
        loss: LossSection {
            beta: a.beta,
            lambda: a.lambda,
            tap: None,
        },
        sweep: SweepSection {
            param: a.param.clone(),
            grid: a.grid.clone(),
            jobs: a.jobs,
        },
        ..Default::default()
    };
    let resolved = assemble(&a.common, overlay)?;
    let spec = resolved.sweep.clone().ok_or_else(|| {
        Failure::Lib(Error::Config("sweep requires --param and --grid".into()))
    })?;
    if resolved.method == Method::Vanilla {
        return Err(Failure::Lib(Error::Config(
            "sweep requires an adversarial method".into(),
        )));
    }
    if let SweepSpec::Lambda(values) = &spec {
        if !resolved.method.distills() && values.iter().any(|v| *v > 0.0) {
            return Err(Failure::Lib(Error::Config(format!(
                "lambda sweep needs a distilling method, got {}",
                resolved.method
            ))));
        }
    }
    let out = prepare_out(&a.common, "sweep", &resolved)?;

    let teacher: Option<Checkpoint<f64>> = resolved
        .train
        .vanilla_ckpt
        .as_ref()
        .map(|p| load_checkpoint(p))
        .transpose()?;
    let (train_ds, test_ds) = resolved.data.load::<f64>()?;
    let result = sweep(
        &spec,
        &resolved.train,
        &resolved.desc,
        teacher.as_ref(),
        &train_ds,
        eval_split(&train_ds, &test_ds),
        &resolved.eval_attacks[0],
        resolved.jobs,
    )?;

    fs::write(out.join("sweep.csv"), result.to_csv()).map_err(Error::from)?;
    for point in &result.points {
        save_checkpoint(
            &point.checkpoint,
            &out.join(format!("ckpt-{}-{}.bin", result.param, point.value)),
        )?;
    }
    print!("{}", result.to_csv());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CmdResult<()> {
    let overlay = RunConfig {
        model: a.model.clone(),
        loss: LossSection {
            beta: None,
            lambda: None,
            tap: a.tap.clone(),
        },
        eval: EvalSection {
            seed: a.common.seed,
            max_per_class: a.max_per_class,
            ..Default::default()
        },
        ..Default::default()
    };
    let resolved = assemble(&a.common, overlay)?;
    let model_path = required_model(&resolved)?;
    let out = prepare_out(&a.common, "export-features", &resolved)?;

    let victim = load_checkpoint::<f64>(&model_path)?.instantiate()?;
    let (train_ds, test_ds) = resolved.data.load::<f64>()?;
    let ds = eval_split(&train_ds, &test_ds);
    let csv = export_features(
        &victim,
        ds,
        &resolved.train.loss.tap,
        resolved.max_per_class,
        &resolved.eval_attacks[0],
        resolved.eval_seed,
    )?;
    let rows = csv.lines().count() - 1;
    fs::write(out.join("embeddings.csv"), csv).map_err(Error::from)?;
    println!(
        "exported {rows} feature rows from tap {:?} -> {}",
        resolved.train.loss.tap,
        out.join("embeddings.csv").display()
    );
    Ok(())
}
