//! Vanilla pre-training and the feature-distilled adversarial loop.
//!
//! `train_vanilla` fits a standard classifier on clean examples only;
//! `train_vfd_adv` runs the full per-batch recipe: craft adversarials
//! against the current student, collect teacher features on clean inputs
//! and student features on both clean and perturbed inputs, compose the
//! weighted total loss, and take one SGD step. Checkpoints round-trip
//! parameters bit-exactly through a human-readable manifest plus a
//! little-endian payload.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{adv_loss_from_logits, clean_loss, total_loss, vfd_loss, LossSpec};
use crate::models::{build, ArchDescriptor, TappedModel};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::{Sgd, SgdConfig};

/// Everything a training run needs beyond the architecture and data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub attack: AttackSpec,
    pub loss: LossSpec,
    pub seed: u64,
    /// Snapshot cadence in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Where the frozen standard model lives, for file-driven runs.
    pub vanilla_ckpt: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig {
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            attack: AttackSpec::pgd(0.1, 7, 0.025),
            loss: LossSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            vanilla_ckpt: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.sgd.validate()?;
        self.attack.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// One epoch's mean loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub l_clean: f64,
    pub l_adv: f64,
    pub l_kd: f64,
    pub l_total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,l_clean,l_adv,l_kd,l_total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.l_clean, self.l_adv, self.l_kd, self.l_total
        )
    }
}

/// Renders the full training log as CSV, header included.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LogRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// A trained model frozen into plain data, safe to ship across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub desc: ArchDescriptor,
    pub seed: u64,
    pub epoch: usize,
    /// Name, shape, and values of every parameter in insertion order.
    pub params: Vec<(String, Vec<usize>, Vec<S>)>,
    /// Serialized run configuration, for provenance.
    pub config: String,
    /// Last few training-log rows in CSV form.
    pub log_tail: Vec<String>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Captures the model's current parameters.
    pub fn from_model(
        model: &TappedModel<S>,
        epoch: usize,
        config: String,
        log_tail: Vec<String>,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.to_vec()))
            .collect();
        Checkpoint {
            desc: model.descriptor().clone(),
            seed: model.seed(),
            epoch,
            params,
            config,
            log_tail,
        }
    }

    /// Rebuilds a live model carrying exactly the stored parameters.
    pub fn instantiate(&self) -> Result<TappedModel<S>> {
        let model = build(&self.desc, self.seed)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} parameters, checkpoint stores {}",
                model.params().len(),
                self.params.len()
            )));
        }
        for (name, shape, data) in &self.params {
            let Some(t) = model.params().get(name) else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name:?} unknown to the architecture"
                )));
            };
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, checkpoint stores {:?}",
                    t.shape(),
                    shape
                )));
            }
            t.set_data(data.clone())?;
        }
        Ok(model)
    }

    /// Same digest scheme as a live parameter set, so checkpoints and
    /// models can be compared directly.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, shape, data) in &self.params {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in shape {
                hasher.update((d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(data.len() * S::BYTES);
            for &v in data {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

const CKPT_MAGIC: &str = "vfdadv-checkpoint v1";

/// Writes the checkpoint: text manifest, `---` separator, then every
/// parameter's values little-endian in manifest order.
pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    let mut m = String::new();
    m.push_str(CKPT_MAGIC);
    m.push('\n');
    m.push_str(&format!("arch: {}\n", ckpt.desc.arch.as_str()));
    m.push_str(&format!("dtype: {}\n", S::DTYPE));
    m.push_str(&format!("seed: {}\n", ckpt.seed));
    m.push_str(&format!("epoch: {}\n", ckpt.epoch));
    let words = |dims: &[usize]| {
        dims.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    m.push_str(&format!("input_shape: {}\n", words(&ckpt.desc.input_shape)));
    m.push_str(&format!("num_classes: {}\n", ckpt.desc.num_classes));
    m.push_str(&format!("widths: {}\n", words(&ckpt.desc.block_widths)));
    let mut offset = 0usize;
    for (name, shape, data) in &ckpt.params {
        m.push_str(&format!("param: {name} [{}] @{offset}\n", words(shape)));
        offset += data.len() * S::BYTES;
    }
    m.push_str("config_begin\n");
    for line in ckpt.config.lines() {
        m.push_str(&format!("  {line}\n"));
    }
    m.push_str("config_end\n");
    m.push_str("log_begin\n");
    for line in &ckpt.log_tail {
        m.push_str(&format!("  {line}\n"));
    }
    m.push_str("log_end\n");
    m.push_str("---\n");

    let mut file = fs::File::create(path)?;
    file.write_all(m.as_bytes())?;
    let mut payload = Vec::with_capacity(offset);
    for (_, _, data) in &ckpt.params {
        for &v in data {
            v.write_le(&mut payload);
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_dims(value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(' ')
        .map(|w| w.parse().map_err(|_| ckpt_err(format!("bad dimension {w:?}"))))
        .collect()
}

/// Reads a checkpoint back; inverse of [`save_checkpoint`] bit for bit.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)?;
    let sep = b"---\n";
    let header_end = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| ckpt_err("missing manifest separator"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| ckpt_err("manifest is not utf-8"))?;
    let mut lines = header.lines();
    match lines.next() {
        Some(CKPT_MAGIC) => {}
        Some(other) if other.starts_with("vfdadv-checkpoint") => {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {other:?}, expected {CKPT_MAGIC:?}"
            )));
        }
        _ => return Err(ckpt_err(format!("bad magic line, expected {CKPT_MAGIC:?}"))),
    }

    let mut arch = None;
    let mut seed = None;
    let mut epoch = None;
    let mut input_shape = None;
    let mut num_classes = None;
    let mut widths = None;
    let mut params: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut config = String::new();
    let mut log_tail = Vec::new();
    let mut section = "";
    for line in lines {
        match line {
            "config_begin" => {
                section = "config";
                continue;
            }
            "config_end" | "log_end" => {
                section = "";
                continue;
            }
            "log_begin" => {
                section = "log";
                continue;
            }
            _ => {}
        }
        match section {
            "config" => {
                config.push_str(line.strip_prefix("  ").unwrap_or(line));
                config.push('\n');
                continue;
            }
            "log" => {
                log_tail.push(line.strip_prefix("  ").unwrap_or(line).to_string());
                continue;
            }
            _ => {}
        }
        let Some((key, value)) = line.split_once(": ") else {
            return Err(ckpt_err(format!("malformed manifest line {line:?}")));
        };
        match key {
            "arch" => arch = Some(value.parse::<crate::models::ArchId>()?),
            "dtype" => {
                if value != S::DTYPE {
                    return Err(ckpt_err(format!(
                        "checkpoint stores {value} values, loader expects {}",
                        S::DTYPE
                    )));
                }
            }
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|_| {
                    ckpt_err(format!("bad seed {value:?}"))
                })?)
            }
            "epoch" => {
                epoch = Some(value.parse::<usize>().map_err(|_| {
                    ckpt_err(format!("bad epoch {value:?}"))
                })?)
            }
            "input_shape" => input_shape = Some(parse_dims(value)?),
            "num_classes" => {
                num_classes = Some(value.parse::<usize>().map_err(|_| {
                    ckpt_err(format!("bad num_classes {value:?}"))
                })?)
            }
            "widths" => widths = Some(parse_dims(value)?),
            "param" => {
                let (name, rest) = value
                    .split_once(" [")
                    .ok_or_else(|| ckpt_err(format!("malformed param line {value:?}")))?;
                let (dims, at) = rest
                    .split_once("] @")
                    .ok_or_else(|| ckpt_err(format!("malformed param line {value:?}")))?;
                let offset = at
                    .parse::<usize>()
                    .map_err(|_| ckpt_err(format!("bad offset {at:?}")))?;
                params.push((name.to_string(), parse_dims(dims)?, offset));
            }
            _ => {}
        }
    }

    let arch = arch.ok_or_else(|| ckpt_err("manifest missing arch"))?;
    let desc = ArchDescriptor::new(
        arch,
        input_shape.ok_or_else(|| ckpt_err("manifest missing input_shape"))?,
        num_classes.ok_or_else(|| ckpt_err("manifest missing num_classes"))?,
    )
    .with_widths(widths.ok_or_else(|| ckpt_err("manifest missing widths"))?);
    desc.validate()?;

    let payload = &bytes[header_end + sep.len()..];
    let total: usize = params
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>() * S::BYTES)
        .sum();
    if payload.len() != total {
        return Err(ckpt_err(format!(
            "payload is {} bytes, manifest promises {total}",
            payload.len()
        )));
    }
    let mut entries = Vec::with_capacity(params.len());
    for (name, shape, offset) in params {
        let numel: usize = shape.iter().product();
        let end = offset + numel * S::BYTES;
        if end > payload.len() {
            return Err(ckpt_err(format!(
                "parameter {name:?} runs past the payload ({end} > {})",
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = offset + i * S::BYTES;
            data.push(S::read_le(&payload[at..at + S::BYTES]));
        }
        entries.push((name, shape, data));
    }
    Ok(Checkpoint {
        desc,
        seed: seed.ok_or_else(|| ckpt_err("manifest missing seed"))?,
        epoch: epoch.ok_or_else(|| ckpt_err("manifest missing epoch"))?,
        params: entries,
        config,
        log_tail,
    })
}

/// Final checkpoint plus the full log and per-epoch parameter digests.
#[derive(Debug)]
pub struct TrainRun<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    pub log: Vec<LogRow>,
    pub epoch_checksums: Vec<String>,
    /// Intermediate checkpoints at the configured cadence.
    pub snapshots: Vec<Checkpoint<S>>,
}

const LOG_TAIL: usize = 5;

fn tail_rows(log: &[LogRow]) -> Vec<String> {
    log.iter()
        .rev()
        .take(LOG_TAIL)
        .rev()
        .map(LogRow::to_csv)
        .collect()
}

fn config_snapshot(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).unwrap_or_default()
}

fn shuffled_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, &format!("train/epoch{epoch}"));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Fits a standard classifier on clean examples only.
pub fn train_vanilla<S: Scalar>(
    desc: &ArchDescriptor,
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainRun<S>> {
    cfg.validate()?;
    desc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let model: TappedModel<S> = build(desc, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.sgd)?;
    let snapshot = config_snapshot(cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut epoch_checksums = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut clean_sum = 0.0f64;
        for (b, batch) in shuffled_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (x, y) = dataset.batch(&batch)?;
            let logits = model.forward(&x)?;
            let loss = clean_loss(&logits, &y)?;
            let value = loss.item().to_f64();
            if !value.is_finite() {
                return Err(Error::TrainingAbort {
                    term: "l_clean",
                    epoch,
                    batch: b,
                });
            }
            clean_sum += value * batch.len() as f64;
            model.params().zero_grads();
            loss.backward()?;
            sgd.step(model.params())?;
        }
        let l_clean = clean_sum / dataset.len() as f64;
        log.push(LogRow {
            epoch,
            l_clean,
            l_adv: 0.0,
            l_kd: 0.0,
            l_total: l_clean,
        });
        epoch_checksums.push(model.checksum());
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push(Checkpoint::from_model(
                &model,
                epoch,
                snapshot.clone(),
                tail_rows(&log),
            ));
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint::from_model(&model, cfg.epochs, snapshot, tail_rows(&log)),
        log,
        epoch_checksums,
        snapshots,
    })
}

/// Runs the feature-distilled adversarial loop. The teacher is required
/// exactly when the distillation weight is positive; it is never updated.
pub fn train_vfd_adv<S: Scalar>(
    vanilla: Option<&Checkpoint<S>>,
    desc: &ArchDescriptor,
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainRun<S>> {
    cfg.validate()?;
    desc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let distill = cfg.loss.lambda > 0.0;
    let teacher = match (distill, vanilla) {
        (true, None) => {
            return Err(Error::Config(
                "distillation weight is positive but no standard model was supplied".into(),
            ))
        }
        (true, Some(ckpt)) => {
            if ckpt.desc.arch != desc.arch {
                return Err(Error::Config(format!(
                    "teacher architecture {} does not match student {}",
                    ckpt.desc.arch.as_str(),
                    desc.arch.as_str()
                )));
            }
            let mut t = ckpt.instantiate()?;
            t.freeze();
            for (_, p) in t.params().iter() {
                p.set_requires_grad(false);
            }
            Some(t)
        }
        (false, _) => None,
    };

    let student: TappedModel<S> = build(desc, cfg.seed)?;
    let tap = cfg.loss.tap.as_str();
    if let Some(t) = &teacher {
        if !student.has_tap(tap) {
            return Err(Error::Config(format!("unknown feature tap {tap:?}")));
        }
        let (s_dim, t_dim) = (student.tap_dim(tap)?, t.tap_dim(tap)?);
        if s_dim != t_dim {
            return Err(Error::Config(format!(
                "feature tap {tap:?} is {s_dim}-dimensional in the student but {t_dim}-dimensional in the teacher"
            )));
        }
    }
    let teacher_checksum = teacher.as_ref().map(TappedModel::checksum);

    let mut sgd = Sgd::new(cfg.sgd)?;
    let snapshot = config_snapshot(cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut epoch_checksums = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let taps: &[&str] = if distill { &[tap] } else { &[] };
    let abort = |term: &'static str, epoch: usize, batch: usize| Error::TrainingAbort {
        term,
        epoch,
        batch,
    };
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 4];
        for (b, batch) in shuffled_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (x, y) = dataset.batch(&batch)?;
            let mut attack_rng = derive_rng(cfg.seed, &format!("attack/epoch{epoch}/batch{b}"));
            let x_adv = run_attack(&student, &x, &y, &cfg.attack, &mut attack_rng)?;

            let (logits_clean, f_clean) = student.forward_tapped(&x, taps)?;
            let (logits_adv, f_adv) = student.forward_tapped(&x_adv, taps)?;
            let l_clean = clean_loss(&logits_clean, &y)?;
            let l_adv = adv_loss_from_logits(cfg.loss.phi, &logits_clean, &logits_adv, &y)?;
            let l_kd = match &teacher {
                Some(t) if distill => {
                    let (_, f_teacher) = t.forward_tapped(&x, taps)?;
                    Some(vfd_loss(
                        f_adv.get(tap).expect("tap was requested"),
                        f_clean.get(tap).expect("tap was requested"),
                        f_teacher.get(tap).expect("tap was requested"),
                    )?)
                }
                _ => None,
            };
            let l_total = total_loss(&l_clean, &l_adv, l_kd.as_ref(), &cfg.loss)
                .map_err(|e| match e {
                    Error::NonFiniteTerm { term } => abort(term, epoch, b),
                    other => other,
                })?;

            let w = batch.len() as f64;
            sums[0] += l_clean.item().to_f64() * w;
            sums[1] += l_adv.item().to_f64() * w;
            sums[2] += l_kd.as_ref().map_or(0.0, |t| t.item().to_f64()) * w;
            sums[3] += l_total.item().to_f64() * w;

            student.params().zero_grads();
            l_total.backward()?;
            sgd.step(student.params())?;
        }
        let n = dataset.len() as f64;
        log.push(LogRow {
            epoch,
            l_clean: sums[0] / n,
            l_adv: sums[1] / n,
            l_kd: sums[2] / n,
            l_total: sums[3] / n,
        });
        epoch_checksums.push(student.checksum());
        if let (Some(t), Some(expect)) = (&teacher, &teacher_checksum) {
            if t.checksum() != *expect {
                return Err(Error::Contract(
                    "teacher parameters changed during training".into(),
                ));
            }
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push(Checkpoint::from_model(
                &student,
                epoch,
                snapshot.clone(),
                tail_rows(&log),
            ));
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint::from_model(&student, cfg.epochs, snapshot, tail_rows(&log)),
        log,
        epoch_checksums,
        snapshots,
    })
}
