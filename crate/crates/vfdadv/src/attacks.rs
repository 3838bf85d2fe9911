//! Gradient-based adversarial example generation.
//!
//! Four attacks share one contract: the returned batch stays inside the
//! declared perturbation ball (for the norm-bounded attacks) and inside the
//! valid input range, and crafting never routes gradients into the attacked
//! model's parameters. FGSM is literally one projected step, so it shares
//! the PGD code path and matches it bit for bit.
//!
//! Threat models are expressed by choice of model argument: hand the victim
//! for white-box attacks, a surrogate for black-box transfer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::TappedModel;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Anything attackable: produces logits with gradient flow confined to the
/// input. Implementations must pause their own parameter gradients.
pub trait Classifier<S: Scalar> {
    fn attack_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>>;
}

impl<S: Scalar> Classifier<S> for TappedModel<S> {
    fn attack_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let _pause = self.params().pause_grads();
        self.forward(x)
    }
}

/// Attack algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    CwL2,
    TradesInner,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::CwL2 => "cw_l2",
            AttackKind::TradesInner => "trades_inner",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw_l2" => Ok(AttackKind::CwL2),
            "trades_inner" => Ok(AttackKind::TradesInner),
            other => Err(Error::Config(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Perturbation-ball geometry for the norm-bounded attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LInf,
    L2,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::LInf => "linf",
            NormKind::L2 => "l2",
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(NormKind::LInf),
            "l2" => Ok(NormKind::L2),
            other => Err(Error::Config(format!("unknown norm kind {other:?}"))),
        }
    }
}

/// Full recipe for one attack run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub norm: NormKind,
    /// Perturbation budget in input-scale units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    /// Confidence margin (`cw_l2` only).
    pub kappa: f64,
    /// Descent rate on the change-of-variable (`cw_l2` only).
    pub lr: f64,
    /// Valid input range, normally `[0, 1]`.
    pub clamp: (f64, f64),
}

impl AttackSpec {
    /// Single sign step of size ε.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            norm: NormKind::LInf,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            kappa: 0.0,
            lr: 0.0,
            clamp: (0.0, 1.0),
        }
    }

    /// Iterated projected sign steps with random start.
    pub fn pgd(epsilon: f64, steps: usize, step_size: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            norm: NormKind::LInf,
            epsilon,
            steps,
            step_size,
            random_start: true,
            kappa: 0.0,
            lr: 0.0,
            clamp: (0.0, 1.0),
        }
    }

    /// The 20-step evaluation recipe: α = ε/4.
    pub fn pgd_default(epsilon: f64) -> Self {
        Self::pgd(epsilon, 20, epsilon / 4.0)
    }

    /// Norm-minimizing attack: kappa 0, 1000 steps, lr 0.01.
    pub fn cw_l2() -> Self {
        AttackSpec {
            kind: AttackKind::CwL2,
            norm: NormKind::L2,
            epsilon: 0.0,
            steps: 1000,
            step_size: 0.0,
            random_start: false,
            kappa: 0.0,
            lr: 0.01,
            clamp: (0.0, 1.0),
        }
    }

    /// KL-ascent inner maximizer used by the TRADES robustness term.
    pub fn trades_inner(epsilon: f64, steps: usize, step_size: f64) -> Self {
        AttackSpec {
            kind: AttackKind::TradesInner,
            norm: NormKind::LInf,
            epsilon,
            steps,
            step_size,
            random_start: true,
            kappa: 0.0,
            lr: 0.0,
            clamp: (0.0, 1.0),
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_random_start(mut self, random_start: bool) -> Self {
        self.random_start = random_start;
        self
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "clamp range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        match self.kind {
            AttackKind::Fgsm => {
                if self.steps != 1 || self.step_size != self.epsilon {
                    return Err(Error::Config(
                        "fgsm requires steps == 1 and step_size == epsilon".into(),
                    ));
                }
            }
            AttackKind::Pgd | AttackKind::TradesInner => {
                if self.epsilon > 0.0 && !(self.step_size > 0.0) {
                    return Err(Error::Config(format!(
                        "step_size must be positive, got {}",
                        self.step_size
                    )));
                }
            }
            AttackKind::CwL2 => {
                if !(self.lr > 0.0) {
                    return Err(Error::Config(format!(
                        "cw lr must be positive, got {}",
                        self.lr
                    )));
                }
                if self.kappa < 0.0 {
                    return Err(Error::Config(format!(
                        "kappa must be non-negative, got {}",
                        self.kappa
                    )));
                }
            }
        }
        if matches!(self.norm, NormKind::LInf) && self.epsilon > hi - lo {
            return Err(Error::Config(format!(
                "epsilon {} exceeds clamp width {}",
                self.epsilon,
                hi - lo
            )));
        }
        Ok(())
    }
}

/// Sign with a genuine zero branch, so flat gradients produce no movement.
fn sign0<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn clamp_val<S: Scalar>(v: S, lo: S, hi: S) -> S {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Objective maximized by the projected-ascent loop.
enum InnerObjective<'a, S: Scalar> {
    /// Mean cross-entropy against the true labels.
    CrossEntropy(&'a [usize]),
    /// Mean KL from a fixed clean predictive distribution (row-major, same
    /// geometry as the logits).
    KlFromClean(Vec<S>),
}

fn check_batch_labels<S: Scalar>(x: &Tensor<S>, y: &[usize]) -> Result<usize> {
    let batch = x.shape()[0];
    if y.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            y.len()
        )));
    }
    Ok(batch)
}

/// One-hot rows as a constant tensor matching `[batch, classes]` logits.
fn onehot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[r * classes + y] = S::one();
    }
    Tensor::new(data, vec![labels.len(), classes])
}

/// Scalar loss whose ascent direction drives the attack.
fn inner_loss<S: Scalar>(
    logits: &Tensor<S>,
    objective: &InnerObjective<'_, S>,
) -> Result<Tensor<S>> {
    let batch = logits.shape()[0];
    let classes = logits.shape()[1];
    let logp = ops::log_softmax(logits)?;
    let weights = match objective {
        InnerObjective::CrossEntropy(y) => onehot(y, classes)?,
        InnerObjective::KlFromClean(p) => Tensor::new(p.clone(), vec![batch, classes])?,
    };
    // Mean CE / mean cross term of the KL, both of the form -(1/N) Σ w·logp.
    Ok(ops::scale(
        &ops::sum(&ops::mul(&logp, &weights)?),
        -S::one() / S::from_f64(batch as f64),
    ))
}

/// Projects `delta` into the norm ball, writes `clamp(x0 + delta)` and
/// re-derives delta so both constraints hold exactly.
fn project<S: Scalar>(
    x0: &[S],
    delta: &mut [S],
    spec: &AttackSpec,
    batch: usize,
) -> Vec<S> {
    let eps = S::from_f64(spec.epsilon);
    let (lo, hi) = (S::from_f64(spec.clamp.0), S::from_f64(spec.clamp.1));
    match spec.norm {
        NormKind::LInf => {
            for d in delta.iter_mut() {
                *d = clamp_val(*d, -eps, eps);
            }
        }
        NormKind::L2 => {
            let per = delta.len() / batch;
            for r in 0..batch {
                let row = &mut delta[r * per..(r + 1) * per];
                let norm = row
                    .iter()
                    .fold(S::zero(), |acc, &v| acc + v * v)
                    .sqrt();
                if norm > eps && norm > S::zero() {
                    let shrink = eps / norm;
                    for v in row.iter_mut() {
                        *v = *v * shrink;
                    }
                }
            }
        }
    }
    let mut x = vec![S::zero(); delta.len()];
    for i in 0..delta.len() {
        x[i] = clamp_val(x0[i] + delta[i], lo, hi);
        delta[i] = x[i] - x0[i];
    }
    x
}

/// Shared projected-ascent loop behind FGSM, PGD and the TRADES inner step.
fn projected_ascent<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x0: &Tensor<S>,
    objective: InnerObjective<'_, S>,
    spec: &AttackSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let batch = x0.shape()[0];
    let x0_data = x0.to_vec();
    let numel = x0_data.len();

    let mut delta = vec![S::zero(); numel];
    if spec.random_start && spec.epsilon > 0.0 {
        let rng = rng.ok_or_else(|| {
            Error::Contract("random_start requires an RNG stream".into())
        })?;
        match spec.norm {
            NormKind::LInf => {
                for d in delta.iter_mut() {
                    *d = S::from_f64(rng.gen_range(-spec.epsilon..=spec.epsilon));
                }
            }
            NormKind::L2 => {
                // Uniform in the ball: scaled Gaussian direction with a
                // radius drawn as U^(1/d).
                let per = numel / batch;
                for r in 0..batch {
                    let dir: Vec<f64> = (0..per)
                        .map(|_| rand_distr::StandardNormal.sample(rng))
                        .collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let radius =
                        spec.epsilon * rng.gen_range(0.0f64..1.0).powf(1.0 / per as f64);
                    for i in 0..per {
                        delta[r * per + i] = S::from_f64(dir[i] / norm * radius);
                    }
                }
            }
        }
    }

    let mut x_data = project(&x0_data, &mut delta, spec, batch);
    let alpha = S::from_f64(if spec.kind == AttackKind::Fgsm {
        spec.epsilon
    } else {
        spec.step_size
    });

    if spec.epsilon == 0.0 {
        return Tensor::new(x_data, x0.shape().to_vec());
    }

    for _ in 0..spec.steps {
        let xt = Tensor::param(x_data.clone(), x0.shape().to_vec())?;
        let logits = model.attack_logits(&xt)?;
        let loss = inner_loss(&logits, &objective)?;
        loss.backward()?;
        let grad = xt
            .grad()
            .ok_or_else(|| Error::Contract("attack input received no gradient".into()))?;
        match spec.norm {
            NormKind::LInf => {
                for i in 0..numel {
                    delta[i] += alpha * sign0(grad[i]);
                }
            }
            NormKind::L2 => {
                let per = numel / batch;
                for r in 0..batch {
                    let g = &grad[r * per..(r + 1) * per];
                    let norm = g.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
                    if norm > S::zero() {
                        for i in 0..per {
                            delta[r * per + i] += alpha * g[i] / norm;
                        }
                    }
                }
            }
        }
        x_data = project(&x0_data, &mut delta, spec, batch);
    }
    Tensor::new(x_data, x0.shape().to_vec())
}

use rand_distr::Distribution;

/// Single-step sign attack.
pub fn fgsm<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<S>> {
    check_batch_labels(x, y)?;
    projected_ascent(model, x, InnerObjective::CrossEntropy(y), spec, None)
}

/// Multi-step projected sign attack (or normalized-gradient steps under ℓ2).
pub fn pgd<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    check_batch_labels(x, y)?;
    projected_ascent(model, x, InnerObjective::CrossEntropy(y), spec, Some(rng))
}

/// PGD ascent on KL(clean predictions ‖ perturbed predictions); the clean
/// distribution is a constant target, so no label is needed.
pub fn trades_inner<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    let clean_logits = model.attack_logits(&x.detach())?;
    let p = ops::softmax(&clean_logits)?.to_vec();
    projected_ascent(model, x, InnerObjective::KlFromClean(p), spec, Some(rng))
}

/// Trade-off constant between perturbation size and misclassification
/// confidence; fixed (no binary search).
const CW_TRADEOFF: f64 = 1.0;
/// Keeps the change-of-variable away from the atanh singularity.
const CW_EDGE: f64 = 1e-6;

/// Norm-minimizing ℓ2 attack via a tanh change of variable.
///
/// Returns, per example, the smallest-‖δ‖₂ iterate that misclassifies, or
/// the final iterate when none does. Already-misclassified inputs come back
/// unchanged.
pub fn cw_l2<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let batch = check_batch_labels(x, y)?;
    let (lo, hi) = (spec.clamp.0, spec.clamp.1);
    let width = hi - lo;
    let x0_data = x.to_vec();
    let numel = x0_data.len();
    let per = numel / batch;
    let lr = S::from_f64(spec.lr);
    let kappa = S::from_f64(spec.kappa);
    let c = S::from_f64(CW_TRADEOFF);

    // delta = 0 is always the first candidate, so inputs that already lose
    // the margin are returned untouched.
    let mut best_norm2 = vec![f64::INFINITY; batch];
    let mut best_x: Vec<Option<Vec<S>>> = vec![None; batch];
    {
        let logits = model.attack_logits(&x.detach())?;
        let margins = ops::label_margin(&logits, y)?;
        for r in 0..batch {
            if margins.data()[r] < S::zero() {
                best_norm2[r] = 0.0;
                best_x[r] = Some(x0_data[r * per..(r + 1) * per].to_vec());
            }
        }
    }

    // w = atanh(2(x-lo)/width - 1), clipped inside the open interval.
    let mut w_data: Vec<S> = x0_data
        .iter()
        .map(|&v| {
            let u = ((v.to_f64() - lo) / width).clamp(CW_EDGE, 1.0 - CW_EDGE);
            S::from_f64((2.0 * u - 1.0).atanh())
        })
        .collect();

    let x0_const = x.detach();
    let mut last_x: Vec<S> = x0_data.clone();
    for _ in 0..spec.steps {
        let w = Tensor::param(w_data.clone(), x.shape().to_vec())?;
        // x = lo + width * (tanh(w) + 1) / 2 stays strictly inside the box.
        let xt = ops::add_scalar(
            &ops::scale(
                &ops::add_scalar(&ops::tanh(&w), S::one()),
                S::from_f64(width / 2.0),
            ),
            S::from_f64(lo),
        );
        let logits = model.attack_logits(&xt)?;
        let delta = ops::sub(&xt, &x0_const)?;
        let norm2 = ops::sum(&ops::mul(&delta, &delta)?);
        let margins = ops::label_margin(&logits, y)?;
        // max(margin, -kappa) = relu(margin + kappa) - kappa
        let hinge = ops::add_scalar(
            &ops::relu(&ops::add_scalar(&margins, kappa)),
            -kappa,
        );
        let objective = ops::add(&norm2, &ops::scale(&ops::sum(&hinge), c))?;

        // Candidate bookkeeping for the current iterate.
        {
            let xv = xt.data();
            let dv = delta.data();
            let mv = margins.data();
            for r in 0..batch {
                if mv[r] < S::zero() {
                    let n2: f64 = dv[r * per..(r + 1) * per]
                        .iter()
                        .map(|&d| d.to_f64() * d.to_f64())
                        .sum();
                    if n2 < best_norm2[r] {
                        best_norm2[r] = n2;
                        best_x[r] = Some(xv[r * per..(r + 1) * per].to_vec());
                    }
                }
            }
            last_x.copy_from_slice(&xv);
        }

        objective.backward()?;
        let grad = w
            .grad()
            .ok_or_else(|| Error::Contract("cw variable received no gradient".into()))?;
        for i in 0..numel {
            w_data[i] = w_data[i] - lr * grad[i];
        }
    }

    // Evaluate the post-update iterate so the final step is not wasted.
    {
        let mut final_x = vec![S::zero(); numel];
        let half = S::from_f64(width / 2.0);
        let lo_s = S::from_f64(lo);
        for i in 0..numel {
            final_x[i] = lo_s + half * (w_data[i].tanh() + S::one());
        }
        let xt = Tensor::new(final_x.clone(), x.shape().to_vec())?;
        let logits = model.attack_logits(&xt)?;
        let margins = ops::label_margin(&logits, y)?;
        for r in 0..batch {
            if margins.data()[r] < S::zero() {
                let n2: f64 = (0..per)
                    .map(|i| {
                        let d = (final_x[r * per + i] - x0_data[r * per + i]).to_f64();
                        d * d
                    })
                    .sum();
                if n2 < best_norm2[r] {
                    best_norm2[r] = n2;
                    best_x[r] = Some(final_x[r * per..(r + 1) * per].to_vec());
                }
            }
        }
        last_x = final_x;
    }

    let mut out = vec![S::zero(); numel];
    for r in 0..batch {
        let row = best_x[r]
            .as_deref()
            .unwrap_or(&last_x[r * per..(r + 1) * per]);
        out[r * per..(r + 1) * per].copy_from_slice(row);
    }
    Tensor::new(out, x.shape().to_vec())
}

/// Dispatches on `spec.kind`. `trades_inner` ignores the labels.
pub fn run_attack<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, y, spec),
        AttackKind::Pgd => pgd(model, x, y, spec, rng),
        AttackKind::CwL2 => cw_l2(model, x, y, spec),
        AttackKind::TradesInner => trades_inner(model, x, spec, rng),
    }
}
