//! Loss algebra for feature-distilled adversarial training.
//!
//! Four building blocks: the clean cross-entropy, a robustness term over
//! adversarial examples (hard-label cross-entropy or a KL pull toward the
//! clean predictive distribution), the vanilla-feature distillation term,
//! and their weighted composition
//! `total = clean + beta * adv + lambda * kd`.
//!
//! The KL variant treats the clean distribution as a constant target, and
//! both of its terms are computed through one shared log-softmax kernel, so
//! an adversarial batch that equals the clean batch bit for bit yields a KL
//! of exactly 0.0.

use crate::error::{Error, Result};
use crate::models::TappedModel;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Robustness-term flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    /// Cross-entropy of adversarial logits against ground-truth labels.
    AlpCe,
    /// KL from the model's own clean predictions to its adversarial ones.
    TradesKl,
}

impl Phi {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phi::AlpCe => "alp_ce",
            Phi::TradesKl => "trades_kl",
        }
    }
}

impl std::fmt::Display for Phi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alp_ce" => Ok(Phi::AlpCe),
            "trades_kl" => Ok(Phi::TradesKl),
            other => Err(Error::Config(format!("unknown phi {other:?}"))),
        }
    }
}

/// Feature-distance kind for the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    Euclidean,
}

/// Batch reduction for every term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    BatchMean,
}

/// Weights and knobs of the composed training loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossSpec {
    pub beta: f64,
    pub lambda: f64,
    pub phi: Phi,
    /// Feature tap distilled by the kd term.
    pub tap: String,
    pub gamma: Gamma,
    pub reduction: Reduction,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            beta: 6.0,
            lambda: 0.01,
            phi: Phi::TradesKl,
            tap: "block2".into(),
            gamma: Gamma::Euclidean,
            reduction: Reduction::BatchMean,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be a non-negative finite real, got {}",
                self.beta
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be a non-negative finite real, got {}",
                self.lambda
            )));
        }
        if self.tap.is_empty() {
            return Err(Error::Config("tap name must be non-empty".into()));
        }
        Ok(())
    }
}

fn batch_of<S: Scalar>(logits: &Tensor<S>) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "logits must be [batch, classes], got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

fn onehot<S: Scalar>(labels: &[usize], rows: usize, classes: usize) -> Result<Tensor<S>> {
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    let mut data = vec![S::zero(); rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[r * classes + y] = S::one();
    }
    Tensor::new(data, vec![rows, classes])
}

/// Mean cross-entropy of logits against hard labels.
pub fn clean_loss<S: Scalar>(logits: &Tensor<S>, y: &[usize]) -> Result<Tensor<S>> {
    let (rows, classes) = batch_of(logits)?;
    let neg_inv = -S::one() / S::from_f64(rows as f64);
    let logp = ops::log_softmax(logits)?;
    let hot = onehot(y, rows, classes)?;
    Ok(ops::scale(&ops::sum(&ops::mul(&logp, &hot)?), neg_inv))
}

/// Mean KL(softmax(clean logits) ‖ softmax(adv logits)) with the clean
/// distribution detached from the tape.
pub fn kl_div_mean<S: Scalar>(
    logits_clean: &Tensor<S>,
    logits_adv: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (rows, classes) = batch_of(logits_adv)?;
    if logits_clean.shape() != logits_adv.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_div_mean",
            lhs: logits_clean.shape().to_vec(),
            rhs: logits_adv.shape().to_vec(),
        });
    }
    let _ = classes;
    let neg_inv = -S::one() / S::from_f64(rows as f64);
    let clean = logits_clean.detach();
    let p = ops::softmax(&clean)?;
    let logp = ops::log_softmax(&clean)?;
    // Entropy offset replayed with the same elementwise-multiply/left-fold
    // order as the tape ops, so equal logits cancel to exactly 0.0.
    let s_clean = logp
        .data()
        .iter()
        .zip(p.data().iter())
        .fold(S::zero(), |acc, (&l, &pv)| acc + l * pv);
    let offset = -(s_clean * neg_inv);
    let logq = ops::log_softmax(logits_adv)?;
    let cross = ops::scale(&ops::sum(&ops::mul(&logq, &p)?), neg_inv);
    Ok(ops::add_scalar(&cross, offset))
}

/// Robustness term from precomputed logits.
pub fn adv_loss_from_logits<S: Scalar>(
    phi: Phi,
    logits_clean: &Tensor<S>,
    logits_adv: &Tensor<S>,
    y: &[usize],
) -> Result<Tensor<S>> {
    match phi {
        Phi::AlpCe => clean_loss(logits_adv, y),
        Phi::TradesKl => kl_div_mean(logits_clean, logits_adv),
    }
}

/// Robustness term; forwards the model itself (the clean pass is skipped for
/// the hard-label flavor).
pub fn adv_loss<S: Scalar>(
    model: &TappedModel<S>,
    x_adv: &Tensor<S>,
    x: &Tensor<S>,
    y: &[usize],
    spec: &LossSpec,
) -> Result<Tensor<S>> {
    let logits_adv = model.forward(x_adv)?;
    match spec.phi {
        Phi::AlpCe => clean_loss(&logits_adv, y),
        Phi::TradesKl => {
            let logits_clean = model.forward(x)?;
            kl_div_mean(&logits_clean, &logits_adv)
        }
    }
}

fn as_rows<S: Scalar>(f: &Tensor<S>) -> Result<Tensor<S>> {
    if f.shape().len() > 2 {
        ops::flatten(f)
    } else {
        Ok(f.clone())
    }
}

/// Feature-distillation term: batch mean of
/// `‖f_student(x_adv) − f_teacher(x)‖₂ + ‖f_student(x) − f_teacher(x)‖₂`.
///
/// Spatial features are flattened to rows first. Always non-negative; zero
/// when student features coincide with the teacher's on both inputs.
pub fn vfd_loss<S: Scalar>(
    f_adv_on_xadv: &Tensor<S>,
    f_adv_on_x: &Tensor<S>,
    f_van_on_x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let a = as_rows(f_adv_on_xadv)?;
    let b = as_rows(f_adv_on_x)?;
    let t = as_rows(f_van_on_x)?;
    if a.shape() != t.shape() || b.shape() != t.shape() {
        return Err(Error::ShapeMismatch {
            op: "vfd_loss",
            lhs: a.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let d_adv = ops::row_l2(&ops::sub(&a, &t)?)?;
    let d_clean = ops::row_l2(&ops::sub(&b, &t)?)?;
    Ok(ops::mean(&ops::add(&d_adv, &d_clean)?))
}

fn require_finite<S: Scalar>(value: &Tensor<S>, term: &'static str) -> Result<()> {
    if !value.item().to_f64().is_finite() {
        return Err(Error::NonFiniteTerm { term });
    }
    Ok(())
}

/// Weighted composition `l_clean + beta * l_adv + lambda * l_kd`.
///
/// Zero-weighted terms are left off the tape entirely, so a lambda of 0
/// reproduces the base method's graph, gradients and all. `l_kd` may only be
/// omitted when lambda is 0.
pub fn total_loss<S: Scalar>(
    l_clean: &Tensor<S>,
    l_adv: &Tensor<S>,
    l_kd: Option<&Tensor<S>>,
    spec: &LossSpec,
) -> Result<Tensor<S>> {
    spec.validate()?;
    require_finite(l_clean, "l_clean")?;
    require_finite(l_adv, "l_adv")?;
    if let Some(kd) = l_kd {
        require_finite(kd, "l_kd")?;
    }
    let mut total = l_clean.clone();
    if spec.beta != 0.0 {
        total = ops::add(&total, &ops::scale(l_adv, S::from_f64(spec.beta)))?;
    }
    if spec.lambda != 0.0 {
        let kd = l_kd.ok_or_else(|| {
            Error::Contract("lambda > 0 requires the kd term".into())
        })?;
        total = ops::add(&total, &ops::scale(kd, S::from_f64(spec.lambda)))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn logits(data: Vec<f64>, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(data, vec![rows, cols]).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let z = logits(vec![0.0; 10], 1, 10);
        let l = clean_loss(&z, &[3]).unwrap().item();
        assert_relative_eq!(l, 10.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let z = logits(vec![margin, 0.0], 1, 2);
            let l = clean_loss(&z, &[0]).unwrap().item();
            assert!(l < prev, "loss must fall as the margin grows");
            prev = l;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn batch_ce_equals_per_example_average() {
        use rand::Rng;
        let mut rng = crate::seeding::derive_rng(0x10, "loss-test");
        let (n, c) = (8, 4);
        let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let batch = clean_loss(&logits(data.clone(), n, c), &y).unwrap().item();
        let mut acc = 0.0;
        for r in 0..n {
            let row = &data[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - row[y[r]];
        }
        assert_relative_eq!(batch, acc / n as f64, max_relative = 1e-12);
    }

    #[test]
    fn bad_label_is_contract_violation() {
        let z = logits(vec![0.0; 4], 2, 2);
        let err = clean_loss(&z, &[0, 2]).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let cases: [Vec<f64>; 3] = [
            vec![0.7, -1.2, 3.4, 0.0, 0.1, -0.1],
            vec![100.0, 99.5, 98.0, -5.0, 0.0, 5.0],
            vec![0.0; 6],
        ];
        for data in cases {
            let a = logits(data.clone(), 2, 3);
            let b = logits(data, 2, 3);
            assert_eq!(kl_div_mean(&a, &b).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn kl_matches_hand_computed_two_class_value() {
        // p = (0.9, 0.1), q = (0.6, 0.4):
        // 0.9 ln(0.9/0.6) + 0.1 ln(0.1/0.4) = 0.22628916118535888
        let p_logits = logits(vec![0.9f64.ln(), 0.1f64.ln()], 1, 2);
        let q_logits = logits(vec![0.6f64.ln(), 0.4f64.ln()], 1, 2);
        let kl = kl_div_mean(&p_logits, &q_logits).unwrap().item();
        assert_relative_eq!(kl, 0.22628916118535888, max_relative = 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        use rand::Rng;
        let mut rng = crate::seeding::derive_rng(0x11, "loss-test");
        for _ in 0..200 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let kl = kl_div_mean(&logits(a, 2, 3), &logits(b, 2, 3))
                .unwrap()
                .item();
            assert!(kl >= 0.0, "kl must be non-negative, got {kl}");
        }
    }

    #[test]
    fn kl_clean_side_is_detached() {
        let a = Tensor::param(vec![0.5, -0.5], vec![1, 2]).unwrap();
        let b = Tensor::param(vec![1.0, 0.0], vec![1, 2]).unwrap();
        kl_div_mean(&a, &b).unwrap().backward().unwrap();
        assert!(a.grad().is_none(), "clean logits must stay off the tape");
        assert!(b.grad().is_some());
    }

    #[test]
    fn alp_on_clean_input_equals_clean_loss() {
        let z = logits(vec![0.3, -0.4, 1.2, 0.8, 0.0, -2.0], 2, 3);
        let y = [2, 0];
        let a = adv_loss_from_logits(Phi::AlpCe, &z, &z, &y).unwrap().item();
        let c = clean_loss(&z, &y).unwrap().item();
        assert_eq!(a, c);
    }

    #[test]
    fn vfd_coincident_features_cost_nothing() {
        let f = logits(vec![0.1, 0.2, 0.3, 0.4], 2, 2);
        assert_eq!(vfd_loss(&f, &f, &f).unwrap().item(), 0.0);
    }

    #[test]
    fn vfd_three_four_five() {
        let teacher = logits(vec![3.0, 4.0, 0.0, 0.0], 1, 4);
        let adv = logits(vec![0.0, 0.0, 0.0, 0.0], 1, 4);
        let clean = teacher.clone();
        assert_relative_eq!(
            vfd_loss(&adv, &clean, &teacher).unwrap().item(),
            5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn vfd_matches_per_example_norm_sums() {
        use rand::Rng;
        let mut rng = crate::seeding::derive_rng(0x12, "loss-test");
        let (n, d) = (16, 32);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let (a, b, t) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let got = vfd_loss(
            &logits(a.clone(), n, d),
            &logits(b.clone(), n, d),
            &logits(t.clone(), n, d),
        )
        .unwrap()
        .item();
        let mut acc = 0.0;
        for r in 0..n {
            let n1: f64 = (0..d)
                .map(|j| (a[r * d + j] - t[r * d + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            let n2: f64 = (0..d)
                .map(|j| (b[r * d + j] - t[r * d + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            acc += n1 + n2;
        }
        assert_relative_eq!(got, acc / n as f64, max_relative = 1e-12);
    }

    #[test]
    fn vfd_flattens_spatial_features() {
        let spatial = Tensor::new(vec![1.0; 8], vec![2, 2, 1, 2]).unwrap();
        let flat = logits(vec![1.0; 8], 2, 4);
        assert_eq!(vfd_loss(&spatial, &flat, &flat).unwrap().item(), 0.0);
    }

    #[test]
    fn vfd_shape_drift_is_contract_violation() {
        let a = logits(vec![0.0; 4], 2, 2);
        let t = logits(vec![0.0; 6], 2, 3);
        let err = vfd_loss(&a, &a, &t).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn total_reduces_to_clean_when_both_weights_are_zero() {
        let l_clean = Tensor::param(vec![1.37f64], vec![1]).unwrap();
        let l_adv = Tensor::param(vec![0.5f64], vec![1]).unwrap();
        let spec = LossSpec {
            beta: 0.0,
            lambda: 0.0,
            ..LossSpec::default()
        };
        let total = total_loss(&l_clean, &l_adv, None, &spec).unwrap();
        assert_eq!(total.item().to_bits(), 1.37f64.to_bits());
    }

    #[test]
    fn total_arithmetic_example() {
        let l_clean = Tensor::scalar(1.0);
        let l_adv = Tensor::scalar(0.5);
        let l_kd = Tensor::scalar(2.0);
        let spec = LossSpec {
            beta: 6.0,
            lambda: 0.02,
            ..LossSpec::default()
        };
        let total = total_loss(&l_clean, &l_adv, Some(&l_kd), &spec)
            .unwrap()
            .item();
        assert_relative_eq!(total, 4.04, max_relative = 1e-12);
    }

    #[test]
    fn zero_lambda_graph_matches_base_method_bitwise() {
        // Same upstream tape feeds both compositions; the lambda=0 variant
        // must route identical gradients.
        let build = |with_kd: bool| -> Vec<f64> {
            let p = Tensor::param(vec![0.8, -0.3], vec![1, 2]).unwrap();
            let l_clean = clean_loss(&p, &[0]).unwrap();
            let l_adv = ops::scale(&ops::sum(&p), 0.25);
            let l_kd = ops::mean(&p);
            let spec = LossSpec {
                beta: 2.0,
                lambda: 0.0,
                ..LossSpec::default()
            };
            let total = if with_kd {
                total_loss(&l_clean, &l_adv, Some(&l_kd), &spec).unwrap()
            } else {
                total_loss(&l_clean, &l_adv, None, &spec).unwrap()
            };
            total.backward().unwrap();
            p.grad().unwrap()
        };
        let with_kd = build(true);
        let without = build(false);
        for (a, b) in with_kd.iter().zip(&without) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn weight_derivatives_recover_term_values() {
        // Treat beta and lambda as tape variables: d(total)/d(beta) = l_adv
        // and d(total)/d(lambda) = l_kd.
        let l_clean = Tensor::scalar(1.0);
        let l_adv = Tensor::scalar(0.7);
        let l_kd = Tensor::scalar(2.5);
        let beta = Tensor::param(vec![3.0], vec![1]).unwrap();
        let lambda = Tensor::param(vec![0.02], vec![1]).unwrap();
        let total = ops::add(
            &ops::add(&l_clean, &ops::mul(&beta, &l_adv).unwrap()).unwrap(),
            &ops::mul(&lambda, &l_kd).unwrap(),
        )
        .unwrap();
        total.backward().unwrap();
        assert_eq!(beta.grad().unwrap(), vec![0.7]);
        assert_eq!(lambda.grad().unwrap(), vec![2.5]);
    }

    #[test]
    fn non_finite_terms_abort_with_the_offending_name() {
        let good = Tensor::scalar(1.0);
        let bad = Tensor::scalar(f64::NAN);
        let spec = LossSpec::default();
        let err = total_loss(&bad, &good, Some(&good), &spec).unwrap_err();
        assert_eq!(err.category(), "training-abort");
        assert!(err.to_string().contains("l_clean"));
        let err = total_loss(&good, &bad, Some(&good), &spec).unwrap_err();
        assert!(err.to_string().contains("l_adv"));
        let err = total_loss(&good, &good, Some(&bad), &spec).unwrap_err();
        assert!(err.to_string().contains("l_kd"));
    }

    #[test]
    fn missing_kd_with_positive_lambda_rejected() {
        let l = Tensor::scalar(1.0);
        let spec = LossSpec {
            lambda: 0.01,
            ..LossSpec::default()
        };
        assert!(total_loss(&l, &l, None, &spec).is_err());
    }

    #[test]
    fn invalid_weights_rejected() {
        let bad = LossSpec {
            beta: -1.0,
            ..LossSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossSpec {
            lambda: f64::NAN,
            ..LossSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
