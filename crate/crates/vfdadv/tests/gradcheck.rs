//! Finite-difference validation of every differentiable op.
//!
//! Each op is exercised on at least 100 random instances; the check bodies
//! live in `common::gradcheck` so the acceptance gate can run the same
//! suite under a timer.

mod common;

use common::gradcheck;

const INSTANCES: usize = 100;

#[test]
fn gradcheck_add_sub_mul() {
    gradcheck::add_sub_mul(INSTANCES);
}

#[test]
fn gradcheck_scale_add_scalar() {
    gradcheck::scale_add_scalar(INSTANCES);
}

#[test]
fn gradcheck_relu_tanh() {
    gradcheck::relu_tanh(INSTANCES);
}

#[test]
fn gradcheck_matmul() {
    gradcheck::matmul(INSTANCES);
}

#[test]
fn gradcheck_add_bias() {
    gradcheck::add_bias(INSTANCES);
}

#[test]
fn gradcheck_flatten() {
    gradcheck::flatten(INSTANCES);
}

#[test]
fn gradcheck_conv2d() {
    gradcheck::conv2d(INSTANCES);
}

#[test]
fn gradcheck_pooling() {
    gradcheck::pooling(INSTANCES);
}

#[test]
fn gradcheck_softmax_family() {
    gradcheck::softmax_family(INSTANCES);
}

#[test]
fn gradcheck_reductions() {
    gradcheck::reductions(INSTANCES);
}

#[test]
fn gradcheck_row_l2() {
    gradcheck::row_l2(INSTANCES);
}

#[test]
fn gradcheck_label_margin() {
    gradcheck::label_margin(INSTANCES);
}

#[test]
fn gradcheck_clean_loss() {
    gradcheck::clean_loss(INSTANCES);
}

#[test]
fn gradcheck_adv_loss_alp() {
    gradcheck::adv_loss_alp(INSTANCES);
}

#[test]
fn gradcheck_adv_loss_trades() {
    gradcheck::adv_loss_trades(INSTANCES);
}

#[test]
fn gradcheck_vfd_loss() {
    gradcheck::vfd_loss(INSTANCES);
}

#[test]
fn gradcheck_total_loss() {
    gradcheck::total_loss(INSTANCES);
}
