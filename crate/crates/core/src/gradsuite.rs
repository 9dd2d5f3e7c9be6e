//! Finite-difference checks of every differentiable op and of the full
//! miniature network, in 64-bit arithmetic with fixed seeds.
//!
//! Each op is reduced to a scalar by projecting its output onto a fixed
//! random direction `r`, so the analytic gradient is the op's backward pass
//! applied to `r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ResNet, ResNetConfig, RunMode};
use crate::ops::{self, finite_difference_check, GradCheck, Mode};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_wrt(
    name: &str,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    tolerance: f64,
) -> Result<CheckOutcome> {
    let shape = point.shape().to_vec();
    let report = finite_difference_check(
        |x| f(&Tensor::from_vec(&shape, x.to_vec()).expect("same shape")),
        point.data(),
        analytic.data(),
        &GradCheck::default(),
    )?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked,
    })
}

fn conv_checks(stride: usize, shape: [usize; 3], cout: usize, k: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut g = rng(seed);
    let x = Tensor::randn(&shape, 1.0, &mut g);
    let w = Tensor::randn(&[cout, shape[1], k], 0.5, &mut g);
    let b = Tensor::randn(&[cout], 0.5, &mut g);
    let out = ops::conv1d(&x, &w, &b, stride)?;
    let r = Tensor::randn(out.shape(), 1.0, &mut g);
    let grads = ops::conv1d_backward(&x, &w, stride, &r, true)?;
    let tag = format!("conv1d(stride {stride})");
    Ok(vec![
        check_wrt(
            &format!("{tag} d/input"),
            &x,
            grads.input.as_ref().unwrap(),
            |x| project(&ops::conv1d(x, &w, &b, stride).unwrap(), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            &format!("{tag} d/weight"),
            &w,
            &grads.weight,
            |w| project(&ops::conv1d(&x, w, &b, stride).unwrap(), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            &format!("{tag} d/bias"),
            &b,
            &grads.bias,
            |b| project(&ops::conv1d(&x, &w, b, stride).unwrap(), &r),
            OP_TOLERANCE,
        )?,
    ])
}

fn batchnorm_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut g = rng(seed);
    let x = Tensor::randn(&[3, 2, 8], 1.5, &mut g);
    let gamma = Tensor::randn(&[2], 1.0, &mut g);
    let beta = Tensor::randn(&[2], 1.0, &mut g);
    let rm = Tensor::randn(&[2], 0.3, &mut g);
    let rv = Tensor::full(&[2], 0.7);
    let eps = 1e-5;
    let train = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| ops::batchnorm1d_train(x, gm, bt, eps).unwrap().0;
    let (out, cache, _) = ops::batchnorm1d_train(&x, &gamma, &beta, eps)?;
    let r = Tensor::randn(out.shape(), 1.0, &mut g);
    let grads = ops::batchnorm1d_backward(&cache, &gamma, &r)?;

    let (_, icache) = ops::batchnorm1d_infer(&x, &gamma, &beta, &rm, &rv, eps)?;
    let igrads = ops::batchnorm1d_backward(&icache, &gamma, &r)?;
    Ok(vec![
        check_wrt(
            "batchnorm1d(train) d/input",
            &x,
            &grads.input,
            |x| project(&train(x, &gamma, &beta), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "batchnorm1d(train) d/gamma",
            &gamma,
            &grads.gamma,
            |gm| project(&train(&x, gm, &beta), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "batchnorm1d(train) d/beta",
            &beta,
            &grads.beta,
            |bt| project(&train(&x, &gamma, bt), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "batchnorm1d(infer) d/input",
            &x,
            &igrads.input,
            |x| project(&ops::batchnorm1d_infer(x, &gamma, &beta, &rm, &rv, eps).unwrap().0, &r),
            OP_TOLERANCE,
        )?,
    ])
}

fn elementwise_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut g = rng(seed);
    let eps = GradCheck::default().eps;
    // keep every relu input at least 10·eps from the kink
    let x = Tensor::<f64>::randn(&[4, 3, 10], 1.0, &mut g).map(|v| {
        if v.abs() < 10.0 * eps {
            v.signum() * 10.0 * eps + v
        } else {
            v
        }
    });
    let r = Tensor::randn(x.shape(), 1.0, &mut g);
    let relu_grad = ops::relu_backward(&x, &r)?;

    let s = ops::sigmoid(&x);
    let sig_grad = ops::sigmoid_backward(&s, &r)?;

    let (_, mask) = ops::dropout(&x, 0.3, Mode::Train, 17)?;
    let drop_grad = ops::dropout_backward(&mask, &r)?;

    let (pooled, pcache) = ops::maxpool1d(&x, 4)?;
    let rp = Tensor::randn(pooled.shape(), 1.0, &mut g);
    let pool_grad = ops::maxpool1d_backward(&pcache, &rp)?;

    Ok(vec![
        check_wrt(
            "relu d/input",
            &x,
            &relu_grad,
            |x| project(&ops::relu(x), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "sigmoid d/input",
            &x,
            &sig_grad,
            |x| project(&ops::sigmoid(x), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "dropout d/input",
            &x,
            &drop_grad,
            |x| project(&ops::dropout(x, 0.3, Mode::Train, 17).unwrap().0, &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "maxpool1d d/input",
            &x,
            &pool_grad,
            |x| project(&ops::maxpool1d(x, 4).unwrap().0, &rp),
            OP_TOLERANCE,
        )?,
    ])
}

fn dense_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut g = rng(seed);
    let x = Tensor::randn(&[3, 7], 1.0, &mut g);
    let w = Tensor::randn(&[7, 5], 1.0, &mut g);
    let b = Tensor::randn(&[5], 1.0, &mut g);
    let out = ops::dense(&x, &w, &b)?;
    let r = Tensor::randn(out.shape(), 1.0, &mut g);
    let grads = ops::dense_backward(&x, &w, &r)?;
    Ok(vec![
        check_wrt(
            "dense d/input",
            &x,
            &grads.input,
            |x| project(&ops::dense(x, &w, &b).unwrap(), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "dense d/weight",
            &w,
            &grads.weight,
            |w| project(&ops::dense(&x, w, &b).unwrap(), &r),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "dense d/bias",
            &b,
            &grads.bias,
            |b| project(&ops::dense(&x, &w, b).unwrap(), &r),
            OP_TOLERANCE,
        )?,
    ])
}

fn loss_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    use rand::Rng;
    let mut g = rng(seed);
    let probs = Tensor::from_vec(&[4, 6], (0..24).map(|_| g.random_range(0.05..0.95)).collect())?;
    let labels = Tensor::from_vec(
        &[4, 6],
        (0..24).map(|_| if g.random::<bool>() { 1.0 } else { 0.0 }).collect(),
    )?;
    let gp = ops::bce_backward(&probs, &labels)?;
    let logits = Tensor::randn(&[4, 6], 2.0, &mut g);
    let gz = ops::bce_logits_backward(&ops::sigmoid(&logits), &labels)?;
    Ok(vec![
        check_wrt(
            "bce_loss d/probs",
            &probs,
            &gp,
            |p| ops::bce_loss(p, &labels).unwrap(),
            OP_TOLERANCE,
        )?,
        check_wrt(
            "bce_loss(sigmoid) d/logits",
            &logits,
            &gz,
            |z| ops::bce_loss(&ops::sigmoid(z), &labels).unwrap(),
            OP_TOLERANCE,
        )?,
    ])
}

/// All op-level checks.
pub fn op_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.extend(conv_checks(4, [2, 3, 32], 4, 16, 1)?);
    out.extend(conv_checks(1, [2, 3, 20], 2, 16, 2)?);
    out.extend(conv_checks(1, [2, 4, 9], 3, 1, 3)?);
    out.extend(batchnorm_checks(4)?);
    out.extend(elementwise_checks(5)?);
    out.extend(dense_checks(6)?);
    out.extend(loss_checks(7)?);
    Ok(out)
}

/// The miniature network used by the end-to-end check.
pub fn network_check_config() -> ResNetConfig {
    ResNetConfig::miniature(2, 64, 4)
}

fn flatten(net: &ResNet<f64>) -> Vec<f64> {
    net.parameters().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(net: &mut ResNet<f64>, flat: &[f64]) {
    let mut off = 0;
    for t in net.parameters_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Gradient of the training loss with respect to every parameter of the
/// miniature network (training-mode BN, fixed dropout mask).
pub fn network_check(seed: u64) -> Result<CheckOutcome> {
    let cfg = network_check_config();
    let net = ResNet::<f64>::build(&cfg, seed)?;
    let mut g = rng(seed ^ 0x5eed);
    let batch = 2;
    let x = Tensor::randn(&[batch, cfg.input_leads, cfg.input_samples], 1.0, &mut g);
    let labels = Tensor::from_vec(
        &[batch, cfg.n_classes],
        (0..batch * cfg.n_classes)
            .map(|i| ((i * 7 + 3) % 3 == 0) as u8 as f64)
            .collect(),
    )?;
    let mode = RunMode::Train { dropout_seed: 99 };
    let cache = net.forward_cached(&x, mode)?;
    let glogits = ops::bce_logits_backward(&cache.probs, &labels)?;
    let analytic: Vec<f64> = net
        .backward(&cache, &glogits)?
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let point = flatten(&net);
    let mut probe = net.clone();
    let cfg_fd = GradCheck { eps: 1e-6, floor: 1e-6 };
    let report = finite_difference_check(
        |p| {
            unflatten(&mut probe, p);
            let probs = probe.forward(&x, mode).expect("forward");
            ops::bce_loss(&probs, &labels).expect("loss")
        },
        &point,
        &analytic,
        &cfg_fd,
    )?;
    Ok(CheckOutcome {
        name: format!("network({} params) d/parameters", point.len()),
        max_rel_error: report.max_rel_error,
        tolerance: NETWORK_TOLERANCE,
        checked: report.checked,
    })
}

/// Op checks followed by the end-to-end network check.
pub fn full_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = op_checks()?;
    out.push(network_check(2024)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_checks().unwrap() {
            assert!(c.passed(), "{} rel error {:e}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn dense_and_smooth_relu_are_tight() {
        let dense = dense_checks(11).unwrap();
        assert!(dense.iter().all(|c| c.max_rel_error < 1e-6), "{dense:?}");
        let relu = &elementwise_checks(12).unwrap()[0];
        assert!(relu.max_rel_error < 1e-6, "{relu:?}");
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let c = network_check(2024).unwrap();
        assert!(c.passed(), "{c:?}");
    }
}
