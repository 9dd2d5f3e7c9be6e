//! Batch normalization over the `(batch, length)` axes of a `[B, C, L]` tensor.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel batch mean and population variance from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Training mode couples every element of a channel through the batch
    /// statistics; inference mode is a fixed affine map.
    pub batch_coupled: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check_params<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(usize, usize, usize)> {
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("batchnorm eps must be > 0, got {eps}")));
    }
    let dims = input.dims3()?;
    gamma.expect_shape(&[dims.1])?;
    beta.expect_shape(&[dims.1])?;
    Ok(dims)
}

fn affine<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (nb, nc, len) = input.dims3()?;
    let mut xhat = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * len;
            let (m, s, g, be) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in off..off + len {
                let h = (input.data()[i] - m) * s;
                xhat[i] = h;
                out[i] = g * h + be;
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        Tensor::from_vec(input.shape(), xhat)?,
    ))
}

/// Training-mode normalization with batch statistics. The caller folds the
/// returned statistics into its running estimates.
pub fn batchnorm1d_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    let (nb, nc, len) = check_params(input, gamma, beta, eps)?;
    let count = nb * len;
    if count < 2 {
        return Err(Error::Input("batchnorm training mode needs batch*length >= 2".into()));
    }
    let n = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); nc];
    let mut var = vec![T::zero(); nc];
    for c in 0..nc {
        let mut acc = T::zero();
        for b in 0..nb {
            acc += input.data()[(b * nc + c) * len..][..len].iter().copied().sum::<T>();
        }
        let m = acc / n;
        let mut sq = T::zero();
        for b in 0..nb {
            for &x in &input.data()[(b * nc + c) * len..][..len] {
                let d = x - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (out, xhat) = affine(input, gamma, beta, &mean, &inv_std)?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_coupled: true,
        },
        BatchStats { mean, var },
    ))
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm1d_infer<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (_, nc, _) = check_params(input, gamma, beta, eps)?;
    running_mean.expect_shape(&[nc])?;
    running_var.expect_shape(&[nc])?;
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (out, xhat) = affine(input, gamma, beta, running_mean.data(), &inv_std)?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_coupled: false,
        },
    ))
}

/// Exponential moving average: `running = momentum·running + (1 − momentum)·batch`.
pub fn update_running_stats<T: Element>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: T,
) {
    let keep = momentum;
    let take = T::one() - momentum;
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + take * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + take * v;
    }
}

pub fn batchnorm1d_backward<T: Element>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (nb, nc, len) = cache.xhat.dims3()?;
    grad_output.expect_shape(cache.xhat.shape())?;
    let gy = grad_output.data();
    let xhat = cache.xhat.data();
    let mut ggamma = vec![T::zero(); nc];
    let mut gbeta = vec![T::zero(); nc];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * len;
            for i in off..off + len {
                ggamma[c] += gy[i] * xhat[i];
                gbeta[c] += gy[i];
            }
        }
    }
    let mut gx = vec![T::zero(); gy.len()];
    let n = T::from_usize(nb * len).unwrap();
    for c in 0..nc {
        let scale = gamma.data()[c] * cache.inv_std[c];
        let (mean_g, mean_gx) = if cache.batch_coupled {
            (gbeta[c] / n, ggamma[c] / n)
        } else {
            (T::zero(), T::zero())
        };
        for b in 0..nb {
            let off = (b * nc + c) * len;
            for i in off..off + len {
                gx[i] = scale * (gy[i] - mean_g - xhat[i] * mean_gx);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(grad_output.shape(), gx)?,
        gamma: Tensor::from_vec(&[nc], ggamma)?,
        beta: Tensor::from_vec(&[nc], gbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(nc: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[nc], 1.0), Tensor::zeros(&[nc]))
    }

    #[test]
    fn four_values_population_variance() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (g, b) = unit(1);
        let (y, _, stats) = batchnorm1d_train(&x, &g, &b, 1e-12).unwrap();
        assert!((stats.var[0] - 1.25).abs() < 1e-12);
        let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        // zero mean, unit population variance
        let x = Tensor::from_vec(&[2, 1, 2], vec![1.0f32, -1.0, 1.0, -1.0]).unwrap();
        let (y, _, _) = batchnorm1d_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-5).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-3);
        }
    }

    #[test]
    fn nonpositive_eps_is_config_error() {
        let x = Tensor::<f32>::zeros(&[2, 1, 4]);
        let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
        assert!(matches!(batchnorm1d_train(&x, &g, &b, 0.0), Err(Error::Config(_))));
        assert!(matches!(
            batchnorm1d_infer(&x, &g, &b, &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0), -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_output_is_standardized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(nb, nc, len) in &[(4, 3, 16), (1, 5, 64), (8, 2, 8)] {
            let x = Tensor::<f64>::randn(&[nb, nc, len], 3.0, &mut rng).map(|v| v + 2.0);
            let (g, b) = unit(nc);
            let (y, _, _) = batchnorm1d_train(&x, &g, &b, 1e-5).unwrap();
            for c in 0..nc {
                let vals: Vec<f64> = (0..nb)
                    .flat_map(|bi| (0..len).map(move |t| (bi, t)))
                    .map(|(bi, t)| y.get3(bi, c, t))
                    .collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
                assert!(m.abs() < 1e-5);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rm = Tensor::<f64>::zeros(&[1]);
        let mut rv = Tensor::<f64>::full(&[1], 1.0);
        let stats = BatchStats {
            mean: vec![10.0],
            var: vec![3.0],
        };
        update_running_stats(&mut rm, &mut rv, &stats, 0.9);
        assert!((rm.data()[0] - 1.0).abs() < 1e-12);
        assert!((rv.data()[0] - 1.2).abs() < 1e-12);
    }
}
