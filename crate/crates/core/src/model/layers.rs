//! Parameter-holding wrappers around the primitive ops.

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, BatchNormCache, BatchStats, Mode};
use crate::tensor::{Element, Tensor};

/// Whether a stored tensor is optimized or only carried along (BN running
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Trainable,
    Buffer,
}

pub type NamedRef<'a, T> = (String, TensorKind, &'a Tensor<T>);
pub type NamedMut<'a, T> = (String, TensorKind, &'a mut Tensor<T>);
/// Output, backward cache, and batch statistics when training.
pub type BnForward<T> = (Tensor<T>, BatchNormCache<T>, Option<BatchStats<T>>);

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Element> Conv1d<T> {
    /// He-normal weights (variance `2 / (cin·kernel)`), zero bias.
    pub fn he<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * kernel) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[cout, cin, kernel], std, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv1d(x, &self.weight, &self.bias, self.stride)
    }

    /// Returns the input gradient (if requested) and the parameter gradients
    /// packed as a layer.
    pub fn backward(&self, x: &Tensor<T>, grad: &Tensor<T>, need_input: bool) -> Result<(Option<Tensor<T>>, Self)> {
        let g = ops::conv1d_backward(x, &self.weight, self.stride, grad, need_input)?;
        Ok((
            g.input,
            Self {
                weight: g.weight,
                bias: g.bias,
                stride: self.stride,
            },
        ))
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((format!("{prefix}.weight"), TensorKind::Trainable, &self.weight));
        out.push((format!("{prefix}.bias"), TensorKind::Trainable, &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((format!("{prefix}.weight"), TensorKind::Trainable, &mut self.weight));
        out.push((format!("{prefix}.bias"), TensorKind::Trainable, &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::zeros(&[c]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<BnForward<T>> {
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, cache, stats) = ops::batchnorm1d_train(x, &self.gamma, &self.beta, eps)?;
                Ok((y, cache, Some(stats)))
            }
            Mode::Infer => {
                let (y, cache) =
                    ops::batchnorm1d_infer(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, eps)?;
                Ok((y, cache, None))
            }
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let g = ops::batchnorm1d_backward(cache, &self.gamma, grad)?;
        let mut layer = self.zeros_like();
        layer.gamma = g.gamma;
        layer.beta = g.beta;
        Ok((g.input, layer))
    }

    pub fn commit(&mut self, stats: &BatchStats<T>) {
        ops::update_running_stats(
            &mut self.running_mean,
            &mut self.running_var,
            stats,
            T::from_f64_lossy(BN_MOMENTUM),
        );
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((format!("{prefix}.gamma"), TensorKind::Trainable, &self.gamma));
        out.push((format!("{prefix}.beta"), TensorKind::Trainable, &self.beta));
        out.push((format!("{prefix}.running_mean"), TensorKind::Buffer, &self.running_mean));
        out.push((format!("{prefix}.running_var"), TensorKind::Buffer, &self.running_var));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((format!("{prefix}.gamma"), TensorKind::Trainable, &mut self.gamma));
        out.push((format!("{prefix}.beta"), TensorKind::Trainable, &mut self.beta));
        out.push((
            format!("{prefix}.running_mean"),
            TensorKind::Buffer,
            &mut self.running_mean,
        ));
        out.push((
            format!("{prefix}.running_var"),
            TensorKind::Buffer,
            &mut self.running_var,
        ));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[in_features, out_features]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    pub fn he<R: Rng + ?Sized>(features: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / features as f64).sqrt();
        Self {
            weight: Tensor::randn(&[features, outputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::dense(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let g = ops::dense_backward(x, &self.weight, grad)?;
        Ok((
            g.input,
            Self {
                weight: g.weight,
                bias: g.bias,
            },
        ))
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((format!("{prefix}.weight"), TensorKind::Trainable, &self.weight));
        out.push((format!("{prefix}.bias"), TensorKind::Trainable, &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((format!("{prefix}.weight"), TensorKind::Trainable, &mut self.weight));
        out.push((format!("{prefix}.bias"), TensorKind::Trainable, &mut self.bias));
    }
}
