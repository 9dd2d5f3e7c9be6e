//! The residual network: a Conv→BN→ReLU stem, `n_blocks` pre-activation
//! residual blocks, then flatten→Dense→sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ResNetConfig;
use super::layers::{BatchNorm1d, Conv1d, Dense, NamedMut, NamedRef, TensorKind};
use crate::error::{shape_err, Result};
use crate::ops::{self, BatchNormCache, BatchStats, DropoutMask, MaxPoolCache, Mode};
use crate::seeds;
use crate::tensor::{Element, Tensor};

/// Training passes carry the seed their dropout masks derive from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train { dropout_seed: u64 },
    Infer,
}

impl RunMode {
    fn op_mode(self) -> Mode {
        match self {
            RunMode::Train { .. } => Mode::Train,
            RunMode::Infer => Mode::Infer,
        }
    }

    fn dropout_seed(self, slot: u64) -> u64 {
        match self {
            RunMode::Train { dropout_seed } => seeds::derive(dropout_seed, &[slot]),
            RunMode::Infer => 0,
        }
    }
}

/// Pre-activation residual block.
///
/// Main path: BN→ReLU→Dropout→Conv(stride)→BN→ReLU→Dropout→Conv.
/// Skip path: MaxPool(stride), then a 1×1 conv when the channel count changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub bn1: BatchNorm1d<T>,
    pub conv1: Conv1d<T>,
    pub bn2: BatchNorm1d<T>,
    pub conv2: Conv1d<T>,
    pub skip: Option<Conv1d<T>>,
    pub pool: usize,
    pub dropout_rate: f64,
}

#[derive(Debug)]
pub struct BlockCache<T> {
    bn1: BatchNormCache<T>,
    bn1_stats: Option<BatchStats<T>>,
    relu1_in: Tensor<T>,
    drop1: DropoutMask<T>,
    conv1_in: Tensor<T>,
    bn2: BatchNormCache<T>,
    bn2_stats: Option<BatchStats<T>>,
    relu2_in: Tensor<T>,
    drop2: DropoutMask<T>,
    conv2_in: Tensor<T>,
    pool: MaxPoolCache,
    pooled: Option<Tensor<T>>,
}

impl<T: Element> ResidualBlock<T> {
    fn new<R: rand::Rng + ?Sized>(cfg: &ResNetConfig, cin: usize, cout: usize, rng: &mut R) -> Self {
        let k = cfg.kernel_length;
        let conv1 = Conv1d::he(cin, cout, k, cfg.subsample, rng);
        let conv2 = Conv1d::he(cout, cout, k, 1, rng);
        let skip = (cin != cout).then(|| Conv1d::he(cin, cout, 1, 1, rng));
        Self {
            bn1: BatchNorm1d::new(cin),
            conv1,
            bn2: BatchNorm1d::new(cout),
            conv2,
            skip,
            pool: cfg.subsample,
            dropout_rate: cfg.dropout_rate,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            bn1: self.bn1.zeros_like(),
            conv1: self.conv1.zeros_like(),
            bn2: self.bn2.zeros_like(),
            conv2: self.conv2.zeros_like(),
            skip: self.skip.as_ref().map(Conv1d::zeros_like),
            pool: self.pool,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: RunMode, slot: u64) -> Result<(Tensor<T>, BlockCache<T>)> {
        let m = mode.op_mode();
        let (relu1_in, bn1, bn1_stats) = self.bn1.forward(x, m)?;
        let a1 = ops::relu(&relu1_in);
        let (conv1_in, drop1) = ops::dropout(&a1, self.dropout_rate, m, mode.dropout_seed(2 * slot))?;
        let c1 = self.conv1.forward(&conv1_in)?;
        let (relu2_in, bn2, bn2_stats) = self.bn2.forward(&c1, m)?;
        let a2 = ops::relu(&relu2_in);
        let (conv2_in, drop2) = ops::dropout(&a2, self.dropout_rate, m, mode.dropout_seed(2 * slot + 1))?;
        let mut out = self.conv2.forward(&conv2_in)?;

        let (pooled, pool) = ops::maxpool1d(x, self.pool)?;
        let (skip_out, pooled) = match &self.skip {
            Some(conv) => (conv.forward(&pooled)?, Some(pooled)),
            None => (pooled, None),
        };
        out.add_assign(&skip_out)?;
        Ok((
            out,
            BlockCache {
                bn1,
                bn1_stats,
                relu1_in,
                drop1,
                conv1_in,
                bn2,
                bn2_stats,
                relu2_in,
                drop2,
                conv2_in,
                pool,
                pooled,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let mut grads = self.zeros_like();

        let (g, gconv2) = self.conv2.backward(&cache.conv2_in, grad, true)?;
        grads.conv2 = gconv2;
        let g = ops::dropout_backward(&cache.drop2, &g.expect("input grad"))?;
        let g = ops::relu_backward(&cache.relu2_in, &g)?;
        let (g, gbn2) = self.bn2.backward(&cache.bn2, &g)?;
        grads.bn2 = gbn2;
        let (g, gconv1) = self.conv1.backward(&cache.conv1_in, &g, true)?;
        grads.conv1 = gconv1;
        let g = ops::dropout_backward(&cache.drop1, &g.expect("input grad"))?;
        let g = ops::relu_backward(&cache.relu1_in, &g)?;
        let (mut gx, gbn1) = self.bn1.backward(&cache.bn1, &g)?;
        grads.bn1 = gbn1;

        let gpooled = match (&self.skip, &cache.pooled) {
            (Some(conv), Some(pooled)) => {
                let (g, gskip) = conv.backward(pooled, grad, true)?;
                grads.skip = Some(gskip);
                g.expect("input grad")
            }
            _ => grad.clone(),
        };
        gx.add_assign(&ops::maxpool1d_backward(&cache.pool, &gpooled)?)?;
        Ok((gx, grads))
    }

    fn commit(&mut self, cache: &BlockCache<T>) {
        if let Some(s) = &cache.bn1_stats {
            self.bn1.commit(s);
        }
        if let Some(s) = &cache.bn2_stats {
            self.bn2.commit(s);
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.skip {
            s.collect(&format!("{prefix}.skip"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.bn1.collect_mut(&format!("{prefix}.bn1"), out);
        self.conv1.collect_mut(&format!("{prefix}.conv1"), out);
        self.bn2.collect_mut(&format!("{prefix}.bn2"), out);
        self.conv2.collect_mut(&format!("{prefix}.conv2"), out);
        if let Some(s) = &mut self.skip {
            s.collect_mut(&format!("{prefix}.skip"), out);
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    stem_bn: BatchNormCache<T>,
    stem_stats: Option<BatchStats<T>>,
    stem_relu_in: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    flat: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResNet<T = f32> {
    config: ResNetConfig,
    pub stem_conv: Conv1d<T>,
    pub stem_bn: BatchNorm1d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Dense<T>,
}

/// Parameter gradients, laid out like the network they belong to.
#[derive(Clone, Debug)]
pub struct Gradients<T>(ResNet<T>);

impl<T: Element> Gradients<T> {
    /// Trainable gradients in canonical parameter order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.0.parameters()
    }
}

impl<T: Element> ResNet<T> {
    /// He-normal initialization of every conv and dense weight, zero biases,
    /// unit BN scale.
    pub fn build(config: &ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv1d::he(
            config.input_leads,
            config.base_filters,
            config.kernel_length,
            1,
            &mut rng,
        );
        let stem_bn = BatchNorm1d::new(config.base_filters);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut cin = config.base_filters;
        for cout in config.filter_schedule() {
            blocks.push(ResidualBlock::new(config, cin, cout, &mut rng));
            cin = cout;
        }
        let head = Dense::he(config.flat_features(), config.n_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (b, leads, len) = x.dims3()?;
        if leads != self.config.input_leads || len != self.config.input_samples {
            return shape_err(format!(
                "model expects [B, {}, {}] input, got {:?}",
                self.config.input_leads,
                self.config.input_samples,
                x.shape()
            ));
        }
        if b == 0 {
            return shape_err("empty batch");
        }
        Ok(b)
    }

    /// Forward pass keeping what backward needs. Does not touch the running
    /// statistics; see [`ResNet::commit_batch_stats`].
    pub fn forward_cached(&self, x: &Tensor<T>, mode: RunMode) -> Result<ForwardCache<T>> {
        let batch = self.check_input(x)?;
        let m = mode.op_mode();
        let h = self.stem_conv.forward(x)?;
        let (stem_relu_in, stem_bn, stem_stats) = self.stem_bn.forward(&h, m)?;
        let mut h = ops::relu(&stem_relu_in);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(&h, mode, i as u64)?;
            blocks.push(cache);
            h = out;
        }
        let features = h.len() / batch;
        let flat = h.reshape(&[batch, features])?;
        let logits = self.head.forward(&flat)?;
        let probs = ops::sigmoid(&logits);
        Ok(ForwardCache {
            input: x.clone(),
            stem_bn,
            stem_stats,
            stem_relu_in,
            blocks,
            flat,
            logits,
            probs,
        })
    }

    /// Per-class probabilities. Classes are independent; rows are not
    /// normalized.
    pub fn forward(&self, x: &Tensor<T>, mode: RunMode) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, mode)?.probs)
    }

    /// Inference-mode probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, RunMode::Infer)
    }

    /// Folds the batch statistics of a training pass into the BN running
    /// estimates.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache<T>) {
        if let Some(s) = &cache.stem_stats {
            self.stem_bn.commit(s);
        }
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.commit(c);
        }
    }

    /// Backpropagates a gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let (gflat, head) = self.head.backward(&cache.flat, grad_logits)?;
        let last_shape = match self.blocks.len() {
            0 => cache.stem_relu_in.shape().to_vec(),
            n => {
                let b = cache.input.shape()[0];
                vec![
                    b,
                    self.config.filter_schedule()[n - 1],
                    self.config.block_lengths()[n - 1],
                ]
            }
        };
        let mut g = gflat.reshape(&last_shape)?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (gx, gb) = block.backward(c, &g)?;
            block_grads.push(gb);
            g = gx;
        }
        block_grads.reverse();
        let g = ops::relu_backward(&cache.stem_relu_in, &g)?;
        let (g, stem_bn) = self.stem_bn.backward(&cache.stem_bn, &g)?;
        let (_, stem_conv) = self.stem_conv.backward(&cache.input, &g, false)?;
        Ok(Gradients(ResNet {
            config: self.config.clone(),
            stem_conv,
            stem_bn,
            blocks: block_grads,
            head,
        }))
    }

    /// Training-mode loss and gradients for one batch; commits the batch
    /// statistics. Returns the mean cross-entropy.
    pub fn train_step_grads(
        &mut self,
        x: &Tensor<T>,
        labels: &Tensor<T>,
        dropout_seed: u64,
    ) -> Result<(T, Gradients<T>)> {
        let cache = self.forward_cached(x, RunMode::Train { dropout_seed })?;
        let loss = ops::bce_loss(&cache.probs, labels)?;
        let glogits = ops::bce_logits_backward(&cache.probs, labels)?;
        let grads = self.backward(&cache, &glogits)?;
        self.commit_batch_stats(&cache);
        Ok((loss, grads))
    }

    /// Every stored tensor in canonical order, with its layer path.
    pub fn named_tensors(&self) -> Vec<NamedRef<'_, T>> {
        let mut out = Vec::new();
        self.stem_conv.collect("stem.conv", &mut out);
        self.stem_bn.collect("stem.bn", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        self.head.collect("head", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        let mut out = Vec::new();
        self.stem_conv.collect_mut("stem.conv", &mut out);
        self.stem_bn.collect_mut("stem.bn", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}"), &mut out);
        }
        self.head.collect_mut("head", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Trainable)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Trainable)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ResNet<U> {
        let mut out = ResNet::<U>::build(&self.config, 0).expect("config already validated");
        for ((_, _, dst), (_, _, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }
}
