use serde::{Deserialize, Serialize};

use crate::classes::N_CLASSES;
use crate::error::{Error, Result};

/// Shape of the residual network.
///
/// Block `b` (1-based) has `base_filters + filter_growth·⌊b/2⌋` filters and
/// divides the signal length by `subsample`. With the defaults this gives
/// `(64, 1024), (128, 256), (128, 64), (192, 16)` per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub n_blocks: usize,
    pub kernel_length: usize,
    pub input_leads: usize,
    pub input_samples: usize,
    pub base_filters: usize,
    pub filter_growth: usize,
    pub subsample: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            kernel_length: 16,
            input_leads: 12,
            input_samples: 4096,
            base_filters: 64,
            filter_growth: 64,
            subsample: 4,
            dropout_rate: 0.2,
            n_classes: N_CLASSES,
        }
    }
}

impl ResNetConfig {
    /// A small network with the same topology, for tests and quick runs.
    pub fn miniature(n_blocks: usize, input_samples: usize, base_filters: usize) -> Self {
        Self {
            n_blocks,
            input_samples,
            base_filters,
            filter_growth: base_filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("kernel_length", self.kernel_length),
            ("input_leads", self.input_leads),
            ("input_samples", self.input_samples),
            ("base_filters", self.base_filters),
            ("subsample", self.subsample),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let factor = u32::try_from(self.n_blocks)
            .ok()
            .and_then(|n| self.subsample.checked_pow(n))
            .ok_or_else(|| Error::Config("subsample^n_blocks overflows".into()))?;
        if !self.input_samples.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_samples {} is not divisible by subsample^n_blocks = {factor}",
                self.input_samples
            )));
        }
        Ok(())
    }

    /// Filters per residual block.
    pub fn filter_schedule(&self) -> Vec<usize> {
        (1..=self.n_blocks)
            .map(|b| self.base_filters + self.filter_growth * (b / 2))
            .collect()
    }

    /// Signal length at the output of each residual block.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut len = self.input_samples;
        (0..self.n_blocks)
            .map(|_| {
                len /= self.subsample;
                len
            })
            .collect()
    }

    /// Width of the flattened feature vector fed to the dense layer.
    pub fn flat_features(&self) -> usize {
        let filters = self.filter_schedule().last().copied().unwrap_or(self.base_filters);
        let len = self.block_lengths().last().copied().unwrap_or(self.input_samples);
        filters * len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let c = ResNetConfig::default();
        c.validate().unwrap();
        let pairs: Vec<_> = c.filter_schedule().into_iter().zip(c.block_lengths()).collect();
        assert_eq!(pairs, vec![(64, 1024), (128, 256), (128, 64), (192, 16)]);
        assert_eq!(c.flat_features(), 3072);
    }

    #[test]
    fn indivisible_length_rejected() {
        let c = ResNetConfig {
            input_samples: 1000,
            ..ResNetConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_dropout_rejected() {
        let c = ResNetConfig {
            dropout_rate: 1.0,
            ..ResNetConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
