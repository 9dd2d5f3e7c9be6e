use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-element multipliers applied in the forward pass: `0` for dropped
/// elements and `1 / (1 − rate)` for survivors. `None` means identity.
#[derive(Clone, Debug)]
pub struct DropoutMask<T>(Option<Vec<T>>);

impl<T: Element> DropoutMask<T> {
    pub fn identity() -> Self {
        Self(None)
    }
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout. The mask is drawn from a generator seeded with `seed`
/// alone, so the same seed always yields the same mask.
pub fn dropout<T: Element>(input: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::identity()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    // an element is dropped when a uniform 32-bit draw falls below rate·2^32
    let cut = (rate * 4_294_967_296.0) as u64;
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if u64::from(rng.next_u32()) < cut {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, DropoutMask(Some(mask))))
}

pub fn dropout_backward<T: Element>(mask: &DropoutMask<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    match &mask.0 {
        None => Ok(grad_output.clone()),
        Some(m) => {
            if m.len() != grad_output.len() {
                return Err(Error::Shape("dropout backward: mask size mismatch".into()));
            }
            let data = grad_output.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            Tensor::from_vec(grad_output.shape(), data)
        }
    }
}
