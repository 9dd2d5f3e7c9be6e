use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Marks an output whose maximum came from the zero padding at the tail.
const PADDING: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

/// Non-overlapping max pooling (stride = window). A trailing partial window
/// is completed with zeros.
pub fn maxpool1d<T: Element>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, MaxPoolCache)> {
    if window == 0 {
        return shape_err("maxpool1d: window must be >= 1");
    }
    let (nb, nc, len) = input.dims3()?;
    let out_len = len.div_ceil(window);
    let mut out = vec![T::zero(); nb * nc * out_len];
    let mut argmax = vec![0usize; nb * nc * out_len];
    for (row, src) in input.data().chunks_exact(len).enumerate() {
        let base = row * len;
        let dst = &mut out[row * out_len..][..out_len];
        let idx = &mut argmax[row * out_len..][..out_len];
        for (w, win) in src.chunks(window).enumerate() {
            let mut best = win[0];
            let mut best_i = 0;
            for (i, &v) in win.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            let mut best_idx = base + w * window + best_i;
            if win.len() < window && T::zero() > best {
                best = T::zero();
                best_idx = PADDING;
            }
            dst[w] = best;
            idx[w] = best_idx;
        }
    }
    Ok((
        Tensor::from_vec(&[nb, nc, out_len], out)?,
        MaxPoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream gradient to the first maximal input of its window.
pub fn maxpool1d_backward<T: Element>(cache: &MaxPoolCache, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_output.len() != cache.argmax.len() {
        return shape_err(format!(
            "maxpool1d backward: expected {} upstream values, got {}",
            cache.argmax.len(),
            grad_output.len()
        ));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_output.data()) {
        if idx != PADDING {
            data[idx] += g;
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn window_two() {
        let (y, cache) = maxpool1d(&t(&[1.0, 3.0, 2.0, 4.0]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        let g = maxpool1d_backward(&cache, &Tensor::full(&[1, 1, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn window_one_is_identity() {
        let x = t(&[-1.0, 5.0, 2.0]);
        let (y, _) = maxpool1d(&x, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ties_route_to_first_and_tail_is_zero_padded() {
        let (y, cache) = maxpool1d(&t(&[2.0, 2.0, -3.0, -1.0, -5.0]), 2).unwrap();
        assert_eq!(y.data(), &[2.0, -1.0, 0.0]);
        let g = maxpool1d_backward(&cache, &Tensor::full(&[1, 1, 3], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
