use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Affine map `x·W + b` for `x: [B, F]`, `W: [F, O]`, `b: [O]`.
pub fn dense<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (nb, nf) = input.dims2()?;
    let (wf, no) = weight.dims2()?;
    if wf != nf {
        return shape_err(format!("dense: input has {nf} features but weights expect {wf}"));
    }
    bias.expect_shape(&[no])?;
    let mut out: Vec<T> = (0..nb).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        false,
        false,
        nb,
        nf,
        no,
        input.data(),
        weight.data(),
        T::one(),
        &mut out,
    );
    Tensor::from_vec(&[nb, no], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (nb, nf) = input.dims2()?;
    let (_, no) = weight.dims2()?;
    grad_output.expect_shape(&[nb, no])?;
    let mut gw = vec![T::zero(); nf * no];
    T::gemm(
        true,
        false,
        nf,
        nb,
        no,
        input.data(),
        grad_output.data(),
        T::zero(),
        &mut gw,
    );
    let mut gx = vec![T::zero(); nb * nf];
    T::gemm(
        false,
        true,
        nb,
        no,
        nf,
        grad_output.data(),
        weight.data(),
        T::zero(),
        &mut gx,
    );
    let mut gb = vec![T::zero(); no];
    for row in grad_output.data().chunks(no) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(&[nb, nf], gx)?,
        weight: Tensor::from_vec(&[nf, no], gw)?,
        bias: Tensor::from_vec(&[no], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f32, -2.0, 3.5, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &w, &Tensor::zeros(&[2])).unwrap(), x);
    }

    #[test]
    fn small_affine() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0f32, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5f32]).unwrap();
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.5]);
    }

    #[test]
    fn mismatched_features() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let w = Tensor::<f32>::zeros(&[2, 1]);
        assert!(matches!(
            dense(&x, &w, &Tensor::zeros(&[1])),
            Err(crate::Error::Shape(_))
        ));
    }
}
