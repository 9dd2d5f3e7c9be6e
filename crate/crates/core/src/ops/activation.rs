use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes the upstream gradient where the forward input was positive; the
/// subgradient at zero is zero.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_output.expect_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Logistic function, evaluated in the branch that never exponentiates a
/// positive argument and clamped strictly inside `(0, 1)`.
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::tiny()).min(T::one_below())
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward pass expressed through the forward output `s`: `g · s(1 − s)`.
pub fn sigmoid_backward<T: Element>(output: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_output.expect_shape(output.shape())?;
    let data = output
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::from_vec(&[2], vec![0.5f32, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn sigmoid_midpoint_and_extremes() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        for x in [40.0f32, -40.0, 1e4, -1e4, f32::MAX, f32::MIN] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        for x in [40.0f64, -40.0, 1e4, -1e4] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    proptest! {
        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -1e4f32..1e4f32) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
