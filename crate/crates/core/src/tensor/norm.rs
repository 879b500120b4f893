use super::{Result, Scalar, Tensor, TensorError};

/// Variance floor used by every instance normalization in the crate.
pub const IN_EPS: f64 = 1e-5;

/// Per-(sample, channel) standardization over all trailing axes, no affine.
///
/// Returns the normalized tensor and the per-slice `1 / sqrt(var + eps)`,
/// which the backward pass reuses.
pub fn instance_norm_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::InvalidShape {
            op: "instance_norm",
            msg: format!("expected [N, C, ...], got {:?}", shape),
        });
    }
    let slice: usize = shape[2..].iter().product();
    if slice == 0 || x.is_empty() {
        return Err(TensorError::ZeroSizeSlice { op: "instance_norm" });
    }
    let inv_n = 1.0 / slice as f64;
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(shape[0] * shape[1]);
    for chunk in x.data().chunks(slice) {
        // statistics accumulate in f64 regardless of T
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            * inv_n;
        let r = 1.0 / (var + IN_EPS).sqrt();
        let (m, rs) = (T::of(mean), T::of(r));
        out.extend(chunk.iter().map(|&v| (v - m) * rs));
        inv_std.push(rs);
    }
    Ok((Tensor::new(shape.to_vec(), out)?, inv_std))
}

/// `dx = r * (dy - mean(dy) - y * mean(dy * y))` per slice.
pub(crate) fn instance_norm_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>, inv_std: &[T]) -> Tensor<T> {
    let slice = y.len() / inv_std.len();
    let inv_n = 1.0 / slice as f64;
    let mut dx = Vec::with_capacity(y.len());
    for ((g, yv), &r) in dy.data().chunks(slice).zip(y.data().chunks(slice)).zip(inv_std) {
        let mg = T::of(g.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n);
        let mgy = T::of(g.iter().zip(yv).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() * inv_n);
        dx.extend(g.iter().zip(yv).map(|(&a, &b)| r * (a - mg - b * mgy)));
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_slice_maps_to_zero() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 4], 7.5);
        let (y, _) = instance_norm_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_values_standardize() {
        let x = Tensor::<f64>::new(vec![1, 1, 4], vec![1., 2., 3., 4.]).unwrap();
        let (y, _) = instance_norm_forward(&x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn empty_slice_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 0]);
        assert_eq!(
            instance_norm_forward(&x).unwrap_err(),
            TensorError::ZeroSizeSlice { op: "instance_norm" }
        );
    }

    #[test]
    fn slice_statistics_on_random_input() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 5, 6], |i| ((i * 2654435761) % 1000) as f64 / 37.0);
        let (y, _) = instance_norm_forward(&x).unwrap();
        for s in y.data().chunks(30) {
            let m = s.iter().sum::<f64>() / 30.0;
            let v = s.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 30.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
