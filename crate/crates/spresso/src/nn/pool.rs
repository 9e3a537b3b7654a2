//! Temporal average pooling.

use crate::error::{Error, Result};
use crate::nn::tensor::{sc, Scalar, Tensor};

/// Average pooling with kernel and stride `t` over the time (last) axis of a
/// [D, T] grid. Trailing remainder frames are dropped.
pub fn avg_pool_time<T: Scalar>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::invalid("pool stride must be positive"));
    }
    let (d, frames) = (x.rows(), x.cols());
    if frames < t {
        return Err(Error::invalid(format!(
            "cannot pool {frames} frames with stride {t}"
        )));
    }
    let out_t = frames / t;
    let inv = sc::<T>(1.0 / t as f64);
    let mut y = Tensor::zeros(&[d, out_t]);
    for ch in 0..d {
        let xi = x.row(ch);
        let yi = y.row_mut(ch);
        for (i, yv) in yi.iter_mut().enumerate() {
            let mut s = T::zero();
            for j in 0..t {
                s += xi[i * t + j];
            }
            *yv = s * inv;
        }
    }
    Ok(y)
}

/// Pool rows of a [T, D] token sequence: output row i is the mean of input
/// rows i*t .. i*t+t-1. Used inside the latent encoder where frames are rows.
pub fn pool_rows<T: Scalar>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::invalid("pool stride must be positive"));
    }
    let (frames, d) = (x.rows(), x.cols());
    if frames < t {
        return Err(Error::invalid(format!(
            "cannot pool {frames} frames with stride {t}"
        )));
    }
    let out_t = frames / t;
    let inv = sc::<T>(1.0 / t as f64);
    let mut y = Tensor::zeros(&[out_t, d]);
    for i in 0..out_t {
        for j in 0..t {
            let xi = x.row(i * t + j);
            let yi = y.row_mut(i);
            for k in 0..d {
                yi[k] += xi[k];
            }
        }
        for v in y.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(y)
}

/// Backward of `pool_rows`: spreads each output gradient evenly over its
/// window; dropped remainder rows get zero gradient.
pub fn pool_rows_backward<T: Scalar>(dy: &Tensor<T>, t: usize, in_rows: usize) -> Tensor<T> {
    let d = dy.cols();
    let inv = sc::<T>(1.0 / t as f64);
    let mut dx = Tensor::zeros(&[in_rows, d]);
    for i in 0..dy.rows() {
        let g = dy.row(i);
        for j in 0..t {
            let r = dx.row_mut(i * t + j);
            for k in 0..d {
                r[k] += g[k] * inv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::from_vec(&[1, 8], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool_time(&x, 4).unwrap();
        assert_eq!(y.as_slice(), &[2.5, 6.5]);
    }

    #[test]
    fn stride_one_is_identity() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = avg_pool_time(&x, 1).unwrap();
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::filled(&[3, 9], 0.7f64);
        let y = avg_pool_time(&x, 3).unwrap();
        for &v in y.as_slice() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_stride_rejected() {
        let x = Tensor::<f64>::filled(&[1, 4], 1.0);
        assert!(avg_pool_time(&x, 0).is_err());
    }

    #[test]
    fn nearest_upsample_preserves_window_means() {
        let x = Tensor::from_vec(&[1, 6], vec![1.0, 3.0, 2.0, 8.0, -1.0, 5.0]).unwrap();
        let y = avg_pool_time(&x, 2).unwrap();
        // nearest-neighbor upsample then re-pool must reproduce y exactly
        let mut up = Tensor::zeros(&[1, 6]);
        for i in 0..3 {
            for j in 0..2 {
                up.set2(0, i * 2 + j, y.at2(0, i));
            }
        }
        let y2 = avg_pool_time(&up, 2).unwrap();
        assert_eq!(y.as_slice(), y2.as_slice());
    }
}
