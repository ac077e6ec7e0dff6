//! Foreground-reweighted noise loss and the feature transform loss.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-pixel loss weights: 1 on background, `total / foreground` on
/// foreground pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl WeightMask {
    pub fn foreground_weight(&self) -> f64 {
        self.values.iter().copied().fold(1.0, f64::max)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.height, self.width, 1], &self.values).expect("mask shape")
    }

    /// Area-average onto a `size x size` grid, rescaled so the total weight
    /// is unchanged.
    pub fn downsample(&self, size: usize) -> Result<WeightMask> {
        if size == 0 || self.height % size != 0 || self.width % size != 0 {
            return Err(dim_err!("cannot pool a {}x{} mask onto {size}x{size}", self.height, self.width));
        }
        let (fy, fx) = (self.height / size, self.width / size);
        let mut values = vec![0.0; size * size];
        for y in 0..self.height {
            for x in 0..self.width {
                values[(y / fy) * size + x / fx] += self.values[y * self.width + x] / (fy * fx) as f64;
            }
        }
        let before: f64 = self.values.iter().sum::<f64>() / (self.height * self.width) as f64;
        let after: f64 = values.iter().sum::<f64>() / (size * size) as f64;
        if after > 0.0 {
            values.iter_mut().for_each(|v| *v *= before / after);
        }
        Ok(WeightMask { height: size, width: size, values })
    }
}

/// Weights from a binary foreground mask. An empty foreground gives all ones.
pub fn foreground_weight_mask(foreground: &[bool], height: usize, width: usize) -> Result<WeightMask> {
    let total = height * width;
    if foreground.len() != total {
        return Err(dim_err!("{} mask values for a {height}x{width} grid", foreground.len()));
    }
    let fg = foreground.iter().filter(|&&b| b).count();
    let w = if fg == 0 { 1.0 } else { total as f64 / fg as f64 };
    let values = foreground.iter().map(|&b| if b { w } else { 1.0 }).collect();
    Ok(WeightMask { height, width, values })
}

/// `[B, H, W, 1]` stack of masks.
pub fn stack_masks<T: Scalar>(masks: &[WeightMask]) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| Error::Contract("no weight masks".into()))?;
    let (h, w) = (first.height, first.width);
    if masks.iter().any(|m| m.height != h || m.width != w) {
        return Err(dim_err!("weight masks differ in size"));
    }
    let data: Vec<f64> = masks.iter().flat_map(|m| m.values.iter().copied()).collect();
    Tensor::from_f64(&[masks.len(), h, w, 1], &data)
}

/// Mean over pixels and channels of `m · (ε - ε̂)²`; `m` broadcasts over
/// channels.
pub fn mse_loss<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != eps_hat.shape() {
        return Err(dim_err!("mse between {:?} and {:?}", eps.shape(), eps_hat.shape()));
    }
    Ok(eps_hat.sub(eps)?.square().mul(m)?.mean_all())
}

/// Mean over levels of the weighted L1 distance between controller
/// features and their (detached) targets. `masks[l]` is `[B, s, s, 1]`.
pub fn transform_loss<T: Scalar>(h: &[Tensor<T>], target: &[Tensor<T>], masks: &[Tensor<T>]) -> Result<Tensor<T>> {
    if h.is_empty() || h.len() != target.len() || h.len() != masks.len() {
        return Err(dim_err!("transform loss over {} / {} / {} levels", h.len(), target.len(), masks.len()));
    }
    let mut acc: Option<Tensor<T>> = None;
    for ((x, t), m) in h.iter().zip(target).zip(masks) {
        if x.shape() != t.shape() {
            return Err(dim_err!("level shapes {:?} and {:?}", x.shape(), t.shape()));
        }
        let term = x.sub(&t.detach())?.abs().mul(m)?.mean_all();
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty").mul_scalar(T::from_f64c(1.0 / h.len() as f64)))
}

pub fn total_loss<T: Scalar>(mse: &Tensor<T>, transform: Option<&Tensor<T>>, lambda: f64) -> Result<Tensor<T>> {
    match transform {
        Some(tr) if lambda != 0.0 => mse.add(&tr.mul_scalar(T::from_f64c(lambda))),
        _ => Ok(mse.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_foreground_weighs_four() {
        let mut fg = vec![false; 16];
        for i in [0, 1, 4, 5] {
            fg[i] = true;
        }
        let m = foreground_weight_mask(&fg, 4, 4).unwrap();
        assert_eq!(m.foreground_weight(), 4.0);
        assert_eq!(m.values.iter().filter(|&&v| v == 1.0).count(), 12);
        let full = foreground_weight_mask(&[true; 16], 4, 4).unwrap();
        assert!(full.values.iter().all(|&v| v == 1.0));
        let empty = foreground_weight_mask(&[false; 16], 4, 4).unwrap();
        assert!(empty.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsample_keeps_total_weight() {
        let fg: Vec<bool> = (0..64).map(|i| i % 7 == 0).collect();
        let m = foreground_weight_mask(&fg, 8, 8).unwrap();
        let d = m.downsample(4).unwrap();
        let a: f64 = m.values.iter().sum::<f64>() / 64.0;
        let b: f64 = d.values.iter().sum::<f64>() / 16.0;
        assert!((a - b).abs() < 1e-12);
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn hand_computed_mse() {
        let eps = Tensor::<f64>::from_f64(&[1, 2, 2, 1], &[0., 1., 2., 3.]).unwrap();
        let hat = Tensor::<f64>::from_f64(&[1, 2, 2, 1], &[1., 1., 0., 0.]).unwrap();
        let m = Tensor::<f64>::from_f64(&[1, 2, 2, 1], &[2., 1., 1., 0.5]).unwrap();
        // (2*1 + 0 + 4 + 0.5*9) / 4
        assert_eq!(mse_loss(&eps, &hat, &m).unwrap().item().unwrap(), 10.5 / 4.0);
    }

    #[test]
    fn constant_offset_transform_loss() {
        let h = vec![Tensor::<f64>::full(&[1, 2, 2, 3], 0.25), Tensor::full(&[1, 1, 1, 3], 0.25)];
        let t = vec![Tensor::<f64>::zeros(&[1, 2, 2, 3]), Tensor::zeros(&[1, 1, 1, 3])];
        let m = vec![Tensor::<f64>::ones(&[1, 2, 2, 1]), Tensor::ones(&[1, 1, 1, 1])];
        assert_eq!(transform_loss(&h, &t, &m).unwrap().item().unwrap(), 0.25);
        assert_eq!(transform_loss(&t, &t, &m).unwrap().item().unwrap(), 0.0);
        assert!(transform_loss(&h[..1], &t, &m).is_err());
    }
}
