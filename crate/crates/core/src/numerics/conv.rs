//! Channels-last convolution and resampling.

use super::gemm::gemm;
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        // f(column offset, source pixel offset) for every (output pixel, tap)
        let patch = self.patch();
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((bi * self.ho + oy) * self.wo + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let col = row + (ky * self.kw + kx) * self.ci;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
                            let src = inside.then(|| ((bi * self.h + iy as usize) * self.w + ix as usize) * self.ci);
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.b * g.ho * g.wo * g.patch()];
    let ci = g.ci;
    g.for_each_tap(|col, src| {
        if let Some(s) = src {
            cols[col..col + ci].copy_from_slice(&x[s..s + ci]);
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.b * g.h * g.w * g.ci];
    let ci = g.ci;
    g.for_each_tap(|col, src| {
        if let Some(s) = src {
            for c in 0..ci {
                x[s + c] += cols[col + c];
            }
        }
    });
    x
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `self: [B, H, W, Cin]` with `kernel: [kh, kw, Cin, Cout]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || kernel.rank() != 4 {
            return Err(dim_err!("conv2d expects NHWC input and [kh,kw,ci,co] kernel, got {:?} / {:?}", self.shape(), kernel.shape()));
        }
        let (b, h, w, ci) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (kh, kw, kci, co) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
        if kci != ci {
            return Err(dim_err!("conv2d channel mismatch: input has {ci}, kernel expects {kci}"));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err!("conv2d kernel {kh}x{kw} does not fit {h}x{w} with padding {padding}"));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { b, h, w, ci, kh, kw, co, stride, pad: padding, ho, wo };
        let rows = b * ho * wo;
        let cols = if geom.pointwise() { self.to_vec() } else { im2col(&self.data(), &geom) };
        let mut out = vec![T::zero(); rows * co];
        gemm(rows, geom.patch(), co, &cols, false, &kernel.data(), false, &mut out, false);

        let keep_cols = grad_needed(kernel);
        let saved = keep_cols.then_some(cols);
        Ok(Tensor::from_op(vec![b, ho, wo, co], out, vec![self.clone(), kernel.clone()], move |g, ps| {
            let (x, k) = (&ps[0], &ps[1]);
            let gx = x.requires_grad().then(|| {
                let mut gcols = vec![T::zero(); rows * geom.patch()];
                gemm(rows, geom.co, geom.patch(), g, false, &k.data(), true, &mut gcols, false);
                if geom.pointwise() {
                    gcols
                } else {
                    col2im(&gcols, &geom)
                }
            });
            let gk = k.requires_grad().then(|| {
                let recomputed;
                let cols = match &saved {
                    Some(c) => c,
                    None => {
                        recomputed = if geom.pointwise() { x.to_vec() } else { im2col(&x.data(), &geom) };
                        &recomputed
                    }
                };
                let mut gk = vec![T::zero(); geom.patch() * geom.co];
                gemm(geom.patch(), rows, geom.co, cols, true, g, false, &mut gk, false);
                gk
            });
            vec![gx, gk]
        }))
    }

    /// Nearest-neighbour 2x upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(dim_err!("upsample2x expects NHWC, got {:?}", self.shape()));
        }
        let (b, h, w, c) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        {
            let d = self.data();
            for bi in 0..b {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let src = ((bi * h + y / 2) * w + x / 2) * c;
                        let dst = ((bi * 2 * h + y) * 2 * w + x) * c;
                        out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![b, 2 * h, 2 * w, c], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); b * h * w * c];
            for bi in 0..b {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let dst = ((bi * h + y / 2) * w + x / 2) * c;
                        let src = ((bi * 2 * h + y) * 2 * w + x) * c;
                        for ch in 0..c {
                            gx[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn grad_needed<T: Scalar>(t: &Tensor<T>) -> bool {
    super::grad_enabled() && t.requires_grad()
}

/// Space-to-depth: `[B, H, W, C]` to `[B, H/r, W/r, r*r*C]`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(1) % r != 0 || x.dim(2) % r != 0 {
        return Err(dim_err!("pixel_unshuffle({r}) on {:?}", x.shape()));
    }
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(&[b, h / r, r, w / r, r, c])?.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[b, h / r, w / r, r * r * c])
}

/// Depth-to-space, inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(3) % (r * r) != 0 {
        return Err(dim_err!("pixel_shuffle({r}) on {:?}", x.shape()));
    }
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3) / (r * r));
    x.reshape(&[b, h, w, r, r, c])?.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[b, h * r, w * r, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 3, 1], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&k, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::<f64>::full(&[1, 5, 5, 1], 2.0);
        let k = Tensor::<f64>::ones(&[3, 3, 1, 1]);
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        let d = y.to_vec();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(d[yy * 5 + xx], 18.0);
            }
        }
        assert_eq!(d[0], 8.0);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let k = Tensor::<f64>::zeros(&[3, 3, 3, 1]);
        assert!(x.conv2d(&k, 1, 1).is_err());
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x = Tensor::<f64>::from_f64(&[1, 4, 4, 3], &(0..48).map(f64::from).collect::<Vec<_>>()).unwrap();
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 2, 2, 12]);
        // first output cell holds the top-left 2x2 block
        assert_eq!(&u.to_vec()[..6], &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(pixel_shuffle(&u, 2).unwrap().to_vec(), x.to_vec());
    }
}
