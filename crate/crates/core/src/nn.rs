//! Dense FP32 building blocks: matrices, fully connected layers, 2D
//! convolutions and normalization, with multiply-accumulate accounting.

use crate::error::{Error, Result};
use crate::model::WeightStore;

/// Runtime operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
    /// Elements passed through a softmax.
    pub softmax_elements: u64,
}

impl OpCounter {
    pub fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn hconcat(parts: &[&Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                debug_assert_eq!(p.rows, rows);
                out.extend_from_slice(p.row(r));
            }
        }
        Mat::from_vec(rows, cols, out)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn check_finite(&self, block: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                block: block.to_string(),
            })
        }
    }
}

/// `y = W x + b` with `W` stored `[out, in]` row-major.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'a> {
    pub weight: &'a [f32],
    pub bias: &'a [f32],
    pub din: usize,
    pub dout: usize,
}

impl<'a> Linear<'a> {
    pub fn from_store(store: &'a WeightStore, name: &str) -> Result<Self> {
        let w = store.get(&format!("{name}.weight"))?;
        let b = store.get(&format!("{name}.bias"))?;
        if w.shape.len() != 2 || b.shape != [w.shape[0]] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![w.shape[0], *w.shape.get(1).unwrap_or(&0)],
                found: w.shape.clone(),
            });
        }
        Ok(Self {
            weight: &w.data,
            bias: &b.data,
            din: w.shape[1],
            dout: w.shape[0],
        })
    }

    pub fn forward(&self, x: &Mat, counter: &mut OpCounter) -> Mat {
        assert_eq!(x.cols, self.din, "linear input width");
        let mut out = Mat::zeros(x.rows, self.dout);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(self.bias);
        }
        if x.rows > 0 {
            // C[rows x dout] += X[rows x din] * W^T[din x dout]
            unsafe {
                matrixmultiply::sgemm(
                    x.rows,
                    self.din,
                    self.dout,
                    1.0,
                    x.data.as_ptr(),
                    self.din as isize,
                    1,
                    self.weight.as_ptr(),
                    1,
                    self.din as isize,
                    1.0,
                    out.data.as_mut_ptr(),
                    self.dout as isize,
                    1,
                );
            }
        }
        counter.add_macs(x.rows * self.din * self.dout);
        out
    }
}

/// Channel-major feature map `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Chw {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// Square convolution with zero padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d<'a> {
    pub weight: &'a [f32],
    pub bias: &'a [f32],
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl<'a> Conv2d<'a> {
    pub fn from_store(store: &'a WeightStore, name: &str, stride: usize) -> Result<Self> {
        let w = store.get(&format!("{name}.weight"))?;
        let b = store.get(&format!("{name}.bias"))?;
        if w.shape.len() != 4 || w.shape[2] != w.shape[3] || b.shape != [w.shape[0]] {
            return Err(Error::ShapeMismatch {
                name: format!("{name}.weight"),
                expected: vec![b.shape[0], 0, 0, 0],
                found: w.shape.clone(),
            });
        }
        Ok(Self {
            weight: &w.data,
            bias: &b.data,
            cin: w.shape[1],
            cout: w.shape[0],
            k: w.shape[2],
            stride,
        })
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.output_dims(h, w);
        oh * ow * self.cout * self.cin * self.k * self.k
    }

    pub fn forward(&self, x: &Chw, counter: &mut OpCounter) -> Chw {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.output_dims(x.h, x.w);
        let npix = oh * ow;
        let kk = self.cin * self.k * self.k;

        let col_storage;
        let col: &[f32] = if self.k == 1 && self.stride == 1 {
            &x.data
        } else {
            col_storage = im2col(x, self.k, self.stride, oh, ow);
            &col_storage
        };

        let mut out = Chw::zeros(self.cout, oh, ow);
        for (co, plane) in out.data.chunks_exact_mut(npix).enumerate() {
            plane.fill(self.bias[co]);
        }
        unsafe {
            matrixmultiply::sgemm(
                self.cout,
                kk,
                npix,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                col.as_ptr(),
                npix as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                npix as isize,
                1,
            );
        }
        counter.add_macs(self.macs(x.h, x.w));
        out
    }
}

fn im2col(x: &Chw, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let npix = oh * ow;
    let mut col = vec![0.0f32; x.c * k * k * npix];
    for c in 0..x.c {
        let plane = x.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

pub const NORM_EPS: f32 = 1e-5;

/// Per-channel normalization over spatial positions, no affine parameters.
pub fn instance_norm(x: &mut Chw) {
    let n = x.h * x.w;
    for plane in x.data.chunks_exact_mut(n) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = plane
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        for v in plane.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

pub fn relu_inplace(data: &mut [f32]) {
    for v in data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Chw, c: &Conv2d) -> Chw {
        let (oh, ow) = c.output_dims(x.h, x.w);
        let pad = (c.k / 2) as isize;
        let mut out = Chw::zeros(c.cout, oh, ow);
        for co in 0..c.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[co] as f64;
                    for ci in 0..c.cin {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride) as isize + ky as isize - pad;
                                let ix = (ox * c.stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = c.weight[((co * c.cin + ci) * c.k + ky) * c.k + kx];
                                let xv = x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                acc += wv as f64 * xv as f64;
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) % 1000) as f32 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
            let (cin, cout) = (3, 4);
            let w = pseudo(cout * cin * k * k, 1);
            let b = pseudo(cout, 2);
            let conv = Conv2d {
                weight: &w,
                bias: &b,
                cin,
                cout,
                k,
                stride,
            };
            let x = Chw {
                c: cin,
                h: 9,
                w: 8,
                data: pseudo(cin * 72, 3),
            };
            let mut ctr = OpCounter::default();
            let fast = conv.forward(&x, &mut ctr);
            let slow = naive_conv(&x, &conv);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "k={k} s={stride}: {a} vs {b}");
            }
            assert_eq!(ctr.macs as usize, fast.h * fast.w * cout * cin * k * k);
        }
    }

    #[test]
    fn linear_matches_naive() {
        let (din, dout, rows) = (7, 5, 4);
        let w = pseudo(din * dout, 4);
        let b = pseudo(dout, 5);
        let lin = Linear {
            weight: &w,
            bias: &b,
            din,
            dout,
        };
        let x = Mat::from_vec(rows, din, pseudo(rows * din, 6));
        let mut ctr = OpCounter::default();
        let y = lin.forward(&x, &mut ctr);
        for r in 0..rows {
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += w[o * din + i] * x.row(r)[i];
                }
                assert!((y.row(r)[o] - acc).abs() < 1e-5);
            }
        }
        assert_eq!(ctr.macs, (rows * din * dout) as u64);
    }

    #[test]
    fn instance_norm_of_zeros_stays_zero() {
        let mut x = Chw::zeros(2, 4, 4);
        instance_norm(&mut x);
        assert!(x.data.iter().all(|&v| v == 0.0));
    }
}
