//! Dense `f64` tensors in channel-major `[C, H, W]` layout, plus the
//! convolution and resampling kernels the networks are built from.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every element through `f32`, so that the tensor survives an
    /// `f32` serialization round trip unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Zero-padded 2-D convolution. `x: [Ci, H, W]`, `w: [Co, Ci, k, k]`,
/// `b: [Co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = x.dims3();
    let (co, wci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(ci, wci, "conv input channels {} vs weight {}", ci, wci);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        let plane = &mut out.data[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..ci {
            let xin = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        let (lo, hi) = valid_cols(wo, wd, kx, stride, pad);
                        for ox in lo..hi {
                            orow[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, wd)`.
fn valid_cols(wo: usize, wd: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= wd - 1
    let hi = if wd + pad < kx + 1 {
        0
    } else {
        ((wd + pad - kx - 1) / stride + 1).min(wo)
    };
    (lo, hi.max(lo))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.dims3();
    let (co, _, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (_, ho, wo) = grad_out.dims3();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[co]);
    for o in 0..co {
        let gplane = &grad_out.data[o * ho * wo..(o + 1) * ho * wo];
        gb.data[o] = gplane.iter().sum();
        for i in 0..ci {
            let xin = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = w.data[widx];
                    let (lo, hi) = valid_cols(wo, wd, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        for ox in lo..hi {
                            acc += grow[ox] * row[ox * stride + kx - pad];
                        }
                        if wv != 0.0 {
                            let gxrow = &mut gx.data[i * h * wd + iy * wd..i * h * wd + (iy + 1) * wd];
                            for ox in lo..hi {
                                gxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    gw.data[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out.data[(ch * ho + oy) * wo + ox] = x.data[(ch * h + oy / factor) * w + ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Tensor {
    let (c, ho, wo) = grad_out.dims3();
    let (h, w) = (ho / factor, wo / factor);
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                g.data[(ch * h + oy / factor) * w + ox / factor] += grad_out.data[(ch * ho + oy) * wo + ox];
            }
        }
    }
    g
}

/// Maps an out-of-range coordinate back into `[0, n)` by mirror reflection
/// about the edge samples (edge not repeated). Length-1 axes clamp.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads the spatial dims on the bottom/right up to `(ht, wt)`.
pub fn reflect_pad(x: &Tensor, ht: usize, wt: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    let mut out = Tensor::zeros(&[c, ht, wt]);
    for ch in 0..c {
        for y in 0..ht {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wt {
                let sx = reflect_index(xx as isize, w);
                out.data[(ch * ht + y) * wt + xx] = x.data[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

pub fn reflect_pad_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, ht, wt) = grad_out.dims3();
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..ht {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wt {
                let sx = reflect_index(xx as isize, w);
                g.data[(ch * h + sy) * w + sx] += grad_out.data[(ch * ht + y) * wt + xx];
            }
        }
    }
    g
}

/// Keeps the top-left `h × w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, hi, wi) = x.dims3();
    assert!(h <= hi && w <= wi, "crop {}x{} larger than {}x{}", h, w, hi, wi);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * hi + y) * wi;
            out.data[(ch * h + y) * w..(ch * h + y) * w + w].copy_from_slice(&x.data[src..src + w]);
        }
    }
    out
}

pub fn crop_backward(grad_out: &Tensor, hi: usize, wi: usize) -> Tensor {
    let (c, h, w) = grad_out.dims3();
    let mut g = Tensor::zeros(&[c, hi, wi]);
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hi + y) * wi;
            g.data[dst..dst + w].copy_from_slice(&grad_out.data[(ch * h + y) * w..(ch * h + y) * w + w]);
        }
    }
    g
}
