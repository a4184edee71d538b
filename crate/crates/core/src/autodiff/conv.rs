//! Direct 2-D cross-correlation kernels over `[C, H, W]` buffers.
//!
//! Loops run in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be [C, H, W], got {input:?}"))),
        };
        let (c_out, wc_in, k) = match *weight {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d weight must be [C_out, C_in, k, k], got {weight:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if bias != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias must be [{c_out}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let out_len = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < k {
                return Err(Error::config(format!(
                    "conv2d output size is non-positive (extent {n}, padding {padding}, kernel {k})"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: out_len(h)?,
            w_out: out_len(w)?,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.h_out, self.w_out]
    }

    /// Output indices `o` for which `o * stride + tap - padding` lands in `0..extent`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > tap {
            (self.padding - tap).div_ceil(s)
        } else {
            0
        };
        if extent - 1 + self.padding < tap {
            return (0, 0);
        }
        let hi = ((extent - 1 + self.padding - tap) / s + 1).min(out_extent);
        (lo, hi.max(lo))
    }

    fn rows(&self, kh: usize) -> (usize, usize) {
        self.valid_range(kh, self.h, self.h_out)
    }

    fn cols(&self, kw: usize) -> (usize, usize) {
        self.valid_range(kw, self.w, self.w_out)
    }

    fn weight_index(&self, co: usize, ci: usize, kh: usize, kw: usize) -> usize {
        ((co * self.c_in + ci) * self.k + kh) * self.k + kw
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        out_plane.fill(bias[co]);
        for ci in 0..g.c_in {
            let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.rows(kh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.cols(kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = weight[g.weight_index(co, ci, kh, kw)];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.padding;
                        let iw0 = ow_lo * g.stride + kw - g.padding;
                        let in_row = &in_plane[ih * g.w..(ih + 1) * g.w];
                        let out_row = &mut out_plane[oh * g.w_out + ow_lo..oh * g.w_out + ow_hi];
                        if g.stride == 1 {
                            let src = &in_row[iw0..iw0 + out_row.len()];
                            for (o, &x) in out_row.iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for (o, &x) in out_row.iter_mut().zip(in_row[iw0..].iter().step_by(g.stride)) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Adjoint of [`forward`]. Only the requested gradients are computed.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let plane_out = g.h_out * g.w_out;
    let plane_in = g.h * g.w;
    let mut gin = want_input.then(|| vec![0.0; g.c_in * plane_in]);
    let mut gw = want_weight.then(|| vec![0.0; weight.len()]);
    let gb = want_bias.then(|| {
        (0..g.c_out)
            .map(|co| sum_fixed_order(&grad_out[co * plane_out..(co + 1) * plane_out]))
            .collect()
    });

    if want_input || want_weight {
        for co in 0..g.c_out {
            let gout_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
            for ci in 0..g.c_in {
                let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.rows(kh);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) = g.cols(kw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let widx = g.weight_index(co, ci, kh, kw);
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let iw0 = ow_lo * g.stride + kw - g.padding;
                            let n = ow_hi - ow_lo;
                            let gout_row = &gout_plane[oh * g.w_out + ow_lo..oh * g.w_out + ow_hi];
                            let row_start = ci * plane_in + ih * g.w;
                            if g.stride == 1 {
                                if want_weight {
                                    acc += dot_fixed_order(gout_row, &in_plane[ih * g.w + iw0..ih * g.w + iw0 + n]);
                                }
                                if let Some(gin) = gin.as_mut() {
                                    let dst = &mut gin[row_start + iw0..row_start + iw0 + n];
                                    for (d, &go) in dst.iter_mut().zip(gout_row) {
                                        *d += wv * go;
                                    }
                                }
                            } else {
                                if want_weight {
                                    let src = in_plane[ih * g.w + iw0..].iter().step_by(g.stride);
                                    acc += gout_row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gin) = gin.as_mut() {
                                    let dst = gin[row_start + iw0..].iter_mut().step_by(g.stride);
                                    for (d, &go) in dst.zip(gout_row) {
                                        *d += wv * go;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }

    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

/// Four-lane dot product with a fixed association order.
fn dot_fixed_order(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn sum_fixed_order(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut chunks = a.chunks_exact(4);
    for x in &mut chunks {
        lanes[0] += x[0];
        lanes[1] += x[1];
        lanes[2] += x[2];
        lanes[3] += x[3];
    }
    let tail: f64 = chunks.remainder().iter().sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}
