use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Spatial parameters of a 2-D sliding window, as `(height, width)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if all.contains(&0) {
            return Err(Error::shape(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((in + 2·pad − dil·(k−1) − 1) / stride) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        let (kh, kw) = self.kernel;
        let ho = axis(h, kh, self.stride.0, self.padding.0, self.dilation.0);
        let wo = axis(w, kw, self.stride.1, self.padding.1, self.dilation.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(format!(
                "window {self:?} does not fit a {h}x{w} input (non-positive output size)"
            ))),
        }
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Lowers a `1×C×H×W` input into a `(C·kh·kw)×(Ho·Wo)` matrix whose column
/// `j` holds the receptive field of output position `j` in `(c, ki, kj)`
/// order. Reads outside the input are zero.
pub fn im2col(input: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!(
            "im2col takes a single image, got batch of {n} ({:?})",
            input.shape()
        )));
    }
    let (ho, wo) = geom.output_size(h, w)?;
    let rows = c * geom.kernel.0 * geom.kernel.1;
    let mut out = vec![0.0; rows * ho * wo];
    im2col_into(input.data(), c, h, w, geom, &mut out);
    Tensor::new([rows, ho * wo], out)
}

/// Slice-level im2col; `out` must hold `C·kh·kw·Ho·Wo` values and the
/// geometry must already be validated against `h`, `w`.
pub(crate) fn im2col_into(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    out: &mut [f32],
) {
    let (ho, wo) = geom
        .output_size(h, w)
        .expect("im2col_into called with unchecked geometry");
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let (dh, dw) = geom.dilation;
    let cols = ho * wo;

    let mut row = 0;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                let x_off = (kj * dw) as isize - pw;
                for oy in 0..ho {
                    let dst = &mut dst_row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * sh + ki * dh) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if sw == 1 {
                        // valid ox satisfy 0 <= ox + x_off < w
                        let lo = (-x_off).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - x_off).clamp(lo as isize, wo as isize) as usize;
                        dst[..lo].fill(0.0);
                        if hi > lo {
                            let start = (lo as isize + x_off) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        dst[hi..].fill(0.0);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw) as isize + x_off;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
