use crate::error::{Error, Result};
use crate::tensor::{im2col_into, sgemm, Bias, ConvGeometry, Tensor};

/// A (possibly grouped) 2-D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub groups: usize,
    /// `out_channels × (in_channels / groups) × kh × kw`
    pub weights: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        groups: usize,
        weights: Tensor,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        let p = ConvParams {
            in_channels,
            out_channels,
            geometry,
            groups,
            weights,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.geometry.kernel.0,
            self.geometry.kernel.1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::shape(format!(
                "groups={} must divide in_channels={} and out_channels={}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.weights.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "conv weights have shape {:?}, expected {:?}",
                self.weights.shape(),
                self.weight_shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::shape(format!(
                    "conv bias has length {}, expected {}",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got input {:?}",
                self.in_channels,
                input.shape()
            )));
        }
        let (ho, wo) = self.geometry.output_size(h, w)?;
        Ok((n, c, h, w, ho, wo))
    }
}

/// Cross-correlation with zero padding, lowered to im2col + GEMM per group.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    let (n, c, h, w, ho, wo) = p.check_input(input)?;
    let o = p.out_channels;
    let cin_g = c / p.groups;
    let cout_g = o / p.groups;
    let (kh, kw) = p.geometry.kernel;
    let k = cin_g * kh * kw;
    let cols = ho * wo;
    let pointwise = p.geometry.is_pointwise();

    let mut out = vec![0.0f32; n * o * cols];
    let mut col_buf = if pointwise { Vec::new() } else { vec![0.0f32; k * cols] };
    let weights = p.weights.data();

    for img in 0..n {
        let image = &input.data()[img * c * h * w..(img + 1) * c * h * w];
        for g in 0..p.groups {
            let group_in = &image[g * cin_g * h * w..(g + 1) * cin_g * h * w];
            let b: &[f32] = if pointwise {
                group_in
            } else {
                im2col_into(group_in, cin_g, h, w, &p.geometry, &mut col_buf);
                &col_buf
            };
            let a = &weights[g * cout_g * k..(g + 1) * cout_g * k];
            let dst_start = (img * o + g * cout_g) * cols;
            let dst = &mut out[dst_start..dst_start + cout_g * cols];
            let bias = match &p.bias {
                Some(bias) => Bias::Row(&bias[g * cout_g..(g + 1) * cout_g]),
                None => Bias::None,
            };
            sgemm(cout_g, cols, k, a, b, dst, bias);
        }
    }
    Tensor::new([n, o, ho, wo], out)
}

/// Per-channel spatial convolution (`groups == in_channels == out_channels`),
/// computed directly without lowering.
pub fn depthwise_conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    if !(p.groups == p.in_channels && p.groups == p.out_channels) {
        return Err(Error::shape(format!(
            "depthwise conv requires groups == in_channels == out_channels, got {}/{}/{}",
            p.groups, p.in_channels, p.out_channels
        )));
    }
    let (n, c, h, w, ho, wo) = p.check_input(input)?;
    let (kh, kw) = p.geometry.kernel;
    let (sh, sw) = p.geometry.stride;
    let (ph, pw) = p.geometry.padding;
    let (dh, dw) = p.geometry.dilation;
    let weights = p.weights.data();

    let mut out = vec![0.0f32; n * c * ho * wo];
    for (plane_idx, dst) in out.chunks_exact_mut(ho * wo).enumerate() {
        let ch = plane_idx % c;
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        let kernel = &weights[ch * kh * kw..(ch + 1) * kh * kw];
        dst.fill(p.bias.as_ref().map_or(0.0, |b| b[ch]));
        for oy in 0..ho {
            let row = &mut dst[oy * wo..(oy + 1) * wo];
            for ki in 0..kh {
                let iy = (oy * sh + ki * dh) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                for kj in 0..kw {
                    let wv = kernel[ki * kw + kj];
                    let x_off = (kj * dw) as isize - pw as isize;
                    // ox in [lo, hi) keeps 0 <= ox*sw + x_off < w
                    let lo = if x_off >= 0 {
                        0
                    } else {
                        ((-x_off) as usize).div_ceil(sw)
                    };
                    let hi_num = w as isize - x_off;
                    let hi = if hi_num <= 0 {
                        0
                    } else {
                        ((hi_num as usize).div_ceil(sw)).min(wo)
                    };
                    if lo >= hi {
                        continue;
                    }
                    if sw == 1 {
                        let start = (lo as isize + x_off) as usize;
                        let s = &src_row[start..start + (hi - lo)];
                        for (d, &v) in row[lo..hi].iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    } else {
                        for (ox, d) in row.iter_mut().enumerate().take(hi).skip(lo) {
                            let ix = (ox * sw) as isize + x_off;
                            *d += wv * src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}
