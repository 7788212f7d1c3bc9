use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Max or average pooling. Padded cells never win a max; for averages they
/// count as zeros and the divisor is always the full window size.
pub fn pool2d(input: &Tensor, mode: PoolMode, geometry: &ConvGeometry) -> Result<Tensor> {
    if geometry.dilation != (1, 1) {
        return Err(Error::InvalidArgument("dilated pooling is not supported".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = geometry.output_size(h, w)?;
    let (kh, kw) = geometry.kernel;
    let (sh, sw) = geometry.stride;
    let (ph, pw) = (geometry.padding.0 as isize, geometry.padding.1 as isize);
    let window = (kh * kw) as f32;

    let mut out = vec![0.0f32; n * c * ho * wo];
    for (plane_idx, dst) in out.chunks_exact_mut(ho * wo).enumerate() {
        let src = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = (oy * sh) as isize - ph;
                let x0 = (ox * sw) as isize - pw;
                let mut max = f32::NEG_INFINITY;
                let mut sum = 0.0f32;
                for y in y0.max(0)..(y0 + kh as isize).min(h as isize) {
                    for x in x0.max(0)..(x0 + kw as isize).min(w as isize) {
                        let v = src[y as usize * w + x as usize];
                        max = max.max(v);
                        sum += v;
                    }
                }
                dst[oy * wo + ox] = match mode {
                    PoolMode::Max => max,
                    PoolMode::Avg => sum / window,
                };
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Spatial mean per channel: `N×C×H×W → N×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let area = (h * w) as f64;
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / area) as f32)
        .collect();
    Tensor::new([n, c], data)
}
