use super::Tensor;
use crate::error::{Error, Result};

/// Bias added while the first K-panel of the output is written.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Bias<'a> {
    None,
    /// One value per output row (conv output channel).
    Row(&'a [f32]),
    /// One value per output column.
    Col(&'a [f32]),
}

/// `out = a · b (+ bias)` for row-major matrices, `a: M×K`, `b: K×N`,
/// `bias: N`.
pub fn gemm(a: &Tensor, b: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "gemm inner dimensions disagree: a is {:?}, b is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != n {
            return Err(Error::shape(format!(
                "gemm bias has length {} but b is {:?} (expected {n})",
                bias.len(),
                b.shape()
            )));
        }
    }
    let mut out = vec![0.0; m * n];
    sgemm(
        m,
        n,
        k,
        a.data(),
        b.data(),
        &mut out,
        bias.map_or(Bias::None, Bias::Col),
    );
    Tensor::new([m, n], out)
}

// K-panel depth shared by every kernel shape.
const KC: usize = 256;

/// Contiguous row-major `c[M×N] = a[M×K] · b[K×N] + bias`, overwriting `c`.
pub(crate) fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    bias: Bias<'_>,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        fill_bias(m, n, c, bias);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { sgemm_avx512(m, n, k, a, b, c, bias) };
            return;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { sgemm_avx2(m, n, k, a, b, c, bias) };
            return;
        }
    }
    blocked::<4, 8, false>(m, n, k, a, b, c, bias);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn sgemm_avx512(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    bias: Bias<'_>,
) {
    blocked::<12, 32, true>(m, n, k, a, b, c, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sgemm_avx2(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    bias: Bias<'_>,
) {
    blocked::<6, 16, true>(m, n, k, a, b, c, bias)
}

fn fill_bias(m: usize, n: usize, c: &mut [f32], bias: Bias<'_>) {
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = match bias {
                Bias::None => 0.0,
                Bias::Row(r) => r[i],
                Bias::Col(col) => col[j],
            };
        }
    }
}

/// Output-stationary blocked GEMM. `a` is packed into MR-row panels and `b`
/// into NR-column panels per KC-deep slice; the micro-kernel keeps an MR×NR
/// accumulator tile in registers with k innermost.
#[inline(always)]
fn blocked<const MR: usize, const NR: usize, const FMA: bool>(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    bias: Bias<'_>,
) {
    let mc_max = MR * 16;
    let nc_max = NR * 64;
    let kc_cap = k.min(KC);
    let mut a_pack = vec![0.0f32; round_up(m.min(mc_max), MR) * kc_cap];
    let mut b_pack = vec![0.0f32; round_up(n.min(nc_max), NR) * kc_cap];

    for jc in (0..n).step_by(nc_max) {
        let nc = nc_max.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b::<NR>(b, n, pc, kc, jc, nc, &mut b_pack);
            for ic in (0..m).step_by(mc_max) {
                let mc = mc_max.min(m - ic);
                pack_a::<MR>(a, k, ic, mc, pc, kc, &mut a_pack);
                for (jr, b_panel) in b_pack.chunks_exact(NR * kc).take(nc.div_ceil(NR)).enumerate() {
                    let col0 = jc + jr * NR;
                    let nr = NR.min(jc + nc - col0);
                    for (ir, a_panel) in a_pack.chunks_exact(MR * kc).take(mc.div_ceil(MR)).enumerate() {
                        let row0 = ic + ir * MR;
                        let mr = MR.min(ic + mc - row0);
                        let acc = kernel::<MR, NR, FMA>(kc, a_panel, b_panel);
                        store_tile(&acc, c, n, row0, col0, mr, nr, pc == 0, bias);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn kernel<const MR: usize, const NR: usize, const FMA: bool>(
    kc: usize,
    a_panel: &[f32],
    b_panel: &[f32],
) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    for (a, b) in a_panel
        .chunks_exact(MR)
        .zip(b_panel.chunks_exact(NR))
        .take(kc)
    {
        let a: &[f32; MR] = a.try_into().unwrap();
        let b: &[f32; NR] = b.try_into().unwrap();
        for i in 0..MR {
            let ai = a[i];
            for j in 0..NR {
                acc[i][j] = if FMA {
                    ai.mul_add(b[j], acc[i][j])
                } else {
                    ai * b[j] + acc[i][j]
                };
            }
        }
    }
    acc
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn store_tile<const MR: usize, const NR: usize>(
    acc: &[[f32; NR]; MR],
    c: &mut [f32],
    ldc: usize,
    row0: usize,
    col0: usize,
    mr: usize,
    nr: usize,
    first: bool,
    bias: Bias<'_>,
) {
    for (i, acc_row) in acc.iter().enumerate().take(mr) {
        let row = row0 + i;
        let out = &mut c[row * ldc + col0..row * ldc + col0 + nr];
        if first {
            match bias {
                Bias::None => out.copy_from_slice(&acc_row[..nr]),
                Bias::Row(r) => {
                    let bv = r[row];
                    for (o, &v) in out.iter_mut().zip(acc_row) {
                        *o = v + bv;
                    }
                }
                Bias::Col(cb) => {
                    for ((o, &v), &bv) in out.iter_mut().zip(acc_row).zip(&cb[col0..col0 + nr]) {
                        *o = v + bv;
                    }
                }
            }
        } else {
            for (o, &v) in out.iter_mut().zip(acc_row) {
                *o += v;
            }
        }
    }
}

#[inline(always)]
fn pack_a<const MR: usize>(
    a: &[f32],
    lda: usize,
    ic: usize,
    mc: usize,
    pc: usize,
    kc: usize,
    out: &mut [f32],
) {
    for (ir, panel) in out.chunks_exact_mut(MR * kc).take(mc.div_ceil(MR)).enumerate() {
        let row0 = ic + ir * MR;
        let rows = MR.min(ic + mc - row0);
        for i in 0..MR {
            if i < rows {
                let src = &a[(row0 + i) * lda + pc..(row0 + i) * lda + pc + kc];
                for (p, &v) in src.iter().enumerate() {
                    panel[p * MR + i] = v;
                }
            } else {
                for p in 0..kc {
                    panel[p * MR + i] = 0.0;
                }
            }
        }
    }
}

#[inline(always)]
fn pack_b<const NR: usize>(
    b: &[f32],
    ldb: usize,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
    out: &mut [f32],
) {
    for (jr, panel) in out.chunks_exact_mut(NR * kc).take(nc.div_ceil(NR)).enumerate() {
        let col0 = jc + jr * NR;
        let cols = NR.min(jc + nc - col0);
        for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
            let src = &b[(pc + p) * ldb + col0..(pc + p) * ldb + col0 + cols];
            dst[..cols].copy_from_slice(src);
            dst[cols..].fill(0.0);
        }
    }
}

fn round_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}
