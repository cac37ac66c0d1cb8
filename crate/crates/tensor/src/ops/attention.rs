//! Fused token attention that never materializes the full token-by-token map.
//!
//! For `f, g` of shape (B, C, T) and scale `s`:
//! `P = softmax_rows(s * f^T g)` (T x T) and `out = g P^T` (C x T).
//! The map is computed one block of query rows at a time. It is kept for the
//! backward pass when it fits in [`CACHE_LIMIT`] values and recomputed
//! otherwise.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Query rows per block.
const BLOCK: usize = 64;
/// Largest map (B * T * T values) kept between forward and backward.
pub const CACHE_LIMIT: usize = 1 << 25;

/// `exp(x)` for `x <= 0`, accurate to a few ulp; branch-free so that the
/// softmax loop vectorizes.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let kf = x * std::f64::consts::LOG2_E + SHIFT;
    let k = kf - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 12 on |r| <= ln2 / 2
    const C: [f64; 12] = [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let mut p = 1.0 / 479_001_600.0;
    for c in C {
        p = p * r + c;
    }
    // low mantissa bits of kf hold k; rebuild 2^k from them
    p * f64::from_bits(kf.to_bits().wrapping_add(1023) << 52)
}

fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        for v in row.iter_mut() {
            *v = exp_nonpos(*v - max);
        }
        let total: f64 = row.iter().sum();
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Rows `r0..r0+rows` of `f^T` (T x C view of the C x T matrix `f`).
fn ft_rows(f: &[f64], t: usize, c: usize, r0: usize, rows: usize) -> MatRef<'_> {
    MatRef {
        data: &f[r0..],
        rows,
        cols: c,
        row_stride: 1,
        col_stride: t,
    }
}

/// Columns `r0..r0+rows` of the C x T matrix `f`.
fn f_cols(f: &[f64], t: usize, c: usize, r0: usize, rows: usize) -> MatRef<'_> {
    MatRef {
        data: &f[r0..],
        rows: c,
        cols: rows,
        row_stride: t,
        col_stride: 1,
    }
}

/// Probabilities for query rows `r0..r0+rows`, as a `rows x T` buffer.
fn block_probs(f: &[f64], g: &[f64], c: usize, t: usize, r0: usize, rows: usize, scale: f64) -> Vec<f64> {
    let mut p = vec![0.0; rows * t];
    gemm(scale, ft_rows(f, t, c, r0, rows), MatRef::new(g, c, t), 0.0, &mut p);
    softmax_rows(&mut p, t);
    p
}

impl<'t> Var<'t> {
    /// `g * softmax_rows(scale * self^T g)^T` for `self` (queries) and `g`
    /// (keys and values) of shape (B, C, T).
    pub fn token_attention(&self, g: &Var<'t>, scale: f64) -> Result<Var<'t>> {
        self.token_attention_cached(g, scale, CACHE_LIMIT)
    }

    fn token_attention_cached(&self, g: &Var<'t>, scale: f64, cache_limit: usize) -> Result<Var<'t>> {
        let (b, c, t) = self.value().dims3()?;
        if g.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "token_attention",
                expected: self.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let plane = c * t;
        let blocks = t.div_ceil(BLOCK);
        let (fv, gv) = (self.value_rc(), g.value_rc());
        let keep = (self.requires_grad() || g.requires_grad()) && b * t * t <= cache_limit;
        // computed in (T x C) layout so that row blocks are contiguous
        let mut out_t = vec![0.0; b * plane];
        let mut cache: Vec<Vec<f64>> = Vec::new();
        for bi in 0..b {
            let f = &fv.data()[bi * plane..(bi + 1) * plane];
            let gg = &gv.data()[bi * plane..(bi + 1) * plane];
            let parts = par::map_range(blocks, |blk| {
                let r0 = blk * BLOCK;
                let rows = BLOCK.min(t - r0);
                let p = block_probs(f, gg, c, t, r0, rows, scale);
                let mut o = vec![0.0; rows * c];
                gemm(1.0, MatRef::new(&p, rows, t), MatRef::new(gg, c, t).t(), 0.0, &mut o);
                (p, o)
            });
            for (blk, (p, o)) in parts.into_iter().enumerate() {
                out_t[bi * plane + blk * BLOCK * c..][..o.len()].copy_from_slice(&o);
                if keep {
                    cache.push(p);
                }
            }
        }
        let out = Tensor::new(&[b, c, t], transpose_planes(&out_t, b, t, c))?;

        Ok(self.tape().record(out, &[self, g], move |grad, need| {
            let mut df_t = vec![0.0; b * plane];
            let mut dg = vec![0.0; b * plane];
            for bi in 0..b {
                let f = &fv.data()[bi * plane..(bi + 1) * plane];
                let gg = &gv.data()[bi * plane..(bi + 1) * plane];
                let dy = &grad.data()[bi * plane..(bi + 1) * plane];
                // per block: dF^T rows (rows x C) followed by a dG partial (C x T)
                let parts = par::map_range(blocks, |blk| {
                    let r0 = blk * BLOCK;
                    let rows = BLOCK.min(t - r0);
                    let fresh;
                    let p: &[f64] = match cache.get(bi * blocks + blk) {
                        Some(p) => p,
                        None => {
                            fresh = block_probs(f, gg, c, t, r0, rows, scale);
                            &fresh
                        }
                    };
                    let mut dp = vec![0.0; rows * t];
                    gemm(1.0, ft_rows(dy, t, c, r0, rows), MatRef::new(gg, c, t), 0.0, &mut dp);
                    // dL = P * (dP - rowsum(dP * P))
                    for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - dot);
                        }
                    }
                    let dl = dp;
                    let mut dft = vec![0.0; rows * c];
                    gemm(scale, MatRef::new(&dl, rows, t), MatRef::new(gg, c, t).t(), 0.0, &mut dft);
                    let mut dgp = vec![0.0; plane];
                    gemm(1.0, f_cols(dy, t, c, r0, rows), MatRef::new(p, rows, t), 0.0, &mut dgp);
                    gemm(scale, f_cols(f, t, c, r0, rows), MatRef::new(&dl, rows, t), 1.0, &mut dgp);
                    (dft, dgp)
                });
                let dgb = &mut dg[bi * plane..(bi + 1) * plane];
                for (blk, (dft, dgp)) in parts.into_iter().enumerate() {
                    let r0 = blk * BLOCK;
                    df_t[bi * plane + r0 * c..][..dft.len()].copy_from_slice(&dft);
                    for (a, v) in dgb.iter_mut().zip(&dgp) {
                        *a += v;
                    }
                }
            }
            let df = need[0]
                .then(|| Tensor::new(&[b, c, t], transpose_planes(&df_t, b, t, c)).unwrap());
            let dg = need[1].then(|| Tensor::new(&[b, c, t], dg).unwrap());
            vec![df, dg]
        }))
    }
}

/// Transposes each of `b` row-major `rows x cols` planes.
fn transpose_planes(src: &[f64], b: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let plane = rows * cols;
    for bi in 0..b {
        let s = &src[bi * plane..(bi + 1) * plane];
        let d = &mut out[bi * plane..(bi + 1) * plane];
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
    out
}
