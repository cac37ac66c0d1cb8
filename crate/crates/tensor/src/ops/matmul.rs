//! Batched matrix products and row softmax on rank-3 tensors.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Output rows handled by one parallel task.
const ROW_BLOCK: usize = 64;

fn view(data: &[f64], rows: usize, cols: usize, transposed: bool) -> MatRef<'_> {
    if transposed {
        MatRef::new(data, rows, cols).t()
    } else {
        MatRef::new(data, rows, cols)
    }
}

/// `out[b] = op(a[b]) * op(b[b])`, splitting each product into row blocks.
fn bmm(
    a: &[f64],
    a_dims: (usize, usize),
    ta: bool,
    b: &[f64],
    b_dims: (usize, usize),
    tb: bool,
    batch: usize,
) -> Vec<f64> {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let n = if tb { b_dims.0 } else { b_dims.1 };
    let (a_per, b_per) = (a_dims.0 * a_dims.1, b_dims.0 * b_dims.1);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let am = view(&a[bi * a_per..(bi + 1) * a_per], a_dims.0, a_dims.1, ta);
        let bm = view(&b[bi * b_per..(bi + 1) * b_per], b_dims.0, b_dims.1, tb);
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        par::for_each_chunk(dst, ROW_BLOCK * n, |blk, chunk| {
            let r0 = blk * ROW_BLOCK;
            let rows = chunk.len() / n;
            let sub = MatRef {
                data: &am.data[r0 * am.row_stride..],
                rows,
                cols: k,
                row_stride: am.row_stride,
                col_stride: am.col_stride,
            };
            gemm(1.0, sub, bm, 0.0, chunk);
        });
    }
    out
}

impl<'t> Var<'t> {
    /// Batched product `op(self) * op(other)` over rank-3 tensors, where `op`
    /// optionally transposes the trailing two axes.
    pub fn matmul(&self, other: &Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
        let (ba, ar, ac) = self.value().dims3()?;
        let (bb, br, bc) = other.value().dims3()?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ba != bb || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        let data = bmm(
            self.value().data(),
            (ar, ac),
            trans_a,
            other.value().data(),
            (br, bc),
            trans_b,
            ba,
        );
        let out = Tensor::new(&[ba, m, n], data)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.tape().record(out, &[self, other], move |g, need| {
            let gd = g.data();
            // Y = A'B'  =>  dA' = dY B'^T,  dB' = A'^T dY
            let da = need[0].then(|| {
                let d = if trans_a {
                    // dA = B' dY^T : (k x n)(n x m)
                    bmm(b.data(), (br, bc), trans_b, gd, (m, n), true, ba)
                } else {
                    // dA = dY B'^T : (m x n)(n x k)
                    bmm(gd, (m, n), false, b.data(), (br, bc), !trans_b, ba)
                };
                Tensor::new(&[ba, ar, ac], d).unwrap()
            });
            let db = need[1].then(|| {
                let d = if trans_b {
                    // dB = dY^T A' : (n x m)(m x k)
                    bmm(gd, (m, n), true, a.data(), (ar, ac), trans_a, ba)
                } else {
                    // dB = A'^T dY : (k x m)(m x n)
                    bmm(a.data(), (ar, ac), !trans_a, gd, (m, n), false, ba)
                };
                Tensor::new(&[bb, br, bc], d).unwrap()
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'t>> {
        let cols = *self.shape().last().ok_or(TensorError::Rank {
            op: "softmax_last",
            expected: 1,
            got: vec![],
        })?;
        let mut out = self.value().clone();
        par::for_each_chunk(out.data_mut(), ROW_BLOCK * cols.max(1), |_, chunk| {
            for row in chunk.chunks_mut(cols) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let inv = 1.0 / total;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        });
        let y = out.clone();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = g.clone();
            let yd = y.data();
            par::for_each_chunk(dx.data_mut(), ROW_BLOCK * cols, |blk, chunk| {
                let off = blk * ROW_BLOCK * cols;
                for (r, row) in chunk.chunks_mut(cols).enumerate() {
                    let yr = &yd[off + r * cols..][..cols];
                    let dot: f64 = row.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (v, yv) in row.iter_mut().zip(yr) {
                        *v = yv * (*v - dot);
                    }
                }
            });
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn naive(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (bs, ar, ac) = a.dims3().unwrap();
        let (_, br, bc) = b.dims3().unwrap();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let mut out = Tensor::zeros(&[bs, m, n]);
        for bi in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let av = if ta { a.get(&[bi, kk, i]) } else { a.get(&[bi, i, kk]) };
                        let bv = if tb { b.get(&[bi, j, kk]) } else { b.get(&[bi, kk, j]) };
                        acc += av * bv;
                    }
                    out.set(&[bi, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn all_transpose_combinations_match_loops() {
        let tape = Tape::inference();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 5, 70] } else { [2, 70, 5] };
            let b_shape = if tb { [2, 3, 5] } else { [2, 5, 3] };
            let a = Tensor::from_fn(&a_shape, |i| ((i * 37) % 17) as f64 - 8.0);
            let b = Tensor::from_fn(&b_shape, |i| ((i * 11) % 5) as f64 - 2.0);
            let y = tape
                .constant(a.clone())
                .matmul(&tape.constant(b.clone()), ta, tb)
                .unwrap();
            assert_eq!(y.value(), &naive(&a, &b, ta, tb), "ta={ta} tb={tb}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin() * 30.0));
        let y = x.softmax_last().unwrap();
        for row in y.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
