//! Stride-1 2-D convolution (im2col + GEMM) and non-overlapping transposed
//! convolution.

use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.out_plane();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_plane();
    dx.fill(0.0);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix for one batch element; pointwise kernels borrow the input.
fn columns<'a>(xb: &'a [f64], g: &ConvGeom, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if g.is_pointwise() {
        xb
    } else {
        buf.resize(g.col_rows() * g.out_plane(), 0.0);
        im2col(xb, g, buf);
        buf
    }
}

/// Forward convolution on raw tensors. `x: (B,C,H,W)`, `w: (O,C,kh,kw)`, `bias: (O)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![o, c, kh, kw],
            got: w.shape().to_vec(),
        });
    }
    if let Some(bias) = bias {
        bias.expect_shape("conv2d bias", &[o])?;
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
        ));
    }
    let g = ConvGeom {
        c,
        h,
        w: wd,
        kh,
        kw,
        pad,
        oh: h + 2 * pad - kh + 1,
        ow: wd + 2 * pad - kw + 1,
    };
    let p = g.out_plane();
    let in_per = c * h * wd;
    let mut out = Tensor::zeros(&[b, o, g.oh, g.ow]);
    let (xd, wdata) = (x.data(), w.data());
    let bd = bias.map(|t| t.data());
    par::for_each_chunk(out.data_mut(), o * p, |bi, chunk| {
        let mut buf = Vec::new();
        let col = columns(&xd[bi * in_per..(bi + 1) * in_per], &g, &mut buf);
        if let Some(bd) = bd {
            for (oc, row) in chunk.chunks_mut(p).enumerate() {
                row.fill(bd[oc]);
            }
        }
        let beta = if bd.is_some() { 1.0 } else { 0.0 };
        gemm(
            1.0,
            MatRef::new(wdata, o, g.col_rows()),
            MatRef::new(col, g.col_rows(), p),
            beta,
            chunk,
        );
    });
    Ok(out)
}

impl<'t> Var<'t> {
    /// Stride-1 convolution with symmetric zero padding.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, pad: usize) -> Result<Var<'t>> {
        let out = conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), pad)?;
        let (b, c, h, wd) = self.value().dims4()?;
        let (o, _, kh, kw) = weight.value().dims4()?;
        let g = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            pad,
            oh: out.shape()[2],
            ow: out.shape()[3],
        };
        let x = self.value_rc();
        let w = weight.value_rc();
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Ok(self.tape().record(out, &parents, move |gout, need| {
            let p = g.out_plane();
            let in_per = c * h * wd;
            let gd = gout.data();
            let xd = x.data();
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[b, c, h, wd]);
                let wdata = w.data();
                par::for_each_chunk(dx.data_mut(), in_per, |bi, chunk| {
                    let gb = &gd[bi * o * p..(bi + 1) * o * p];
                    let a = MatRef::new(wdata, o, g.col_rows()).t();
                    if g.is_pointwise() {
                        gemm(1.0, a, MatRef::new(gb, o, p), 0.0, chunk);
                    } else {
                        let mut dcol = vec![0.0; g.col_rows() * p];
                        gemm(1.0, a, MatRef::new(gb, o, p), 0.0, &mut dcol);
                        col2im(&dcol, &g, chunk);
                    }
                });
                dx
            });
            let dw = need[1].then(|| {
                let len = o * g.col_rows();
                let acc = par::sum_range(b, len, |bi| {
                    let mut buf = Vec::new();
                    let col = columns(&xd[bi * in_per..(bi + 1) * in_per], &g, &mut buf);
                    let gb = &gd[bi * o * p..(bi + 1) * o * p];
                    let mut part = vec![0.0; len];
                    gemm(
                        1.0,
                        MatRef::new(gb, o, p),
                        MatRef::new(col, g.col_rows(), p).t(),
                        0.0,
                        &mut part,
                    );
                    part
                });
                Tensor::new(&[o, c, kh, kw], acc).expect("weight gradient shape")
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| channel_sums(gd, b, o, p)));
            }
            grads
        }))
    }

    /// Transposed convolution whose kernel equals its stride (`k x k`, stride
    /// `k`), so output patches never overlap. `weight: (C_in, C_out, k, k)`.
    pub fn conv_transpose2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let (b, c, h, wd) = self.value().dims4()?;
        let (wc, o, k, k2) = weight.value().dims4()?;
        if wc != c || k != k2 || k == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                expected: vec![c, o, k, k],
                got: weight.shape().to_vec(),
            });
        }
        if let Some(bias) = bias {
            bias.value().expect_shape("conv_transpose2d bias", &[o])?;
        }
        let (oh, ow) = (h * k, wd * k);
        let hw = h * wd;
        let okk = o * k * k;
        let in_per = c * hw;
        let out_per = o * oh * ow;
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        {
            let (xd, wdata) = (self.value().data(), weight.value().data());
            let bd = bias.map(|t| t.value().data());
            par::for_each_chunk(out.data_mut(), out_per, |bi, chunk| {
                let mut y = vec![0.0; okk * hw];
                gemm(
                    1.0,
                    MatRef::new(wdata, c, okk).t(),
                    MatRef::new(&xd[bi * in_per..(bi + 1) * in_per], c, hw),
                    0.0,
                    &mut y,
                );
                for oc in 0..o {
                    let bv = bd.map_or(0.0, |bd| bd[oc]);
                    for dy in 0..k {
                        for dx in 0..k {
                            let row = &y[((oc * k + dy) * k + dx) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..wd {
                                    chunk[(oc * oh + i * k + dy) * ow + j * k + dx] =
                                        row[i * wd + j] + bv;
                                }
                            }
                        }
                    }
                }
            });
        }
        let x = self.value_rc();
        let w = weight.value_rc();
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Ok(self.tape().record(out, &parents, move |gout, need| {
            let gd = gout.data();
            // gather the upstream gradient into (O*k*k, H*W) per batch element
            let gather = |bi: usize| {
                let gb = &gd[bi * out_per..(bi + 1) * out_per];
                let mut gy = vec![0.0; okk * hw];
                for oc in 0..o {
                    for dy in 0..k {
                        for dx in 0..k {
                            let row = &mut gy[((oc * k + dy) * k + dx) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..wd {
                                    row[i * wd + j] = gb[(oc * oh + i * k + dy) * ow + j * k + dx];
                                }
                            }
                        }
                    }
                }
                gy
            };
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[b, c, h, wd]);
                let wdata = w.data();
                par::for_each_chunk(dx.data_mut(), in_per, |bi, chunk| {
                    let gy = gather(bi);
                    gemm(
                        1.0,
                        MatRef::new(wdata, c, okk),
                        MatRef::new(&gy, okk, hw),
                        0.0,
                        chunk,
                    );
                });
                dx
            });
            let dw = need[1].then(|| {
                let xd = x.data();
                let acc = par::sum_range(b, c * okk, |bi| {
                    let gy = gather(bi);
                    let mut part = vec![0.0; c * okk];
                    gemm(
                        1.0,
                        MatRef::new(&xd[bi * in_per..(bi + 1) * in_per], c, hw),
                        MatRef::new(&gy, okk, hw).t(),
                        0.0,
                        &mut part,
                    );
                    part
                });
                Tensor::new(&[c, o, k, k], acc).expect("weight gradient shape")
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need[2].then(|| channel_sums(gd, b, o, oh * ow)));
            }
            grads
        }))
    }
}

/// Sum over batch and space for each channel of a `(B, C, P)` buffer.
fn channel_sums(gd: &[f64], b: usize, c: usize, p: usize) -> Tensor {
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for (ci, acc) in db.iter_mut().enumerate() {
            *acc += gd[(bi * c + ci) * p..][..p].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], db).expect("bias gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64], pad: usize) -> Tensor {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        for bi in 0..b {
            for (oc, &bo) in bias.iter().enumerate().take(o) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bo;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.get(&[bi, ci, iy as usize, ix as usize])
                                            * w.get(&[oc, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[bi, oc, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5) % 13) as f64 * 0.1 - 0.6);
        let bias = [0.5, -1.0, 0.0, 2.0];
        for pad in [0, 1, 2] {
            let got = conv2d_forward(&x, &w, Some(&Tensor::new(&[4], bias.to_vec()).unwrap()), pad)
                .unwrap();
            let want = naive_conv(&x, &w, &bias, pad);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, 1).is_err());
    }

    #[test]
    fn transposed_conv_places_patches() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.conv_transpose2d(&w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }
}
