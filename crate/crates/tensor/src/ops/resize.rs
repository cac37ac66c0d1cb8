//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use crate::error::{invalid, Result};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source taps for one output coordinate: `(lo, hi, weight_lo, weight_hi)`.
type Tap = (usize, usize, f64, f64);

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Resamples a single `h x w` plane into `oh x ow`.
pub fn bilinear_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = vec![0.0; oh * ow];
    resample(src, w, &ty, &tx, &mut out);
    out
}

fn resample(src: &[f64], w: usize, ty: &[Tap], tx: &[Tap], dst: &mut [f64]) {
    let ow = tx.len();
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            dst[oy * ow + ox] =
                wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
        }
    }
}

impl<'t> Var<'t> {
    /// Bilinear resize of every `(b, c)` plane to `out_h x out_w`.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(invalid("resize_bilinear", "empty spatial extent"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let (ty, tx) = (taps(h, out_h), taps(w, out_w));
        let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
        {
            let xd = self.value().data();
            par::for_each_chunk(out.data_mut(), out_h * out_w, |pl, dst| {
                resample(&xd[pl * h * w..(pl + 1) * h * w], w, &ty, &tx, dst);
            });
        }
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), h * w, |pl, plane| {
                let gp = &gd[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = gp[oy * out_w + ox];
                        plane[y0 * w + x0] += v * wy0 * wx0;
                        plane[y0 * w + x1] += v * wy0 * wx1;
                        plane[y1 * w + x0] += v * wy1 * wx0;
                        plane[y1 * w + x1] += v * wy1 * wx1;
                    }
                }
            });
            vec![Some(dx)]
        }))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<'t>> {
        let (_, _, h, w) = self.value().dims4()?;
        self.resize_bilinear(h * factor, w * factor)
    }
}
