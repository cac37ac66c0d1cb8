//! Per-channel batch normalization for rank-4 inputs.

use crate::error::{Result, TensorError};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

fn check_affine(op: &'static str, c: usize, t: &Tensor) -> Result<()> {
    if t.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![c],
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Normalizes with the statistics of the current batch.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        let (b, c, h, w) = self.value().dims4()?;
        check_affine("batch_norm gamma", c, gamma.value())?;
        check_affine("batch_norm beta", c, beta.value())?;
        let plane = h * w;
        let count = b * plane;
        let xd = self.value().data();
        let stats: Vec<(f64, f64)> = par::map_range(c, |ci| {
            let mut sum = 0.0;
            for bi in 0..b {
                sum += xd[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                sq += xd[(bi * c + ci) * plane..][..plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            (mean, sq / count as f64)
        });
        let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = Tensor::zeros(self.shape());
        par::for_each_chunk(xhat.data_mut(), c * plane, |bi, dst| {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * plane..][..plane];
                for (d, v) in dst[ci * plane..(ci + 1) * plane].iter_mut().zip(src) {
                    *d = (v - mean[ci]) * inv_std[ci];
                }
            }
        });
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut out = Tensor::zeros(self.shape());
        {
            let xh = xhat.data();
            par::for_each_chunk(out.data_mut(), c * plane, |bi, dst| {
                for ci in 0..c {
                    let src = &xh[(bi * c + ci) * plane..][..plane];
                    for (d, v) in dst[ci * plane..(ci + 1) * plane].iter_mut().zip(src) {
                        *d = gd[ci] * v + bd[ci];
                    }
                }
            });
        }

        let gamma_v = gamma.value_rc();
        let shape = self.shape().to_vec();
        let y = self.tape().record(out, &[self, gamma, beta], move |g, need| {
            let god = g.data();
            let xh = xhat.data();
            // per-channel sums of g and g * xhat
            let sums: Vec<(f64, f64)> = par::map_range(c, |ci| {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    for (gv, xv) in god[off..off + plane].iter().zip(&xh[off..off + plane]) {
                        sg += gv;
                        sgx += gv * xv;
                    }
                }
                (sg, sgx)
            });
            let dx = need[0].then(|| {
                let gam = gamma_v.data();
                let n = count as f64;
                let mut dx = Tensor::zeros(&shape);
                par::for_each_chunk(dx.data_mut(), c * plane, |bi, dst| {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        let (sg, sgx) = sums[ci];
                        let k = gam[ci] * inv_std[ci];
                        for (j, d) in dst[ci * plane..(ci + 1) * plane].iter_mut().enumerate() {
                            *d = k * (god[off + j] - sg / n - xh[off + j] * sgx / n);
                        }
                    }
                });
                dx
            });
            let dgamma = need[1]
                .then(|| Tensor::new(&[c], sums.iter().map(|s| s.1).collect()).unwrap());
            let dbeta = need[2]
                .then(|| Tensor::new(&[c], sums.iter().map(|s| s.0).collect()).unwrap());
            vec![dx, dgamma, dbeta]
        });
        Ok((y, BatchStats { mean, var, count }))
    }

    /// Normalizes with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var<'t>> {
        let (_, c, h, w) = self.value().dims4()?;
        check_affine("batch_norm gamma", c, gamma.value())?;
        check_affine("batch_norm beta", c, beta.value())?;
        check_affine("batch_norm running_mean", c, running_mean)?;
        check_affine("batch_norm running_var", c, running_var)?;
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.data().to_vec();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let xd = self.value().data();
        let mut out = Tensor::zeros(self.shape());
        par::for_each_chunk(out.data_mut(), c * plane, |bi, dst| {
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * plane..][..plane];
                for (d, v) in dst[ci * plane..(ci + 1) * plane].iter_mut().zip(src) {
                    *d = gd[ci] * (v - rm[ci]) * inv_std[ci] + bd[ci];
                }
            }
        });
        let x = self.value_rc();
        let gamma_v = gamma.value_rc();
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self, gamma, beta], move |g, need| {
            let god = g.data();
            let xd = x.data();
            let gam = gamma_v.data();
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&shape);
                par::for_each_chunk(dx.data_mut(), c * plane, |bi, dst| {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for (j, d) in dst[ci * plane..(ci + 1) * plane].iter_mut().enumerate() {
                            *d = god[off + j] * gam[ci] * inv_std[ci];
                        }
                    }
                });
                dx
            });
            let b = shape[0];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for j in 0..plane {
                        dbeta[ci] += god[off + j];
                        dgamma[ci] += god[off + j] * (xd[off + j] - rm[ci]) * inv_std[ci];
                    }
                }
            }
            vec![
                dx,
                need[1].then(|| Tensor::new(&[c], dgamma).unwrap()),
                need[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn train_mode_output_is_standardized() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2, 2, 2], |i| (i * i % 7) as f64));
        let g = tape.leaf(Tensor::ones(&[2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let (y, stats) = x.batch_norm_train(&g, &b, 0.0).unwrap();
        assert_eq!(stats.count, 12);
        for ci in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|bi| (0..4).map(move |j| (bi, j)))
                .map(|(bi, j)| y.value().data()[(bi * 2 + ci) * 4 + j])
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 12.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
