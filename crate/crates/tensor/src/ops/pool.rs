//! Window pooling, channel-wise pooling and global pooling.

use crate::error::{invalid, Result};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `k x k` max pooling with stride `k`; trailing rows/columns that do not
    /// fill a window are dropped.
    pub fn max_pool2d(&self, k: usize) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let (oh, ow) = (h / k.max(1), w / k.max(1));
        if k == 0 || oh == 0 || ow == 0 {
            return Err(invalid("max_pool2d", format!("window {k} too large for {h}x{w}")));
        }
        let planes = b * c;
        let xd = self.value().data();
        // argmax stored per output element as a flat index into the input plane
        let picks: Vec<Vec<usize>> = par::map_range(planes, |pl| {
            let src = &xd[pl * h * w..(pl + 1) * h * w];
            let mut idx = Vec::with_capacity(oh * ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * k) * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
            idx
        });
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for (pl, idx) in picks.iter().enumerate() {
            let src = &xd[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out.data_mut()[pl * oh * ow..(pl + 1) * oh * ow];
            for (d, &i) in dst.iter_mut().zip(idx) {
                *d = src[i];
            }
        }
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), h * w, |pl, plane| {
                for (j, &i) in picks[pl].iter().enumerate() {
                    plane[i] += gd[pl * oh * ow + j];
                }
            });
            vec![Some(dx)]
        }))
    }

    /// `k x k` average pooling with stride `k`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let (oh, ow) = (h / k.max(1), w / k.max(1));
        if k == 0 || oh == 0 || ow == 0 {
            return Err(invalid("avg_pool2d", format!("window {k} too large for {h}x{w}")));
        }
        let norm = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        {
            let xd = self.value().data();
            par::for_each_chunk(out.data_mut(), oh * ow, |pl, dst| {
                let src = &xd[pl * h * w..(pl + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += src[(oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        dst[oy * ow + ox] = acc * norm;
                    }
                }
            });
        }
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), h * w, |pl, plane| {
                let gp = &gd[pl * oh * ow..(pl + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = gp[oy * ow + ox] * norm;
                        for dy in 0..k {
                            for dx in 0..k {
                                plane[(oy * k + dy) * w + ox * k + dx] = v;
                            }
                        }
                    }
                }
            });
            vec![Some(dx)]
        }))
    }

    /// Mean over the channel axis: `(B,C,H,W) -> (B,1,H,W)`.
    pub fn channel_mean(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, 1, h, w]);
        {
            let xd = self.value().data();
            par::for_each_chunk(out.data_mut(), plane, |bi, dst| {
                let src = &xd[bi * c * plane..(bi + 1) * c * plane];
                for ci in 0..c {
                    for (d, v) in dst.iter_mut().zip(&src[ci * plane..(ci + 1) * plane]) {
                        *d += v;
                    }
                }
                let inv = 1.0 / c as f64;
                dst.iter_mut().for_each(|d| *d *= inv);
            });
        }
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            let inv = 1.0 / c as f64;
            par::for_each_chunk(dx.data_mut(), plane, |row, dst| {
                let bi = row / c;
                for (d, v) in dst.iter_mut().zip(&gd[bi * plane..(bi + 1) * plane]) {
                    *d = v * inv;
                }
            });
            vec![Some(dx)]
        }))
    }

    /// Max over the channel axis: `(B,C,H,W) -> (B,1,H,W)`. Ties go to the
    /// lowest channel.
    pub fn channel_max(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let plane = h * w;
        let xd = self.value().data();
        let picks: Vec<Vec<usize>> = par::map_range(b, |bi| {
            let src = &xd[bi * c * plane..(bi + 1) * c * plane];
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ci in 1..c {
                        if src[ci * plane + p] > src[best * plane + p] {
                            best = ci;
                        }
                    }
                    best
                })
                .collect()
        });
        let mut out = Tensor::zeros(&[b, 1, h, w]);
        for (bi, pick) in picks.iter().enumerate() {
            for (p, &ci) in pick.iter().enumerate() {
                out.data_mut()[bi * plane + p] = xd[(bi * c + ci) * plane + p];
            }
        }
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), c * plane, |bi, dst| {
                for (p, &ci) in picks[bi].iter().enumerate() {
                    dst[ci * plane + p] = gd[bi * plane + p];
                }
            });
            vec![Some(dx)]
        }))
    }

    /// Spatial mean per channel: `(B,C,H,W) -> (B,C,1,1)`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let xd = self.value().data();
        let data: Vec<f64> = xd
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), plane, |pl, dst| dst.fill(gd[pl] * inv));
            vec![Some(dx)]
        }))
    }

    /// Spatial max per channel: `(B,C,H,W) -> (B,C,1,1)`.
    pub fn global_max_pool(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4()?;
        let plane = h * w;
        let xd = self.value().data();
        let picks: Vec<usize> = xd
            .chunks(plane)
            .map(|p| {
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let data: Vec<f64> = picks
            .iter()
            .enumerate()
            .map(|(pl, &i)| xd[pl * plane + i])
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        let shape = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            par::for_each_chunk(dx.data_mut(), plane, |pl, dst| dst[picks[pl]] = gd[pl]);
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 8., 7.]).unwrap());
        let y = x.max_pool2d(2).unwrap();
        assert_eq!(y.value().data(), &[5.0, 8.0]);
        let grads = tape.backward(&y.sum()).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn channel_pools() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 1, 2], vec![1., 4., 3., 2.]).unwrap());
        assert_eq!(x.channel_mean().unwrap().value().data(), &[2.0, 3.0]);
        assert_eq!(x.channel_max().unwrap().value().data(), &[3.0, 4.0]);
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5, 2.5]);
        assert_eq!(x.global_max_pool().unwrap().value().data(), &[4.0, 3.0]);
    }

    #[test]
    fn avg_pool_averages_windows() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        assert_eq!(x.avg_pool2d(2).unwrap().value().data(), &[1.5]);
        assert!(x.avg_pool2d(3).is_err());
    }
}
