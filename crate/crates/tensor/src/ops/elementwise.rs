use crate::error::{invalid, Result, TensorError};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How a gate tensor broadcasts against a rank-4 input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// `(B, 1, H, W)`: one spatial map shared by all channels.
    Spatial,
    /// `(B, C, 1, 1)`: one scalar per channel.
    Channel,
    /// `(B, 1, 1, 1)`: one scalar per batch element.
    Batch,
    Full,
}

fn classify(x: &[usize], g: &[usize]) -> Result<Broadcast> {
    let bad = || TensorError::ShapeMismatch {
        op: "mul_broadcast",
        expected: x.to_vec(),
        got: g.to_vec(),
    };
    if x.len() != 4 || g.len() != 4 || g[0] != x[0] {
        return Err(bad());
    }
    let c = match g[1] {
        1 => false,
        n if n == x[1] => true,
        _ => return Err(bad()),
    };
    let s = match (g[2], g[3]) {
        (1, 1) => false,
        (h, w) if h == x[2] && w == x[3] => true,
        _ => return Err(bad()),
    };
    Ok(match (c, s) {
        (false, true) => Broadcast::Spatial,
        (true, false) => Broadcast::Channel,
        (false, false) => Broadcast::Batch,
        (true, true) => Broadcast::Full,
    })
}

fn gate_index(kind: Broadcast, c: usize, p: usize, plane: usize) -> usize {
    match kind {
        Broadcast::Spatial => p,
        Broadcast::Channel => c,
        Broadcast::Batch => 0,
        Broadcast::Full => c * plane + p,
    }
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(self
            .tape()
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(self.tape().record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.tape().record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, alpha: f64) -> Var<'t> {
        let out = self.value().map(|v| v * alpha);
        self.tape()
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * alpha))])
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        let x = self.value_rc();
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (1.0 - yv)).unwrap())]
        })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.tape()
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Multiplies a rank-4 tensor by a gate that broadcasts over channels
    /// `(B,1,H,W)`, over space `(B,C,1,1)`, over both `(B,1,1,1)`, or not at all.
    pub fn mul_broadcast(&self, gate: &Var<'t>) -> Result<Var<'t>> {
        let kind = classify(self.shape(), gate.shape())?;
        let (b, c, h, w) = self.value().dims4()?;
        if b * c * h * w == 0 {
            return Err(invalid("mul_broadcast", "empty tensor"));
        }
        let plane = h * w;
        let per = c * plane;
        let gper = gate.value().numel() / b;
        let x = self.value_rc();
        let gt = gate.value_rc();

        let mut out = Tensor::zeros(self.shape());
        {
            let (xd, gd) = (x.data(), gt.data());
            par::for_each_chunk(out.data_mut(), per, |bi, chunk| {
                let xs = &xd[bi * per..(bi + 1) * per];
                let gs = &gd[bi * gper..(bi + 1) * gper];
                for ci in 0..c {
                    for p in 0..plane {
                        let i = ci * plane + p;
                        chunk[i] = xs[i] * gs[gate_index(kind, ci, p, plane)];
                    }
                }
            });
        }

        let gate_shape = gate.shape().to_vec();
        Ok(self.tape().record(out, &[self, gate], move |g, need| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(g.shape());
                let gtd = gt.data();
                par::for_each_chunk(dx.data_mut(), per, |bi, chunk| {
                    let gs = &gd[bi * per..(bi + 1) * per];
                    let gate_b = &gtd[bi * gper..(bi + 1) * gper];
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = ci * plane + p;
                            chunk[i] = gs[i] * gate_b[gate_index(kind, ci, p, plane)];
                        }
                    }
                });
                dx
            });
            let dgate = need[1].then(|| {
                let mut dg = Tensor::zeros(&gate_shape);
                let xd = x.data();
                par::for_each_chunk(dg.data_mut(), gper, |bi, chunk| {
                    let gs = &gd[bi * per..(bi + 1) * per];
                    let xs = &xd[bi * per..(bi + 1) * per];
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = ci * plane + p;
                            chunk[gate_index(kind, ci, p, plane)] += gs[i] * xs[i];
                        }
                    }
                });
                dg
            });
            vec![dx, dgate]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
        for x in [-3.0, -0.5, 0.25, 7.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_rejects_mismatched_gate() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let g = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(x.mul_broadcast(&g).is_err());
        let g = tape.leaf(Tensor::zeros(&[1, 1, 4, 1]));
        assert!(x.mul_broadcast(&g).is_err());
    }

    #[test]
    fn broadcast_gradient_sums_over_shared_axes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let g = tape.leaf(Tensor::ones(&[2, 1, 2, 2]));
        let y = x.mul_broadcast(&g).unwrap().sum();
        let grads = tape.backward(&y).unwrap();
        let dg = grads.wrt(&g).unwrap();
        // d/dg[b,0,p] = sum_c x[b,c,p]
        assert_eq!(dg.get(&[0, 0, 0, 0]), 0.0 + 4.0 + 8.0);
        assert_eq!(dg.get(&[1, 0, 1, 1]), 15.0 + 19.0 + 23.0);
        assert_eq!(grads.wrt(&x).unwrap(), &Tensor::ones(&[2, 3, 2, 2]));
    }
}
