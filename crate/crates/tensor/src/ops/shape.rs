use crate::error::{invalid, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Reinterprets the row-major data under a new shape with the same size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let original = self.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.reshape(&original).unwrap())]
        }))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let (b, _, h, w) = first.value().dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = p.value().dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    expected: first.shape().to_vec(),
                    got: p.shape().to_vec(),
                });
            }
            channels.push(pc);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&p.value().data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[b, total, h, w], data)?;
        let tape = first.tape();
        Ok(tape.record(out, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            channels
                .iter()
                .zip(need)
                .map(|(&c, &needed)| {
                    let start = offset;
                    offset += c;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            d.extend_from_slice(&gd[(bi * total + start) * plane..][..c * plane]);
                        }
                        Tensor::new(&[b, c, h, w], d).unwrap()
                    })
                })
                .collect()
        }))
    }
}
