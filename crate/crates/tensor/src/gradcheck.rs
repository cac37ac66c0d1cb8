//! Central finite-difference gradient checking.

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation applied on each side of the evaluation point.
    pub eps: f64,
    /// Denominator floor so that two near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares the tape gradient of a scalar function against central differences
/// of its forward pass. `f` must build the scalar from the given leaves.
pub fn check_gradients<F>(settings: GradCheck, inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        let grads = tape.backward(&out)?;
        leaves
            .iter()
            .map(|l| {
                grads
                    .wrt(l)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(l.shape()))
            })
            .collect()
    };

    let eval = |point: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let leaves: Vec<Var<'_>> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        if out.value().numel() != 1 {
            return Err(invalid("check_gradients", "function must return a scalar"));
        }
        Ok(out.value().data()[0])
    };

    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            point[i].data_mut()[j] = x0 + settings.eps;
            let up = eval(&point)?;
            point[i].data_mut()[j] = x0 - settings.eps;
            let down = eval(&point)?;
            point[i].data_mut()[j] = x0;
            let n = (up - down) / (2.0 * settings.eps);
            num.data_mut()[j] = n;
            let a = analytic[i].data()[j];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(settings.floor);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
