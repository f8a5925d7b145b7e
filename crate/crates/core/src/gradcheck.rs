//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a graph from leaves; may return a tensor of any shape.
pub type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Analytic and numeric gradients of `sum(graph(inputs) ⊙ weights)`.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradComparison {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs jointly; 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (a, n) in a.iter().zip(n) {
                diff += (a - n) * (a - n);
                na += a * a;
                nn += n * n;
            }
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-10 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        }
    }
}

fn weighted_loss(tape: &mut Tape, out: Var, weights: &Option<Vec<f64>>) -> Result<Var> {
    match weights {
        None => tape.sum(out),
        Some(w) => {
            let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.clone())?);
            let p = tape.mul(out, w)?;
            tape.sum(p)
        }
    }
}

fn evaluate(graph: &Graph, inputs: &[Tensor], weights: &Option<Vec<f64>>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

/// Compares backward() with central differences of step `h`. `weights`
/// projects a non-scalar output onto a scalar; `None` sums it.
pub fn compare(
    graph: &Graph,
    inputs: &[Tensor],
    weights: Option<Vec<f64>>,
    h: f64,
) -> Result<GradComparison> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = graph(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = evaluate(graph, &probe, &weights)?;
            probe[i].data_mut()[j] = orig - h;
            let down = evaluate(graph, &probe, &weights)?;
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradComparison { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let good = compare(&|t: &mut Tape, v: &[Var]| t.square(v[0]), &[x.clone()], None, DEFAULT_STEP)
            .unwrap();
        assert!(good.relative_error() < 1e-8);

        let mut bad = good.clone();
        bad.analytic[0].iter_mut().for_each(|g| *g = -*g);
        assert!(bad.relative_error() > 1.0);
    }
}
