use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, Tensor, Var};

/// Compares reverse-mode gradients of a scalar computation with central
/// finite differences.
///
/// `f` rebuilds the computation from scratch on each call, taking one leaf
/// per entry of `inputs`; it must be deterministic. When `coords` is set,
/// at most that many coordinates per input are sampled (seeded by `seed`),
/// otherwise every coordinate is checked. Returns the maximum of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, coords: Option<usize>, seed: u64) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.len());
        let picks: Vec<usize> = match coords {
            Some(n) if n < input.len() => sample(&mut rng, input.len(), n).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(NnError::NonFiniteGradient { input: k, index: i });
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
