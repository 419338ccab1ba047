//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`. At most `max_checks` coordinates,
/// sampled uniformly across all parameters with `seed`, are perturbed.
pub fn check_graph_gradients<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    h: f64,
    max_checks: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[(String, Tensor<f64>)]) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;

    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let picks: Vec<usize> = if max_checks >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, total, max_checks).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |p: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };

    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(picks.len());
    for flat in picks {
        let (pi, idx) = locate(params, flat);
        let name = params[pi].0.clone();
        let analytic = if grads.contains(&name) {
            grads.get(&name)?.data()[idx]
        } else {
            0.0
        };
        let orig = work[pi].1.data()[idx];
        work[pi].1.data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work[pi].1.data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work[pi].1.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        entries.push(GradCheckEntry {
            param: name,
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checked: entries.len(),
        max_rel_error,
        entries,
    })
}

fn locate(params: &[(String, Tensor<f64>)], mut flat: usize) -> (usize, usize) {
    for (i, (_, t)) in params.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("flat index beyond parameter count")
}
