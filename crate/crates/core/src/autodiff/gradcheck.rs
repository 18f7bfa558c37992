//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled without replacement).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, ‖auto − numeric‖ / (‖auto‖ + ‖numeric‖))` per checked tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn relative_error(auto: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = auto.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(auto) + norm(numeric);
    if denom < 1e-300 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Compares tape gradients of `net` against central differences for every
/// trainable tensor in `store`.
pub fn grad_check<F>(store: &ParamStore, net: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = net(&mut tape, store)?;
    let analytic = tape.backward(loss)?.param_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = net(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut per_tensor = Vec::new();
    let names: Vec<String> = store.iter().filter(|(_, t)| t.requires_grad).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let numel = store.require(&name)?.numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let zeros = vec![0.0; numel];
        let auto_full = analytic.get(&name).unwrap_or(&zeros);
        let mut auto = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = store.require(&name)?.data()[i];
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.eps));
            auto.push(auto_full[i]);
        }
        per_tensor.push((name, relative_error(&auto, &numeric)));
    }
    Ok(GradCheckReport { per_tensor })
}
