//! Central-difference verification of analytic gradients.
//!
//! The graph builder is evaluated once with gradients, then twice per probed
//! element with the element nudged by `±step`:
//!
//! ```text
//! numeric = (f(x + h) - f(x - h)) / 2h
//! rel     = |analytic - numeric| / max(|analytic|, |numeric|, floor)
//! ```

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Elements to probe; every element is probed when the model is smaller.
    pub probes: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 20,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &ParamSet<f64>) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(DiffError::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares analytic and central-difference gradients of the scalar built
/// by `f` with respect to `params`.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(DiffError::Invalid {
            op: "grad_check",
            detail: format!("step must be positive, got {}", cfg.step),
        });
    }
    let (mut g, vars, out) = evaluate(&f, params)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect();

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = index::sample(&mut rng, total, cfg.probes).into_vec();
        v.sort_unstable();
        v
    };

    let mut work = params.clone();
    let mut probes = Vec::with_capacity(picks.len());
    for flat in picks {
        let (mut p, mut idx) = (0, flat);
        while idx >= sizes[p] {
            idx -= sizes[p];
            p += 1;
        }
        let orig = params.tensors()[p].data()[idx];
        work.tensors_mut()[p].data_mut()[idx] = orig + cfg.step;
        let plus = evaluate(&f, &work)?;
        let f_plus = plus.0.value(plus.2).item()?;
        work.tensors_mut()[p].data_mut()[idx] = orig - cfg.step;
        let minus = evaluate(&f, &work)?;
        let f_minus = minus.0.value(minus.2).item()?;
        work.tensors_mut()[p].data_mut()[idx] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
        let a = analytic[p][idx];
        probes.push(Probe {
            param: params.names()[p].clone(),
            index: idx,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error })
}
