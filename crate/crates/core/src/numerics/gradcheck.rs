//! Reverse-mode vs central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// One-sided slopes differing by more than this fraction mark a kink.
/// Smooth functions differ by about `f'' * step`.
pub const KINK_RATIO: f64 = 0.05;

/// A check with more kinked entries than this fraction fails outright.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Gradients below this magnitude are compared in absolute terms.
    pub floor: f64,
    /// Leave out entries sitting on a kink (relu, hinge), where the
    /// derivative is one-sided and central differences average the two.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
            seed: 0,
            floor: REL_ERR_FLOOR,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    /// Entries left out because the two one-sided slopes disagree.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    rel_error_with_floor(a, b, REL_ERR_FLOOR)
}

pub fn rel_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of the scalar function `f` with
/// central differences for every (or a sampled subset of every) parameter entry.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) || !(opts.floor > 0.0) {
        return Err(Error::Config(format!("grad_check step and floor must be > 0, got {} / {}", opts.step, opts.floor)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let base = g.value(root).item();
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point differ: {base} vs {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (ti, p) in params.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < p.len() => {
                let mut idx = sample(&mut rng, p.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..p.len()).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut skipped = 0;
        for &e in &entries {
            let orig = p.data()[e];
            work[ti].data_mut()[e] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[ti].data_mut()[e] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[e];
            if opts.skip_kinks {
                let (fwd, bwd) = ((plus - base) / opts.step, (base - minus) / opts.step);
                if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(opts.floor) {
                    skipped += 1;
                    continue;
                }
            }
            max_rel = max_rel.max(rel_error_with_floor(a, numeric, opts.floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        tensors.push(TensorCheck {
            index: ti,
            checked: entries.len() - skipped,
            skipped,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let skipped: usize = tensors.iter().map(|t| t.skipped).sum();
    let total: usize = skipped + tensors.iter().map(|t| t.checked).sum::<usize>();
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err < opts.tol && skipped as f64 <= MAX_SKIPPED_FRACTION * total as f64,
    })
}
