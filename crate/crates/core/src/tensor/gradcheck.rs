//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; tensors at or below this
    /// size are checked exhaustively.
    pub samples_per_param: usize,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            samples_per_param: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter name, coordinates checked, max relative error)`.
    pub per_param: Vec<(String, usize, f64)>,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `build` (a scalar function of the
/// parameters, built on a fresh graph) with central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` on every trainable tensor.
///
/// `build` must be deterministic: it is invoked on eval-mode graphs.
pub fn grad_check<F>(store: &ParamStore, opts: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::eval(store);
        let out = build(&mut g)?;
        g.backward(out)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::eval(s);
        let out = build(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut total = 0;
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id).expect("backward fills every trainable parameter");
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = relative_error(grad[i], numeric, opts.floor);
            worst = worst.max(rel);
        }
        total += coords.len();
        max_rel = max_rel.max(worst);
        per_param.push((store.name(id).to_string(), coords.len(), worst));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
        coords_checked: total,
    })
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
