//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Finite-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-4;

/// Fallback step for coordinates whose [`FD_STEP`] stencil disagrees with the
/// analytic value, typically because it straddles a ReLU kink. A genuine
/// gradient error disagrees at every step size.
pub const FD_FALLBACK_STEP: f64 = 1e-6;

/// Tolerance below which the [`FD_STEP`] estimate is accepted outright.
const FALLBACK_TRIGGER: f64 = 1e-6;

/// Loss-rounding multiple under which a finite-difference mismatch is noise,
/// e.g. for parameters whose true gradient is exactly zero.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Above this many parameter scalars only a random 5% subsample is probed.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// A differentiable scalar function of a parameter store.
pub trait GradCase {
    fn name(&self) -> String;

    /// Parameters (differentiable inputs included) for one seed.
    fn setup(&self, seed: u64) -> ParamStore<f64>;

    /// Builds the scalar loss on `g`.
    fn loss(&self, g: &mut Graph<f64>, params: &ParamStore<f64>, seed: u64) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub seeds: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.checked > 0
    }
}

/// `|a - f| / max(1e-8, |a| + |f|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn eval_loss(case: &dyn GradCase, params: &ParamStore<f64>, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let loss = case.loss(&mut g, params, seed)?;
    Ok(g.value(loss).data()[0])
}

/// Compares analytic gradients with central differences over `seeds`.
///
/// Failures are reported through [`GradReport::max_rel_err`], never thrown;
/// the `Err` path is reserved for a case that cannot build its graph.
pub fn check_gradients(case: &dyn GradCase, seeds: impl IntoIterator<Item = u64>) -> Result<GradReport> {
    let mut report = GradReport {
        name: case.name(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        seeds: 0,
    };
    for seed in seeds {
        report.seeds += 1;
        let mut params = case.setup(seed);
        let (base, analytic) = {
            let mut g = Graph::new();
            let loss = case.loss(&mut g, &params, seed)?;
            (g.value(loss).data()[0], g.backward(loss)?)
        };

        let mut coords: Vec<(usize, usize)> = params
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id.index(), i)))
            .collect();
        if coords.len() > FULL_CHECK_LIMIT {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
            let keep = coords.len().div_ceil(20);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), keep).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }

        let ids: Vec<_> = params.ids().collect();
        for (pi, ei) in coords {
            let id = ids[pi];
            let a = analytic.get(id).map_or(0.0, |t| t.data()[ei]);
            // Below this the two estimates differ only by rounding in `f`.
            let floor = |h: f64| ROUNDOFF_ULPS * f64::EPSILON * (base.abs() + 1.0) / h;
            let err = |numeric: f64, h: f64| match (a - numeric).abs() <= floor(h) {
                true => 0.0,
                false => rel_err(a, numeric),
            };
            let mut numeric = |h: f64| -> Result<f64> {
                let x0 = params.get(id).data()[ei];
                params.get_mut(id).data_mut()[ei] = x0 + h;
                let fp = eval_loss(case, &params, seed);
                params.get_mut(id).data_mut()[ei] = x0 - h;
                let fm = eval_loss(case, &params, seed);
                params.get_mut(id).data_mut()[ei] = x0;
                Ok((fp? - fm?) / (2.0 * h))
            };
            let mut e = err(numeric(FD_STEP)?, FD_STEP);
            if e > FALLBACK_TRIGGER {
                e = e.min(err(numeric(FD_FALLBACK_STEP)?, FD_FALLBACK_STEP));
            }
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.worst = Some((params.name(id).to_string(), ei));
                report.max_rel_err = e;
            }
        }
    }
    Ok(report)
}
