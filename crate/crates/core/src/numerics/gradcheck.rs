//! Central finite-difference check of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Replace probes whose finite differences at `eps` and `eps / 2` disagree,
    /// i.e. where the perturbation straddles a ReLU kink.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 200,
            eps: 1e-4,
            tol: 1e-4,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    /// Probes discarded because the objective is not smooth across the perturbation.
    pub kinks_skipped: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on random coordinates.
///
/// `objective(params, grads)` must return the loss at `params`; when `grads` is
/// given it must also add the analytic gradient into it. It has to be a pure
/// function of `params`: the loss at the unperturbed point is evaluated twice
/// and must agree bit for bit.
pub fn grad_check<F, O>(
    params: &mut ParamStore<F>,
    objective: O,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Scalar,
    O: Fn(&ParamStore<F>, Option<&mut Gradients<F>>) -> Result<F>,
{
    let total = params.num_scalars();
    grad_check_with(params, objective, cfg, |rng, store, _| store.coordinate(rng.gen_range(0..total)))
}

/// As [`grad_check`], with coordinates chosen by `pick(rng, params, analytic)`.
pub fn grad_check_with<F, O, P>(
    params: &mut ParamStore<F>,
    objective: O,
    cfg: &GradCheckConfig,
    mut pick: P,
) -> Result<GradCheckReport>
where
    F: Scalar,
    O: Fn(&ParamStore<F>, Option<&mut Gradients<F>>) -> Result<F>,
    P: FnMut(&mut ChaCha8Rng, &ParamStore<F>, &Gradients<F>) -> (ParamId, usize),
{
    let mut grads = params.new_gradients();
    let first = objective(params, Some(&mut grads))?.as_f64();
    let second = objective(params, None)?.as_f64();
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    let mut kinks_skipped = 0;
    let max_attempts = cfg.probes * 20 + 100;
    let mut attempts = 0;
    while probes.len() < cfg.probes && attempts < max_attempts {
        attempts += 1;
        let (id, offset) = pick(&mut rng, params, &grads);
        let numeric = central_difference(params, &objective, id, offset, cfg.eps)?;
        if cfg.skip_kinks {
            let half = central_difference(params, &objective, id, offset, cfg.eps / 2.0)?;
            let roundoff = 10.0 * F::epsilon().as_f64() * (first.abs() + 1.0) / (cfg.eps / 2.0);
            let scale = numeric.abs().max(half.abs());
            if (numeric - half).abs() > cfg.tol / 10.0 * scale + roundoff {
                kinks_skipped += 1;
                continue;
            }
        }
        let analytic = grads.get(id).data()[offset].as_f64();
        probes.push(Probe {
            param: params.name(id).to_string(),
            offset,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }

    let again = objective(params, None)?.as_f64();
    if again.to_bits() != first.to_bits() {
        return Err(Error::NonDeterministic {
            first,
            second: again,
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
        kinks_skipped,
        tol: cfg.tol,
    })
}

fn central_difference<F, O>(
    params: &mut ParamStore<F>,
    objective: &O,
    id: ParamId,
    offset: usize,
    eps: f64,
) -> Result<f64>
where
    F: Scalar,
    O: Fn(&ParamStore<F>, Option<&mut Gradients<F>>) -> Result<F>,
{
    let orig = params.value(id).data()[offset];
    params.value_mut(id).data_mut()[offset] = F::from_f64(orig.as_f64() + eps);
    let plus = objective(params, None);
    params.value_mut(id).data_mut()[offset] = F::from_f64(orig.as_f64() - eps);
    let minus = objective(params, None);
    params.value_mut(id).data_mut()[offset] = orig;
    Ok((plus?.as_f64() - minus?.as_f64()) / (2.0 * eps))
}
