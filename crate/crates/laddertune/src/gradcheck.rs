//! Central-difference gradient verification, run in f64.
//!
//! The relative error uses a floor so near-zero gradients compare on an
//! absolute scale: `|a - b| / max(|a|, |b|, floor)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::GradMap;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all, if fewer).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            floor: 1e-3,
            samples_per_param: 8,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Add Gaussian noise to every trainable tensor. Structures that start at
/// exact zero (gates, upsamplers, adapter up-projections) otherwise sit at
/// stationary points where a gradient check is vacuous.
pub fn jitter_trainable(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, scale).expect("scale is finite");
    for (_, entry) in store.iter_mut() {
        if entry.trainable {
            for v in entry.tensor.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }
}

/// Compare analytic gradients against central differences on sampled
/// coordinates of every trainable parameter.
///
/// `eval` runs the forward pass on the given store; when the flag is set it
/// must also return gradients. The store is restored bit-for-bit.
pub fn check<F>(store: &mut ParamStore<f64>, cfg: &GradCheckConfig, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<GradMap<f64>>)>,
{
    let (loss0, grads) = eval(store, true)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!("loss at check point is not finite: {loss0}")));
    }
    let grads = grads.ok_or_else(|| Error::Contract("eval returned no gradients".to_string()))?;

    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in &names {
        if !grads.contains(name) {
            return Err(Error::Contract(format!(
                "trainable parameter `{name}` missing from gradient map"
            )));
        }
    }
    if grads.len() != names.len() {
        let extra: Vec<&String> = grads.names().filter(|n| !names.contains(n)).collect();
        return Err(Error::Contract(format!(
            "gradient map has entries for frozen or unknown parameters: {extra:?}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    for name in &names {
        let g = grads.get(name).expect("checked above").clone();
        let n = g.numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_param).into_vec()
        };
        let mut param_max = 0.0f64;
        for &c in &coords {
            let x0 = store.get(name)?.tensor.data()[c];
            store.get_mut(name)?.tensor.data_mut()[c] = x0 + cfg.step;
            let plus = eval(store, false)?.0;
            store.get_mut(name)?.tensor.data_mut()[c] = x0 - cfg.step;
            let minus = eval(store, false)?.0;
            store.get_mut(name)?.tensor.data_mut()[c] = x0;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "perturbed loss is not finite at `{name}`[{c}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * cfg.step);
            let rel = rel_err(fd, g.data()[c], cfg.floor);
            if rel > param_max {
                param_max = rel;
            }
        }
        if param_max > max_rel {
            max_rel = param_max;
            worst = name.clone();
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel: param_max,
            coords_checked: coords.len(),
        });
    }
    if worst.is_empty() && !names.is_empty() {
        worst = names[0].clone();
    }
    Ok(GradCheckReport {
        per_param,
        max_rel,
        worst_param: worst,
    })
}

/// Convenience used by tests: jitter, then check, with default settings.
pub fn jitter_and_check<F>(
    store: &mut ParamStore<f64>,
    jitter_scale: f64,
    cfg: &GradCheckConfig,
    eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<GradMap<f64>>)>,
{
    jitter_trainable(store, jitter_scale, cfg.seed ^ 0x9e37_79b9);
    check(store, cfg, eval)
}
