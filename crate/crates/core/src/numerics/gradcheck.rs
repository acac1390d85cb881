//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{GradMap, ParamStore};
use crate::error::{Error, Result};

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamStore) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamStore) -> Result<(f64, GradMap)>;
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub eps: f64,
    /// Entries checked per parameter tensor; `None` checks every entry. The
    /// entry with the largest analytic gradient is always included.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub path: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Worst error per top-level module (the path up to the second dot,
    /// e.g. `det.encoder`).
    pub fn by_module(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let module: String = p.path.split('.').take(2).collect::<Vec<_>>().join(".");
            let e = out.entry(module).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
        out
    }
}

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the analytic gradient of `f` with central differences for every
/// trainable parameter of `params`.
pub fn finite_diff_check(f: &dyn Objective, params: &ParamStore, opts: &CheckOptions) -> Result<CheckReport> {
    let (base, grads) = f.value_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("objective is not finite ({base})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = CheckReport::default();
    for path in params.trainable_paths() {
        let n = params.tensor(&path)?.len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(&path).unwrap_or(&zeros);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let top = (0..n)
                    .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
                    .unwrap_or(0);
                let mut picked: Vec<usize> = sample(&mut rng, n, k).into_vec();
                if !picked.contains(&top) {
                    picked[0] = top;
                }
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &entries {
            let orig = work.tensor(&path)?.values()[i];
            work.get_mut(&path).expect("present").values_mut()[i] = orig + opts.eps;
            let up = f.value(&work)?;
            work.get_mut(&path).expect("present").values_mut()[i] = orig - opts.eps;
            let down = f.value(&work)?;
            work.get_mut(&path).expect("present").values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Evaluation(format!(
                    "objective not finite when perturbing '{path}'[{i}]"
                )));
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.params.push(ParamCheck {
            path,
            entries: entries.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}
