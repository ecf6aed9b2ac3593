use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LR_RANGE: (f32, f32) = (5e-5, 1e-2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub lr: f32,
    pub dev_f1: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

fn pick_best(trials: Vec<Trial>) -> SearchResult {
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.dev_f1 > trials[best].dev_f1 {
            best = i;
        }
    }
    SearchResult {
        best: trials[best].clone(),
        trials,
    }
}

/// Sample `trials` learning rates log-uniformly in `[lo, hi]` and keep the
/// one with the highest dev F1 (earliest trial wins ties).
pub fn lr_random_search<Func>(mut train: Func, range: (f32, f32), trials: usize, seed: u64) -> Result<SearchResult>
where
    Func: FnMut(f32) -> Result<f32>,
{
    let (lo, hi) = range;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::Parameter(format!("empty learning-rate range [{lo}, {hi}]")));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let lr = (rng.random_range(a..=b).exp() as f32).clamp(lo, hi);
        out.push(Trial { lr, dev_f1: train(lr)? });
    }
    Ok(pick_best(out))
}

/// Try every learning rate of `grid` in order.
pub fn grid_search<Func>(mut train: Func, grid: &[f32]) -> Result<SearchResult>
where
    Func: FnMut(f32) -> Result<f32>,
{
    if grid.is_empty() {
        return Err(Error::Parameter("empty learning-rate grid".into()));
    }
    let trials = grid
        .iter()
        .map(|&lr| Ok(Trial { lr, dev_f1: train(lr)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(pick_best(trials))
}
