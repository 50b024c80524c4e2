//! Log-grid search for the prior weight.

use serde::{Deserialize, Serialize};

use spherewarp_core::metrics::dice_all;
use spherewarp_core::{Atlas, FeatureMap, LabelMap};

use crate::config::RegistrationConfig;
use crate::error::{RegError, Result};
use crate::instance::register_instance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Mean overall Dice over the validation pairs.
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearchReport {
    pub scores: Vec<LambdaScore>,
    pub best: f64,
}

/// Five points, one decade apart, centred on `centre`.
pub fn log_grid(centre: f64) -> Vec<f64> {
    (-2..=2).map(|e| centre * 10f64.powi(e)).collect()
}

/// Registers every validation pair at each candidate λ and keeps the one with
/// the highest mean Dice between projected atlas labels and subject labels.
///
/// The `(λ, pair)` jobs are spread over `threads` workers; per-job scores are
/// summed in job order, so the report does not depend on the thread count.
pub fn lambda_search(
    pairs: &[(FeatureMap, LabelMap)],
    atlas: &Atlas,
    atlas_labels: &LabelMap,
    cfg: &RegistrationConfig,
    candidates: &[f64],
    threads: usize,
) -> Result<LambdaSearchReport> {
    if pairs.is_empty() || candidates.is_empty() {
        return Err(RegError::Config("lambda search needs pairs and candidates".into()));
    }
    let jobs = candidates.len() * pairs.len();
    let workers = threads.clamp(1, jobs);
    let run_job = |k: usize| -> Result<f64> {
        let run = RegistrationConfig { lambda: candidates[k / pairs.len()], ..cfg.clone() };
        let (moving, labels) = &pairs[k % pairs.len()];
        let res = register_instance(moving, atlas, &run)?;
        let projected = res.project_labels(atlas_labels, run.steps)?;
        Ok(dice_all(&projected, labels)?.1)
    };
    let mut results: Vec<Option<Result<f64>>> = (0..jobs).map(|_| None).collect();
    if workers == 1 {
        for (k, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_job(k));
        }
    } else {
        let run_job = &run_job;
        let done: Vec<Vec<(usize, Result<f64>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|t| scope.spawn(move || (t..jobs).step_by(workers).map(|k| (k, run_job(k))).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("lambda search worker panicked")).collect()
        });
        for (k, r) in done.into_iter().flatten() {
            results[k] = Some(r);
        }
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (c, &lambda) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for slot in &mut results[c * pairs.len()..(c + 1) * pairs.len()] {
            total += slot.take().expect("every job ran")?;
        }
        scores.push(LambdaScore { lambda, mean_dice: total / pairs.len() as f64 });
    }
    let best = scores
        .iter()
        .fold(None::<LambdaScore>, |acc, s| match acc {
            Some(a) if a.mean_dice >= s.mean_dice => Some(a),
            _ => Some(*s),
        })
        .expect("at least one candidate")
        .lambda;
    Ok(LambdaSearchReport { scores, best })
}
