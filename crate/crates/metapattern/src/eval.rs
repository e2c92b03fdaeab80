//! Scoring and cross-domain evaluation.
//!
//! One sample's score is the average of the genuine-class probability and
//! the mean of the predicted pixel map; higher means more likely genuine.
//! Cross-domain quality is summarized by AUC and by HTER at the
//! equal-error-rate threshold.

use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{hfn_forward, HfnSpec};
use crate::nn::{Binding, ParameterSet};
use crate::tensor::{Tape, Tensor};

/// Combined liveness score from one prediction: the genuine-class
/// probability averaged with the pixel-map mean.
pub fn score(genuine_prob: f64, map_mean: f64) -> f64 {
    0.5 * (genuine_prob + map_mean)
}

/// Score every sample of a dataset with a frozen network. `pattern` maps an
/// image batch to the second-stream input batch.
pub fn score_dataset(
    theta: &mut ParameterSet<f32>,
    spec: &HfnSpec,
    ds: &Dataset,
    batch_size: usize,
    mut pattern: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<(f64, u8)>> {
    if batch_size == 0 {
        return Err(Error::InvalidArg("batch_size must be positive".into()));
    }
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = ds.batch(chunk)?;
        let maps = pattern(&images)?;
        let mut tape = Tape::new();
        let mut bind = Binding::frozen(theta, false);
        let x = tape.leaf(images, false);
        let m = tape.leaf(maps, false);
        let pred = hfn_forward(&mut tape, &mut bind, spec, x, m)?;
        let probs = tape.value(pred.probs).clone();
        let map = tape.value(pred.map).clone();
        let per_map: usize = map.shape()[1..].iter().product();
        for (i, &label) in labels.iter().enumerate() {
            let genuine_prob = probs.data()[i * 2 + 1] as f64;
            let mm = map.data()[i * per_map..(i + 1) * per_map]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / per_map as f64;
            out.push((score(genuine_prob, mm), label));
        }
    }
    Ok(out)
}

fn split_scores(scored: &[(f64, u8)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut genuine = Vec::new();
    let mut spoof = Vec::new();
    for &(s, l) in scored {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("non-finite score {s}")));
        }
        match l {
            1 => genuine.push(s),
            0 => spoof.push(s),
            l => return Err(Error::InvalidArg(format!("label {l} outside {{0,1}}"))),
        }
    }
    if genuine.is_empty() || spoof.is_empty() {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    Ok((genuine, spoof))
}

/// Area under the ROC curve, genuine as the positive (high-score) class.
/// Computed from the Mann-Whitney statistic via average ranks; ties count
/// one half.
pub fn auc(scored: &[(f64, u8)]) -> Result<f64> {
    let (genuine, spoof) = split_scores(scored)?;
    let mut all: Vec<(f64, u8)> = scored.to_vec();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_genuine = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied scores share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for s in &all[i..j] {
            if s.1 == 1 {
                rank_sum_genuine += avg_rank;
            }
        }
        i = j;
    }
    let n1 = genuine.len() as f64;
    let n0 = spoof.len() as f64;
    Ok((rank_sum_genuine - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Error rates at a threshold: spoof accepted when score >= tau, genuine
/// rejected when score < tau.
pub fn error_rates(scored: &[(f64, u8)], tau: f64) -> Result<(f64, f64)> {
    let (genuine, spoof) = split_scores(scored)?;
    let far = spoof.iter().filter(|&&s| s >= tau).count() as f64 / spoof.len() as f64;
    let frr = genuine.iter().filter(|&&s| s < tau).count() as f64 / genuine.len() as f64;
    Ok((far, frr))
}

/// Equal-error-rate threshold: over midpoints of adjacent distinct scores
/// (plus one candidate below the minimum and one above the maximum), the
/// threshold minimizing |FAR - FRR|, lowest such threshold on ties.
pub fn eer_threshold(scored: &[(f64, u8)]) -> Result<f64> {
    split_scores(scored)?;
    let mut uniq: Vec<f64> = scored.iter().map(|&(s, _)| s).collect();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    let mut candidates = vec![uniq[0] - 1.0];
    for pair in uniq.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(uniq[uniq.len() - 1] + 1.0);
    let mut best = candidates[0];
    let mut best_gap = f64::INFINITY;
    for &tau in &candidates {
        let (far, frr) = error_rates(scored, tau)?;
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = tau;
        }
    }
    Ok(best)
}

/// Half total error rate at the equal-error-rate threshold.
pub fn hter(scored: &[(f64, u8)]) -> Result<f64> {
    let tau = eer_threshold(scored)?;
    let (far, frr) = error_rates(scored, tau)?;
    Ok(0.5 * (far + frr))
}

/// Metrics of one leave-one-domain-out fold.
#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub test_domain: String,
    pub auc: f64,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
}

pub fn fold_report(fold: usize, test_domain: &str, scored: &[(f64, u8)]) -> Result<FoldReport> {
    let tau = eer_threshold(scored)?;
    let (far, frr) = error_rates(scored, tau)?;
    Ok(FoldReport {
        fold,
        test_domain: test_domain.to_string(),
        auc: auc(scored)?,
        hter: 0.5 * (far + frr),
        far,
        frr,
        threshold: tau,
    })
}

/// Leave-one-domain-out protocol. For fold `d`, `run_fold(d, train_domains)`
/// trains on every other domain and returns (score, label) pairs for the
/// held-out domain. Folds run in parallel on up to `threads` workers
/// (1 keeps everything on the caller's thread and fully deterministic).
pub fn run_protocol<F>(ds: &Dataset, threads: usize, run_fold: F) -> Result<Vec<FoldReport>>
where
    F: Fn(usize, &[usize]) -> Result<Vec<(f64, u8)>> + Sync,
{
    let n = ds.domain_count();
    if n < 2 {
        return Err(Error::Data(
            "leave-one-domain-out needs at least 2 domains".into(),
        ));
    }
    let folds: Vec<usize> = (0..n).collect();
    let one_fold = |&d: &usize| -> Result<FoldReport> {
        let train: Vec<usize> = (0..n).filter(|&t| t != d).collect();
        let scored = run_fold(d, &train)?;
        fold_report(d, &ds.domain_names[d], &scored)
    };
    if threads <= 1 {
        folds.iter().map(one_fold).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.min(n))
            .build()
            .map_err(|e| Error::InvalidArg(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(one_fold).collect())
    }
}

/// Write fold reports as CSV with header
/// `fold,test_domain,auc,hter,far,frr,threshold`.
pub fn write_report_csv(reports: &[FoldReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "fold,test_domain,auc,hter,far,frr,threshold")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.fold, r.test_domain, r.auc, r.hter, r.far, r.frr, r.threshold
        )?;
    }
    Ok(())
}
