//! Calibration diagnostics: reliability tables, ECE, level-wise calibration error and
//! Bregman losses against known true probabilities.

use serde::{Deserialize, Serialize};

use crate::calibrators::Calibrator;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const KL_CLAMP: f64 = 1e-12;
pub const DEFAULT_MIN_LEVEL_COUNT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth,
    EqualCount,
}

/// One bin; means are NaN for empty bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_predicted: f64,
    pub mean_observed: f64,
    pub mean_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub n_bins: usize,
    pub scheme: BinScheme,
}

fn check_probs(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract(format!("{name} must lie in [0, 1]")));
    }
    Ok(())
}

/// Bin index of each prediction under `scheme`.
fn assign_bins(preds: &[f64], n_bins: usize, scheme: BinScheme) -> (Vec<usize>, Vec<(f64, f64)>) {
    match scheme {
        BinScheme::EqualWidth => {
            let idx = preds.iter().map(|&p| ((p * n_bins as f64) as usize).min(n_bins - 1)).collect();
            let edges = (0..n_bins).map(|k| (k as f64 / n_bins as f64, (k + 1) as f64 / n_bins as f64)).collect();
            (idx, edges)
        }
        BinScheme::EqualCount => {
            let n = preds.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| preds[i].total_cmp(&preds[j]));
            let mut idx = vec![0; n];
            let mut edges = vec![(f64::NAN, f64::NAN); n_bins];
            for (rank, &i) in order.iter().enumerate() {
                let b = rank * n_bins / n;
                idx[i] = b;
                let e = &mut edges[b];
                if e.0.is_nan() {
                    e.0 = preds[i];
                }
                e.1 = preds[i];
            }
            (idx, edges)
        }
    }
}

pub fn reliability(
    preds: &[f64],
    labels: &[u8],
    true_probs: Option<&[f64]>,
    n_bins: usize,
    scheme: BinScheme,
) -> Result<ReliabilityReport> {
    let n = preds.len();
    if n == 0 {
        return Err(Error::Contract("reliability needs at least one prediction".into()));
    }
    if labels.len() != n || true_probs.is_some_and(|t| t.len() != n) {
        return Err(Error::Contract("predictions, labels and true probabilities must have equal length".into()));
    }
    if n_bins < 1 {
        return Err(Error::Contract("need at least one bin".into()));
    }
    check_probs("predictions", preds)?;
    let (idx, edges) = assign_bins(preds, n_bins, scheme);
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0); n_bins];
    for i in 0..n {
        let s = &mut sums[idx[i]];
        s.0 += 1;
        s.1 += preds[i];
        s.2 += f64::from(labels[i]);
        if let Some(t) = true_probs {
            s.3 += t[i];
        }
    }
    let mut ece = 0.0;
    let bins = sums
        .iter()
        .zip(&edges)
        .map(|(&(count, sp, so, st), &(lo, hi))| {
            let c = count as f64;
            let (mp, mo) = if count > 0 { (sp / c, so / c) } else { (f64::NAN, f64::NAN) };
            if count > 0 {
                ece += c / n as f64 * (mo - mp).abs();
            }
            let mean_true = true_probs.map(|_| if count > 0 { st / c } else { f64::NAN });
            ReliabilityBin { lo, hi, count, mean_predicted: mp, mean_observed: mo, mean_true }
        })
        .collect();
    Ok(ReliabilityReport { bins, ece, n_bins, scheme })
}

/// Expected calibration error with equal-width bins.
pub fn ece(preds: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    Ok(reliability(preds, labels, None, n_bins, BinScheme::EqualWidth)?.ece)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    /// Mean prediction in the bin.
    pub p_center: f64,
    /// Mean prediction minus mean true probability.
    pub delta: f64,
    pub count: usize,
}

/// Binned estimate of `p - E[true prob | prediction = p]`.
///
/// Starts from `n_bins` equal-width prediction bins and merges neighbours until every
/// reported bin holds at least `min_count` points.
pub fn cal_error_at_level(preds: &[f64], true_probs: &[f64], n_bins: usize, min_count: usize) -> Result<Vec<LevelError>> {
    if preds.len() != true_probs.len() || preds.is_empty() {
        return Err(Error::Contract("predictions and true probabilities must be non-empty and of equal length".into()));
    }
    check_probs("predictions", preds)?;
    let (idx, _) = assign_bins(preds, n_bins.max(1), BinScheme::EqualWidth);
    let mut raw = vec![(0usize, 0.0, 0.0); n_bins.max(1)];
    for (i, &b) in idx.iter().enumerate() {
        raw[b].0 += 1;
        raw[b].1 += preds[i];
        raw[b].2 += true_probs[i];
    }
    let mut merged: Vec<(usize, f64, f64)> = Vec::new();
    let mut acc = (0usize, 0.0, 0.0);
    for r in raw {
        acc = (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2);
        if acc.0 >= min_count.max(1) {
            merged.push(acc);
            acc = (0, 0.0, 0.0);
        }
    }
    if acc.0 > 0 {
        match merged.last_mut() {
            Some(last) => *last = (last.0 + acc.0, last.1 + acc.1, last.2 + acc.2),
            None => merged.push(acc),
        }
    }
    Ok(merged
        .into_iter()
        .map(|(c, sp, st)| LevelError { p_center: sp / c as f64, delta: (sp - st) / c as f64, count: c })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BregmanReport {
    /// Mean of `||(q, 1-q) - (p, 1-p)||^2 = 2 (p - q)^2`.
    pub squared: f64,
    /// Mean of `KL((q, 1-q) || (p, 1-p))` with `p` clamped away from 0 and 1.
    pub kl: f64,
}

pub fn bregman_losses(preds: &[f64], true_probs: &[f64]) -> Result<BregmanReport> {
    if preds.len() != true_probs.len() || preds.is_empty() {
        return Err(Error::Contract("predictions and true probabilities must be non-empty and of equal length".into()));
    }
    let n = preds.len() as f64;
    let (mut sq, mut kl) = (0.0, 0.0);
    for (&p, &q) in preds.iter().zip(true_probs) {
        sq += 2.0 * (p - q) * (p - q);
        kl += kl_term(q, p.clamp(KL_CLAMP, 1.0 - KL_CLAMP));
    }
    Ok(BregmanReport { squared: sq / n, kl: kl / n })
}

fn kl_term(q: f64, p: f64) -> f64 {
    let part = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    (part(q, p) + part(1.0 - q, 1.0 - p)).max(0.0)
}

/// Empirical `E[true prob | logit]` by averaging true probabilities within equal-count
/// logit bins.
pub fn binned_conditional_mean(logits: &[f64], true_probs: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    let n = logits.len();
    if n == 0 || true_probs.len() != n || n_bins == 0 {
        return Err(Error::Contract("oracle needs equally many logits and true probabilities and at least one bin".into()));
    }
    let (idx, _) = assign_bins(logits, n_bins, BinScheme::EqualCount);
    let mut sums = vec![(0usize, 0.0); n_bins];
    for (i, &b) in idx.iter().enumerate() {
        sums[b].0 += 1;
        sums[b].1 += true_probs[i];
    }
    Ok(idx.iter().map(|&b| sums[b].1 / sums[b].0 as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub name: String,
    pub squared: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub oracle: LossEntry,
    /// Candidates sorted by KL loss, ascending.
    pub candidates: Vec<LossEntry>,
}

impl OptimalityReport {
    pub fn get(&self, name: &str) -> Option<&LossEntry> {
        self.candidates.iter().find(|e| e.name == name)
    }
}

/// Bregman losses of each candidate and of the binned conditional-mean oracle.
pub fn bregman_optimality_check(
    logits: &[f64],
    true_probs: &[f64],
    candidates: &[(String, Calibrator)],
    n_bins: usize,
) -> Result<OptimalityReport> {
    let oracle_preds = binned_conditional_mean(logits, true_probs, n_bins)?;
    let o = bregman_losses(&oracle_preds, true_probs)?;
    let oracle = LossEntry { name: "oracle".into(), squared: o.squared, kl: o.kl };
    let mut entries = Vec::with_capacity(candidates.len());
    for (name, cal) in candidates {
        let preds = cal.prepare()?.eval_many(logits);
        let r = bregman_losses(&preds, true_probs)?;
        entries.push(LossEntry { name: name.clone(), squared: r.squared, kl: r.kl });
    }
    entries.sort_by(|a, b| a.kl.total_cmp(&b.kl).then_with(|| a.name.cmp(&b.name)));
    Ok(OptimalityReport { oracle, candidates: entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::LinkFunction;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[0.0, 1.0, 1.0, 0.0], &[0, 1, 1, 0], 10).unwrap(), 0.0);
        assert_eq!(ece(&[0.5; 4], &[0, 1, 1, 0], 10).unwrap(), 0.0);
        assert_abs_diff_eq!(ece(&[0.1, 0.1, 0.9, 0.9], &[0, 1, 1, 1], 2).unwrap(), 0.25, epsilon = 1e-15);
        assert!(matches!(ece(&[], &[], 10), Err(Error::Contract(_))));
    }

    #[test]
    fn single_bin_and_permutation() {
        let mut rng = seeded(2);
        let preds: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..500).map(|_| u8::from(rng.random::<bool>())).collect();
        let mp = preds.iter().sum::<f64>() / 500.0;
        let ml = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / 500.0;
        assert_abs_diff_eq!(ece(&preds, &labels, 1).unwrap(), (ml - mp).abs(), epsilon = 1e-12);
        let a = ece(&preds, &labels, 10).unwrap();
        let (rp, rl): (Vec<f64>, Vec<u8>) = preds.iter().zip(&labels).rev().map(|(&p, &l)| (p, l)).unzip();
        assert_abs_diff_eq!(a, ece(&rp, &rl, 10).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn reliability_counts_and_true_means() {
        let preds = [0.05, 0.15, 0.95, 1.0, 0.5];
        let truth = [0.1, 0.2, 0.9, 0.9, 0.4];
        let r = reliability(&preds, &[0, 0, 1, 1, 1], Some(&truth), 10, BinScheme::EqualWidth).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(r.bins[9].count, 2);
        assert_abs_diff_eq!(r.bins[9].mean_true.unwrap(), 0.9, epsilon = 1e-15);
        let c = reliability(&preds, &[0, 0, 1, 1, 1], None, 2, BinScheme::EqualCount).unwrap();
        assert_eq!(c.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!((c.bins[0].lo, c.bins[0].hi, c.bins[1].lo), (0.05, 0.5, 0.95));
    }

    #[test]
    fn level_errors() {
        let mut rng = seeded(4);
        let truth: Vec<f64> = (0..5000).map(|_| rng.random_range(0.2..0.7)).collect();
        let z = cal_error_at_level(&truth, &truth, 10, 200).unwrap();
        assert!(z.iter().all(|l| l.delta == 0.0 && l.count >= 200));
        let shifted: Vec<f64> = truth.iter().map(|t| (t + 0.1).min(1.0)).collect();
        let s = cal_error_at_level(&shifted, &truth, 10, 200).unwrap();
        assert!(s.iter().all(|l| (l.delta - 0.1).abs() < 1e-12));
        assert_eq!(s.iter().map(|l| l.count).sum::<usize>(), 5000);
    }

    #[test]
    fn bregman_examples() {
        let r = bregman_losses(&[0.25], &[0.5]).unwrap();
        assert_abs_diff_eq!(r.squared, 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(r.kl, 0.143_841_036_225_890_5, epsilon = 1e-12);
        let r = bregman_losses(&[0.3, 0.9], &[0.3, 0.9]).unwrap();
        assert_eq!((r.squared, r.kl), (0.0, 0.0));
        let r = bregman_losses(&[0.0], &[0.5]).unwrap();
        assert!(r.kl.is_finite() && r.kl > 10.0);
    }

    #[test]
    fn bregman_zero_iff_equal() {
        let mut rng = seeded(9);
        for _ in 0..100 {
            let q: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let mut p = q.clone();
            let r = bregman_losses(&p, &q).unwrap();
            assert!(r.squared == 0.0 && r.kl.abs() < 1e-15);
            let k = rng.random_range(0..20);
            p[k] = (p[k] + 0.01).min(1.0) - if p[k] > 0.99 { 0.02 } else { 0.0 };
            let r = bregman_losses(&p, &q).unwrap();
            assert!(r.squared > 0.0 && r.kl > 0.0);
        }
    }

    #[test]
    fn optimality_report_orders_candidates() {
        let mut rng = seeded(6);
        let logits: Vec<f64> = (0..4000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let link = LinkFunction::standard_sigmoid();
        let truth: Vec<f64> = logits.iter().map(|&u| link.eval(u)).collect();
        let cands = vec![
            ("exact".to_string(), Calibrator::Uncalibrated { link }),
            ("overconfident".to_string(), Calibrator::Uncalibrated { link: LinkFunction::sigmoid_affine(3.0, 0.0) }),
        ];
        let rep = bregman_optimality_check(&logits, &truth, &cands, 50).unwrap();
        assert_eq!(rep.candidates[0].name, "exact");
        assert_eq!(rep.get("exact").unwrap().kl, 0.0);
        assert!(rep.oracle.kl < 1e-3);
        // the oracle predictions themselves have zero loss against themselves
        let oracle = binned_conditional_mean(&logits, &truth, 50).unwrap();
        assert_eq!(bregman_losses(&oracle, &oracle).unwrap().kl, 0.0);
    }
}
