//! Isotonic regression of labels on logits by pool-adjacent-violators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nondecreasing step function: `values[k]` on `[breakpoints[k], breakpoints[k+1])`,
/// extended as a constant to the left of the first and right of the last breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicStep {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl IsotonicStep {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::Contract("isotonic step needs as many values as breakpoints (at least one)".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) || values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract("isotonic breakpoints must increase and values must not decrease".into()));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn eval(&self, u: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&b| b <= u);
        self.values[k.saturating_sub(1)]
    }
}

/// Least-squares nondecreasing fit of `labels` against `logits`. Tied logits share a value.
pub fn isotonic_fit(logits: &[f64], labels: &[u8]) -> Result<IsotonicStep> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Contract("isotonic fit needs equally many logits and labels (at least one)".into()));
    }
    if logits.iter().any(|u| !u.is_finite()) {
        return Err(Error::Contract("isotonic fit needs finite logits".into()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[i].total_cmp(&logits[j]));

    // Blocks of (start logit, sum, weight), ties merged up front.
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        let y = f64::from(labels[i]);
        match blocks.last_mut() {
            Some(last) if last.0 == logits[i] => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => blocks.push((logits[i], y, 1.0)),
        }
    }
    let mut stack: Vec<(f64, f64, f64)> = Vec::with_capacity(blocks.len());
    for b in blocks {
        stack.push(b);
        while stack.len() >= 2 {
            let (s0, w0) = (stack[stack.len() - 2].1, stack[stack.len() - 2].2);
            let (s1, w1) = (stack[stack.len() - 1].1, stack[stack.len() - 1].2);
            if s0 / w0 <= s1 / w1 {
                break;
            }
            let top = stack.pop().expect("len >= 2");
            let prev = stack.last_mut().expect("len >= 1");
            prev.1 += top.1;
            prev.2 += top.2;
        }
    }
    let breakpoints = stack.iter().map(|b| b.0).collect();
    let values = stack.iter().map(|b| (b.1 / b.2).clamp(0.0, 1.0)).collect();
    IsotonicStep::new(breakpoints, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn already_monotone_is_reproduced() {
        let s = isotonic_fit(&[0.1, 0.5, 0.9, 1.5], &[0, 0, 1, 1]).unwrap();
        for (u, y) in [(0.1, 0.0), (0.5, 0.0), (0.9, 1.0), (1.5, 1.0)] {
            assert_eq!(s.eval(u), y);
        }
    }

    #[test]
    fn single_violation_pools() {
        let s = isotonic_fit(&[1.0, 2.0], &[1, 0]).unwrap();
        assert_eq!(s.values, vec![0.5]);
        assert_eq!(s.eval(1.5), 0.5);
    }

    #[test]
    fn constant_extension() {
        let s = IsotonicStep::new(vec![0.0], vec![0.3]).unwrap();
        assert_eq!(s.eval(-5.0), 0.3);
        assert_eq!(s.eval(5.0), 0.3);
        let s = IsotonicStep::new(vec![0.0, 1.0], vec![0.2, 0.6]).unwrap();
        assert_eq!((s.eval(-1.0), s.eval(0.0), s.eval(0.99), s.eval(1.0), s.eval(9.0)), (0.2, 0.2, 0.2, 0.6, 0.6));
    }

    #[test]
    fn ties_share_a_value() {
        let s = isotonic_fit(&[1.0, 1.0, 2.0], &[1, 0, 1]).unwrap();
        assert_eq!(s.breakpoints, vec![1.0, 2.0]);
        assert_eq!(s.values, vec![0.5, 1.0]);
    }

    /// Minimum squared error over all partitions of the sorted points into contiguous
    /// blocks whose means do not decrease.
    fn brute_force(sorted_y: &[f64]) -> f64 {
        let n = sorted_y.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            let mut fitted = vec![0.0; n];
            let mut start = 0;
            let mut means = Vec::new();
            for i in 0..n {
                let cut = i == n - 1 || mask & (1 << i) != 0;
                if cut {
                    let m = sorted_y[start..=i].iter().sum::<f64>() / (i + 1 - start) as f64;
                    fitted[start..=i].iter_mut().for_each(|v| *v = m);
                    means.push(m);
                    start = i + 1;
                }
            }
            if means.windows(2).all(|w| w[0] <= w[1]) {
                let sse: f64 = fitted.iter().zip(sorted_y).map(|(f, y)| (f - y) * (f - y)).sum();
                best = best.min(sse);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = seeded(21);
        for trial in 0..300 {
            let n = 1 + trial % 7;
            let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
            let s = isotonic_fit(&logits, &labels).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| logits[i].total_cmp(&logits[j]));
            let sorted_y: Vec<f64> = idx.iter().map(|&i| f64::from(labels[i])).collect();
            let sse: f64 = idx.iter().map(|&i| (s.eval(logits[i]) - f64::from(labels[i])).powi(2)).sum();
            assert!((sse - brute_force(&sorted_y)).abs() < 1e-12);
            assert!(s.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
