//! Correlation and error metrics for quality prediction.
//!
//! SRCC uses average ranks for ties; KRCC is Kendall's tau-b computed with
//! Knight's `O(n log n)` merge-sort algorithm. Degenerate inputs (constant
//! vectors, all pairs tied) are errors, never a silent `0`.

use std::cmp::Ordering;
use std::fmt;

use crate::{Error, Result};

/// Correlations and RMSE of predictions against MOS labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            srcc: srcc(pred, truth)?,
            plcc: plcc(pred, truth)?,
            krcc: krcc(pred, truth)?,
            rmse: rmse(pred, truth)?,
            n: pred.len(),
        })
    }

    /// Model-selection criterion: `srcc + plcc`.
    pub fn selection_score(&self) -> f64 {
        self.srcc + self.plcc
    }

    pub const RECORD_FIELDS: [&'static str; 5] = ["n", "srcc", "plcc", "krcc", "rmse"];

    /// Tab-separated `n srcc plcc krcc rmse`.
    pub fn to_record(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.n, self.srcc, self.plcc, self.krcc, self.rmse
        )
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::Format {
                offset: 0,
                message: format!(
                    "field {} is not a number: {:?}",
                    Self::RECORD_FIELDS[i],
                    fields[i]
                ),
            })
        };
        Ok(Self {
            n: fields[0].parse().map_err(|_| Error::Format {
                offset: 0,
                message: format!("field n is not an integer: {:?}", fields[0]),
            })?,
            srcc: num(1)?,
            plcc: num(2)?,
            krcc: num(3)?,
            rmse: num(4)?,
        })
    }

    pub fn table_header() -> &'static str {
        "    n    SRCC↑    PLCC↑    KRCC↑    RMSE↓"
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>5}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
            self.n, self.srcc, self.plcc, self.krcc, self.rmse
        )
    }
}

fn validate(metric: &'static str, pred: &[f64], truth: &[f64], min_n: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(metric, pred.len(), truth.len()));
    }
    if pred.len() < min_n {
        return Err(Error::UndefinedCorrelation {
            metric,
            reason: format!("needs at least {min_n} pairs, got {}", pred.len()),
        });
    }
    if let Some(v) = pred.iter().chain(truth).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: metric.to_string(),
            detail: format!("input contains {v}"),
        });
    }
    Ok(())
}

fn reject_constant(metric: &'static str, pred: &[f64], truth: &[f64]) -> Result<()> {
    for (name, xs) in [("pred", pred), ("truth", truth)] {
        if xs.iter().all(|&x| x == xs[0]) {
            return Err(Error::UndefinedCorrelation {
                metric,
                reason: format!("{name} is constant"),
            });
        }
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    validate("SRCC", pred, truth, 2)?;
    reject_constant("SRCC", pred, truth)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(truth)))
}

pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    validate("PLCC", pred, truth, 2)?;
    reject_constant("PLCC", pred, truth)?;
    Ok(pearson(pred, truth))
}

/// Kendall tau-b.
pub fn krcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    validate("KRCC", pred, truth, 2)?;
    let n = pred.len();
    let cmp = |a: f64, b: f64| a.partial_cmp(&b).unwrap_or(Ordering::Equal);

    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| cmp(a.0, b.0).then(cmp(a.1, b.1)));

    let n0 = (n * (n - 1) / 2) as f64;
    let mut ties_x = 0u64;
    let mut ties_xy = 0u64;
    let mut run_x = 1u64;
    let mut run_xy = 1u64;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_x += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_xy += 1;
            } else {
                ties_xy += run_xy * (run_xy - 1) / 2;
                run_xy = 1;
            }
        } else {
            ties_x += run_x * (run_x - 1) / 2;
            ties_xy += run_xy * (run_xy - 1) / 2;
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += run_x * (run_x - 1) / 2;
    ties_xy += run_xy * (run_xy - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_sort_count(&mut ys);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_y += 1;
        } else {
            ties_y += run_y * (run_y - 1) / 2;
            run_y = 1;
        }
    }
    ties_y += run_y * (run_y - 1) / 2;

    let (n1, n2, n3) = (ties_x as f64, ties_y as f64, ties_xy as f64);
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if n0 - n1 == 0.0 || n0 - n2 == 0.0 {
        return Err(Error::UndefinedCorrelation {
            metric: "KRCC",
            reason: "every pair is tied on at least one axis".into(),
        });
    }
    let numer = n0 - n1 - n2 + n3 - 2.0 * swaps as f64;
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of inversions (strictly
/// decreasing pairs).
fn merge_sort_count(xs: &mut [f64]) -> u64 {
    let n = xs.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut xs[..mid]) + merge_sort_count(&mut xs[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if xs[j] < xs[i] {
            merged.push(xs[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(xs[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&xs[i..mid]);
    merged.extend_from_slice(&xs[j..n]);
    xs.copy_from_slice(&merged);
    swaps
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    validate("RMSE", pred, truth, 1)?;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn srcc_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(close(srcc(&t, &t).unwrap(), 1.0, 1e-12));
        let rev: Vec<f64> = t.iter().rev().copied().collect();
        assert!(close(srcc(&rev, &t).unwrap(), -1.0, 1e-12));
        // 1 - 6*2/(5*24) = 0.9
        assert!(close(
            srcc(&[1.0, 2.0, 3.0, 5.0, 4.0], &t).unwrap(),
            0.9,
            1e-12
        ));
    }

    #[test]
    fn constant_input_is_an_error() {
        let c = [2.0, 2.0, 2.0];
        let t = [1.0, 2.0, 3.0];
        assert!(matches!(
            srcc(&c, &t),
            Err(Error::UndefinedCorrelation { .. })
        ));
        assert!(matches!(
            plcc(&t, &c),
            Err(Error::UndefinedCorrelation { .. })
        ));
        assert!(matches!(
            krcc(&c, &t),
            Err(Error::UndefinedCorrelation { .. })
        ));
    }

    #[test]
    fn plcc_examples() {
        let p = [0.3, 1.7, -2.0, 4.4];
        let affine: Vec<f64> = p.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!(close(plcc(&p, &affine).unwrap(), 1.0, 1e-12));
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        assert!(close(plcc(&p, &neg).unwrap(), -1.0, 1e-12));
    }

    #[test]
    fn krcc_examples() {
        assert!(close(
            krcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0,
            1e-12
        ));
        // 2 concordant, 1 discordant of 3 pairs
        assert!(close(
            krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(),
            1.0 / 3.0,
            1e-12
        ));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(close(
            rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            12.5f64.sqrt(),
            1e-15
        ));
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn record_round_trip() {
        let r = EvalReport {
            srcc: 0.9,
            plcc: 0.91,
            krcc: 0.75,
            rmse: 0.31,
            n: 100,
        };
        let back = EvalReport::from_record(&r.to_record()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::from_record("1\t2").is_err());
    }

    fn distinct_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(-1000i32..1000, 3..30)
            .prop_map(|s| s.into_iter().map(|v| v as f64 / 10.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn rank_metrics_invariant_under_monotone_maps(x in distinct_vec(), seed in any::<u64>()) {
            let mut y = x.clone();
            // deterministic scramble of y so correlations are non-trivial
            let k = (seed as usize) % y.len();
            y.rotate_left(k);
            let mono: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let dec: Vec<f64> = x.iter().map(|v| -v.exp().min(1e300)).collect();
            let s = srcc(&x, &y).unwrap();
            let k0 = krcc(&x, &y).unwrap();
            prop_assert!((srcc(&mono, &y).unwrap() - s).abs() < 1e-12);
            prop_assert!((krcc(&mono, &y).unwrap() - k0).abs() < 1e-12);
            if dec.iter().map(|v| v.to_bits()).collect::<std::collections::BTreeSet<_>>().len() == dec.len() {
                prop_assert!((srcc(&dec, &y).unwrap() + s).abs() < 1e-12);
                prop_assert!((krcc(&dec, &y).unwrap() + k0).abs() < 1e-12);
            }
        }

        #[test]
        fn plcc_affine_invariance_and_symmetry(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let r = plcc(&x, &y).unwrap();
            let xa: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let xn: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((plcc(&xa, &y).unwrap() - r).abs() < 1e-10);
            prop_assert!((plcc(&xn, &y).unwrap() + r).abs() < 1e-12);
            prop_assert!((plcc(&y, &x).unwrap() - r).abs() < 1e-12);
            prop_assert!((srcc(&y, &x).unwrap() - srcc(&x, &y).unwrap()).abs() < 1e-12);
            prop_assert!((krcc(&y, &x).unwrap() - krcc(&x, &y).unwrap()).abs() < 1e-12);
            prop_assert!((rmse(&y, &x).unwrap() - rmse(&x, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn srcc_is_pearson_on_ranks(
            pairs in prop::collection::vec((0u8..8, 0u8..8), 4..40),
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
            let via_ranks = plcc(&average_ranks(&x), &average_ranks(&y)).unwrap();
            prop_assert!((srcc(&x, &y).unwrap() - via_ranks).abs() < 1e-12);
        }
    }
}
