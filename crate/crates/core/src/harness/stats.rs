use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Bins whose expected count falls below this are merged.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Number of original bins folded into another bin.
    pub merged_bins: usize,
}

/// Pearson goodness-of-fit of `observed` counts against `probs`.
///
/// Bins with expected count below [`MIN_EXPECTED`] are pooled, smallest
/// first, each pool closing once it reaches that count; a final pool that
/// stays below it is folded into the smallest remaining bin. An observation in a bin of probability zero
/// gives `p = 0`.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> ChiSquareResult {
    assert_eq!(observed.len(), probs.len(), "bin count mismatch");
    let n: u64 = observed.iter().sum();
    let total: f64 = probs.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut impossible = false;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = n as f64 * p / total;
        if e <= 0.0 {
            impossible |= o > 0;
            continue;
        }
        bins.push((e, o as f64));
    }
    if impossible {
        return ChiSquareResult {
            statistic: f64::INFINITY,
            dof: bins.len().saturating_sub(1),
            p_value: 0.0,
            merged_bins: 0,
        };
    }
    bins.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged_bins = 0;
    let mut pool: Option<(f64, f64)> = None;
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (e, o) in bins {
        if e >= MIN_EXPECTED {
            kept.push((e, o));
            continue;
        }
        merged_bins += 1;
        let p = pool.get_or_insert((0.0, 0.0));
        p.0 += e;
        p.1 += o;
        if p.0 >= MIN_EXPECTED {
            kept.push(*p);
            pool = None;
        }
    }
    if let Some(p) = pool {
        match kept.iter_mut().min_by(|a, b| a.0.total_cmp(&b.0)) {
            Some(k) => {
                k.0 += p.0;
                k.1 += p.1;
            }
            None => kept.push(p),
        }
    }
    let statistic: f64 = kept.iter().map(|(e, o)| (o - e) * (o - e) / e).sum();
    let dof = kept.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64)
            .map(|d| d.sf(statistic))
            .unwrap_or(0.0)
    };
    ChiSquareResult {
        statistic,
        dof,
        p_value,
        merged_bins,
    }
}

/// Mean and standard error of the mean; the error is zero for fewer than two
/// values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn textbook_die() {
        // Observed (5, 8, 9, 8, 10, 20) for a fair die, n = 60: statistic 13.4
        // on 5 degrees of freedom, p ≈ 0.0199.
        let r = chi_square_gof(&[5, 8, 9, 8, 10, 20], &[1.0 / 6.0; 6]);
        assert_abs_diff_eq!(r.statistic, 13.4, epsilon = 1e-9);
        assert_eq!(r.dof, 5);
        assert_abs_diff_eq!(r.p_value, 0.0199, epsilon = 1e-4);
        assert_eq!(r.merged_bins, 0);
    }

    #[test]
    fn small_bins_are_pooled() {
        // Expected counts 94, 3, 2, 1: the three small bins pool to 6.
        let r = chi_square_gof(&[94, 3, 2, 1], &[0.94, 0.03, 0.02, 0.01]);
        assert_eq!(r.merged_bins, 3);
        assert_eq!(r.dof, 1);
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        // A pool that stays small joins the smallest regular bin.
        let r = chi_square_gof(&[50, 47, 3], &[0.5, 0.47, 0.03]);
        assert_eq!(r.dof, 1);
        assert_eq!(r.merged_bins, 1);
        assert_abs_diff_eq!(r.statistic, 0.0, epsilon = 1e-12);
        // Several small bins form several pools.
        let r = chi_square_gof(&[3, 3, 3, 3, 88], &[0.03, 0.03, 0.03, 0.03, 0.88]);
        assert_eq!((r.merged_bins, r.dof), (4, 2));
    }

    #[test]
    fn point_mass_and_impossible_bins() {
        let r = chi_square_gof(&[100, 0, 0], &[1.0, 0.0, 0.0]);
        assert_eq!((r.dof, r.p_value), (0, 1.0));
        let r = chi_square_gof(&[99, 1, 0], &[1.0, 0.0, 0.0]);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn stderr_of_mean() {
        assert_eq!(mean_stderr(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5);
        // sample sd = sqrt(5/3), stderr = sd / 2
        assert_abs_diff_eq!(s, (5.0f64 / 3.0).sqrt() / 2.0, epsilon = 1e-12);
        assert!(mean_stderr(&[]).0.is_nan());
    }
}
