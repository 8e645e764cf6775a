//! Rank correlation and the exact two-sided binomial test.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, found {found}")]
    TooFew { need: usize, found: usize },
    #[error("input is constant; rank correlation is undefined")]
    Constant,
    #[error("non-finite input")]
    NonFinite,
    #[error("successes {k} out of range for {n} trials")]
    OutOfRange { k: u64, n: u64 },
}

/// Ranks starting at 1; tied values share the mean of their rank span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            found: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(StatsError::Constant);
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Largest n handled with exact integer arithmetic; every tail count is
/// then below 2^53 and the quotient by 2^n is exact in f64.
const EXACT_LIMIT: u64 = 52;

/// Exact two-sided p-value of `k` successes in `n` fair trials.
///
/// Uses the minimum-likelihood convention: sum P(X = i) over every i with
/// P(X = i) <= P(X = k). With p = 1/2 the distribution is symmetric and
/// unimodal, so that set is the two tails at distance >= |k - n/2| from the
/// centre.
pub fn binomial_two_sided(k: u64, n: u64) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(StatsError::TooFew { need: 1, found: 0 });
    }
    if k > n {
        return Err(StatsError::OutOfRange { k, n });
    }
    let m = k.min(n - k);
    // Tails overlap at the centre, covering the whole support.
    if n <= 2 * m + 1 {
        return Ok(1.0);
    }
    if n <= EXACT_LIMIT {
        let mut coeff: u128 = 1;
        let mut tail: u128 = 0;
        for i in 0..=m {
            tail += coeff;
            coeff = coeff * u128::from(n - i) / u128::from(i + 1);
        }
        let p = (2 * tail) as f64 / (1u128 << n) as f64;
        return Ok(p.min(1.0));
    }
    // log P(X = i) by the ratio recurrence, summed with a running log-sum-exp.
    let mut log_p = -(n as f64) * std::f64::consts::LN_2;
    let mut log_tail = log_p;
    for i in 0..m {
        log_p += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        let (hi, lo) = if log_p > log_tail {
            (log_p, log_tail)
        } else {
            (log_tail, log_p)
        };
        log_tail = hi + (lo - hi).exp().ln_1p();
    }
    Ok((std::f64::consts::LN_2 + log_tail).exp().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 20.0, 40.0]).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert_eq!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::Constant)
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0]),
            Err(StatsError::TooFew { need: 3, found: 2 })
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(3, 2))
        );
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn binomial_examples() {
        // C(10,0)+C(10,1)+C(10,2) = 56; doubled over 2^10
        assert_eq!(binomial_two_sided(8, 10).unwrap(), 112.0 / 1024.0);
        assert_eq!(binomial_two_sided(2, 10).unwrap(), 112.0 / 1024.0);
        for n in [2, 10, 400, 1000] {
            assert_eq!(binomial_two_sided(n / 2, n).unwrap(), 1.0);
        }
        assert_eq!(binomial_two_sided(2, 5).unwrap(), 1.0);
        assert_eq!(binomial_two_sided(0, 1).unwrap(), 1.0);
        assert_eq!(binomial_two_sided(0, 3).unwrap(), 0.25);
        let p = binomial_two_sided(180, 400).unwrap();
        assert!((p - 0.051).abs() < 0.002, "{p}");
        assert!(matches!(binomial_two_sided(5, 4), Err(StatsError::OutOfRange { .. })));
        assert!(binomial_two_sided(0, 0).is_err());
    }

    #[test]
    fn log_space_matches_exact_path_near_the_limit() {
        // n = 60 goes through the log-space branch; compare with u128 arithmetic.
        let n = 60u64;
        for k in 0..=n {
            let m = k.min(n - k);
            let mut coeff: u128 = 1;
            let mut tail: u128 = 0;
            for i in 0..=m {
                tail += coeff;
                coeff = coeff * u128::from(n - i) / u128::from(i + 1);
            }
            let exact = ((2 * tail) as f64 / (1u128 << n) as f64).min(1.0);
            let got = binomial_two_sided(k, n).unwrap();
            assert!(
                (got - exact).abs() <= 1e-12 * exact.max(1e-300),
                "k={k}: {got} vs {exact}"
            );
        }
    }

    #[test]
    fn large_n_is_finite() {
        let p = binomial_two_sided(400_000, 1_000_000).unwrap();
        assert!((0.0..1e-100).contains(&p));
        let p = binomial_two_sided(499_500, 1_000_000).unwrap();
        assert!(p > 0.3 && p < 0.4, "{p}");
    }
}
