//! Small numeric helpers shared across modules.

/// Numerically stable softmax. `-inf` entries receive exactly zero mass.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Poisson probability mass function for `k = 0..len`.
pub fn poisson_pmf(rate: f64, len: usize) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(len);
    if len == 0 {
        return pmf;
    }
    if rate == 0.0 {
        pmf.push(1.0);
        pmf.resize(len, 0.0);
        return pmf;
    }
    let mut p = (-rate).exp();
    pmf.push(p);
    for k in 1..len {
        p *= rate / k as f64;
        pmf.push(p);
    }
    pmf
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Average ranks (1-based), ties share the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. Returns 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = ranks(x);
    let ry = ranks(y);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_constant_input() {
        for p in softmax(&[2.5, 2.5, 2.5]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        assert_eq!(softmax(&[0.0, f64::NEG_INFINITY]), vec![1.0, 0.0]);
    }

    #[test]
    fn poisson_pmf_sums_to_one() {
        let total: f64 = poisson_pmf(0.9, 60).iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spearman_of_reversed_sequence_is_minus_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [0.9, 0.5, 0.2, 0.1];
        assert!((spearman(&x, &y) + 1.0).abs() < 1e-12);
    }
}
