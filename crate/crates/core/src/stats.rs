//! Descriptive statistics for latency samples.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (n - 1 denominator); zero for one sample.
pub fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile by linear interpolation between order statistics,
/// `h = (n - 1) p` (the default of R and NumPy).
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    Some(quantile_sorted(&sorted(xs), p))
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Summary> {
        let v = sorted(xs);
        Some(Summary {
            n: v.len(),
            mean: mean(&v)?,
            median: quantile_sorted(&v, 0.5),
            std: std_dev(&v)?,
            min: *v.first()?,
            max: *v.last()?,
        })
    }
}

/// Box plot with whiskers at the most extreme samples within 1.5 IQR of the
/// quartiles; samples beyond are outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boxplot {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

impl Boxplot {
    pub fn of(xs: &[f64]) -> Option<Boxplot> {
        if xs.is_empty() {
            return None;
        }
        let v = sorted(xs);
        let q1 = quantile_sorted(&v, 0.25);
        let q3 = quantile_sorted(&v, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = || v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x));
        Some(Boxplot {
            min: v[0],
            q1,
            median: quantile_sorted(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            lower_whisker: inside().next().unwrap_or(q1),
            upper_whisker: inside().next_back().unwrap_or(q3),
            outliers: v.iter().copied().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert_eq!(mean(&xs), Some(5.0));
        assert!((std_dev(&xs).unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&xs), Some(4.5));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), Some(1.75));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(std_dev(&[3.0]), Some(0.0));
        assert_eq!(mean(&[]), None);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn boxplot_outliers() {
        let mut xs: Vec<f64> = (1..=20).map(f64::from).collect();
        xs.push(100.0);
        let b = Boxplot::of(&xs).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.upper_whisker, 20.0);
        assert_eq!(b.lower_whisker, 1.0);
        assert_eq!(b.max, 100.0);
    }

    proptest! {
        #[test]
        fn order_invariants(xs in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let b = Boxplot::of(&xs).unwrap();
            prop_assert!(b.min <= b.lower_whisker && b.lower_whisker <= b.q1.max(b.lower_whisker));
            prop_assert!(b.q1 <= b.median && b.median <= b.q3);
            prop_assert!(b.upper_whisker <= b.max);
            let inside = xs.len() - b.outliers.len();
            prop_assert!(inside >= 1);
            let s = Summary::of(&xs).unwrap();
            prop_assert!(s.std >= 0.0);
            prop_assert!(s.min <= s.mean + 1e-6 && s.mean <= s.max + 1e-6);
        }
    }
}
