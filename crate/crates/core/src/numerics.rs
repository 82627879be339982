//! Logit link, multi-class logistic loss and its per-example derivatives.
//!
//! Scores `F` and probabilities `p` are plain `&[f64]` slices of length `K`.
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to `p_y` inside the logarithm when reporting loss.
pub const LOSS_PROB_FLOOR: f64 = 1e-15;

/// A class label in `1..=K`.
///
/// Stored 1-based; [`ClassLabel::index`] gives the 0-based position used for
/// indexing score and probability vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(u32);

impl ClassLabel {
    pub fn new(value: u32, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if value == 0 || value as usize > num_classes {
            return Err(Error::InvalidInput(format!(
                "class label {value} outside 1..={num_classes}"
            )));
        }
        Ok(Self(value))
    }

    /// Label for the 0-based class position `index`.
    #[inline]
    pub fn from_index(index: usize) -> Self {
        Self(index as u32 + 1)
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major `N x K` matrix of per-example vectors (scores or probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged score rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Compensated (Neumaier) summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Probability vector for scores `f` under the logit link.
///
/// Uses max-subtraction, so large scores do not overflow.
pub fn link(f: &[f64]) -> Result<Vec<f64>> {
    if f.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "score vector needs at least 2 classes, got {}",
            f.len()
        )));
    }
    if let Some(bad) = f.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {bad}")));
    }
    let mut p = vec![0.0; f.len()];
    link_into(f, &mut p);
    Ok(p)
}

/// Unchecked [`link`] writing into `p`; `f` must be finite.
#[inline]
pub fn link_into(f: &[f64], p: &mut [f64]) {
    let c = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (pk, &fk) in p.iter_mut().zip(f) {
        *pk = (fk - c).exp();
        z += *pk;
    }
    let inv = 1.0 / z;
    for pk in p.iter_mut() {
        *pk *= inv;
    }
}

/// Recompute every row of `probs` from the matching row of `scores`.
pub fn link_rows(scores: &ScoreMatrix, probs: &mut ScoreMatrix) {
    debug_assert_eq!(scores.rows(), probs.rows());
    for i in 0..scores.rows() {
        link_into(scores.row(i), probs.row_mut(i));
    }
}

/// Logistic loss `-log p_y` of one example, with `p_y` floored at [`LOSS_PROB_FLOOR`].
pub fn sample_loss(y: ClassLabel, f: &[f64]) -> f64 {
    let c = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = f.iter().map(|&fk| (fk - c).exp()).sum();
    let py = (f[y.index()] - c).exp() / z;
    -py.max(LOSS_PROB_FLOOR).ln()
}

/// Sum of [`sample_loss`] over all examples.
pub fn total_loss(labels: &[ClassLabel], scores: &ScoreMatrix) -> f64 {
    debug_assert_eq!(labels.len(), scores.rows());
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| sample_loss(y, scores.row(i)))
        .collect::<CompensatedSum>()
        .value()
}

/// Recompute `probs` from `scores` and return the total loss.
///
/// The loss is bitwise equal to [`total_loss`]; the exponentials are shared.
pub fn link_rows_with_loss(labels: &[ClassLabel], scores: &ScoreMatrix, probs: &mut ScoreMatrix) -> f64 {
    debug_assert_eq!(labels.len(), scores.rows());
    let mut total = CompensatedSum::default();
    for (i, &y) in labels.iter().enumerate() {
        let f = scores.row(i);
        let p = probs.row_mut(i);
        let c = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pk, &fk) in p.iter_mut().zip(f) {
            *pk = (fk - c).exp();
            z += *pk;
        }
        total.add(-(p[y.index()] / z).max(LOSS_PROB_FLOOR).ln());
        let inv = 1.0 / z;
        for pk in p.iter_mut() {
            *pk *= inv;
        }
    }
    total.value()
}

/// `g_i = r_i - p_i` where `r_i` is the one-hot encoding of `y`.
pub fn sample_gradient(y: ClassLabel, p: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = p.iter().map(|&pk| -pk).collect();
    g[y.index()] += 1.0;
    g
}

/// `H_i = diag(p) - p p^T`, returned row-major `K x K`.
pub fn sample_hessian(p: &[f64]) -> Vec<f64> {
    let k = p.len();
    let mut h = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            h[a * k + b] = if a == b { p[a] - p[a] * p[a] } else { -p[a] * p[b] };
        }
    }
    h
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn label(v: u32) -> ClassLabel {
        ClassLabel::from_index(v as usize - 1)
    }

    #[test]
    fn link_examples() {
        let p = link(&[0.0, 0.0, 0.0]).unwrap();
        for pk in &p {
            assert_abs_diff_eq!(*pk, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = link(&[7.5; 4]).unwrap();
        for pk in &p {
            assert_abs_diff_eq!(*pk, 0.25, epsilon = 1e-15);
        }
        let p = link(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn link_rejects_non_finite_and_short_input() {
        assert!(link(&[0.0, f64::NAN]).is_err());
        assert!(link(&[f64::INFINITY, 0.0]).is_err());
        assert!(link(&[0.0]).is_err());
    }

    #[test]
    fn link_survives_huge_scores() {
        let p = link(&[1000.0, -1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_examples() {
        assert_abs_diff_eq!(
            sample_loss(label(1), &[0.0, 0.0]),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(sample_loss(label(2), &[0.0, 0.0, 0.0]), 1.098612, epsilon = 1e-6);
        assert_abs_diff_eq!(sample_loss(label(1), &[2f64.ln(), 0.0]), 0.405465, epsilon = 1e-6);
    }

    #[test]
    fn loss_is_clamped() {
        let l = sample_loss(label(2), &[800.0, -800.0]);
        assert_abs_diff_eq!(l, -LOSS_PROB_FLOOR.ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let labels = vec![label(1); 7];
        let scores = ScoreMatrix::zeros(7, 4);
        assert_abs_diff_eq!(total_loss(&labels, &scores), 7.0 * 4f64.ln(), epsilon = 1e-12);
        assert_eq!(total_loss(&[], &ScoreMatrix::zeros(0, 3)), 0.0);

        let scores = ScoreMatrix::from_rows(&[vec![2f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(total_loss(&[label(1), label(2)], &scores), 1.098612, epsilon = 1e-6);
    }

    #[test]
    fn gradient_examples() {
        let third = 1.0 / 3.0;
        let g = sample_gradient(label(1), &[third; 3]);
        assert_abs_diff_eq!(g[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -third, epsilon = 1e-15);
        assert_abs_diff_eq!(g[2], -third, epsilon = 1e-15);
        assert_eq!(sample_gradient(label(2), &[0.0, 1.0, 0.0]), vec![0.0; 3]);
        let g = sample_gradient(label(1), &[0.5, 0.3, 0.2]);
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[2], -0.2, epsilon = 1e-15);
    }

    #[test]
    fn hessian_examples() {
        assert_eq!(sample_hessian(&[1.0, 0.0]), vec![0.0; 4]);
        let h = sample_hessian(&[0.5, 0.5]);
        for (got, want) in h.iter().zip([0.25, -0.25, -0.25, 0.25]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        let h = sample_hessian(&[1.0 / 3.0; 3]);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 2.0 / 9.0 } else { -1.0 / 9.0 };
                assert_abs_diff_eq!(h[a * 3 + b], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let xs: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(1e-16, 10_000)).collect();
        let s: CompensatedSum = xs.iter().copied().collect();
        assert_abs_diff_eq!(s.value(), 1.0 + 1e-12, epsilon = 1e-15);
    }

    // Random probability vector with some exact zeros, K in 2..=6.
    fn prob_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0.0f64..1.0, prop::bool::weighted(0.8)), 2..=6).prop_filter_map(
            "need a non-zero entry",
            |raw| {
                let w: Vec<f64> = raw.iter().map(|&(x, keep)| if keep { x } else { 0.0 }).collect();
                let z: f64 = w.iter().sum();
                (z > 1e-3).then(|| w.iter().map(|x| x / z).collect())
            },
        )
    }

    fn scores_and_label() -> impl Strategy<Value = (Vec<f64>, usize)> {
        prop::collection::vec(-8.0f64..8.0, 2..=7).prop_flat_map(|f| {
            let k = f.len();
            (Just(f), 0..k)
        })
    }

    /// Jacobi eigenvalues of a symmetric matrix, used for the rank check.
    fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    /// Random sum-to-zero direction of unit length.
    fn centered(v: &[f64]) -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.iter().map(|x| x / norm).collect()
    }

    proptest! {
        #[test]
        fn loss_shift_invariance((f, y) in scores_and_label(), c in -50.0f64..50.0) {
            let y = ClassLabel::from_index(y);
            let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
            let a = sample_loss(y, &f);
            let b = sample_loss(y, &shifted);
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn fused_refresh_matches_separate_passes(rows in prop::collection::vec(scores_and_label(), 1..6)) {
            let k = rows[0].0.len();
            let rows: Vec<_> = rows.into_iter().filter(|(f, _)| f.len() == k).collect();
            let labels: Vec<ClassLabel> = rows.iter().map(|(_, y)| ClassLabel::from_index(*y)).collect();
            let scores = ScoreMatrix::from_rows(&rows.iter().map(|(f, _)| f.clone()).collect::<Vec<_>>()).unwrap();
            let mut fused = ScoreMatrix::zeros(scores.rows(), k);
            let mut plain = ScoreMatrix::zeros(scores.rows(), k);
            let loss = link_rows_with_loss(&labels, &scores, &mut fused);
            link_rows(&scores, &mut plain);
            prop_assert_eq!(loss, total_loss(&labels, &scores));
            prop_assert_eq!(fused, plain);
        }

        #[test]
        fn probabilities_sum_to_one(f in prop::collection::vec(-30.0f64..30.0, 2..=8)) {
            let p = link(&f).unwrap();
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn gradient_sums_to_zero((f, y) in scores_and_label()) {
            let p = link(&f).unwrap();
            let g = sample_gradient(ClassLabel::from_index(y), &p);
            prop_assert!(g.iter().sum::<f64>().abs() <= 1e-12);
        }

        #[test]
        fn hessian_null_direction(p in prob_vector()) {
            let k = p.len();
            let h = sample_hessian(&p);
            for a in 0..k {
                let row: f64 = (0..k).map(|b| h[a * k + b]).sum();
                prop_assert!(row.abs() <= 1e-12);
                for b in 0..k {
                    prop_assert_eq!(h[a * k + b], h[b * k + a]);
                }
            }
        }

        #[test]
        fn hessian_is_psd(p in prob_vector(), x in prop::collection::vec(-5.0f64..5.0, 6)) {
            let k = p.len();
            let x = &x[..k];
            let h = sample_hessian(&p);
            let mut quad = 0.0;
            for a in 0..k {
                for b in 0..k {
                    quad += x[a] * h[a * k + b] * x[b];
                }
            }
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!(quad >= -1e-12 * norm2);
        }

        #[test]
        fn hessian_rank_is_support_minus_one(p in prob_vector()) {
            let k = p.len();
            let kappa = p.iter().filter(|&&v| v > 0.0).count();
            let eig = symmetric_eigenvalues(sample_hessian(&p), k);
            let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let rank = eig.iter().filter(|v| v.abs() > 1e-9 * max).count();
            prop_assert_eq!(rank, kappa - 1);
        }

        #[test]
        fn gradient_matches_finite_differences(
            (f, y) in scores_and_label(),
            dir in prop::collection::vec(-1.0f64..1.0, 7),
        ) {
            let k = f.len();
            let d = centered(&dir[..k]);
            prop_assume!(d.iter().all(|v| v.is_finite()));
            let y = ClassLabel::from_index(y);
            let step = 1e-5;
            let at = |s: f64| {
                let moved: Vec<f64> = f.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                sample_loss(y, &moved)
            };
            prop_assume!(at(0.0) < 30.0);
            let numeric = (at(step) - at(-step)) / (2.0 * step);
            let g = sample_gradient(y, &link(&f).unwrap());
            let analytic: f64 = -g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
            prop_assert!(
                (numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3),
                "numeric {numeric} analytic {analytic}"
            );
        }

        #[test]
        fn hessian_matches_finite_differences(
            (f, y) in scores_and_label(),
            dir in prop::collection::vec(-1.0f64..1.0, 7),
        ) {
            let k = f.len();
            let d = centered(&dir[..k]);
            prop_assume!(d.iter().all(|v| v.is_finite()));
            let y = ClassLabel::from_index(y);
            let step = 1e-3;
            let at = |s: f64| {
                let moved: Vec<f64> = f.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                sample_loss(y, &moved)
            };
            prop_assume!(at(0.0) < 30.0);
            let numeric = (at(step) - 2.0 * at(0.0) + at(-step)) / (step * step);
            let h = sample_hessian(&link(&f).unwrap());
            let mut analytic = 0.0;
            for a in 0..k {
                for b in 0..k {
                    analytic += d[a] * h[a * k + b] * d[b];
                }
            }
            prop_assert!(
                (numeric - analytic).abs() <= 1e-4 * analytic.abs().max(1e-2),
                "numeric {numeric} analytic {analytic}"
            );
        }
    }
}
