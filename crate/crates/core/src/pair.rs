//! The two-coordinate node subproblem.
//!
//! A node's second-order loss model restricted to `t_r = t, t_s = -t` is a
//! scalar quadratic `g t + h t^2 / 2`. This module holds the aggregate node
//! statistics it is built from, the closed-form step and gain, and the two
//! rules for choosing the pair `(r, s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ClassLabel;

/// Guard on `h` (and on the pair-selection denominator) below which a node is
/// treated as pure: zero step, zero gain.
pub const DEFAULT_EPS: f64 = 1e-12;

/// An ordered class pair; the node vector is `+t` at `r` and `-t` at `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassPair {
    r: ClassLabel,
    s: ClassLabel,
}

impl ClassPair {
    pub fn new(r: ClassLabel, s: ClassLabel) -> Result<Self> {
        if r == s {
            return Err(Error::InvalidInput(format!(
                "class pair needs two distinct classes, got ({r}, {r})"
            )));
        }
        Ok(Self { r, s })
    }

    /// Pair from 0-based class positions. Panics if they coincide.
    pub fn from_indices(r: usize, s: usize) -> Self {
        assert_ne!(r, s, "class pair needs two distinct classes");
        Self {
            r: ClassLabel::from_index(r),
            s: ClassLabel::from_index(s),
        }
    }

    #[inline]
    pub fn r(self) -> ClassLabel {
        self.r
    }

    #[inline]
    pub fn s(self) -> ClassLabel {
        self.s
    }
}

/// Which rule picks the class pair of a node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// Largest and smallest aggregate residual.
    FirstOrder,
    /// Largest residual, then the partner with the best single-pair Newton decrease.
    #[default]
    SecondOrder,
}

/// Row `r` of the aggregate cross-product matrix: `values[k] = sum_i p_ir * p_ik`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossRow {
    pub class: usize,
    pub values: Vec<f64>,
}

/// Sufficient statistics of the examples in a node.
///
/// * `gbar[k] = sum_i (r_ik - p_ik)` (the negated node gradient),
/// * `psum[k] = sum_i p_ik`,
/// * `psq[k] = sum_i p_ik^2` (diagonal of the cross-product matrix),
/// * an optional single cross-product row, attached on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    n: usize,
    gbar: Vec<f64>,
    psum: Vec<f64>,
    psq: Vec<f64>,
    cross: Option<CrossRow>,
}

impl NodeStats {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: 0,
            gbar: vec![0.0; num_classes],
            psum: vec![0.0; num_classes],
            psq: vec![0.0; num_classes],
            cross: None,
        }
    }

    /// Statistics of a node, with the cross row of its top class attached.
    ///
    /// `examples` yields `(label, probability row)` and is walked twice.
    pub fn for_node<'a, I>(num_classes: usize, examples: I) -> Self
    where
        I: IntoIterator<Item = (ClassLabel, &'a [f64])> + Clone,
    {
        let mut stats = Self::new(num_classes);
        for (y, p) in examples.clone() {
            stats.add(y, p);
        }
        let r = stats.top_class();
        stats.attach_cross_row(r, examples.into_iter().map(|(_, p)| p));
        stats
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_classes(&self) -> usize {
        self.gbar.len()
    }

    pub fn gbar(&self) -> &[f64] {
        &self.gbar
    }

    pub fn psum(&self) -> &[f64] {
        &self.psum
    }

    pub fn psq(&self) -> &[f64] {
        &self.psq
    }

    pub fn cross_row(&self) -> Option<&CrossRow> {
        self.cross.as_ref()
    }

    /// Add one example in `O(K)`.
    pub fn add(&mut self, y: ClassLabel, p: &[f64]) {
        debug_assert_eq!(p.len(), self.gbar.len());
        self.n += 1;
        for (k, &pk) in p.iter().enumerate() {
            self.gbar[k] -= pk;
            self.psum[k] += pk;
            self.psq[k] += pk * pk;
        }
        self.gbar[y.index()] += 1.0;
        if let Some(cross) = &mut self.cross {
            let pr = p[cross.class];
            for (c, &pk) in cross.values.iter_mut().zip(p) {
                *c += pr * pk;
            }
        }
    }

    /// Inverse of [`NodeStats::add`].
    pub fn remove(&mut self, y: ClassLabel, p: &[f64]) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invariant("remove from empty node statistics".into()));
        }
        self.n -= 1;
        for (k, &pk) in p.iter().enumerate() {
            self.gbar[k] += pk;
            self.psum[k] -= pk;
            self.psq[k] -= pk * pk;
        }
        self.gbar[y.index()] -= 1.0;
        if let Some(cross) = &mut self.cross {
            let pr = p[cross.class];
            for (c, &pk) in cross.values.iter_mut().zip(p) {
                *c -= pr * pk;
            }
        }
        Ok(())
    }

    /// Compute the cross-product row for class position `r` from the same
    /// probability rows that built these statistics.
    pub fn attach_cross_row<'a>(&mut self, r: usize, probs: impl IntoIterator<Item = &'a [f64]>) {
        let mut values = vec![0.0; self.gbar.len()];
        for p in probs {
            let pr = p[r];
            for (c, &pk) in values.iter_mut().zip(p) {
                *c += pr * pk;
            }
        }
        self.cross = Some(CrossRow { class: r, values });
    }

    /// Class position with the largest `gbar` (lowest index on ties).
    pub fn top_class(&self) -> usize {
        crate::numerics::argmax(&self.gbar)
    }

    /// `sum_i p_ia * p_ib`, if the attached cross row covers `a` or `b`.
    fn cross(&self, a: usize, b: usize) -> Option<f64> {
        let row = self.cross.as_ref()?;
        if row.class == a {
            Some(row.values[b])
        } else if row.class == b {
            Some(row.values[a])
        } else {
            None
        }
    }

    /// Pair Hessian `h` for class positions `(a, b)`; needs the cross row of `a` or `b`.
    pub fn pair_hessian(&self, a: usize, b: usize) -> Result<f64> {
        let cross = self
            .cross(a, b)
            .ok_or_else(|| Error::Invariant(format!("no cross-product row for class {} or {}", a + 1, b + 1)))?;
        Ok((self.psum[a] - self.psq[a]) + (self.psum[b] - self.psq[b]) + 2.0 * cross)
    }
}

/// Scalar gradient of the pair subproblem: `g = -(gbar_r - gbar_s)`.
pub fn scalar_gradient(stats: &NodeStats, pair: ClassPair) -> f64 {
    -(stats.gbar[pair.r.index()] - stats.gbar[pair.s.index()])
}

/// Scalar Hessian of the pair subproblem,
/// `h = sum_i p_ir(1-p_ir) + p_is(1-p_is) + 2 p_ir p_is`.
pub fn scalar_hessian(stats: &NodeStats, pair: ClassPair) -> Result<f64> {
    stats.pair_hessian(pair.r.index(), pair.s.index())
}

/// Closed-form solution of `min_t g t + h t^2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSolution {
    pub g: f64,
    pub h: f64,
    pub tstar: f64,
    pub gain: f64,
}

/// Newton decrease `g^2 / (2h)`, zero when `h <= eps`.
#[inline]
pub fn newton_gain(g: f64, h: f64, eps: f64) -> f64 {
    if h <= eps {
        0.0
    } else {
        g * g / (2.0 * h)
    }
}

/// Newton step `-g / h`, zero when `h <= eps`.
#[inline]
pub fn newton_step(g: f64, h: f64, eps: f64) -> f64 {
    if h <= eps {
        0.0
    } else {
        -g / h
    }
}

pub fn solve_pair(g: f64, h: f64, eps: f64) -> Result<PairSolution> {
    if h < 0.0 || h.is_nan() {
        return Err(Error::Invariant(format!("negative pair Hessian {h}")));
    }
    Ok(PairSolution {
        g,
        h,
        tstar: newton_step(g, h, eps),
        gain: newton_gain(g, h, eps),
    })
}

/// `r = argmax gbar`, `s = argmin gbar` over `k != r`.
pub fn select_pair_first_order(stats: &NodeStats) -> ClassPair {
    let r = stats.top_class();
    let mut s = usize::from(r == 0);
    for k in 0..stats.gbar.len() {
        if k != r && stats.gbar[k] < stats.gbar[s] {
            s = k;
        }
    }
    ClassPair::from_indices(r, s)
}

/// `r = argmax gbar`, `s = argmax_{k != r} (gbar_r - gbar_k)^2 / h(r, k)`.
///
/// Needs the cross row of `r` (see [`NodeStats::for_node`]). A denominator at
/// or below `eps` scores as minus infinity; ties go to the lowest index.
pub fn select_pair_second_order(stats: &NodeStats, eps: f64) -> Result<ClassPair> {
    let r = stats.top_class();
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..stats.gbar.len() {
        if k == r {
            continue;
        }
        let h = stats.pair_hessian(r, k)?;
        let score = if h <= eps {
            f64::NEG_INFINITY
        } else {
            let d = stats.gbar[r] - stats.gbar[k];
            d * d / h
        };
        if best.is_none() || score > best_score {
            best = Some(k);
            best_score = score;
        }
    }
    Ok(ClassPair::from_indices(r, best.expect("at least two classes")))
}

pub fn select_pair(stats: &NodeStats, rule: PairRule, eps: f64) -> Result<ClassPair> {
    match rule {
        PairRule::FirstOrder => Ok(select_pair_first_order(stats)),
        PairRule::SecondOrder => select_pair_second_order(stats, eps),
    }
}

/// Running `(n, g, h)` for one fixed scalar objective; the `O(1)` path of the split scan.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScalarAccumulator {
    pub n: usize,
    pub g: f64,
    pub h: f64,
}

impl ScalarAccumulator {
    #[inline]
    pub fn add(&mut self, g: f64, h: f64) {
        self.n += 1;
        self.g += g;
        self.h += h;
    }

    #[inline]
    pub fn remove(&mut self, g: f64, h: f64) {
        debug_assert!(self.n > 0);
        self.n -= 1;
        self.g -= g;
        self.h -= h;
    }

    #[inline]
    pub fn gain(&self, eps: f64) -> f64 {
        newton_gain(self.g, self.h, eps)
    }
}

/// Per-example contribution `(g_i, h_i)` to the pair objective of `pair`.
#[inline]
pub fn pair_terms(y: ClassLabel, p: &[f64], r: usize, s: usize) -> (f64, f64) {
    let yi = y.index();
    let rr = if yi == r { 1.0 } else { 0.0 };
    let rs = if yi == s { 1.0 } else { 0.0 };
    let (pr, ps) = (p[r], p[s]);
    let g = -((rr - pr) - (rs - ps));
    let h = pr * (1.0 - pr) + ps * (1.0 - ps) + 2.0 * pr * ps;
    (g, h)
}

/// Per-example contribution to the diagonal (single class) objective.
#[inline]
pub fn single_class_terms(y: ClassLabel, p: &[f64], k: usize) -> (f64, f64) {
    let rk = if y.index() == k { 1.0 } else { 0.0 };
    (-(rk - p[k]), p[k] * (1.0 - p[k]))
}
