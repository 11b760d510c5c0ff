//! Link functions mapping conditional category probabilities to logits.
//!
//! For an item with `l` categories and probability vector `lambda`, both
//! links can be written as `g(lambda) = C * log(M * lambda)` with a contrast
//! matrix `C = (-I | I)` and a marginal matrix `M` stacking the event sums
//! that enter each logit:
//!
//! * **Global** (cumulative): `eta_x = log P(X >= x) - log P(X < x)`,
//!   so `M` stacks lower and upper cumulative sums.
//! * **Local** (adjacent categories): `eta_x = log(lambda_x / lambda_{x-1})`,
//!   so `M` stacks pairs of adjacent selections.
//!
//! Both maps are bijections between the interior of the probability simplex
//! and their logit range; the global range is the set of strictly decreasing
//! logit vectors, the local range is all of `R^{l-1}`. For `l = 2` the two
//! links coincide, and both directions are routed through one shared binary
//! code path so they agree bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Logits are clamped to this magnitude before exponentiation so that
/// conditional probabilities stay strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 35.0;

/// Which parametrisation ties conditional probabilities to the latent trait.
///
/// `None` leaves the probabilities unconstrained (the classic latent-class
/// model); `Global` uses cumulative logits (graded-response type); `Local`
/// uses adjacent-category logits (partial-credit type).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    None,
    Global,
    Local,
}

impl LinkKind {
    pub fn is_none(self) -> bool {
        matches!(self, LinkKind::None)
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LinkKind::None => "none",
            LinkKind::Global => "global",
            LinkKind::Local => "local",
        };
        f.write_str(s)
    }
}

impl FromStr for LinkKind {
    type Err = String;

    /// Accepts both names and the conventional numeric codes
    /// (0 = none, 1 = global, 2 = local).
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "0" => Ok(LinkKind::None),
            "global" | "1" => Ok(LinkKind::Global),
            "local" | "2" => Ok(LinkKind::Local),
            other => Err(format!(
                "unknown link {other:?} (expected none|global|local or 0|1|2)"
            )),
        }
    }
}

/// Recoverable failures of the link maps. Infeasible logits signal an
/// invalid parameter point to the optimizer, which reacts by step-halving;
/// they are never a panic.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("need at least 2 categories, got {0}")]
    TooFewCategories(usize),

    #[error("probability component {index} is {value}, expected strictly positive and finite")]
    NonPositiveProbability { index: usize, value: f64 },

    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),

    #[error("cumulative logits must be strictly decreasing (violated at position {0})")]
    InfeasibleCumulative(usize),

    #[error("logit at position {0} is not finite")]
    NonFiniteLogit(usize),

    #[error("link Jacobian is singular at this probability vector")]
    SingularJacobian,

    #[error("the unconstrained model has no link function")]
    Unlinked,
}

/// The matrix pair `(C, M)` of the representation `g(lambda) = C log(M lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMatrices {
    /// `(l-1) x 2(l-1)` contrast matrix `(-I | I)`.
    pub contrast: DMatrix<f64>,
    /// `2(l-1) x l` marginal matrix; rows hold the event sums of each logit,
    /// denominators first.
    pub marginal: DMatrix<f64>,
}

/// Builds the `(C, M)` pair for an item with `n_cats` categories.
pub fn link_matrices(n_cats: usize, kind: LinkKind) -> Result<LinkMatrices, LinkError> {
    if n_cats < 2 {
        return Err(LinkError::TooFewCategories(n_cats));
    }
    let q = n_cats - 1;
    let mut contrast = DMatrix::zeros(q, 2 * q);
    for x in 0..q {
        contrast[(x, x)] = -1.0;
        contrast[(x, q + x)] = 1.0;
    }
    let mut marginal = DMatrix::zeros(2 * q, n_cats);
    for x in 0..q {
        match kind {
            LinkKind::Global => {
                // row x: P(X < x+1); row q+x: P(X >= x+1)
                for y in 0..=x {
                    marginal[(x, y)] = 1.0;
                }
                for y in (x + 1)..n_cats {
                    marginal[(q + x, y)] = 1.0;
                }
            }
            LinkKind::Local => {
                marginal[(x, x)] = 1.0;
                marginal[(q + x, x + 1)] = 1.0;
            }
            LinkKind::None => return Err(LinkError::Unlinked),
        }
    }
    Ok(LinkMatrices { contrast, marginal })
}

fn validate_probs(lambda: &[f64]) -> Result<(), LinkError> {
    if lambda.len() < 2 {
        return Err(LinkError::TooFewCategories(lambda.len()));
    }
    for (index, &value) in lambda.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(LinkError::NonPositiveProbability { index, value });
        }
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LinkError::NotNormalized(sum));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(a) - sigmoid(b)` for `a > b` without cancellation.
fn sigmoid_diff(a: f64, b: f64) -> f64 {
    let u = (-a).exp();
    let v = (-b).exp();
    -v * (b - a).exp_m1() / ((1.0 + u) * (1.0 + v))
}

/// Maps a probability vector to its `l - 1` logits.
pub fn probs_to_logits(lambda: &[f64], kind: LinkKind) -> Result<DVector<f64>, LinkError> {
    if kind.is_none() {
        return Err(LinkError::Unlinked);
    }
    validate_probs(lambda)?;
    let l = lambda.len();
    if l == 2 {
        // Cumulative and adjacent logits are the same quantity here.
        return Ok(DVector::from_element(1, (lambda[1] / lambda[0]).ln()));
    }
    let mut eta = DVector::zeros(l - 1);
    match kind {
        LinkKind::Global => {
            // upper[x] = P(X >= x) accumulated from the tail, lower from the head
            let mut upper = vec![0.0; l + 1];
            for x in (0..l).rev() {
                upper[x] = upper[x + 1] + lambda[x];
            }
            let mut lower = 0.0;
            for x in 1..l {
                lower += lambda[x - 1];
                eta[x - 1] = (upper[x] / lower).ln();
            }
        }
        LinkKind::Local => {
            for x in 1..l {
                eta[x - 1] = (lambda[x] / lambda[x - 1]).ln();
            }
        }
        LinkKind::None => unreachable!(),
    }
    Ok(eta)
}

/// Inverts the link: recovers the probability vector from `l - 1` logits.
///
/// Logits are clamped to `±LOGIT_CLAMP` first. For the global link the
/// (clamped) logits must be strictly decreasing; anything else is reported
/// as [`LinkError::InfeasibleCumulative`] so the caller can shorten its step.
pub fn logits_to_probs(eta: &[f64], kind: LinkKind) -> Result<DVector<f64>, LinkError> {
    if kind.is_none() {
        return Err(LinkError::Unlinked);
    }
    if eta.is_empty() {
        return Err(LinkError::TooFewCategories(1));
    }
    for (i, e) in eta.iter().enumerate() {
        if !e.is_finite() {
            return Err(LinkError::NonFiniteLogit(i));
        }
    }
    let eta: Vec<f64> = eta.iter().map(|e| e.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
    let l = eta.len() + 1;
    if l == 2 {
        return Ok(DVector::from_column_slice(&[sigmoid(-eta[0]), sigmoid(eta[0])]));
    }
    match kind {
        LinkKind::Global => {
            for x in 1..eta.len() {
                if !(eta[x] < eta[x - 1]) {
                    return Err(LinkError::InfeasibleCumulative(x));
                }
            }
            let mut lam = DVector::zeros(l);
            lam[0] = sigmoid(-eta[0]);
            lam[l - 1] = sigmoid(eta[l - 2]);
            for x in 1..(l - 1) {
                lam[x] = sigmoid_diff(eta[x - 1], eta[x]);
            }
            Ok(lam)
        }
        LinkKind::Local => {
            // canonical log-ratios against category 0, then a stable softmax
            let mut canon = vec![0.0; l];
            for x in 1..l {
                canon[x] = canon[x - 1] + eta[x - 1];
            }
            let max = canon.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut lam = DVector::from_iterator(l, canon.iter().map(|&c| (c - max).exp()));
            let total: f64 = lam.iter().sum();
            lam /= total;
            Ok(lam)
        }
        LinkKind::None => unreachable!(),
    }
}

/// Derivative matrix `R` of the canonical log-ratios `log(lambda_x / lambda_0)`
/// with respect to the logits, evaluated at `lambda`.
///
/// `R` is the inverse Jacobian of `g(lambda(c)) = C log(M lambda(c))` taken
/// with respect to the canonical parameters `c`. For the local link this is
/// the lower-triangular matrix of ones, exactly; for the global link it is
/// computed from the `(C, M)` representation and inverted. For two
/// categories both links give the 1x1 identity.
pub fn derivative_matrix(lambda: &[f64], kind: LinkKind) -> Result<DMatrix<f64>, LinkError> {
    if kind.is_none() {
        return Err(LinkError::Unlinked);
    }
    validate_probs(lambda)?;
    let l = lambda.len();
    let q = l - 1;
    if l == 2 {
        return Ok(DMatrix::identity(1, 1));
    }
    match kind {
        LinkKind::Local => Ok(DMatrix::from_fn(q, q, |r, c| if c <= r { 1.0 } else { 0.0 })),
        LinkKind::Global => {
            let lm = link_matrices(l, kind)?;
            let lam = DVector::from_column_slice(lambda);
            let mlam = &lm.marginal * &lam;
            // d lambda / d c_y for y = 1..l-1: lambda_z (1{z=y} - lambda_y)
            let dldc = DMatrix::from_fn(l, q, |z, y| {
                lam[z] * (if z == y + 1 { 1.0 } else { 0.0 } - lam[y + 1])
            });
            let mut a = &lm.marginal * &dldc;
            for r in 0..2 * q {
                for c in 0..q {
                    a[(r, c)] /= mlam[r];
                }
            }
            let jac = &lm.contrast * &a;
            jac.lu().try_inverse().ok_or(LinkError::SingularJacobian)
        }
        LinkKind::None => unreachable!(),
    }
}
