//! Model comparison: likelihood-ratio tests, information criteria, and
//! model-based hierarchical clustering of items.
//!
//! Likelihood-ratio degrees of freedom are always the difference in free
//! parameter counts. [`compare_nested`] recognizes nesting along three axes
//! — constrained vs free discriminations, rating-scale vs free
//! difficulties, and a coarser dimension partition — applied jointly to
//! models that agree on everything else.
//!
//! [`class_item`] agglomerates items: starting from one dimension per item
//! it repeatedly fits every pairwise merge of current dimensions, adopts
//! the merge with the smallest deviance, and records it like a linkage
//! step, giving a dendrogram whose heights are the adopted deviances and a
//! per-step test of unidimensionality for the merged pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::data::ResponseMatrix;
use crate::design::{ItemParams, ModelSpec, ParameterSet};
use crate::error::Error;
use crate::estimation::{fit, FitOptions, FitResult, Start, StartPolicy};
use crate::simulate::mix;
use crate::Result;

/// Upper tail of the chi-square distribution; at zero degrees of freedom
/// the models are equivalent, so any positive deviance is evidence of a
/// numerical problem and gets probability 0.
pub fn chi_sq_sf(deviance: f64, df: usize) -> f64 {
    if df == 0 {
        return if deviance <= 0.0 { 1.0 } else { 0.0 };
    }
    if deviance <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, deviance / 2.0)
}

/// A likelihood-ratio comparison of a constrained model (0) against a more
/// general one (1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrTestResult {
    /// `-2 (lk0 - lk1)`, clamped below at 0.
    pub deviance: f64,
    /// `np1 - np0`.
    pub df: usize,
    pub p_value: f64,
    pub lk0: f64,
    pub lk1: f64,
    pub np0: usize,
    pub np1: usize,
}

fn lr_from(lk0: f64, np0: usize, lk1: f64, np1: usize) -> LrTestResult {
    let deviance = (-2.0 * (lk0 - lk1)).max(0.0);
    let df = np1 - np0;
    LrTestResult { deviance, df, p_value: chi_sq_sf(deviance, df), lk0, lk1, np0, np1 }
}

/// Does every group of `fine` sit inside a single group of `coarse`?
fn coarsens(coarse: &[Vec<usize>], fine: &[Vec<usize>]) -> bool {
    let n_items: usize = coarse.iter().map(|g| g.len()).sum();
    let mut coarse_of = vec![usize::MAX; n_items];
    for (d, group) in coarse.iter().enumerate() {
        for &j in group {
            coarse_of[j] = d;
        }
    }
    fine.iter().all(|group| {
        let d = coarse_of[group[0]];
        group.iter().all(|&j| coarse_of[j] == d)
    })
}

/// Tests a coarser dimension partition (`spec0`) against a finer one
/// (`spec1`); the specs must agree on everything but the partition. Both
/// models are fitted to `data` with `opts`.
pub fn test_dim(
    spec0: &ModelSpec,
    spec1: &ModelSpec,
    data: &ResponseMatrix,
    opts: &FitOptions,
) -> Result<(LrTestResult, FitResult, FitResult)> {
    spec0.validate()?;
    spec1.validate()?;
    if spec0.n_classes != spec1.n_classes
        || spec0.link != spec1.link
        || spec0.disc != spec1.disc
        || spec0.difl != spec1.difl
        || spec0.cats != spec1.cats
    {
        return Err(Error::NotNested(
            "dimensionality tests need models differing only in the item partition".into(),
        ));
    }
    if spec0.link.is_none() {
        return Err(Error::NotNested(
            "the unconstrained latent-class model has no dimension structure to test".into(),
        ));
    }
    if !coarsens(&spec0.multi, &spec1.multi) {
        return Err(Error::NotNested(
            "the first partition must merge whole groups of the second".into(),
        ));
    }
    let fit0 = fit(spec0, data, opts)?;
    let fit1 = fit(spec1, data, opts)?;
    let lr = lr_from(fit0.lk, fit0.np, fit1.lk, fit1.np);
    Ok((lr, fit0, fit1))
}

/// Likelihood-ratio test of `fit0` (constrained) against `fit1` (general)
/// for fitted models this crate recognizes as nested: equal class count,
/// link, and categories, with `fit0` at least as constrained in the
/// discriminations, the difficulties, and the item partition.
pub fn compare_nested(fit0: &FitResult, fit1: &FitResult) -> Result<LrTestResult> {
    let (s0, s1) = (&fit0.spec, &fit1.spec);
    if s0.cats != s1.cats || fit0.n != fit1.n {
        return Err(Error::NotComparable(
            "the fits describe different data sets".into(),
        ));
    }
    if s0.n_classes != s1.n_classes {
        return Err(Error::NotNested(
            "models with different class counts are not recognized as nested".into(),
        ));
    }
    if s0.link != s1.link {
        return Err(Error::NotNested(
            "models with different links are not recognized as nested".into(),
        ));
    }
    if s0.link.is_none() {
        // identical latent-class models: only the trivial nesting
        return Ok(lr_from(fit0.lk, fit0.np, fit1.lk, fit1.np));
    }
    use crate::design::{DiflConstraint, DiscConstraint};
    let disc_ok = s0.disc == s1.disc
        || (s0.disc == DiscConstraint::Constrained && s1.disc == DiscConstraint::Free);
    let difl_ok = s0.difl == s1.difl
        || (s0.difl == DiflConstraint::RatingScale && s1.difl == DiflConstraint::Free);
    if !disc_ok || !difl_ok || !coarsens(&s0.multi, &s1.multi) {
        return Err(Error::NotNested(
            "the first model must be the more constrained one on every axis".into(),
        ));
    }
    Ok(lr_from(fit0.lk, fit0.np, fit1.lk, fit1.np))
}

/// One row of a model-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfoRow {
    pub label: String,
    pub lk: f64,
    pub np: usize,
    pub aic: f64,
    pub bic: f64,
}

fn bic_order(a: &InfoRow, b: &InfoRow) -> std::cmp::Ordering {
    a.bic.total_cmp(&b.bic).then(a.np.cmp(&b.np))
}

/// Side-by-side comparison of fits of the same data, best BIC first (ties
/// go to the smaller model).
pub fn information_table(fits: &[&FitResult]) -> Result<Vec<InfoRow>> {
    if fits.is_empty() {
        return Err(Error::EmptyInput("no fits to tabulate".into()));
    }
    if fits.iter().any(|f| f.n != fits[0].n || f.spec.cats != fits[0].spec.cats) {
        return Err(Error::NotComparable(
            "information tables need fits of the same data".into(),
        ));
    }
    let mut rows: Vec<InfoRow> = fits
        .iter()
        .map(|f| InfoRow {
            label: f.spec.summary(),
            lk: f.lk,
            np: f.np,
            aic: f.aic,
            bic: f.bic,
        })
        .collect();
    rows.sort_by(bic_order);
    Ok(rows)
}

/// One agglomeration step of the item clustering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStep {
    /// The two merged clusters in linkage notation: `-(j+1)` is the
    /// singleton of item `j`, a positive id is the cluster formed at that
    /// (1-based) step. Singletons come first, then lower ids.
    pub merge: (i64, i64),
    /// Deviance of this merge against the previous step's model.
    pub height: f64,
    /// Log-likelihood of the adopted merged model.
    pub lk: f64,
    pub np: usize,
    /// Degrees of freedom of the merge (parameter-count difference).
    pub df: usize,
    pub p_value: f64,
    /// The partition after this merge, groups ordered by smallest item.
    #[serde(with = "crate::serde_util::one_based_nested")]
    pub groups: Vec<Vec<usize>>,
}

/// The full agglomeration history from one dimension per item down to a
/// single dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterTrace {
    pub n_items: usize,
    /// Log-likelihood and parameter count of the one-dimension-per-item
    /// baseline.
    pub initial_lk: f64,
    pub initial_np: usize,
    pub steps: Vec<ClusterStep>,
    /// Items in dendrogram leaf order.
    #[serde(with = "crate::serde_util::one_based")]
    pub order: Vec<usize>,
}

/// The spec with dimension groups `gi` and `gj` merged. Groups stay sorted
/// by smallest item, so the merged group keeps `gi`'s slot and the
/// reference item of the merged group is the smaller of the two old
/// references — whose constraints already hold.
fn merged_spec(spec: &ModelSpec, gi: usize, gj: usize) -> Result<ModelSpec> {
    let mut multi = spec.multi.clone();
    let mut merged: Vec<usize> = multi[gi].iter().chain(&multi[gj]).cloned().collect();
    merged.sort_unstable();
    multi[gi] = merged;
    multi.remove(gj);
    spec.with_multi(multi)
}

/// Parameters of the merged model warm-started from the current fit: the
/// two merged ability columns are averaged, everything else carries over.
fn warm_params(params: &ParameterSet, gi: usize, gj: usize) -> ParameterSet {
    let ItemParams::Irt { support, difficulties, discrimination } = &params.items else {
        unreachable!("clustering runs on linked models only");
    };
    let support = support
        .iter()
        .map(|row| {
            let mut out = Vec::with_capacity(row.len() - 1);
            for (d, &v) in row.iter().enumerate() {
                if d == gi {
                    out.push((v + row[gj]) / 2.0);
                } else if d != gj {
                    out.push(v);
                }
            }
            out
        })
        .collect();
    ParameterSet {
        pi: params.pi.clone(),
        items: ItemParams::Irt {
            support,
            difficulties: difficulties.clone(),
            discrimination: discrimination.clone(),
        },
    }
}

/// Linkage-notation pair ordering: singletons before clusters, singletons
/// by item, clusters by step id.
fn linkage_pair(a: i64, b: i64) -> (i64, i64) {
    match (a < 0, b < 0) {
        (true, true) => {
            if a.abs() <= b.abs() {
                (a, b)
            } else {
                (b, a)
            }
        }
        (true, false) => (a, b),
        (false, true) => (b, a),
        (false, false) => {
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        }
    }
}

/// Leaves of the final cluster, left to right.
fn leaf_order(steps: &[ClusterStep]) -> Vec<usize> {
    fn expand(code: i64, steps: &[ClusterStep], out: &mut Vec<usize>) {
        if code < 0 {
            out.push((-code - 1) as usize);
        } else {
            let step = &steps[code as usize - 1];
            expand(step.merge.0, steps, out);
            expand(step.merge.1, steps, out);
        }
    }
    let mut out = Vec::new();
    if !steps.is_empty() {
        expand(steps.len() as i64, steps, &mut out);
    }
    out
}

/// Hierarchical clustering of items by repeated dimension merging.
///
/// `spec` is the one-dimension-per-item baseline; at every step each pair
/// of current dimensions is merged and refitted (warm-started from the
/// adopted model, plus one random start derived from `seed`), the pair
/// with the smallest deviance is adopted — ties go to the pair first in
/// item order — and the merge is recorded with its deviance as height.
pub fn class_item(
    spec: &ModelSpec,
    data: &ResponseMatrix,
    opts: &FitOptions,
    seed: u64,
) -> Result<ClusterTrace> {
    spec.validate()?;
    if spec.link.is_none() {
        return Err(Error::InvalidSpec(
            "item clustering needs a linked model".into(),
        ));
    }
    if spec.n_classes < 2 {
        return Err(Error::InvalidSpec(
            "item clustering needs at least two latent classes".into(),
        ));
    }
    let r = spec.n_items();
    if r < 2 {
        return Err(Error::InvalidSpec("item clustering needs at least two items".into()));
    }
    let singles: Vec<Vec<usize>> = (0..r).map(|j| vec![j]).collect();
    if spec.multi != singles {
        return Err(Error::InvalidSpec(
            "item clustering starts from the model with one dimension per item, \
             in item order"
                .into(),
        ));
    }

    let mut current = fit(spec, data, opts)?;
    let initial_lk = current.lk;
    let initial_np = current.np;
    // linkage code of each current dimension group
    let mut codes: Vec<i64> = (0..r).map(|j| -(j as i64 + 1)).collect();
    let mut steps: Vec<ClusterStep> = Vec::with_capacity(r - 1);

    for step_idx in 0..(r - 1) {
        let spec_now = &current.spec;
        let s = spec_now.n_dims();
        let pairs: Vec<(u64, usize, usize)> = (0..s)
            .flat_map(|gi| ((gi + 1)..s).map(move |gj| (gi, gj)))
            .enumerate()
            .map(|(counter, (gi, gj))| (counter as u64, gi, gj))
            .collect();
        // Candidate fits are independent, so they run in parallel; seeds
        // depend only on (step, pair) and the reduction below walks the
        // results in pair order, keeping the outcome thread-count invariant.
        let fits: Vec<Result<(f64, FitResult)>> = pairs
            .par_iter()
            .map(|&(counter, gi, gj)| {
                let cand_spec = merged_spec(spec_now, gi, gj)?;
                let warm = warm_params(&current.params, gi, gj);
                let cand_seed = mix(seed ^ mix(((step_idx as u64) << 32) | counter));
                let cand_opts = FitOptions {
                    start: StartPolicy {
                        starts: vec![
                            Start::Supplied(std::sync::Arc::new(warm)),
                            Start::Seed(cand_seed),
                        ],
                    },
                    ..opts.clone()
                };
                let cand = fit(&cand_spec, data, &cand_opts)?;
                let dev = (-2.0 * (cand.lk - current.lk)).max(0.0);
                Ok((dev, cand))
            })
            .collect();
        let mut best: Option<(f64, usize, usize, FitResult)> = None;
        for (&(_, gi, gj), res) in pairs.iter().zip(fits) {
            let (dev, cand) = res?;
            // strict: ties keep the earliest pair in item order
            if best.as_ref().map_or(true, |(b, _, _, _)| dev < *b) {
                best = Some((dev, gi, gj, cand));
            }
        }
        let (height, gi, gj, adopted) = best.expect("at least one pair");
        let df = current.np - adopted.np;
        let merge = linkage_pair(codes[gi], codes[gj]);
        codes[gi] = step_idx as i64 + 1;
        codes.remove(gj);
        steps.push(ClusterStep {
            merge,
            height,
            lk: adopted.lk,
            np: adopted.np,
            df,
            p_value: chi_sq_sf(height, df),
            groups: adopted.spec.multi.clone(),
            });
        current = adopted;
    }

    let order = leaf_order(&steps);
    Ok(ClusterTrace { n_items: r, initial_lk, initial_np, steps, order })
}

/// Dimension count suggested by the clustering at level `alpha`: the
/// partition just before the first merge whose test rejects; with no
/// rejection everything collapses to one dimension.
pub fn suggest_cut(trace: &ClusterTrace, alpha: f64) -> usize {
    for (idx, step) in trace.steps.iter().enumerate() {
        if step.p_value < alpha {
            return trace.n_items - idx;
        }
    }
    1
}
