//! Model specification, parameter layout, and starting values.
//!
//! A [`ModelSpec`] fixes the class count, link, constraint pattern, and the
//! partition of items into dimensions. A [`ParameterSet`] holds values for
//! such a model with the identifiability constraints stored explicitly:
//! for each dimension the first listed item is the reference item, whose
//! discrimination is 1 and whose first difficulty (or rating-scale location)
//! is 0.
//!
//! For estimation the ability and difficulty parameters are packed into one
//! flat vector `phi`; [`ParamLayout`] owns the index map, builds the design
//! matrices `Z_cj` with `g(lambda_cj) = gamma_j * Z_cj * phi`, and assembles
//! linear predictors directly from the layout (same linear map, no dense
//! multiply).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::data::ResponseMatrix;
use crate::error::Error;
use crate::link::{self, LinkKind};
use crate::Result;

/// Constraint on the discrimination indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscConstraint {
    /// All `gamma_j = 1` (Rasch-type).
    Constrained,
    /// One free `gamma_j` per non-reference item.
    Free,
}

impl std::str::FromStr for DiscConstraint {
    type Err = String;

    /// Accepts names and the conventional numeric codes (0 = constrained, 1 = free).
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constrained" | "0" => Ok(DiscConstraint::Constrained),
            "free" | "1" => Ok(DiscConstraint::Free),
            other => Err(format!("unknown disc {other:?} (expected constrained|free or 0|1)")),
        }
    }
}

/// Constraint on the difficulty parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiflConstraint {
    /// Unconstrained `beta_jx` per item and category.
    Free,
    /// `beta_jx = beta_j + tau_x`: one location per item plus shared steps.
    RatingScale,
}

impl std::str::FromStr for DiflConstraint {
    type Err = String;

    /// Accepts names and the conventional numeric codes (0 = free, 1 = rating scale).
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "free" | "0" => Ok(DiflConstraint::Free),
            "rating-scale" | "rating_scale" | "rs" | "1" => Ok(DiflConstraint::RatingScale),
            other => Err(format!("unknown difl {other:?} (expected free|rating-scale or 0|1)")),
        }
    }
}

/// Complete description of a model to fit.
///
/// `multi` is the partition of items into dimension groups, 0-based in
/// memory and 1-based in JSON. For `link = none` the partition and the
/// disc/difl flags carry no meaning (the conditional probabilities are
/// unconstrained); conventionally such specs keep one singleton group per
/// item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "k")]
    pub n_classes: usize,
    pub link: LinkKind,
    pub disc: DiscConstraint,
    pub difl: DiflConstraint,
    #[serde(with = "crate::serde_util::one_based_nested")]
    pub multi: Vec<Vec<usize>>,
    pub cats: Vec<u32>,
}

impl ModelSpec {
    pub fn new(
        n_classes: usize,
        link: LinkKind,
        disc: DiscConstraint,
        difl: DiflConstraint,
        multi: Vec<Vec<usize>>,
        cats: Vec<u32>,
    ) -> Result<Self> {
        let spec = Self { n_classes, link, disc, difl, multi, cats };
        spec.validate()?;
        Ok(spec)
    }

    /// All items on a single dimension.
    pub fn unidimensional(
        n_classes: usize,
        link: LinkKind,
        disc: DiscConstraint,
        difl: DiflConstraint,
        cats: Vec<u32>,
    ) -> Result<Self> {
        let multi = vec![(0..cats.len()).collect()];
        Self::new(n_classes, link, disc, difl, multi, cats)
    }

    /// The classic latent-class model: no link, unconstrained probabilities.
    pub fn latent_class(n_classes: usize, cats: Vec<u32>) -> Result<Self> {
        let multi = (0..cats.len()).map(|j| vec![j]).collect();
        Self::new(
            n_classes,
            LinkKind::None,
            DiscConstraint::Constrained,
            DiflConstraint::Free,
            multi,
            cats,
        )
    }

    /// Same model with a different dimension partition.
    pub fn with_multi(&self, multi: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(self.n_classes, self.link, self.disc, self.difl, multi, self.cats.clone())
    }

    pub fn n_items(&self) -> usize {
        self.cats.len()
    }

    pub fn n_dims(&self) -> usize {
        self.multi.len()
    }

    /// Dimension index of each item.
    pub fn dim_of_item(&self) -> Vec<usize> {
        let mut dim = vec![0; self.n_items()];
        for (d, group) in self.multi.iter().enumerate() {
            for &j in group {
                dim[j] = d;
            }
        }
        dim
    }

    /// The first listed item of each dimension group.
    pub fn reference_items(&self) -> Vec<usize> {
        self.multi.iter().map(|group| group[0]).collect()
    }

    /// The common category count, when all items share one.
    pub fn equal_cats(&self) -> Option<u32> {
        let l = self.cats[0];
        self.cats.iter().all(|&c| c == l).then_some(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidSpec("k must be at least 1".into()));
        }
        if self.cats.is_empty() {
            return Err(Error::InvalidSpec("no items".into()));
        }
        if let Some(j) = self.cats.iter().position(|&l| l < 2) {
            return Err(Error::InvalidSpec(format!(
                "item {} has {} categories, need at least 2",
                j + 1,
                self.cats[j]
            )));
        }
        let r = self.n_items();
        let mut seen = vec![false; r];
        for (d, group) in self.multi.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidSpec(format!("dimension group {} is empty", d + 1)));
            }
            for &j in group {
                if j >= r {
                    return Err(Error::InvalidSpec(format!(
                        "dimension group {} names item {} but there are only {r} items",
                        d + 1,
                        j + 1
                    )));
                }
                if seen[j] {
                    return Err(Error::InvalidSpec(format!(
                        "item {} appears in more than one dimension group",
                        j + 1
                    )));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidSpec(format!(
                "item {} is missing from the dimension groups",
                j + 1
            )));
        }
        if !self.link.is_none()
            && self.difl == DiflConstraint::RatingScale
            && self.equal_cats().is_none()
        {
            return Err(Error::InvalidSpec(
                "the rating-scale constraint needs the same number of categories on every item"
                    .into(),
            ));
        }
        Ok(())
    }

    /// One-line description used in comparison tables and summaries.
    pub fn summary(&self) -> String {
        if self.link.is_none() {
            format!("k={} link=none", self.n_classes)
        } else {
            let disc = match self.disc {
                DiscConstraint::Constrained => "constrained",
                DiscConstraint::Free => "free",
            };
            let difl = match self.difl {
                DiflConstraint::Free => "free",
                DiflConstraint::RatingScale => "rating-scale",
            };
            format!(
                "k={} link={} disc={disc} difl={difl} s={}",
                self.n_classes,
                self.link,
                self.n_dims()
            )
        }
    }
}

/// Item difficulties under either constraint pattern. Constrained entries
/// (the reference item's first difficulty or location, and the first step)
/// are stored as literal zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Difficulties {
    /// `beta[j][x-1]` for `x = 1..l_j-1`.
    Free { beta: Vec<Vec<f64>> },
    /// `beta_jx = item[j] + step[x-1]`; `step` has length `l-1` with
    /// `step[0] = 0`.
    RatingScale { item: Vec<f64>, step: Vec<f64> },
}

/// Item-side parameters: IRT structure or raw conditional probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ItemParams {
    /// Unconstrained conditional probabilities `probs[j][c][x]`.
    Probs { probs: Vec<Vec<Vec<f64>>> },
    /// IRT parameters: `support[c][d]` ability points, difficulties, and
    /// `discrimination[j]`.
    Irt {
        support: Vec<Vec<f64>>,
        difficulties: Difficulties,
        discrimination: Vec<f64>,
    },
}

/// A full set of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Class weights, strictly positive, summing to 1.
    pub pi: Vec<f64>,
    pub items: ItemParams,
}

impl ParameterSet {
    pub fn as_irt(&self) -> Option<(&Vec<Vec<f64>>, &Difficulties, &Vec<f64>)> {
        match &self.items {
            ItemParams::Irt { support, difficulties, discrimination } => {
                Some((support, difficulties, discrimination))
            }
            ItemParams::Probs { .. } => None,
        }
    }

    pub fn as_probs(&self) -> Option<&Vec<Vec<Vec<f64>>>> {
        match &self.items {
            ItemParams::Probs { probs } => Some(probs),
            ItemParams::Irt { .. } => None,
        }
    }
}

/// Checks a parameter set against a spec: shapes, normalization, and the
/// identifiability constraints (which must hold exactly).
pub fn validate_params(spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    let k = spec.n_classes;
    let r = spec.n_items();
    if params.pi.len() != k {
        return Err(Error::InvalidParams(format!(
            "pi has length {}, expected k = {k}",
            params.pi.len()
        )));
    }
    for (c, &p) in params.pi.iter().enumerate() {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidParams(format!("pi[{}] = {p} must be positive", c + 1)));
        }
    }
    let sum: f64 = params.pi.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParams(format!("pi sums to {sum}, expected 1")));
    }
    match (&params.items, spec.link.is_none()) {
        (ItemParams::Probs { probs }, true) => {
            if probs.len() != r {
                return Err(Error::InvalidParams("probs has wrong item count".into()));
            }
            for (j, item) in probs.iter().enumerate() {
                if item.len() != k {
                    return Err(Error::InvalidParams(format!(
                        "probs[{}] has {} classes, expected {k}",
                        j + 1,
                        item.len()
                    )));
                }
                for (c, row) in item.iter().enumerate() {
                    if row.len() != spec.cats[j] as usize {
                        return Err(Error::InvalidParams(format!(
                            "probs[{}][{}] has wrong category count",
                            j + 1,
                            c + 1
                        )));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-8 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                        return Err(Error::InvalidParams(format!(
                            "probs[{}][{}] is not a probability vector",
                            j + 1,
                            c + 1
                        )));
                    }
                }
            }
        }
        (ItemParams::Irt { support, difficulties, discrimination }, false) => {
            let s = spec.n_dims();
            if support.len() != k || support.iter().any(|row| row.len() != s) {
                return Err(Error::InvalidParams(format!("support must be {k} x {s}")));
            }
            if support.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("support points must be finite".into()));
            }
            if discrimination.len() != r {
                return Err(Error::InvalidParams("discrimination has wrong length".into()));
            }
            if discrimination.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("discriminations must be finite".into()));
            }
            for &jd in &spec.reference_items() {
                if discrimination[jd] != 1.0 {
                    return Err(Error::InvalidParams(format!(
                        "reference item {} must have discrimination 1, found {}",
                        jd + 1,
                        discrimination[jd]
                    )));
                }
            }
            if spec.disc == DiscConstraint::Constrained
                && discrimination.iter().any(|&g| g != 1.0)
            {
                return Err(Error::InvalidParams(
                    "disc is constrained but a discrimination differs from 1".into(),
                ));
            }
            match (difficulties, spec.difl) {
                (Difficulties::Free { beta }, DiflConstraint::Free) => {
                    if beta.len() != r {
                        return Err(Error::InvalidParams("beta has wrong item count".into()));
                    }
                    for (j, row) in beta.iter().enumerate() {
                        if row.len() != spec.cats[j] as usize - 1 {
                            return Err(Error::InvalidParams(format!(
                                "beta[{}] has wrong length",
                                j + 1
                            )));
                        }
                        if row.iter().any(|v| !v.is_finite()) {
                            return Err(Error::InvalidParams("difficulties must be finite".into()));
                        }
                    }
                    for &jd in &spec.reference_items() {
                        if beta[jd][0] != 0.0 {
                            return Err(Error::InvalidParams(format!(
                                "reference item {} must have first difficulty 0",
                                jd + 1
                            )));
                        }
                    }
                }
                (Difficulties::RatingScale { item, step }, DiflConstraint::RatingScale) => {
                    let l = spec.equal_cats().expect("validated") as usize;
                    if item.len() != r || step.len() != l - 1 {
                        return Err(Error::InvalidParams(
                            "rating-scale parameters have wrong shape".into(),
                        ));
                    }
                    if item.iter().chain(step.iter()).any(|v| !v.is_finite()) {
                        return Err(Error::InvalidParams("difficulties must be finite".into()));
                    }
                    if step[0] != 0.0 {
                        return Err(Error::InvalidParams("first step must be 0".into()));
                    }
                    for &jd in &spec.reference_items() {
                        if item[jd] != 0.0 {
                            return Err(Error::InvalidParams(format!(
                                "reference item {} must have location 0",
                                jd + 1
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::InvalidParams(
                        "difficulty structure does not match the difl constraint".into(),
                    ))
                }
            }
        }
        (ItemParams::Probs { .. }, false) => {
            return Err(Error::InvalidParams(
                "spec has a link but parameters are raw probabilities".into(),
            ))
        }
        (ItemParams::Irt { .. }, true) => {
            return Err(Error::InvalidParams(
                "spec has no link but parameters are IRT-structured".into(),
            ))
        }
    }
    Ok(())
}

/// Free parameters of the model, per the constraint pattern.
pub fn count_free_params(spec: &ModelSpec) -> usize {
    let k = spec.n_classes;
    let r = spec.n_items();
    let sum_l1: usize = spec.cats.iter().map(|&l| l as usize - 1).sum();
    if spec.link.is_none() {
        return (k - 1) + k * sum_l1;
    }
    let s = spec.n_dims();
    let mut np = (k - 1) + s * k;
    np += match spec.difl {
        DiflConstraint::Free => sum_l1 - s,
        DiflConstraint::RatingScale => (r - s) + (spec.cats[0] as usize - 2),
    };
    if spec.disc == DiscConstraint::Free {
        np += r - s;
    }
    np
}

/// Index map between structured parameters and the flat vector `phi`.
///
/// `phi` lays out the `s*k` ability points class-major (class outer,
/// dimension inner) followed by the free difficulty entries in item order.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_classes: usize,
    pub n_dims: usize,
    pub cats: Vec<u32>,
    pub dim_of_item: Vec<usize>,
    pub reference_items: Vec<usize>,
    pub phi_len: usize,
    pub difl: DiflLayout,
    /// Items whose discrimination is a free parameter, in item order.
    pub free_gamma_items: Vec<usize>,
}

/// Positions of the difficulty entries inside `phi`; `None` marks an entry
/// constrained to zero.
#[derive(Debug, Clone)]
pub enum DiflLayout {
    Free { beta_pos: Vec<Vec<Option<usize>>> },
    RatingScale { item_pos: Vec<Option<usize>>, step_pos: Vec<Option<usize>> },
}

/// Flat parameters for the Fisher-scoring steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedParams {
    pub phi: DVector<f64>,
    pub gamma_free: Vec<f64>,
}

impl ParamLayout {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        if spec.link.is_none() {
            return Err(Error::InvalidSpec(
                "the unconstrained latent-class model has no packed parameterization".into(),
            ));
        }
        let k = spec.n_classes;
        let s = spec.n_dims();
        let r = spec.n_items();
        let dim_of_item = spec.dim_of_item();
        let reference_items = spec.reference_items();
        let is_ref = {
            let mut mask = vec![false; r];
            for &jd in &reference_items {
                mask[jd] = true;
            }
            mask
        };
        let mut next = s * k;
        let difl = match spec.difl {
            DiflConstraint::Free => {
                let mut beta_pos = Vec::with_capacity(r);
                for j in 0..r {
                    let q = spec.cats[j] as usize - 1;
                    let mut row = Vec::with_capacity(q);
                    for x in 0..q {
                        if is_ref[j] && x == 0 {
                            row.push(None);
                        } else {
                            row.push(Some(next));
                            next += 1;
                        }
                    }
                    beta_pos.push(row);
                }
                DiflLayout::Free { beta_pos }
            }
            DiflConstraint::RatingScale => {
                let l = spec.equal_cats().expect("validated") as usize;
                let mut item_pos = Vec::with_capacity(r);
                for j in 0..r {
                    if is_ref[j] {
                        item_pos.push(None);
                    } else {
                        item_pos.push(Some(next));
                        next += 1;
                    }
                }
                let mut step_pos = Vec::with_capacity(l - 1);
                step_pos.push(None);
                for _ in 1..(l - 1) {
                    step_pos.push(Some(next));
                    next += 1;
                }
                DiflLayout::RatingScale { item_pos, step_pos }
            }
        };
        let free_gamma_items = match spec.disc {
            DiscConstraint::Constrained => Vec::new(),
            DiscConstraint::Free => (0..r).filter(|j| !is_ref[*j]).collect(),
        };
        Ok(Self {
            n_classes: k,
            n_dims: s,
            cats: spec.cats.clone(),
            dim_of_item,
            reference_items,
            phi_len: next,
            difl,
            free_gamma_items,
        })
    }

    pub fn n_items(&self) -> usize {
        self.cats.len()
    }

    /// Position of the ability point `xi_{cd}` in `phi`.
    pub fn xi_pos(&self, c: usize, d: usize) -> usize {
        c * self.n_dims + d
    }

    /// Flattens structured values into `phi` and the free discriminations.
    pub fn pack(&self, support: &[Vec<f64>], difficulties: &Difficulties, gamma: &[f64]) -> PackedParams {
        let mut phi = DVector::zeros(self.phi_len);
        for c in 0..self.n_classes {
            for d in 0..self.n_dims {
                phi[self.xi_pos(c, d)] = support[c][d];
            }
        }
        match (&self.difl, difficulties) {
            (DiflLayout::Free { beta_pos }, Difficulties::Free { beta }) => {
                for (j, row) in beta_pos.iter().enumerate() {
                    for (x, pos) in row.iter().enumerate() {
                        if let Some(p) = pos {
                            phi[*p] = beta[j][x];
                        }
                    }
                }
            }
            (DiflLayout::RatingScale { item_pos, step_pos }, Difficulties::RatingScale { item, step }) => {
                for (j, pos) in item_pos.iter().enumerate() {
                    if let Some(p) = pos {
                        phi[*p] = item[j];
                    }
                }
                for (x, pos) in step_pos.iter().enumerate() {
                    if let Some(p) = pos {
                        phi[*p] = step[x];
                    }
                }
            }
            _ => panic!("difficulty structure does not match the layout"),
        }
        let gamma_free = self.free_gamma_items.iter().map(|&j| gamma[j]).collect();
        PackedParams { phi, gamma_free }
    }

    /// Rebuilds structured values, restoring constrained entries exactly.
    pub fn unpack(&self, packed: &PackedParams) -> (Vec<Vec<f64>>, Difficulties, Vec<f64>) {
        let support: Vec<Vec<f64>> = (0..self.n_classes)
            .map(|c| (0..self.n_dims).map(|d| packed.phi[self.xi_pos(c, d)]).collect())
            .collect();
        let difficulties = match &self.difl {
            DiflLayout::Free { beta_pos } => Difficulties::Free {
                beta: beta_pos
                    .iter()
                    .map(|row| {
                        row.iter().map(|pos| pos.map_or(0.0, |p| packed.phi[p])).collect()
                    })
                    .collect(),
            },
            DiflLayout::RatingScale { item_pos, step_pos } => Difficulties::RatingScale {
                item: item_pos.iter().map(|pos| pos.map_or(0.0, |p| packed.phi[p])).collect(),
                step: step_pos.iter().map(|pos| pos.map_or(0.0, |p| packed.phi[p])).collect(),
            },
        };
        let mut gamma = vec![1.0; self.n_items()];
        for (slot, &j) in self.free_gamma_items.iter().enumerate() {
            gamma[j] = packed.gamma_free[slot];
        }
        (support, difficulties, gamma)
    }

    /// Full discrimination vector from the packed free entries.
    pub fn gamma_full(&self, gamma_free: &[f64]) -> Vec<f64> {
        let mut gamma = vec![1.0; self.n_items()];
        for (slot, &j) in self.free_gamma_items.iter().enumerate() {
            gamma[j] = gamma_free[slot];
        }
        gamma
    }

    /// Linear predictor `gamma_j * Z_cj * phi`, assembled sparsely from the
    /// layout: `gamma_j * (xi_{cd(j)} - beta_jx)` for `x = 1..l_j-1`.
    pub fn eta(&self, phi: &DVector<f64>, gamma_j: f64, c: usize, j: usize) -> DVector<f64> {
        let q = self.cats[j] as usize - 1;
        let xi = phi[self.xi_pos(c, self.dim_of_item[j])];
        DVector::from_fn(q, |x, _| {
            let mut v = xi;
            match &self.difl {
                DiflLayout::Free { beta_pos } => {
                    if let Some(p) = beta_pos[j][x] {
                        v -= phi[p];
                    }
                }
                DiflLayout::RatingScale { item_pos, step_pos } => {
                    if let Some(p) = item_pos[j] {
                        v -= phi[p];
                    }
                    if let Some(p) = step_pos[x] {
                        v -= phi[p];
                    }
                }
            }
            gamma_j * v
        })
    }

    /// Dense design matrix `Z_cj` of shape `(l_j - 1) x phi_len`.
    pub fn design_matrix(&self, c: usize, j: usize) -> DMatrix<f64> {
        let q = self.cats[j] as usize - 1;
        let mut z = DMatrix::zeros(q, self.phi_len);
        let xi_col = self.xi_pos(c, self.dim_of_item[j]);
        for x in 0..q {
            z[(x, xi_col)] = 1.0;
            match &self.difl {
                DiflLayout::Free { beta_pos } => {
                    if let Some(p) = beta_pos[j][x] {
                        z[(x, p)] = -1.0;
                    }
                }
                DiflLayout::RatingScale { item_pos, step_pos } => {
                    if let Some(p) = item_pos[j] {
                        z[(x, p)] = -1.0;
                    }
                    if let Some(p) = step_pos[x] {
                        z[(x, p)] = -1.0;
                    }
                }
            }
        }
        z
    }
}

/// Design matrix for `(c, j)` under `spec`'s layout.
pub fn build_design_matrix(spec: &ModelSpec, c: usize, j: usize) -> Result<DMatrix<f64>> {
    let layout = ParamLayout::build(spec)?;
    if c >= spec.n_classes || j >= spec.n_items() {
        return Err(Error::InvalidSpec(format!(
            "class {} / item {} out of range",
            c + 1,
            j + 1
        )));
    }
    Ok(layout.design_matrix(c, j))
}

/// Standard-normal quantiles at (2c-1)/(2k): the deterministic ability grid.
fn quantile_grid(k: usize) -> Vec<f64> {
    let normal = NormalDist::new(0.0, 1.0).unwrap();
    (1..=k).map(|c| normal.inverse_cdf((2.0 * c as f64 - 1.0) / (2.0 * k as f64))).collect()
}

/// Smoothed marginal category proportions of each item, ignoring missing
/// entries; the +1/2 smoothing keeps every category strictly positive.
fn marginal_probs(data: &ResponseMatrix) -> Vec<Vec<f64>> {
    let r = data.n_items();
    let mut probs = Vec::with_capacity(r);
    for j in 0..r {
        let l = data.cats[j] as usize;
        let mut counts = vec![0.0; l];
        let mut total = 0.0;
        for (p, pattern) in data.patterns.iter().enumerate() {
            if let Some(x) = pattern[j] {
                counts[x as usize] += data.freq[p] as f64;
                total += data.freq[p] as f64;
            }
        }
        let denom = total + 0.5 * l as f64;
        probs.push(counts.iter().map(|c| (c + 0.5) / denom).collect());
    }
    probs
}

/// Deterministic starting values: ability points on the standard-normal
/// quantile grid, equal weights, unit discriminations, and difficulties
/// taken from each item's marginal logits, shifted per dimension so the
/// reference constraints hold.
pub fn deterministic_start(spec: &ModelSpec, data: &ResponseMatrix) -> Result<ParameterSet> {
    check_spec_data(spec, data)?;
    let k = spec.n_classes;
    let pi = vec![1.0 / k as f64; k];
    let grid = quantile_grid(k);
    let marginals = marginal_probs(data);
    if spec.link.is_none() {
        // tilt the marginals along the category index so classes start
        // distinct and ordered; at k = 1 this is exactly the marginals
        let probs = (0..spec.n_items())
            .map(|j| {
                (0..k)
                    .map(|c| {
                        let mut row: Vec<f64> = marginals[j]
                            .iter()
                            .enumerate()
                            .map(|(x, &p)| p * (grid[c] * x as f64).exp())
                            .collect();
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= s);
                        row
                    })
                    .collect()
            })
            .collect();
        return Ok(ParameterSet { pi, items: ItemParams::Probs { probs } });
    }
    let s = spec.n_dims();
    let r = spec.n_items();
    let support: Vec<Vec<f64>> = grid.iter().map(|&q| vec![q; s]).collect();
    let discrimination = vec![1.0; r];
    // raw difficulties: minus the marginal logits of each item
    let raw: Vec<Vec<f64>> = (0..r)
        .map(|j| {
            let eta = link::probs_to_logits(&marginals[j], spec.link)?;
            Ok(eta.iter().map(|&e| -e).collect())
        })
        .collect::<Result<_>>()?;
    let refs = spec.reference_items();
    let dim = spec.dim_of_item();
    let difficulties = match spec.difl {
        DiflConstraint::Free => {
            let mut beta = raw;
            for j in 0..r {
                let shift = beta[refs[dim[j]]][0];
                for v in beta[j].iter_mut() {
                    *v -= shift;
                }
            }
            Difficulties::Free { beta }
        }
        DiflConstraint::RatingScale => {
            let l = spec.equal_cats().expect("validated") as usize;
            let mut step = vec![0.0; l - 1];
            for x in 1..(l - 1) {
                step[x] = raw.iter().map(|row| row[x] - row[0]).sum::<f64>() / r as f64;
            }
            let mut item: Vec<f64> = raw.iter().map(|row| row[0]).collect();
            for j in 0..r {
                item[j] -= raw[refs[dim[j]]][0];
            }
            Difficulties::RatingScale { item, step }
        }
    };
    let params = ParameterSet {
        pi,
        items: ItemParams::Irt { support, difficulties, discrimination },
    };
    validate_params(spec, &params)?;
    Ok(params)
}

/// Random starting values, reproducible per seed: standard-normal support
/// points, normalized-uniform weights, deterministic difficulties plus
/// N(0, 0.5) noise on the free entries (re-ordered where the global link
/// needs increasing difficulties), and free discriminations 1 + N(0, 0.2)
/// kept positive.
pub fn random_start(spec: &ModelSpec, data: &ResponseMatrix, seed: u64) -> Result<ParameterSet> {
    check_spec_data(spec, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.n_classes;
    let mut pi: Vec<f64> = (0..k).map(|_| rng.random::<f64>().max(1e-6)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    if spec.link.is_none() {
        let probs = (0..spec.n_items())
            .map(|j| {
                let l = spec.cats[j] as usize;
                (0..k)
                    .map(|_| {
                        let mut row: Vec<f64> =
                            (0..l).map(|_| rng.random::<f64>().max(1e-3)).collect();
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= s);
                        row
                    })
                    .collect()
            })
            .collect();
        return Ok(ParameterSet { pi, items: ItemParams::Probs { probs } });
    }
    let det = deterministic_start(spec, data)?;
    let (_, det_difficulties, _) = det.as_irt().expect("irt start");
    let s = spec.n_dims();
    let r = spec.n_items();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let support: Vec<Vec<f64>> =
        (0..k).map(|_| (0..s).map(|_| normal.sample(&mut rng)).collect()).collect();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let refs = spec.reference_items();
    let is_ref = {
        let mut mask = vec![false; r];
        for &jd in &refs {
            mask[jd] = true;
        }
        mask
    };
    let needs_order = spec.link == LinkKind::Global;
    let difficulties = match det_difficulties {
        Difficulties::Free { beta } => {
            let mut beta = beta.clone();
            for (j, row) in beta.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    if !(is_ref[j] && x == 0) {
                        *v += noise.sample(&mut rng);
                    }
                }
                if needs_order {
                    enforce_increasing(row);
                }
            }
            Difficulties::Free { beta }
        }
        Difficulties::RatingScale { item, step } => {
            let mut item = item.clone();
            let mut step = step.clone();
            for (j, v) in item.iter_mut().enumerate() {
                if !is_ref[j] {
                    *v += noise.sample(&mut rng);
                }
            }
            for v in step.iter_mut().skip(1) {
                *v += noise.sample(&mut rng);
            }
            if needs_order {
                enforce_increasing(&mut step);
            }
            Difficulties::RatingScale { item, step }
        }
    };
    let mut discrimination = vec![1.0; r];
    if spec.disc == DiscConstraint::Free {
        let dnoise = Normal::new(0.0, 0.2).unwrap();
        for j in 0..r {
            if !is_ref[j] {
                let mut g = 1.0 + dnoise.sample(&mut rng);
                while g <= 0.05 {
                    g = 1.0 + dnoise.sample(&mut rng);
                }
                discrimination[j] = g;
            }
        }
    }
    let params = ParameterSet {
        pi,
        items: ItemParams::Irt { support, difficulties, discrimination },
    };
    validate_params(spec, &params)?;
    Ok(params)
}

/// Forces strictly increasing difficulties by pushing later entries up;
/// the first entry (possibly pinned at zero) never moves. Keeps noised
/// starts feasible under the global link.
fn enforce_increasing(values: &mut [f64]) {
    for x in 1..values.len() {
        if values[x] <= values[x - 1] + 0.05 {
            values[x] = values[x - 1] + 0.05;
        }
    }
}

fn check_spec_data(spec: &ModelSpec, data: &ResponseMatrix) -> Result<()> {
    spec.validate()?;
    if spec.cats != data.cats {
        return Err(Error::InvalidSpec(format!(
            "spec category counts {:?} do not match the data's {:?}",
            spec.cats, data.cats
        )));
    }
    Ok(())
}
