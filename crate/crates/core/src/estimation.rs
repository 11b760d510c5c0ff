//! Maximum-likelihood estimation by EM with Fisher scoring.
//!
//! The E-step computes, in log space, posterior class memberships and the
//! expected counts `m[c][j][x]` (units in class `c` answering `x` on item
//! `j`) together with the per-class observed totals `t[c][j]`; with no
//! missing entries `t[c][j]` is the expected class size for every item.
//! The M-step updates the class weights in closed form and the item
//! parameters by Fisher scoring on the expected complete-data log-likelihood
//! `Q = sum m[c][j][x] * ln lambda[c][j][x]`, one scoring sweep per EM
//! iteration by default. Each scoring step is step-halved until `Q` does not
//! decrease, so every iteration is a generalized EM step and the observed
//! log-likelihood never goes down. Without a link the M-step is the closed
//! form `lambda = m / t` of the unconstrained latent-class model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ResponseMatrix;
use crate::design::{
    count_free_params, deterministic_start, random_start, validate_params, ItemParams,
    ModelSpec, PackedParams, ParamLayout, ParameterSet,
};
use crate::error::Error;
use crate::link::{self, LinkError};
use crate::Result;

/// One starting point for the EM iterations.
#[derive(Debug, Clone)]
pub enum Start {
    /// Quantile-grid abilities and marginal-logit difficulties.
    Deterministic,
    /// Reproducible random perturbation of the deterministic start.
    Seed(u64),
    /// Caller-provided parameter values (validated before use).
    Supplied(Arc<ParameterSet>),
}

impl Start {
    fn label(&self) -> String {
        match self {
            Start::Deterministic => "deterministic".into(),
            Start::Seed(seed) => format!("seed {seed}"),
            Start::Supplied(_) => "supplied".into(),
        }
    }
}

/// The list of starts to try; the best final log-likelihood wins, with ties
/// going to the earlier start.
#[derive(Debug, Clone)]
pub struct StartPolicy {
    pub starts: Vec<Start>,
}

impl StartPolicy {
    /// The deterministic start only.
    pub fn deterministic() -> Self {
        Self { starts: vec![Start::Deterministic] }
    }

    /// The deterministic start plus `n_random` seeded random starts
    /// (`base_seed`, `base_seed + 1`, ...).
    pub fn multi_start(n_random: usize, base_seed: u64) -> Self {
        let mut starts = vec![Start::Deterministic];
        starts.extend((0..n_random as u64).map(|i| Start::Seed(base_seed + i)));
        Self { starts }
    }

    /// A single caller-provided start.
    pub fn from_params(params: ParameterSet) -> Self {
        Self { starts: vec![Start::Supplied(Arc::new(params))] }
    }
}

impl Default for StartPolicy {
    fn default() -> Self {
        Self::deterministic()
    }
}

/// Tuning knobs for [`fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub start: StartPolicy,
    /// Convergence threshold on the relative log-likelihood change.
    pub tol: f64,
    pub max_iter: usize,
    /// Fisher-scoring sweeps per EM iteration.
    pub fisher_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start: StartPolicy::default(),
            tol: 1e-9,
            max_iter: 5000,
            fisher_sweeps: 1,
        }
    }
}

/// Outcome of one start, kept in the fit report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: String,
    /// Final log-likelihood; absent when the start failed outright.
    pub lk: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// A fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Estimates, with classes ordered by the first ability dimension
    /// (linked models only).
    pub params: ParameterSet,
    /// Log-likelihood at the estimate.
    pub lk: f64,
    /// Free parameter count.
    pub np: usize,
    pub aic: f64,
    pub bic: f64,
    /// Units in the data.
    pub n: u64,
    /// Conditional response probabilities `[item][class][category]`.
    pub cond_probs: Vec<Vec<Vec<f64>>>,
    /// Posterior class memberships `[pattern][class]`.
    pub posteriors: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Index into the start policy of the winning start.
    pub start_used: usize,
    pub start_table: Vec<StartRecord>,
    /// Log-likelihood after each iteration of the winning start.
    pub lk_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Expected counts from one E-step.
struct Suff {
    loglik: f64,
    /// Posterior memberships `[pattern][class]`.
    post: Vec<Vec<f64>>,
    /// Expected response counts `[class][item][category]`.
    m: Vec<Vec<Vec<f64>>>,
    /// Expected observed totals `[class][item]`.
    t: Vec<Vec<f64>>,
    /// Expected class sizes.
    m_class: Vec<f64>,
}

/// Posterior memberships and log-likelihood, in log space throughout.
fn e_step(data: &ResponseMatrix, pi: &[f64], ln_phi: &[Vec<Vec<f64>>]) -> Suff {
    let k = pi.len();
    let r = data.n_items();
    let ln_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mut post = Vec::with_capacity(data.n_patterns());
    let mut m: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| data.cats.iter().map(|&l| vec![0.0; l as usize]).collect())
        .collect();
    let mut t = vec![vec![0.0; r]; k];
    let mut m_class = vec![0.0; k];
    let mut loglik = 0.0;
    let mut a = vec![0.0; k];
    for (p, pattern) in data.patterns.iter().enumerate() {
        for (c, ac) in a.iter_mut().enumerate() {
            let mut acc = ln_pi[c];
            for (j, cell) in pattern.iter().enumerate() {
                if let Some(x) = cell {
                    acc += ln_phi[c][j][*x as usize];
                }
            }
            *ac = acc;
        }
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = if max.is_finite() {
            max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        } else {
            max
        };
        let freq = data.freq[p] as f64;
        loglik += freq * lse;
        let w: Vec<f64> = a.iter().map(|v| if lse.is_finite() { (v - lse).exp() } else { 0.0 }).collect();
        for (c, &wc) in w.iter().enumerate() {
            let count = freq * wc;
            m_class[c] += count;
            for (j, cell) in pattern.iter().enumerate() {
                if let Some(x) = cell {
                    m[c][j][*x as usize] += count;
                    t[c][j] += count;
                }
            }
        }
        post.push(w);
    }
    Suff { loglik, post, m, t, m_class }
}

/// `Q = sum m ln lambda` over every class, item, and category.
fn surrogate(m: &[Vec<Vec<f64>>], lambda: &[Vec<Vec<f64>>]) -> f64 {
    let mut q = 0.0;
    for (mc, lc) in m.iter().zip(lambda) {
        for (mj, lj) in mc.iter().zip(lc) {
            for (&mx, &lx) in mj.iter().zip(lj) {
                if mx > 0.0 {
                    q += mx * lx.ln();
                }
            }
        }
    }
    q
}

/// Item-`j` share of the surrogate.
fn surrogate_item(m: &[Vec<Vec<f64>>], lambda: &[Vec<Vec<f64>>], j: usize) -> f64 {
    let mut q = 0.0;
    for (mc, lc) in m.iter().zip(lambda) {
        for (&mx, &lx) in mc[j].iter().zip(&lc[j]) {
            if mx > 0.0 {
                q += mx * lx.ln();
            }
        }
    }
    q
}

/// Multinomial covariance of the indicator subvector for categories
/// `1..l-1`: `diag(lambda) - lambda lambda'` on those coordinates.
fn restricted_cov(lambda: &[f64]) -> DMatrix<f64> {
    let q = lambda.len() - 1;
    DMatrix::from_fn(q, q, |x, y| {
        let lx = lambda[x + 1];
        let ly = lambda[y + 1];
        lx * (if x == y { 1.0 } else { 0.0 } - ly)
    })
}

/// Item parameters and per-(class, item) response probabilities for a
/// linked model.
struct LinkedState {
    kind: link::LinkKind,
    packed: PackedParams,
    /// Full discrimination vector.
    gamma: Vec<f64>,
    /// `lambda[c][j][x]`, full category vectors.
    lambda: Vec<Vec<Vec<f64>>>,
}

impl LinkedState {
    fn new(layout: &ParamLayout, kind: link::LinkKind, packed: PackedParams) -> Result<Self> {
        let gamma = layout.gamma_full(&packed.gamma_free);
        let lambda = compute_lambda(layout, kind, &packed.phi, &gamma)?;
        Ok(Self { kind, packed, gamma, lambda })
    }

    fn ln_lambda(&self) -> Vec<Vec<Vec<f64>>> {
        self.lambda
            .iter()
            .map(|rows| rows.iter().map(|row| row.iter().map(|v| v.ln()).collect()).collect())
            .collect()
    }
}

/// Response probabilities for every class and item; fails (recoverably)
/// when a global-link predictor is infeasible.
fn compute_lambda(
    layout: &ParamLayout,
    kind: link::LinkKind,
    phi: &DVector<f64>,
    gamma: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = layout.n_classes;
    let r = layout.n_items();
    let mut lambda = Vec::with_capacity(k);
    for c in 0..k {
        let mut rows = Vec::with_capacity(r);
        for j in 0..r {
            let eta = layout.eta(phi, gamma[j], c, j);
            let lam = link::logits_to_probs(eta.as_slice(), kind)?;
            rows.push(lam.iter().cloned().collect::<Vec<f64>>());
        }
        lambda.push(rows);
    }
    Ok(lambda)
}

/// Gradient and expected information of the surrogate in the
/// difficulty/ability block, at the state's current parameters.
fn phi_score_info(
    layout: &ParamLayout,
    state: &LinkedState,
    suff: &Suff,
    zs: &[Vec<DMatrix<f64>>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = layout.phi_len;
    let mut score = DVector::<f64>::zeros(p);
    let mut info = DMatrix::<f64>::zeros(p, p);
    for c in 0..layout.n_classes {
        for j in 0..layout.n_items() {
            let lam = &state.lambda[c][j];
            let q = lam.len() - 1;
            let rd = link::derivative_matrix(lam, state.kind)?;
            let resid = DVector::from_fn(q, |x, _| {
                suff.m[c][j][x + 1] - suff.t[c][j] * lam[x + 1]
            });
            let g = state.gamma[j];
            let a = &rd * &zs[c][j];
            score.gemv_tr(g, &a, &resid, 1.0);
            let va = restricted_cov(lam) * &a;
            info.gemm_tr(suff.t[c][j] * g * g, &a, &va, 1.0);
        }
    }
    Ok((score, info))
}

/// Gradient and expected information of the surrogate in item `j`'s
/// discrimination, at the state's current parameters.
fn gamma_score_info(
    layout: &ParamLayout,
    state: &LinkedState,
    suff: &Suff,
    j: usize,
) -> Result<(f64, f64)> {
    let mut s = 0.0;
    let mut f = 0.0;
    for c in 0..layout.n_classes {
        let lam = &state.lambda[c][j];
        let q = lam.len() - 1;
        let rd = link::derivative_matrix(lam, state.kind)?;
        let resid = DVector::from_fn(q, |x, _| {
            suff.m[c][j][x + 1] - suff.t[c][j] * lam[x + 1]
        });
        // predictor without the discrimination: Z_cj phi
        let zphi = layout.eta(&state.packed.phi, 1.0, c, j);
        let rzphi = &rd * &zphi;
        s += rzphi.dot(&resid);
        f += suff.t[c][j] * rzphi.dot(&(restricted_cov(lam) * &rzphi));
    }
    Ok((s, f))
}

/// One Fisher-scoring sweep: a step-halved update of the difficulty/ability
/// vector, then one per free discrimination. Never decreases the surrogate.
fn fisher_sweep(
    layout: &ParamLayout,
    state: &mut LinkedState,
    suff: &Suff,
    zs: &[Vec<DMatrix<f64>>],
    warnings: &mut Warnings,
) -> Result<()> {
    let k = layout.n_classes;

    // difficulty/ability step
    let (score, info) = phi_score_info(layout, state, suff, zs)?;
    if let Some(delta) = solve_spd(&info, &score, warnings) {
        let q_old = surrogate(&suff.m, &state.lambda);
        let mut step = 1.0;
        for _ in 0..=10 {
            let candidate = &state.packed.phi + &delta * step;
            match compute_lambda(layout, state.kind, &candidate, &state.gamma) {
                Ok(lambda) if surrogate(&suff.m, &lambda) >= q_old => {
                    state.packed.phi = candidate;
                    state.lambda = lambda;
                    break;
                }
                _ => step *= 0.5,
            }
        }
    }

    // discrimination steps, one item at a time
    for (slot, &j) in layout.free_gamma_items.iter().enumerate() {
        let (s, f) = gamma_score_info(layout, state, suff, j)?;
        if f <= 1e-12 {
            warnings.push("expected information for a discrimination vanished; update skipped");
            continue;
        }
        let q_old = surrogate_item(&suff.m, &state.lambda, j);
        let g0 = state.gamma[j];
        let mut step = 1.0;
        for _ in 0..=10 {
            let g_new = g0 + step * s / f;
            match try_item_lambda(layout, state, j, g_new) {
                Ok(lam_j) => {
                    let mut q_new = 0.0;
                    for c in 0..k {
                        for (x, &mx) in suff.m[c][j].iter().enumerate() {
                            if mx > 0.0 {
                                q_new += mx * lam_j[c][x].ln();
                            }
                        }
                    }
                    if q_new >= q_old {
                        state.gamma[j] = g_new;
                        state.packed.gamma_free[slot] = g_new;
                        for c in 0..k {
                            state.lambda[c][j] = lam_j[c].clone();
                        }
                        break;
                    }
                    step *= 0.5;
                }
                Err(_) => step *= 0.5,
            }
        }
    }
    Ok(())
}

/// Item `j`'s probabilities under a candidate discrimination.
fn try_item_lambda(
    layout: &ParamLayout,
    state: &LinkedState,
    j: usize,
    gamma_j: f64,
) -> std::result::Result<Vec<Vec<f64>>, LinkError> {
    (0..layout.n_classes)
        .map(|c| {
            let eta = layout.eta(&state.packed.phi, gamma_j, c, j);
            link::logits_to_probs(eta.as_slice(), state.kind)
                .map(|lam| lam.iter().cloned().collect())
        })
        .collect()
}

/// Solves `info * delta = score` for a symmetric PSD matrix, adding a ridge
/// (with a warning) when the factorization fails.
fn solve_spd(info: &DMatrix<f64>, score: &DVector<f64>, warnings: &mut Warnings) -> Option<DVector<f64>> {
    if let Some(chol) = info.clone().cholesky() {
        return Some(chol.solve(score));
    }
    let p = info.nrows();
    let ridge = 1e-8 * info.trace().max(1.0) / p as f64;
    let mut damped = info.clone();
    for i in 0..p {
        damped[(i, i)] += ridge;
    }
    warnings.push("singular expected information; ridge added");
    if let Some(chol) = damped.clone().cholesky() {
        return Some(chol.solve(score));
    }
    if let Some(solved) = damped.lu().solve(score) {
        return Some(solved);
    }
    warnings.push("expected information unusable; scoring step skipped");
    None
}

/// Deduplicating warning list.
struct Warnings(Vec<String>);

impl Warnings {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn push(&mut self, text: &str) {
        if !self.0.iter().any(|w| w == text) {
            self.0.push(text.to_string());
        }
    }
}

/// Output of one EM run from one start.
struct EmRun {
    pi: Vec<f64>,
    items: ItemParams,
    lk: f64,
    iterations: usize,
    converged: bool,
    lk_trace: Vec<f64>,
    warnings: Vec<String>,
}

const DEGENERATE_WEIGHT: f64 = 1e-8;

fn run_em(
    spec: &ModelSpec,
    data: &ResponseMatrix,
    start: &ParameterSet,
    opts: &FitOptions,
) -> Result<EmRun> {
    let n = data.n_units() as f64;
    let mut warnings = Warnings::new();
    let mut pi = start.pi.clone();
    let mut lk_trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    if spec.link.is_none() {
        let mut phi = start.as_probs().expect("validated latent-class start").clone();
        loop {
            let ln_phi: Vec<Vec<Vec<f64>>> = (0..spec.n_classes)
                .map(|c| {
                    (0..spec.n_items())
                        .map(|j| phi[j][c].iter().map(|v| v.ln()).collect())
                        .collect()
                })
                .collect();
            let suff = e_step(data, &pi, &ln_phi);
            check_finite(suff.loglik, iterations)?;
            lk_trace.push(suff.loglik);
            if (suff.loglik - prev).abs() <= opts.tol * suff.loglik.abs().max(1.0) {
                prev = suff.loglik;
                converged = true;
                break;
            }
            prev = suff.loglik;
            if iterations >= opts.max_iter {
                break;
            }
            pi = suff.m_class.iter().map(|&mc| mc / n).collect();
            warn_degenerate(&pi, &mut warnings);
            for (c, tc) in suff.t.iter().enumerate() {
                for (j, &tcj) in tc.iter().enumerate() {
                    if tcj > 0.0 {
                        for (x, cell) in phi[j][c].iter_mut().enumerate() {
                            *cell = suff.m[c][j][x] / tcj;
                        }
                    }
                    // an empty class keeps its previous probabilities
                }
            }
            iterations += 1;
        }
        if !converged {
            warnings.push("EM stopped at the iteration cap before converging");
        }
        return Ok(EmRun {
            pi,
            items: ItemParams::Probs { probs: phi },
            lk: prev,
            iterations,
            converged,
            lk_trace,
            warnings: warnings.0,
        });
    }

    let layout = ParamLayout::build(spec)?;
    let (support, difficulties, gamma) = start.as_irt().expect("validated linked start");
    let packed = layout.pack(support, difficulties, gamma);
    let mut state = LinkedState::new(&layout, spec.link, packed)?;
    // the design matrices depend only on the layout: build once
    let zs: Vec<Vec<DMatrix<f64>>> = (0..layout.n_classes)
        .map(|c| (0..layout.n_items()).map(|j| layout.design_matrix(c, j)).collect())
        .collect();
    loop {
        let suff = e_step(data, &pi, &state.ln_lambda());
        check_finite(suff.loglik, iterations)?;
        lk_trace.push(suff.loglik);
        if (suff.loglik - prev).abs() <= opts.tol * suff.loglik.abs().max(1.0) {
            prev = suff.loglik;
            converged = true;
            break;
        }
        prev = suff.loglik;
        if iterations >= opts.max_iter {
            break;
        }
        pi = suff.m_class.iter().map(|&mc| mc / n).collect();
        warn_degenerate(&pi, &mut warnings);
        for _ in 0..opts.fisher_sweeps {
            fisher_sweep(&layout, &mut state, &suff, &zs, &mut warnings)?;
        }
        iterations += 1;
    }
    if !converged {
        warnings.push("EM stopped at the iteration cap before converging");
    }
    let (support, difficulties, gamma) = layout.unpack(&state.packed);
    Ok(EmRun {
        pi,
        items: ItemParams::Irt { support, difficulties, discrimination: gamma },
        lk: prev,
        iterations,
        converged,
        lk_trace,
        warnings: warnings.0,
    })
}

fn check_finite(loglik: f64, iteration: usize) -> Result<()> {
    if loglik.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLikelihood { iteration })
    }
}

fn warn_degenerate(pi: &[f64], warnings: &mut Warnings) {
    if pi.iter().any(|&p| p < DEGENERATE_WEIGHT) {
        warnings.push("a class weight collapsed toward zero; the class is effectively empty");
    }
}

/// Materializes a start into parameter values.
fn start_params(
    spec: &ModelSpec,
    data: &ResponseMatrix,
    start: &Start,
) -> Result<ParameterSet> {
    match start {
        Start::Deterministic => deterministic_start(spec, data),
        Start::Seed(seed) => random_start(spec, data, *seed),
        Start::Supplied(params) => {
            validate_params(spec, params)?;
            Ok(ParameterSet::clone(params))
        }
    }
}

/// Fits `spec` to `data` by EM, trying every start in the policy and
/// keeping the best.
pub fn fit(spec: &ModelSpec, data: &ResponseMatrix, opts: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    if spec.cats != data.cats {
        return Err(Error::InvalidSpec(format!(
            "spec category counts {:?} do not match the data's {:?}",
            spec.cats, data.cats
        )));
    }
    if data.n_units() == 0 {
        return Err(Error::EmptyInput("no observations".into()));
    }
    if opts.start.starts.is_empty() {
        return Err(Error::InvalidSpec("the start policy lists no starts".into()));
    }
    let mut best: Option<(usize, EmRun)> = None;
    let mut table = Vec::with_capacity(opts.start.starts.len());
    let mut first_err: Option<Error> = None;
    for (idx, start) in opts.start.starts.iter().enumerate() {
        let run = start_params(spec, data, start).and_then(|p| run_em(spec, data, &p, opts));
        match run {
            Ok(run) => {
                table.push(StartRecord {
                    start: start.label(),
                    lk: Some(run.lk),
                    iterations: run.iterations,
                    converged: run.converged,
                });
                // strictly greater: ties keep the earlier start
                if best.as_ref().map_or(true, |(_, b)| run.lk > b.lk) {
                    best = Some((idx, run));
                }
            }
            Err(err) => {
                table.push(StartRecord {
                    start: start.label(),
                    lk: None,
                    iterations: 0,
                    converged: false,
                });
                if matches!(err, Error::InvalidParams(_)) {
                    // a bad supplied start is a caller error, not a failed try
                    return Err(err);
                }
                first_err.get_or_insert(err);
            }
        }
    }
    let Some((start_used, run)) = best else {
        return Err(first_err.expect("no starts succeeded"));
    };
    let mut warnings = run.warnings;
    if table.iter().any(|row| row.lk.is_none()) {
        warnings.push("some starts failed and were dropped".into());
    }

    let mut params = ParameterSet { pi: run.pi, items: run.items };
    if !spec.link.is_none() {
        sort_classes(&mut params);
    }
    let (posteriors, lk, cond_probs) = evaluate(spec, &params, data)?;
    debug_assert!((lk - run.lk).abs() <= 1e-6 * lk.abs().max(1.0));
    let np = count_free_params(spec);
    let n = data.n_units();
    Ok(FitResult {
        spec: spec.clone(),
        params,
        lk,
        np,
        aic: -2.0 * lk + 2.0 * np as f64,
        bic: -2.0 * lk + np as f64 * (n as f64).ln(),
        n,
        cond_probs,
        posteriors,
        iterations: run.iterations,
        converged: run.converged,
        start_used,
        start_table: table,
        lk_trace: run.lk_trace,
        warnings,
    })
}

/// Reorders classes by the first ability dimension, ascending; weights and
/// support rows move together.
fn sort_classes(params: &mut ParameterSet) {
    let ItemParams::Irt { support, .. } = &params.items else {
        return;
    };
    let k = support.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| support[a][0].partial_cmp(&support[b][0]).expect("finite support"));
    if order.iter().enumerate().all(|(i, &c)| i == c) {
        return;
    }
    params.pi = order.iter().map(|&c| params.pi[c]).collect();
    if let ItemParams::Irt { support, .. } = &mut params.items {
        *support = order.iter().map(|&c| support[c].clone()).collect();
    }
}

/// Conditional probabilities `[item][class][category]` for any parameter set.
pub fn conditional_probs(spec: &ModelSpec, params: &ParameterSet) -> Result<Vec<Vec<Vec<f64>>>> {
    validate_params(spec, params)?;
    match &params.items {
        ItemParams::Probs { probs } => Ok(probs.clone()),
        ItemParams::Irt { support, difficulties, discrimination } => {
            let layout = ParamLayout::build(spec)?;
            let packed = layout.pack(support, difficulties, discrimination);
            let lambda = compute_lambda(&layout, spec.link, &packed.phi, discrimination)?;
            let r = spec.n_items();
            Ok((0..r)
                .map(|j| (0..spec.n_classes).map(|c| lambda[c][j].clone()).collect())
                .collect())
        }
    }
}

/// Posterior class memberships `[pattern][class]` and the log-likelihood of
/// `params` on `data`.
pub fn posterior_memberships(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &ResponseMatrix,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let (post, lk, _) = evaluate(spec, params, data)?;
    Ok((post, lk))
}

fn evaluate(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &ResponseMatrix,
) -> Result<(Vec<Vec<f64>>, f64, Vec<Vec<Vec<f64>>>)> {
    if spec.cats != data.cats {
        return Err(Error::InvalidSpec(format!(
            "spec category counts {:?} do not match the data's {:?}",
            spec.cats, data.cats
        )));
    }
    let cond = conditional_probs(spec, params)?;
    let k = spec.n_classes;
    let ln_phi: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|c| cond.iter().map(|item| item[c].iter().map(|v| v.ln()).collect()).collect())
        .collect();
    let suff = e_step(data, &params.pi, &ln_phi);
    if !suff.loglik.is_finite() {
        if let Some(p) = find_zero_pattern(data, &params.pi, &ln_phi) {
            return Err(Error::ZeroPatternProbability { pattern: p + 1 });
        }
        return Err(Error::NonFiniteLikelihood { iteration: 0 });
    }
    Ok((suff.post, suff.loglik, cond))
}

fn find_zero_pattern(data: &ResponseMatrix, pi: &[f64], ln_phi: &[Vec<Vec<f64>>]) -> Option<usize> {
    data.patterns.iter().position(|pattern| {
        (0..pi.len()).all(|c| {
            let mut acc = pi[c].ln();
            for (j, cell) in pattern.iter().enumerate() {
                if let Some(x) = cell {
                    acc += ln_phi[c][j][*x as usize];
                }
            }
            acc == f64::NEG_INFINITY
        })
    })
}

/// Verification hooks: the EM surrogate of a linked model and its analytic
/// gradient, evaluated away from the expansion point. The gradient calls
/// the exact score routines the Fisher-scoring M-step uses, so external
/// tests can difference the surrogate against them. Hidden because it
/// exposes estimation internals; not a stable API.
#[doc(hidden)]
pub mod diag {
    use super::*;

    /// The surrogate `Q(. | params0)`: expected category counts frozen by
    /// one E-step at `params0`, leaving a deterministic function of the
    /// packed difficulty/ability vector and the free discriminations.
    pub struct Surrogate {
        layout: ParamLayout,
        kind: link::LinkKind,
        suff: Suff,
        zs: Vec<Vec<DMatrix<f64>>>,
    }

    impl Surrogate {
        pub fn new(
            spec: &ModelSpec,
            data: &ResponseMatrix,
            params0: &ParameterSet,
        ) -> Result<Self> {
            spec.validate()?;
            if spec.link.is_none() {
                return Err(Error::InvalidSpec(
                    "the surrogate diagnostics need a linked model".into(),
                ));
            }
            crate::design::validate_params(spec, params0)?;
            let layout = ParamLayout::build(spec)?;
            let (support, difficulties, gamma) =
                params0.as_irt().expect("validated linked parameters");
            let packed = layout.pack(support, difficulties, gamma);
            let state = LinkedState::new(&layout, spec.link, packed)?;
            let suff = e_step(data, &params0.pi, &state.ln_lambda());
            let zs = (0..layout.n_classes)
                .map(|c| (0..layout.n_items()).map(|j| layout.design_matrix(c, j)).collect())
                .collect();
            Ok(Self { layout, kind: spec.link, suff, zs })
        }

        /// Packs a parameter set into this surrogate's free coordinates:
        /// the difficulty/ability vector and the free discriminations.
        pub fn coords(&self, params: &ParameterSet) -> (Vec<f64>, Vec<f64>) {
            let (support, difficulties, gamma) =
                params.as_irt().expect("linked parameters");
            let packed = self.layout.pack(support, difficulties, gamma);
            (packed.phi.as_slice().to_vec(), packed.gamma_free)
        }

        pub fn value(&self, phi: &[f64], gamma_free: &[f64]) -> Result<f64> {
            let state = self.state_at(phi, gamma_free)?;
            Ok(surrogate(&self.suff.m, &state.lambda))
        }

        /// The analytic gradient: the difficulty/ability block plus one
        /// entry per free discrimination, in item order.
        pub fn gradient(&self, phi: &[f64], gamma_free: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            let state = self.state_at(phi, gamma_free)?;
            let (score, _) = phi_score_info(&self.layout, &state, &self.suff, &self.zs)?;
            let mut gammas = Vec::with_capacity(self.layout.free_gamma_items.len());
            for &j in &self.layout.free_gamma_items {
                let (s, _) = gamma_score_info(&self.layout, &state, &self.suff, j)?;
                gammas.push(s);
            }
            Ok((score.as_slice().to_vec(), gammas))
        }

        fn state_at(&self, phi: &[f64], gamma_free: &[f64]) -> Result<LinkedState> {
            let packed = PackedParams {
                phi: DVector::from_column_slice(phi),
                gamma_free: gamma_free.to_vec(),
            };
            LinkedState::new(&self.layout, self.kind, packed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{aggregate_with_cats, RawResponses};
    use crate::design::{DiflConstraint, DiscConstraint, Difficulties};
    use crate::link::LinkKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<i64>], cats: Vec<u32>) -> ResponseMatrix {
        let raw = RawResponses::from_codes(rows, 999).unwrap();
        aggregate_with_cats(&raw, &cats).unwrap()
    }

    /// Brute-force manifest probability of one pattern: sum over classes of
    /// the plain product of conditional probabilities.
    fn pattern_prob(pi: &[f64], cond: &[Vec<Vec<f64>>], pattern: &[Option<u32>]) -> f64 {
        (0..pi.len())
            .map(|c| {
                pi[c]
                    * pattern
                        .iter()
                        .enumerate()
                        .filter_map(|(j, cell)| cell.map(|x| cond[j][c][x as usize]))
                        .product::<f64>()
            })
            .sum()
    }

    fn small_fit_data() -> ResponseMatrix {
        matrix(
            &[
                vec![0, 0, 0],
                vec![0, 0, 0],
                vec![0, 1, 0],
                vec![1, 999, 2],
                vec![1, 1, 2],
                vec![1, 1, 1],
                vec![0, 0, 1],
                vec![1, 0, 2],
                vec![0, 1, 1],
                vec![1, 1, 0],
            ],
            vec![2, 2, 3],
        )
    }

    #[test]
    fn log_likelihood_matches_enumeration() {
        let data = small_fit_data();
        let spec = ModelSpec::unidimensional(
            2,
            LinkKind::Global,
            DiscConstraint::Free,
            DiflConstraint::Free,
            vec![2, 2, 3],
        )
        .unwrap();
        let params = crate::design::random_start(&spec, &data, 7).unwrap();
        let cond = conditional_probs(&spec, &params).unwrap();
        let (post, lk) = posterior_memberships(&spec, &params, &data).unwrap();
        let by_enumeration: f64 = data
            .patterns
            .iter()
            .zip(&data.freq)
            .map(|(pat, &f)| f as f64 * pattern_prob(&params.pi, &cond, pat).ln())
            .sum();
        assert_abs_diff_eq!(lk, by_enumeration, epsilon = 1e-10);
        // posteriors are Bayes' rule applied pattern by pattern
        for (p, pat) in data.patterns.iter().enumerate() {
            let total = pattern_prob(&params.pi, &cond, pat);
            for c in 0..2 {
                let joint = params.pi[c]
                    * pat
                        .iter()
                        .enumerate()
                        .filter_map(|(j, cell)| cell.map(|x| cond[j][c][x as usize]))
                        .product::<f64>();
                assert_abs_diff_eq!(post[p][c], joint / total, epsilon = 1e-12);
            }
        }
    }

    /// Five-point central difference of `f` at `x`.
    fn fd5(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
    }

    /// The analytic score and expected information against finite
    /// differences of the surrogate, with missing data so the per-item
    /// totals differ from the class sizes.
    #[test]
    fn fisher_quantities_match_finite_differences() {
        for (kind, difl) in [
            (LinkKind::Global, DiflConstraint::Free),
            (LinkKind::Global, DiflConstraint::RatingScale),
            (LinkKind::Local, DiflConstraint::Free),
            (LinkKind::Local, DiflConstraint::RatingScale),
        ] {
            let data = matrix(
                &[
                    vec![0, 2, 1],
                    vec![1, 999, 0],
                    vec![2, 0, 999],
                    vec![1, 1, 1],
                    vec![0, 0, 0],
                    vec![2, 2, 2],
                    vec![999, 1, 2],
                ],
                vec![3, 3, 3],
            );
            let spec = ModelSpec::new(
                2,
                kind,
                DiscConstraint::Free,
                difl,
                vec![vec![0, 1], vec![2]],
                vec![3, 3, 3],
            )
            .unwrap();
            let layout = ParamLayout::build(&spec).unwrap();
            let params = crate::design::random_start(&spec, &data, 11).unwrap();
            let (support, difficulties, gamma) = params.as_irt().unwrap();
            let packed = layout.pack(support, difficulties, gamma);
            let state = LinkedState::new(&layout, kind, packed).unwrap();
            let suff = e_step(&data, &params.pi, &state.ln_lambda());

            // score against the gradient of Q(phi)
            let q_of_phi = |phi: &DVector<f64>| {
                let lambda = compute_lambda(&layout, kind, phi, &state.gamma).unwrap();
                surrogate(&suff.m, &lambda)
            };
            let zs: Vec<Vec<DMatrix<f64>>> = (0..layout.n_classes)
                .map(|c| (0..layout.n_items()).map(|j| layout.design_matrix(c, j)).collect())
                .collect();
            let (score, info) = phi_score_info(&layout, &state, &suff, &zs).unwrap();
            for i in 0..layout.phi_len {
                let fd = fd5(
                    |v| {
                        let mut phi = state.packed.phi.clone();
                        phi[i] = v;
                        q_of_phi(&phi)
                    },
                    state.packed.phi[i],
                    1e-4,
                );
                assert_abs_diff_eq!(score[i], fd, epsilon = 1e-6 * (1.0 + score[i].abs()));
            }

            // the expected information equals minus the Hessian when the
            // counts sit exactly at the model: set m = t * lambda
            let mut m_model = suff.m.clone();
            for c in 0..layout.n_classes {
                for j in 0..layout.n_items() {
                    for x in 0..m_model[c][j].len() {
                        m_model[c][j][x] = suff.t[c][j] * state.lambda[c][j][x];
                    }
                }
            }
            let q_model = |phi: &DVector<f64>| {
                let lambda = compute_lambda(&layout, kind, phi, &state.gamma).unwrap();
                surrogate(&m_model, &lambda)
            };
            for i in 0..layout.phi_len {
                for l in 0..layout.phi_len {
                    let hess = fd5(
                        |v| {
                            let mut phi = state.packed.phi.clone();
                            phi[l] = v;
                            let g = fd5(
                                |w| {
                                    let mut phi2 = phi.clone();
                                    phi2[i] = w;
                                    q_model(&phi2)
                                },
                                phi[i],
                                1e-3,
                            );
                            g
                        },
                        state.packed.phi[l],
                        1e-3,
                    );
                    assert_abs_diff_eq!(info[(i, l)], -hess, epsilon = 2e-4 * (1.0 + info[(i, l)].abs()));
                }
            }

            // discrimination score against the gradient of Q(gamma_j)
            for &j in &layout.free_gamma_items {
                let (s, _) = gamma_score_info(&layout, &state, &suff, j).unwrap();
                let fd = fd5(
                    |g| {
                        let mut gamma = state.gamma.clone();
                        gamma[j] = g;
                        let lambda =
                            compute_lambda(&layout, kind, &state.packed.phi, &gamma).unwrap();
                        surrogate(&suff.m, &lambda)
                    },
                    state.gamma[j],
                    1e-4,
                );
                assert_abs_diff_eq!(s, fd, epsilon = 1e-6 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn single_class_latent_class_model_is_the_marginals_within_two_iterations() {
        let data = small_fit_data();
        let spec = ModelSpec::latent_class(1, vec![2, 2, 3]).unwrap();
        let result = fit(&spec, &data, &FitOptions::default()).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 2, "took {} iterations", result.iterations);
        // closed form: observed proportions per item over observed entries
        for j in 0..3 {
            let mut counts = vec![0.0; data.cats[j] as usize];
            let mut total = 0.0;
            for (p, pat) in data.patterns.iter().enumerate() {
                if let Some(x) = pat[j] {
                    counts[x as usize] += data.freq[p] as f64;
                    total += data.freq[p] as f64;
                }
            }
            for x in 0..counts.len() {
                assert_abs_diff_eq!(
                    result.cond_probs[j][0][x],
                    counts[x] / total,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn loglik_never_decreases_along_the_trace() {
        let data = small_fit_data();
        for kind in [LinkKind::Global, LinkKind::Local] {
            for k in [1, 2, 3] {
                let spec = ModelSpec::unidimensional(
                    k,
                    kind,
                    DiscConstraint::Free,
                    DiflConstraint::Free,
                    vec![2, 2, 3],
                )
                .unwrap();
                let result = fit(&spec, &data, &FitOptions::default()).unwrap();
                for w in result.lk_trace.windows(2) {
                    assert!(
                        w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0),
                        "lk decreased from {} to {} (k={k}, {kind})",
                        w[0],
                        w[1]
                    );
                }
            }
        }
    }

    #[test]
    fn enumerated_population_recovers_the_generating_parameters() {
        // a well-separated two-class binary model; data are all patterns
        // weighted by their exact manifest probabilities
        let spec = ModelSpec::unidimensional(
            2,
            LinkKind::Global,
            DiscConstraint::Constrained,
            DiflConstraint::Free,
            vec![2, 2, 2, 2],
        )
        .unwrap();
        let truth = ParameterSet {
            pi: vec![0.4, 0.6],
            items: ItemParams::Irt {
                support: vec![vec![-1.3], vec![1.5]],
                difficulties: Difficulties::Free {
                    beta: vec![vec![0.0], vec![0.7], vec![-0.5], vec![1.0]],
                },
                discrimination: vec![1.0; 4],
            },
        };
        let cond = conditional_probs(&spec, &truth).unwrap();
        let scale = 10_000_000.0;
        let mut rows = Vec::new();
        let mut freq = Vec::new();
        for bits in 0..16u32 {
            let pattern: Vec<Option<u32>> = (0..4).map(|j| Some((bits >> j) & 1)).collect();
            let prob = pattern_prob(&truth.pi, &cond, &pattern);
            rows.push(pattern);
            freq.push((prob * scale).round() as u64);
        }
        let data = ResponseMatrix {
            patterns: rows,
            freq,
            labels: Vec::new(),
            cats: vec![2, 2, 2, 2],
        };
        let result = fit(&spec, &data, &FitOptions::default()).unwrap();
        assert!(result.converged);
        let (support, difficulties, _) = result.params.as_irt().unwrap();
        assert_abs_diff_eq!(result.params.pi[0], 0.4, epsilon = 2e-3);
        assert_abs_diff_eq!(support[0][0], -1.3, epsilon = 2e-2);
        assert_abs_diff_eq!(support[1][0], 1.5, epsilon = 2e-2);
        let Difficulties::Free { beta } = difficulties else { panic!() };
        assert_abs_diff_eq!(beta[1][0], 0.7, epsilon = 2e-2);
        assert_abs_diff_eq!(beta[2][0], -0.5, epsilon = 2e-2);
        assert_abs_diff_eq!(beta[3][0], 1.0, epsilon = 2e-2);
    }

    #[test]
    fn classes_come_back_ordered_by_first_ability_dimension() {
        let data = small_fit_data();
        let spec = ModelSpec::unidimensional(
            3,
            LinkKind::Local,
            DiscConstraint::Constrained,
            DiflConstraint::Free,
            vec![2, 2, 3],
        )
        .unwrap();
        let result = fit(&spec, &data, &FitOptions::default()).unwrap();
        let (support, _, _) = result.params.as_irt().unwrap();
        for w in support.windows(2) {
            assert!(w[0][0] <= w[1][0]);
        }
        // stored posteriors must match a fresh evaluation of the stored
        // parameters (ordering stayed consistent)
        let (post, lk) = posterior_memberships(&spec, &result.params, &data).unwrap();
        assert_abs_diff_eq!(lk, result.lk, epsilon = 1e-9);
        for (stored, fresh) in result.posteriors.iter().zip(&post) {
            for (a, b) in stored.iter().zip(fresh) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn start_policy_keeps_the_best_and_ties_go_to_the_earlier_start() {
        let data = small_fit_data();
        let spec = ModelSpec::latent_class(2, vec![2, 2, 3]).unwrap();
        let good = deterministic_start(&spec, &data).unwrap();
        let policy = StartPolicy {
            starts: vec![
                Start::Supplied(Arc::new(good.clone())),
                Start::Supplied(Arc::new(good))
            ],
        };
        let opts = FitOptions { start: policy, ..FitOptions::default() };
        let result = fit(&spec, &data, &opts).unwrap();
        assert_eq!(result.start_used, 0);
        assert_eq!(result.start_table.len(), 2);
        assert_eq!(result.start_table[0].lk, result.start_table[1].lk);
    }

    #[test]
    fn multi_start_explores_seeds_in_order() {
        let policy = StartPolicy::multi_start(3, 100);
        assert_eq!(policy.starts.len(), 4);
        assert!(matches!(policy.starts[0], Start::Deterministic));
        assert!(matches!(policy.starts[1], Start::Seed(100)));
        assert!(matches!(policy.starts[3], Start::Seed(102)));
    }

    #[test]
    fn iteration_cap_reports_non_convergence_without_failing() {
        let data = small_fit_data();
        let spec = ModelSpec::unidimensional(
            2,
            LinkKind::Global,
            DiscConstraint::Free,
            DiflConstraint::Free,
            vec![2, 2, 3],
        )
        .unwrap();
        let opts = FitOptions { max_iter: 1, ..FitOptions::default() };
        let result = fit(&spec, &data, &opts).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations, 1);
        assert!(result.warnings.iter().any(|w| w.contains("iteration cap")));
    }

    #[test]
    fn collapsed_class_weight_raises_a_warning() {
        let data = small_fit_data();
        let spec = ModelSpec::latent_class(2, vec![2, 2, 3]).unwrap();
        // identical conditional probabilities in both classes: posteriors
        // equal the prior forever, so a vanishing weight stays vanishing
        let row = vec![0.5, 0.5];
        let row3 = vec![1.0 / 3.0; 3];
        let start = ParameterSet {
            pi: vec![1.0 - 5e-9, 5e-9],
            items: ItemParams::Probs {
                probs: vec![
                    vec![row.clone(), row.clone()],
                    vec![row.clone(), row.clone()],
                    vec![row3.clone(), row3.clone()],
                ],
            },
        };
        let opts = FitOptions {
            start: StartPolicy::from_params(start),
            max_iter: 5,
            ..FitOptions::default()
        };
        let result = fit(&spec, &data, &opts).unwrap();
        assert!(result.warnings.iter().any(|w| w.contains("class weight")));
    }

    #[test]
    fn information_criteria_follow_their_formulas() {
        let data = small_fit_data();
        let spec = ModelSpec::latent_class(2, vec![2, 2, 3]).unwrap();
        let result = fit(&spec, &data, &FitOptions::default()).unwrap();
        assert_abs_diff_eq!(result.aic, -2.0 * result.lk + 2.0 * result.np as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(
            result.bic,
            -2.0 * result.lk + result.np as f64 * (result.n as f64).ln(),
            epsilon = 1e-12
        );
        assert_eq!(result.np, count_free_params(&spec));
    }

    #[test]
    fn extra_fisher_sweeps_reach_the_same_optimum() {
        // k = 1 keeps the optimum unique, so the sweep count may only
        // change the path, not the destination
        let data = small_fit_data();
        let spec = ModelSpec::unidimensional(
            1,
            LinkKind::Global,
            DiscConstraint::Free,
            DiflConstraint::Free,
            vec![2, 2, 3],
        )
        .unwrap();
        let one = fit(&spec, &data, &FitOptions::default()).unwrap();
        let opts = FitOptions { fisher_sweeps: 3, ..FitOptions::default() };
        let three = fit(&spec, &data, &opts).unwrap();
        assert!(one.converged && three.converged);
        assert_abs_diff_eq!(one.lk, three.lk, epsilon = 1e-6);
    }

    #[test]
    fn mismatched_categories_are_rejected() {
        let data = small_fit_data();
        let spec = ModelSpec::latent_class(2, vec![2, 2, 2]).unwrap();
        assert!(matches!(
            fit(&spec, &data, &FitOptions::default()),
            Err(Error::InvalidSpec(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn posteriors_always_sum_to_one(seed in 0u64..200, k in 1usize..4) {
            let data = small_fit_data();
            let spec = ModelSpec::unidimensional(
                k,
                LinkKind::Local,
                DiscConstraint::Constrained,
                DiflConstraint::Free,
                vec![2, 2, 3],
            )
            .unwrap();
            let opts = FitOptions {
                start: StartPolicy { starts: vec![Start::Seed(seed)] },
                max_iter: 60,
                ..FitOptions::default()
            };
            let result = fit(&spec, &data, &opts).unwrap();
            for row in &result.posteriors {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
            let s: f64 = result.params.pi.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn generalized_em_is_monotone_for_random_starts(seed in 0u64..500) {
            let data = small_fit_data();
            let spec = ModelSpec::new(
                2,
                if seed % 2 == 0 { LinkKind::Global } else { LinkKind::Local },
                if seed % 3 == 0 { DiscConstraint::Free } else { DiscConstraint::Constrained },
                DiflConstraint::Free,
                vec![vec![0, 1], vec![2]],
                vec![2, 2, 3],
            )
            .unwrap();
            let opts = FitOptions {
                start: StartPolicy { starts: vec![Start::Seed(seed)] },
                max_iter: 40,
                ..FitOptions::default()
            };
            let result = fit(&spec, &data, &opts).unwrap();
            for w in result.lk_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
            }
        }
    }
}
