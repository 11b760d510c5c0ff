//! Data generation from a specified model.
//!
//! Each unit draws its latent class from the class weights, then one
//! response per item from that class's conditional distribution, then an
//! independent missing-data mask. Every unit gets its own RNG seeded by
//! mixing the plan seed with the unit index, so output is reproducible and
//! independent of generation order; within a unit all responses are drawn
//! before any mask, so the underlying complete data do not depend on the
//! missing rate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::RawResponses;
use crate::design::{ModelSpec, ParameterSet};
use crate::error::Error;
use crate::estimation::conditional_probs;
use crate::Result;

/// What to generate: a model, its parameter values, and sampling settings.
#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    /// Units to draw.
    pub n: u64,
    pub seed: u64,
    /// Probability, per cell, of masking the response (missing completely
    /// at random). Must lie in `[0, 1)`.
    pub missing_rate: f64,
}

/// Generated responses plus the latent class each unit was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub responses: RawResponses,
    /// True class index per unit, 0-based.
    pub classes: Vec<usize>,
}

/// SplitMix64 finalizer: decorrelates consecutive seed inputs.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_rng(seed: u64, unit: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(unit)))
}

/// Index of the first cumulative weight exceeding `u`.
fn draw_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draws the planned data set.
pub fn simulate(plan: &SimulationPlan) -> Result<SimulatedData> {
    if plan.n == 0 {
        return Err(Error::InvalidPlan("n must be positive".into()));
    }
    if !(0.0..1.0).contains(&plan.missing_rate) {
        return Err(Error::InvalidPlan(format!(
            "missing rate {} must lie in [0, 1)",
            plan.missing_rate
        )));
    }
    // validates the parameters against the spec as a side effect
    let cond = conditional_probs(&plan.spec, &plan.params)?;
    let r = plan.spec.n_items();
    let mut rows = Vec::with_capacity(plan.n as usize);
    let mut classes = Vec::with_capacity(plan.n as usize);
    for unit in 0..plan.n {
        let mut rng = unit_rng(plan.seed, unit);
        let c = draw_index(&plan.params.pi, rng.random::<f64>());
        let mut row: Vec<Option<u32>> = (0..r)
            .map(|j| Some(draw_index(&cond[j][c], rng.random::<f64>()) as u32))
            .collect();
        if plan.missing_rate > 0.0 {
            for cell in row.iter_mut() {
                if rng.random::<f64>() < plan.missing_rate {
                    *cell = None;
                }
            }
        }
        rows.push(row);
        classes.push(c);
    }
    Ok(SimulatedData { responses: RawResponses::from_cells(rows)?, classes })
}
