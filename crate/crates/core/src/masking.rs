//! Mask plans: which tokens the encoder sees and which must be reconstructed.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::{keyed_rng, Domain};
use crate::tokenizer::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    Tube,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(MaskStrategy::Random),
            "tube" => Some(MaskStrategy::Tube),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Tube => "tube",
        }
    }
}

/// Identifies the random stream a plan was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MaskKey {
    pub seed: u64,
    pub sample_id: u64,
    pub epoch: u64,
    pub view: u64,
}

impl MaskKey {
    fn words(&self) -> [u64; 4] {
        [self.seed, self.sample_id, self.epoch, self.view]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    /// Ω, sorted ascending.
    pub masked: Vec<usize>,
    /// Complement of Ω, sorted ascending.
    pub visible: Vec<usize>,
    pub rho: f64,
    pub strategy: MaskStrategy,
    pub key: MaskKey,
}

/// `floor(rho · n)`, tolerant of representation error just below an integer.
pub fn masked_count(n: usize, rho: f64) -> usize {
    (rho * n as f64 + 1e-9).floor() as usize
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config(
            "rho",
            format!("masking ratio must lie in (0, 1), got {rho}"),
        ));
    }
    Ok(())
}

fn plan_from_masked(n: usize, mut masked: Vec<usize>, rho: f64, strategy: MaskStrategy, key: MaskKey) -> MaskPlan {
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    MaskPlan {
        n_tokens: n,
        masked,
        visible,
        rho,
        strategy,
        key,
    }
}

/// Masks the first `floor(rho · n)` entries of a seeded permutation.
pub fn random_mask(n: usize, rho: f64, key: MaskKey) -> Result<MaskPlan> {
    check_rho(rho)?;
    if n < 2 {
        return Err(Error::config("tokens", format!("need at least 2 tokens, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut keyed_rng(Domain::Mask, &key.words()));
    perm.truncate(masked_count(n, rho));
    Ok(plan_from_masked(n, perm, rho, MaskStrategy::Random, key))
}

/// Masks `floor(rho · H'W')` spatial cells through every time slice.
pub fn tube_mask(grid: (usize, usize, usize), rho: f64, key: MaskKey) -> Result<MaskPlan> {
    check_rho(rho)?;
    let (gt, gh, gw) = grid;
    let cells = gh * gw;
    if gt == 0 || cells < 2 {
        return Err(Error::config("tokens", format!("degenerate token grid {grid:?}")));
    }
    let mut perm: Vec<usize> = (0..cells).collect();
    perm.shuffle(&mut keyed_rng(Domain::Mask, &key.words()));
    perm.truncate(masked_count(cells, rho));
    let masked = (0..gt).flat_map(|t| perm.iter().map(move |&c| t * cells + c)).collect();
    Ok(plan_from_masked(gt * cells, masked, rho, MaskStrategy::Tube, key))
}

pub fn make_mask(strategy: MaskStrategy, grid: (usize, usize, usize), rho: f64, key: MaskKey) -> Result<MaskPlan> {
    match strategy {
        MaskStrategy::Random => random_mask(grid.0 * grid.1 * grid.2, rho, key),
        MaskStrategy::Tube => tube_mask(grid, rho, key),
    }
}

impl MaskPlan {
    pub fn check(&self) -> Result<()> {
        if self.masked.is_empty() {
            return Err(Error::invalid("mask plan", "no masked tokens"));
        }
        if self.masked.len() + self.visible.len() != self.n_tokens {
            return Err(Error::invalid(
                "mask plan",
                "masked and visible do not partition the tokens",
            ));
        }
        Ok(())
    }

    /// For every position 0..N, the row to read from `[visible rows; mask token]`
    /// where the mask token sits at row `visible.len()`.
    pub fn assembly_index(&self) -> Vec<usize> {
        let mut map = vec![self.visible.len(); self.n_tokens];
        for (row, &i) in self.visible.iter().enumerate() {
            map[i] = row;
        }
        map
    }
}

/// Keeps the visible tokens of a full batch, in ascending original order.
pub fn split_tokens<T: Scalar>(batch: &TokenBatch<T>, plan: &MaskPlan) -> Result<(TokenBatch<T>, Vec<usize>)> {
    plan.check()?;
    let n = batch.token_index.len();
    if n != plan.n_tokens {
        return Err(Error::shape("split_tokens", &[n], &[plan.n_tokens]));
    }
    let mut row_of = vec![usize::MAX; n];
    for (row, &i) in batch.token_index.iter().enumerate() {
        if i >= n || row_of[i] != usize::MAX {
            return Err(Error::invalid("split_tokens", "batch does not cover every token once"));
        }
        row_of[i] = row;
    }
    let d = batch.tokens.shape()[1];
    let data = plan
        .visible
        .iter()
        .flat_map(|&i| batch.tokens.row(row_of[i]).iter().copied())
        .collect();
    Ok((
        TokenBatch {
            tokens: Tensor::new(&[plan.visible.len(), d], data)?,
            token_index: plan.visible.clone(),
            view_id: batch.view_id,
            is_encoded: batch.is_encoded,
        },
        plan.masked.clone(),
    ))
}
