//! Reproducible parallel replicate execution.
//!
//! Replicate `i` of an experiment always draws from the ChaCha8 stream `i`
//! under a key derived from `(master_seed, experiment tag)`. Replicates are
//! grouped into fixed-size blocks, blocks run on a worker pool, and block
//! results are merged in block order, so every output is a function of the
//! seed alone and never of the worker count.

use crate::stats::MeanAccumulator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub type McRng = ChaCha8Rng;

/// Replicates per block.
pub const BLOCK: u64 = 256;
/// Blocks dispatched per round of a rejection sampler.
const ROUND_BLOCKS: u64 = 64;
/// Attempts after which a rejection sampler checks its acceptance rate.
const ACCEPTANCE_PROBE: u64 = 100_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum McError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("underpowered: {0}")]
    Underpowered(String),
    #[error("acceptance rate {accepted}/{attempts} is below 1e-4; lower n or move the root up")]
    AcceptanceTooLow { accepted: u64, attempts: u64 },
    #[error("verification failed: {0}")]
    VerificationFailure(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Seed, experiment tag and worker count for a batch of replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub master_seed: u64,
    pub tag: u64,
    pub workers: usize,
    key: [u8; 32],
}

impl Plan {
    pub fn new(master_seed: u64, tag: &str, workers: usize) -> Self {
        Plan::with_tag(master_seed, fnv1a(0xcbf2_9ce4_8422_2325, tag.as_bytes()), workers)
    }

    fn with_tag(master_seed: u64, tag: u64, workers: usize) -> Self {
        let mut keygen = ChaCha8Rng::seed_from_u64(master_seed ^ tag.rotate_left(17));
        let mut key = [0u8; 32];
        rand::RngCore::fill_bytes(&mut keygen, &mut key);
        Plan {
            master_seed,
            tag,
            workers: workers.max(1),
            key,
        }
    }

    /// Same seed and workers, sub-experiment tag.
    pub fn derive(&self, tag: &str) -> Plan {
        let t = fnv1a(self.tag, format!("/{tag}").as_bytes());
        Plan::with_tag(self.master_seed, t, self.workers)
    }

    /// Stream for replicate `index`.
    pub fn rng(&self, index: u64) -> McRng {
        let mut r = ChaCha8Rng::from_seed(self.key);
        r.set_stream(index);
        r
    }

    fn pool(&self) -> Result<rayon::ThreadPool, McError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| McError::Pool(e.to_string()))
    }

    /// Runs `f(block)` for `blocks` consecutive block indices starting at
    /// `first`, returning results in block order.
    pub fn blocks<T, F>(&self, first: u64, blocks: u64, f: F) -> Result<Vec<T>, McError>
    where
        T: Send,
        F: Fn(u64) -> T + Sync + Send,
    {
        if self.workers == 1 {
            return Ok((first..first + blocks).map(f).collect());
        }
        let pool = self.pool()?;
        Ok(pool.install(|| (first..first + blocks).into_par_iter().map(f).collect()))
    }

    /// Folds `reps` replicates into per-block states created by `init`, then
    /// merges the block states in order.
    pub fn replicate<S, I, F>(&self, reps: u64, init: I, body: F) -> Result<S, McError>
    where
        S: Merge + Send,
        I: Fn() -> S + Sync + Send,
        F: Fn(&mut S, &mut McRng, u64) + Sync + Send,
    {
        let n_blocks = reps.div_ceil(BLOCK);
        let parts = self.blocks(0, n_blocks, |b| {
            let mut state = init();
            let end = ((b + 1) * BLOCK).min(reps);
            for i in b * BLOCK..end {
                let mut rng = self.rng(i);
                body(&mut state, &mut rng, i);
            }
            state
        })?;
        let mut total = init();
        for p in parts {
            total.merge(p);
        }
        Ok(total)
    }

    /// Draws attempts `0, 1, 2, …` until `target` of them return `Some`,
    /// keeping the first `target` accepted values in attempt order.
    pub fn accept<T, F>(&self, target: usize, max_attempts: u64, attempt: F) -> Result<Accepted<T>, McError>
    where
        T: Send,
        F: Fn(&mut McRng, u64) -> Option<T> + Sync + Send,
    {
        self.accept_where(target, max_attempts, attempt, |_| true)
    }

    /// As [`Plan::accept`], but only values with `counts(v)` count towards
    /// `target`; the others are kept in order alongside them.
    pub fn accept_where<T, F, C>(&self, target: usize, max_attempts: u64, attempt: F, counts: C) -> Result<Accepted<T>, McError>
    where
        T: Send,
        F: Fn(&mut McRng, u64) -> Option<T> + Sync + Send,
        C: Fn(&T) -> bool,
    {
        let mut values = Vec::with_capacity(target);
        let mut accepted = 0usize;
        let mut last_index = 0u64;
        let mut block = 0u64;
        while accepted < target {
            let round = self.blocks(block, ROUND_BLOCKS, |b| {
                let mut out = Vec::new();
                for i in b * BLOCK..(b + 1) * BLOCK {
                    let mut rng = self.rng(i);
                    if let Some(v) = attempt(&mut rng, i) {
                        out.push((i, v));
                    }
                }
                out
            })?;
            block += ROUND_BLOCKS;
            for (i, v) in round.into_iter().flatten() {
                if accepted < target {
                    accepted += usize::from(counts(&v));
                    values.push(v);
                    last_index = i;
                }
            }
            let attempts = block * BLOCK;
            if accepted < target {
                let a = accepted as u64;
                if attempts >= ACCEPTANCE_PROBE && (a as f64) < MIN_ACCEPTANCE * attempts as f64 {
                    return Err(McError::AcceptanceTooLow { accepted: a, attempts });
                }
                if attempts >= max_attempts {
                    return Err(McError::Underpowered(format!(
                        "only {a} of {target} accepted after {attempts} attempts"
                    )));
                }
            }
        }
        Ok(Accepted {
            values,
            attempts: last_index + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accepted<T> {
    pub values: Vec<T>,
    /// Attempts up to and including the last kept acceptance.
    pub attempts: u64,
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(seed, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Associative combination of per-block states.
pub trait Merge {
    fn merge(&mut self, other: Self);
}

impl Merge for MeanAccumulator {
    fn merge(&mut self, other: Self) {
        MeanAccumulator::merge(self, &other);
    }
}

impl<T: Merge> Merge for Vec<T> {
    fn merge(&mut self, other: Self) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

impl<A: Merge, B: Merge> Merge for (A, B) {
    fn merge(&mut self, other: Self) {
        self.0.merge(other.0);
        self.1.merge(other.1);
    }
}

impl Merge for u64 {
    fn merge(&mut self, other: Self) {
        *self += other;
    }
}

/// Ordered sample collection; merging appends.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples(pub Vec<f64>);

impl Merge for Samples {
    fn merge(&mut self, other: Self) {
        self.0.extend(other.0);
    }
}

/// Monte Carlo estimate of a scalar with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub mean: f64,
    pub std_error: f64,
    pub n_replicates: u64,
    pub seed: u64,
    pub meta: BTreeMap<String, f64>,
}

impl EstimatorResult {
    pub fn from_accumulator(acc: &MeanAccumulator, seed: u64) -> Self {
        EstimatorResult {
            mean: acc.mean(),
            std_error: acc.std_error(),
            n_replicates: acc.count,
            seed,
            meta: BTreeMap::new(),
        }
    }

    pub fn exact(value: f64, seed: u64) -> Self {
        EstimatorResult {
            mean: value,
            std_error: 0.0,
            n_replicates: 1,
            seed,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    /// `(self − value) / se`, with `se` floored at `floor` so that
    /// zero-variance estimators compare against a discretization tolerance.
    pub fn z_against(&self, value: f64, floor: f64) -> f64 {
        (self.mean - value) / self.std_error.max(floor)
    }

    /// Difference in units of the combined standard error.
    pub fn z_between(&self, other: &EstimatorResult, floor: f64) -> f64 {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt().max(floor);
        (self.mean - other.mean) / se
    }
}
