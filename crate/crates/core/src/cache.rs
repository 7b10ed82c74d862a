//! Per-layer bounded expert cache with batch access semantics.
//!
//! A cache holds at most `capacity` resident experts. Each token accesses a
//! batch of K selected experts at once; residents are hits, the rest are
//! misses that insert the expert and evict one under the active policy.
//!
//! Because the K experts of one token arrive in parallel, a recency order
//! must be imposed within the batch. The default places higher-gate-weight
//! experts earlier in the recency order, so they are evicted first; the
//! opposite ordering is available for ablation.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::routing::Selection;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CacheError {
    #[error("cannot evict from an empty cache")]
    EmptyCache,
    #[error("expert index {0} out of range for {1} experts")]
    InvalidExpert(usize, usize),
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("cache capacity must be at least 1")]
    ZeroCapacity,
    #[error("belady eviction requires a foresight stream")]
    MissingForesight,
}

/// Recency position of a token's batch members relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraBatchOrder {
    /// Higher gate weight is placed older, hence evicted first (default).
    HighWeightEvictedFirst,
    /// Ablation: lower gate weight is evicted first.
    LowWeightEvictedFirst,
}

/// Active experts of a selection in the order the cache processes them.
/// Stable sort, so equal weights keep their selection order.
pub fn batch_order(selection: &Selection, order: IntraBatchOrder) -> Vec<usize> {
    let mut slots: Vec<(usize, f64)> = selection
        .experts
        .iter()
        .copied()
        .zip(selection.gate_weights.iter().copied())
        .collect();
    match order {
        IntraBatchOrder::HighWeightEvictedFirst => {
            slots.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite gate weights"));
        }
        IntraBatchOrder::LowWeightEvictedFirst => {
            slots.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite gate weights"));
        }
    }
    slots.into_iter().map(|(e, _)| e).collect()
}

/// Future access positions per expert, consumed as the replay advances.
/// Positions index the flattened per-layer access stream, so experts
/// re-used later in the same token are still seen as imminent.
#[derive(Debug, Clone, Default)]
pub struct FutureUses {
    queues: Vec<VecDeque<u64>>,
}

impl FutureUses {
    /// Build from the flattened access stream of one layer, in the exact
    /// order the cache will process it.
    pub fn from_stream(num_experts: usize, stream: impl IntoIterator<Item = usize>) -> Self {
        let mut queues = vec![VecDeque::new(); num_experts];
        for (pos, expert) in stream.into_iter().enumerate() {
            queues[expert].push_back(pos as u64);
        }
        Self { queues }
    }

    fn consume(&mut self, expert: usize, pos: u64) {
        if let Some(front) = self.queues[expert].front() {
            debug_assert_eq!(*front, pos, "foresight out of sync with replay");
            if *front == pos {
                self.queues[expert].pop_front();
            }
        }
    }

    /// Next access position of `expert`, or `None` if it is never used again.
    pub fn next_use(&self, expert: usize) -> Option<u64> {
        self.queues[expert].front().copied()
    }
}

/// Eviction policy driving the cache.
#[derive(Debug, Clone)]
pub enum Policy {
    Lru,
    /// Clairvoyant eviction using the future access stream.
    Belady(FutureUses),
}

/// Hit/miss accounting for one token's batch. `hits + misses +
/// inactive_slots` always equals the step's K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessOutcome {
    pub hits: usize,
    pub misses: usize,
    pub inactive_slots: usize,
    pub evicted: Vec<usize>,
    pub token_index: u64,
}

/// Closed and censored cache lifetimes, in tokens.
///
/// A lifetime closes at eviction (eviction token minus insertion token).
/// Experts still resident at the end of the trace are censored: reported,
/// but excluded from the mean so trace length does not bias it.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeStats {
    pub samples: Vec<u64>,
    pub censored: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

impl LifetimeStats {
    pub fn from_samples(samples: Vec<u64>, censored: Vec<u64>) -> Self {
        let (mean, std) = if samples.is_empty() {
            (0.0, 0.0)
        } else {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
            let var = samples
                .iter()
                .map(|&s| {
                    let d = s as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            (mean, var.sqrt())
        };
        Self {
            samples,
            censored,
            mean,
            std,
        }
    }
}

/// One layer's expert cache.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    num_experts: usize,
    capacity: usize,
    /// Resident experts, least recently used first.
    recency: Vec<usize>,
    resident: Vec<bool>,
    insert_token: Vec<u64>,
    policy: Policy,
    intra_batch: IntraBatchOrder,
    closed_lifetimes: Vec<u64>,
    access_pos: u64,
}

impl ExpertCache {
    pub fn new(
        num_experts: usize,
        capacity: usize,
        policy: Policy,
        intra_batch: IntraBatchOrder,
    ) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        Ok(Self {
            num_experts,
            capacity,
            recency: Vec::with_capacity(capacity),
            resident: vec![false; num_experts],
            insert_token: vec![0; num_experts],
            policy,
            intra_batch,
            closed_lifetimes: Vec::new(),
            access_pos: 0,
        })
    }

    /// Pre-fill with `capacity` distinct experts drawn without replacement.
    /// Their insertion token is 0 for lifetime purposes.
    pub fn randomize_residents(&mut self, rng: &mut impl Rng) {
        self.recency.clear();
        self.resident.iter_mut().for_each(|r| *r = false);
        let fill = self.capacity.min(self.num_experts);
        for idx in rand::seq::index::sample(rng, self.num_experts, fill) {
            self.recency.push(idx);
            self.resident[idx] = true;
            self.insert_token[idx] = 0;
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident_count(&self) -> usize {
        self.recency.len()
    }

    pub fn is_full(&self) -> bool {
        self.recency.len() >= self.capacity
    }

    /// Residency bitmask m_t over the N experts.
    pub fn bitmask(&self) -> &[bool] {
        &self.resident
    }

    /// Resident experts least-recently-used first.
    pub fn recency_order(&self) -> &[usize] {
        &self.recency
    }

    fn remove_resident(&mut self, expert: usize) {
        if let Some(pos) = self.recency.iter().position(|&e| e == expert) {
            self.recency.remove(pos);
            self.resident[expert] = false;
        }
    }

    /// Evict and return the least recently used resident.
    pub fn lru_evict(&mut self) -> Result<usize, CacheError> {
        self.lru_evict_protected(&[])
    }

    /// LRU eviction skipping `protected` experts (the current batch's
    /// not-yet-used selections). Falls back to the plain LRU victim when
    /// every resident is protected, which only happens at capacity < K.
    fn lru_evict_protected(&mut self, protected: &[bool]) -> Result<usize, CacheError> {
        if self.recency.is_empty() {
            return Err(CacheError::EmptyCache);
        }
        let victim = self
            .recency
            .iter()
            .copied()
            .find(|&e| !protected.get(e).copied().unwrap_or(false))
            .unwrap_or(self.recency[0]);
        self.remove_resident(victim);
        Ok(victim)
    }

    /// Evict and return the resident whose next use is farthest in the
    /// future. Residents never used again are farthest; ties among those are
    /// broken by ascending expert index.
    pub fn belady_evict(&mut self) -> Result<usize, CacheError> {
        self.belady_evict_protected(&[])
    }

    fn belady_evict_protected(&mut self, protected: &[bool]) -> Result<usize, CacheError> {
        if self.recency.is_empty() {
            return Err(CacheError::EmptyCache);
        }
        let future = match &self.policy {
            Policy::Belady(f) => f,
            Policy::Lru => return Err(CacheError::MissingForesight),
        };
        let mut residents: Vec<usize> = self.recency.clone();
        residents.sort_unstable();
        let unprotected: Vec<usize> = residents
            .iter()
            .copied()
            .filter(|&e| !protected.get(e).copied().unwrap_or(false))
            .collect();
        let candidates = if unprotected.is_empty() {
            residents
        } else {
            unprotected
        };
        let mut best = candidates[0];
        let mut best_use = future.next_use(best);
        for &e in &candidates[1..] {
            let u = future.next_use(e);
            let better = match (best_use, u) {
                (None, _) => false,
                (Some(_), None) => true,
                (Some(a), Some(b)) => b > a,
            };
            if better {
                best = e;
                best_use = u;
            }
        }
        self.remove_resident(best);
        Ok(best)
    }

    fn evict_one(&mut self, protected: &[bool]) -> Result<usize, CacheError> {
        match self.policy {
            Policy::Lru => self.lru_evict_protected(protected),
            Policy::Belady(_) => self.belady_evict_protected(protected),
        }
    }

    /// Access one token's batch of selected experts. Residents are hits and
    /// have their recency refreshed; the rest are misses that insert the
    /// expert, evicting per policy when full. Inactive pruning slots touch
    /// nothing. Batch members are processed in the configured weight order;
    /// members not yet used this token are protected from eviction, so a
    /// resident selection always counts as a hit whenever capacity >= K.
    pub fn access_batch(
        &mut self,
        selection: &Selection,
        token_index: u64,
    ) -> Result<AccessOutcome, CacheError> {
        for &e in &selection.experts {
            if e >= self.num_experts {
                return Err(CacheError::InvalidExpert(e, self.num_experts));
            }
        }
        let mut outcome = AccessOutcome {
            hits: 0,
            misses: 0,
            inactive_slots: selection.inactive_slots,
            evicted: Vec::new(),
            token_index,
        };
        let order = batch_order(selection, self.intra_batch);
        let mut pending = vec![false; self.num_experts];
        for &e in &order {
            pending[e] = true;
        }
        for expert in order {
            pending[expert] = false;
            let pos = self.access_pos;
            self.access_pos += 1;
            if let Policy::Belady(future) = &mut self.policy {
                future.consume(expert, pos);
            }
            if self.resident[expert] {
                outcome.hits += 1;
                // Refresh recency: move to the most-recent end.
                let idx = self
                    .recency
                    .iter()
                    .position(|&e| e == expert)
                    .expect("resident bitmask matches recency list");
                self.recency.remove(idx);
                self.recency.push(expert);
            } else {
                outcome.misses += 1;
                if self.is_full() {
                    let victim = self.evict_one(&pending)?;
                    self.closed_lifetimes
                        .push(token_index - self.insert_token[victim]);
                    outcome.evicted.push(victim);
                }
                self.recency.push(expert);
                self.resident[expert] = true;
                self.insert_token[expert] = token_index;
            }
            debug_assert!(self.recency.len() <= self.capacity);
        }
        Ok(outcome)
    }

    /// Close out the run: evicted lifetimes become samples, residents at
    /// `final_token` become censored observations.
    pub fn finalize_lifetimes(&self, final_token: u64) -> LifetimeStats {
        let censored: Vec<u64> = self
            .recency
            .iter()
            .map(|&e| final_token - self.insert_token[e])
            .collect();
        LifetimeStats::from_samples(self.closed_lifetimes.clone(), censored)
    }
}

/// Exact minimum miss count over all eviction strategies, by depth-first
/// search with memoization on (time, cache-set) states. Only feasible for
/// tiny instances; used as the optimality oracle for Belady eviction.
///
/// `batches` lists each token's active experts in cache processing order.
pub fn brute_force_optimal_misses(
    batches: &[Vec<usize>],
    num_experts: usize,
    capacity: usize,
) -> Result<usize, CacheError> {
    if capacity == 0 {
        return Err(CacheError::ZeroCapacity);
    }
    if batches.len() > 12 || num_experts > 6 || capacity > 4 {
        return Err(CacheError::TooLarge(format!(
            "bounds are <= 12 batches, <= 6 experts, capacity <= 4; got {} batches, {} experts, capacity {}",
            batches.len(),
            num_experts,
            capacity
        )));
    }
    let mut accesses = Vec::new();
    for batch in batches {
        for &e in batch {
            if e >= num_experts {
                return Err(CacheError::InvalidExpert(e, num_experts));
            }
            accesses.push(e);
        }
    }

    fn search(
        accesses: &[usize],
        idx: usize,
        cache: u8,
        capacity: usize,
        memo: &mut HashMap<(usize, u8), usize>,
    ) -> usize {
        if idx == accesses.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(idx, cache)) {
            return v;
        }
        let e = accesses[idx];
        let bit = 1u8 << e;
        let result = if cache & bit != 0 {
            search(accesses, idx + 1, cache, capacity, memo)
        } else if (cache.count_ones() as usize) < capacity {
            1 + search(accesses, idx + 1, cache | bit, capacity, memo)
        } else {
            let mut best = usize::MAX;
            for victim in 0..8 {
                let vbit = 1u8 << victim;
                if cache & vbit != 0 {
                    let next = (cache & !vbit) | bit;
                    best = best
                        .min(1 + search(accesses, idx + 1, next, capacity, memo));
                }
            }
            best
        };
        memo.insert((idx, cache), result);
        result
    }

    let mut memo = HashMap::new();
    Ok(search(&accesses, 0, 0, capacity, &mut memo))
}
