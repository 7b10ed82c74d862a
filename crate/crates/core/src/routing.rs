//! Router-logit math and expert-selection strategies.
//!
//! Everything in this module is a pure function from router logits, a cache
//! bitmask, and strategy parameters to an expert [`Selection`]. The only
//! mutable state is [`DeltaTracker`], which estimates the per-layer logit
//! range used by the cache-prior bias; the simulator owns one tracker per
//! layer per run.
//!
//! The pipeline per token and layer is:
//!
//! 1. softmax the logits into expert weights,
//! 2. rank experts by weight (ties broken by ascending expert index),
//! 3. apply a strategy that may reorder the ranking in favor of cached
//!    experts, and
//! 4. take the top K of the resulting ranking. Gate weights always come
//!    from the unmodified softmax, never from biased logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RoutingError {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("invalid subset: expert {0} not in ranking")]
    InvalidSubset(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// Raw router logits for one token at one layer. Guaranteed finite and
/// non-empty on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterLogits {
    values: Vec<f64>,
}

impl RouterLogits {
    pub fn new(values: Vec<f64>) -> Result<Self, RoutingError> {
        if values.is_empty() {
            return Err(RoutingError::InvalidLogits("empty logit vector".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(RoutingError::InvalidLogits(format!(
                "non-finite logit {} at index {pos}",
                values[pos]
            )));
        }
        Ok(Self { values })
    }

    /// Convert a stored f32 slice (the trace representation) to f64 logits.
    pub fn from_f32(values: &[f32]) -> Result<Self, RoutingError> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// max(z) - min(z); zero for a single-expert layer.
    pub fn range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    }
}

/// Softmax probabilities over experts; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    probs: Vec<f64>,
}

impl ExpertWeights {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A permutation of expert indices, highest weight first. Ties are broken by
/// ascending expert index so rankings are deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    order: Vec<usize>,
}

impl Ranking {
    /// Wrap an existing permutation of 0..N.
    pub fn from_order(order: Vec<usize>) -> Result<Self, RoutingError> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &e in &order {
            if e >= n || seen[e] {
                return Err(RoutingError::InvalidSubset(e));
            }
            seen[e] = true;
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The first `j` entries (the j highest-ranked experts).
    pub fn top(&self, j: usize) -> &[usize] {
        &self.order[..j.min(self.order.len())]
    }
}

/// Numerically stable softmax (max-subtraction) of the router logits.
pub fn softmax(logits: &RouterLogits) -> ExpertWeights {
    let max = logits
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.values.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    ExpertWeights { probs }
}

/// Indices of `values` sorted descending, ties broken by ascending index.
fn rank_values(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    order
}

/// Rank experts by weight, descending; ties broken by ascending expert index.
pub fn rank(weights: &ExpertWeights) -> Ranking {
    Ranking {
        order: rank_values(&weights.probs),
    }
}

/// Move `subset` (in its given order) to the front of `all`, preserving the
/// relative order of the remaining entries.
pub fn promote(subset: &[usize], all: &Ranking) -> Result<Ranking, RoutingError> {
    let n = all.order.len();
    let mut in_subset = vec![false; n];
    for &e in subset {
        if e >= n || in_subset[e] {
            return Err(RoutingError::InvalidSubset(e));
        }
        in_subset[e] = true;
    }
    let mut order = Vec::with_capacity(n);
    order.extend_from_slice(subset);
    order.extend(all.order.iter().copied().filter(|&e| !in_subset[e]));
    Ok(Ranking { order })
}

// ---------------------------------------------------------------------------
// Routing context
// ---------------------------------------------------------------------------

/// Logits plus their derived weights and ranking, computed once per
/// (token, layer) step and shared by every strategy.
///
/// The ranking is the argsort of the weights; since softmax is strictly
/// order-preserving it is computed directly on the logits, which keeps the
/// ordering exact even where two distinct logits round to the same
/// probability.
#[derive(Debug, Clone)]
pub struct RoutingContext {
    logits: RouterLogits,
    weights: ExpertWeights,
    ranking: Ranking,
}

impl RoutingContext {
    pub fn new(logits: RouterLogits) -> Self {
        let weights = softmax(&logits);
        let ranking = Ranking {
            order: rank_values(logits.values()),
        };
        Self {
            logits,
            weights,
            ranking,
        }
    }

    pub fn logits(&self) -> &RouterLogits {
        &self.logits
    }

    pub fn weights(&self) -> &ExpertWeights {
        &self.weights
    }

    pub fn ranking(&self) -> &Ranking {
        &self.ranking
    }

    pub fn num_experts(&self) -> usize {
        self.logits.len()
    }
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// The experts chosen for one token at one layer.
///
/// `experts` lists the active choices in ranking order; `inactive_slots`
/// counts selection slots emptied by pruning (they keep the denominator at K
/// for fair miss-rate comparison but never touch the cache). Gate weights are
/// the original, unbiased router probabilities of the chosen experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub experts: Vec<usize>,
    pub gate_weights: Vec<f64>,
    /// Per active slot: true where the chosen expert is not in the original
    /// top-K set.
    pub swapped_flags: Vec<bool>,
    /// Slots dropped by pruning; counted in K but neither hit nor miss.
    pub inactive_slots: usize,
    /// Set when a random swap found no replacement candidate (N == K).
    pub swap_pool_exhausted: bool,
}

impl Selection {
    fn from_ranked(ctx: &RoutingContext, chosen: &[usize], k: usize) -> Self {
        let topk = ctx.ranking.top(k);
        let experts = chosen.to_vec();
        let gate_weights = experts.iter().map(|&e| ctx.weights.probs[e]).collect();
        let swapped_flags = experts.iter().map(|&e| !topk.contains(&e)).collect();
        Self {
            experts,
            gate_weights,
            swapped_flags,
            inactive_slots: 0,
            swap_pool_exhausted: false,
        }
    }

    /// Total selection slots for the step, active plus inactive.
    pub fn k(&self) -> usize {
        self.experts.len() + self.inactive_slots
    }

    /// Number of active slots whose expert differs from the original top-K.
    pub fn swapped_count(&self) -> usize {
        self.swapped_flags.iter().filter(|&&s| s).count()
    }

    /// Scale the gate weights so they sum to one. No-op for an all-inactive
    /// selection or a zero sum.
    pub fn renormalize_gates(&mut self) {
        let sum: f64 = self.gate_weights.iter().sum();
        if sum > 0.0 {
            for w in &mut self.gate_weights {
                *w /= sum;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// How the per-layer logit range Δ_avg is estimated for the cache prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    /// Cumulative mean of (max z − min z) over all observed tokens.
    RunningMean,
    /// Exponential moving average; `decay` is the retention factor, so
    /// Δ ← decay·Δ + (1−decay)·range. The first observation initializes Δ.
    Ema { decay: f64 },
    /// Fixed per-layer constant taken from a calibration trace; observations
    /// are ignored.
    Calibrated,
    /// Δ is the current token's exact range. Ablation/test mode: the tracker
    /// must observe the token's logits before the route call.
    ExactPerToken,
}

impl DeltaMode {
    /// Whether the simulator should feed the current token's logits to the
    /// tracker before routing (rather than after, the causal default).
    pub fn observes_before_routing(self) -> bool {
        matches!(self, DeltaMode::ExactPerToken)
    }
}

/// Per-layer estimator of the router logit range, Δ_avg.
///
/// Before the first observation Δ_avg is zero, so the first token routes as
/// if λ = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTracker {
    mode: DeltaMode,
    value: f64,
    count: u64,
}

impl DeltaTracker {
    pub fn new(mode: DeltaMode) -> Self {
        Self {
            mode,
            value: 0.0,
            count: 0,
        }
    }

    /// Tracker pinned to a calibration constant; `observe` is a no-op.
    pub fn calibrated(constant: f64) -> Self {
        Self {
            mode: DeltaMode::Calibrated,
            value: constant,
            count: 0,
        }
    }

    pub fn mode(&self) -> DeltaMode {
        self.mode
    }

    /// Current Δ_avg estimate.
    pub fn delta(&self) -> f64 {
        self.value
    }

    /// Feed one token's logits into the estimate.
    pub fn observe(&mut self, logits: &RouterLogits) {
        let range = logits.range();
        match self.mode {
            DeltaMode::RunningMean => {
                self.count += 1;
                self.value += (range - self.value) / self.count as f64;
            }
            DeltaMode::Ema { decay } => {
                if self.count == 0 {
                    self.value = range;
                } else {
                    self.value = decay * self.value + (1.0 - decay) * range;
                }
                self.count += 1;
            }
            DeltaMode::Calibrated => {}
            DeltaMode::ExactPerToken => {
                self.count += 1;
                self.value = range;
            }
        }
    }
}

/// Which selection transform to apply, with its tuning knob.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyKind {
    /// Plain top-K routing.
    Original,
    /// Discard experts ranked at or below `h` (1-indexed): only the top h−1
    /// stay active. h = 1 is the degenerate nothing-active case.
    Prune { h: usize },
    /// Promote cached experts ranked within the top M, then re-promote the
    /// top J.
    MaxRank { max_rank: usize },
    /// Choose M per token as the smallest rank whose cumulative probability
    /// reaches `threshold`, then apply the max-rank promotion.
    Cumsum { threshold: f64 },
    /// Add λ·Δ_avg to the logits of cached (and top-J) experts and re-rank.
    /// `saturating` is a test/ablation mode that pushes the bias strictly
    /// above the token's logit range so every cached expert outranks every
    /// non-cached one; it requires [`DeltaMode::ExactPerToken`].
    CachePrior {
        lambda: f64,
        delta_mode: DeltaMode,
        saturating: bool,
    },
    /// Replace the expert at rank `swap_rank` (1-indexed) with a uniformly
    /// random non-selected expert. Sensitivity probe, not cache-aware.
    SwapRandom { swap_rank: usize },
}

/// A strategy plus the top-J guarantee shared by the cache-aware transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub kind: StrategyKind,
    pub top_j: usize,
}

impl StrategyParams {
    pub fn original() -> Self {
        Self {
            kind: StrategyKind::Original,
            top_j: 0,
        }
    }

    pub fn prune(h: usize) -> Self {
        Self {
            kind: StrategyKind::Prune { h },
            top_j: 0,
        }
    }

    pub fn max_rank(max_rank: usize, top_j: usize) -> Self {
        Self {
            kind: StrategyKind::MaxRank { max_rank },
            top_j,
        }
    }

    pub fn cumsum(threshold: f64, top_j: usize) -> Self {
        Self {
            kind: StrategyKind::Cumsum { threshold },
            top_j,
        }
    }

    pub fn cache_prior(lambda: f64, delta_mode: DeltaMode, top_j: usize) -> Self {
        Self {
            kind: StrategyKind::CachePrior {
                lambda,
                delta_mode,
                saturating: false,
            },
            top_j,
        }
    }

    /// Cache prior with a bias guaranteed to exceed the token's logit range.
    /// Test/ablation mode backing the dominating-bias invariant.
    pub fn saturating_cache_prior(top_j: usize) -> Self {
        Self {
            kind: StrategyKind::CachePrior {
                lambda: 1.0,
                delta_mode: DeltaMode::ExactPerToken,
                saturating: true,
            },
            top_j,
        }
    }

    pub fn swap_random(swap_rank: usize) -> Self {
        Self {
            kind: StrategyKind::SwapRandom { swap_rank },
            top_j: 0,
        }
    }

    /// Whether routing decisions depend on the cache state. Belady eviction
    /// is only defined for strategies where they do not.
    pub fn is_cache_aware(&self) -> bool {
        matches!(
            self.kind,
            StrategyKind::MaxRank { .. }
                | StrategyKind::Cumsum { .. }
                | StrategyKind::CachePrior { .. }
        )
    }

    /// CLI/CSV name of the strategy.
    pub fn name(&self) -> &'static str {
        match self.kind {
            StrategyKind::Original => "original",
            StrategyKind::Prune { .. } => "prune",
            StrategyKind::MaxRank { .. } => "maxrank",
            StrategyKind::Cumsum { .. } => "cumsum",
            StrategyKind::CachePrior { .. } => "prior",
            StrategyKind::SwapRandom { .. } => "swap-random",
        }
    }

    /// The strategy's tuning parameter as a float (h, M, p, λ, or swap rank).
    pub fn param_value(&self) -> f64 {
        match self.kind {
            StrategyKind::Original => 0.0,
            StrategyKind::Prune { h } => h as f64,
            StrategyKind::MaxRank { max_rank } => max_rank as f64,
            StrategyKind::Cumsum { threshold } => threshold,
            StrategyKind::CachePrior { lambda, .. } => lambda,
            StrategyKind::SwapRandom { swap_rank } => swap_rank as f64,
        }
    }

    pub fn delta_mode(&self) -> Option<DeltaMode> {
        match self.kind {
            StrategyKind::CachePrior { delta_mode, .. } => Some(delta_mode),
            _ => None,
        }
    }

    /// Validate parameter domains against the model shape. Returns warnings
    /// for degenerate-but-allowed settings (e.g. prune h = 1).
    pub fn validate(&self, k: usize, n: usize) -> Result<Vec<String>, RoutingError> {
        let mut warnings = Vec::new();
        if self.top_j > k {
            return Err(RoutingError::InvalidParam(format!(
                "top_j must satisfy J <= K, got J={} K={k}",
                self.top_j
            )));
        }
        match self.kind {
            StrategyKind::Original => {}
            StrategyKind::Prune { h } => {
                if h < 1 || h > k {
                    return Err(RoutingError::InvalidParam(format!(
                        "prune rank h must satisfy 1 <= h <= K, got h={h} K={k}"
                    )));
                }
                if h == 1 {
                    warnings.push("prune h=1 keeps zero active experts".to_string());
                }
            }
            StrategyKind::MaxRank { max_rank } => {
                if max_rank > n {
                    return Err(RoutingError::InvalidParam(format!(
                        "max_rank must satisfy 0 <= M <= N, got M={max_rank} N={n}"
                    )));
                }
            }
            StrategyKind::Cumsum { threshold } => {
                if !(0.0..=1.0).contains(&threshold) || !threshold.is_finite() {
                    return Err(RoutingError::InvalidParam(format!(
                        "cumsum threshold must lie in [0,1], got {threshold}"
                    )));
                }
            }
            StrategyKind::CachePrior {
                lambda,
                delta_mode,
                saturating,
            } => {
                if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
                    return Err(RoutingError::InvalidParam(format!(
                        "lambda must lie in [0,1], got {lambda}"
                    )));
                }
                if let DeltaMode::Ema { decay } = delta_mode {
                    if !(0.0..=1.0).contains(&decay) || !decay.is_finite() {
                        return Err(RoutingError::InvalidParam(format!(
                            "ema decay must lie in [0,1], got {decay}"
                        )));
                    }
                }
                if saturating && delta_mode != DeltaMode::ExactPerToken {
                    return Err(RoutingError::InvalidParam(
                        "saturating cache prior requires the exact-per-token delta mode".into(),
                    ));
                }
            }
            StrategyKind::SwapRandom { swap_rank } => {
                if swap_rank < 1 || swap_rank > k {
                    return Err(RoutingError::InvalidParam(format!(
                        "swap rank must satisfy 1 <= k_swap <= K, got {swap_rank}"
                    )));
                }
            }
        }
        Ok(warnings)
    }
}

// ---------------------------------------------------------------------------
// Route operations
// ---------------------------------------------------------------------------

/// Plain top-K selection: the first K entries of the ranking.
pub fn route_original(ctx: &RoutingContext, k: usize) -> Selection {
    Selection::from_ranked(ctx, ctx.ranking.top(k), k)
}

/// Keep only the top h−1 ranked experts active; the remaining K−(h−1) slots
/// are inactive so miss-rate accounting still divides by K.
pub fn route_pruned(ctx: &RoutingContext, k: usize, h: usize) -> Result<Selection, RoutingError> {
    if h < 1 || h > k {
        return Err(RoutingError::InvalidParam(format!(
            "prune rank h must satisfy 1 <= h <= K, got h={h} K={k}"
        )));
    }
    let keep = h - 1;
    let mut sel = Selection::from_ranked(ctx, ctx.ranking.top(keep), k);
    sel.inactive_slots = k - keep;
    Ok(sel)
}

/// Promotion core shared by max-rank and cumsum: promote the cached experts
/// ranked within the top `max_rank`, then promote the top `top_j`, and take
/// the first K of the result.
fn max_rank_selection(
    ctx: &RoutingContext,
    cache_mask: &[bool],
    k: usize,
    max_rank: usize,
    top_j: usize,
) -> Selection {
    let r = &ctx.ranking;
    let cached_in_window: Vec<usize> = r
        .top(max_rank)
        .iter()
        .copied()
        .filter(|&e| cache_mask.get(e).copied().unwrap_or(false))
        .collect();
    let promoted = promote(&cached_in_window, r).expect("window is a subset of the ranking");
    let final_ranking = promote(r.top(top_j), &promoted).expect("top-J is a subset of the ranking");
    Selection::from_ranked(ctx, final_ranking.top(k), k)
}

/// Max-rank routing: cached experts ranked within the top M are promoted
/// ahead of everything except the guaranteed top-J experts.
pub fn route_max_rank(
    ctx: &RoutingContext,
    cache_mask: &[bool],
    k: usize,
    max_rank: usize,
    top_j: usize,
) -> Selection {
    max_rank_selection(ctx, cache_mask, k, max_rank, top_j)
}

/// The promotion window chosen by the cumulative-probability loop: starting
/// from zero, grow M until the sorted weights sum to at least `threshold`.
pub fn cumsum_window(weights: &ExpertWeights, ranking: &Ranking, threshold: f64) -> usize {
    let n = ranking.len();
    let mut cum = 0.0;
    let mut m = 0;
    while cum < threshold && m < n {
        cum += weights.probs[ranking.order[m]];
        m += 1;
    }
    m
}

/// Cumsum-threshold routing: the max-rank window M is chosen per token from
/// the router's own confidence, then the max-rank promotion applies.
pub fn route_cumsum(
    ctx: &RoutingContext,
    cache_mask: &[bool],
    k: usize,
    threshold: f64,
    top_j: usize,
) -> Selection {
    let m = cumsum_window(&ctx.weights, &ctx.ranking, threshold);
    max_rank_selection(ctx, cache_mask, k, m, top_j)
}

/// Cache-prior routing: bias the logits of cached (and guaranteed top-J)
/// experts by λ·Δ_avg, re-rank the biased logits, and select the top K.
/// Gate weights still come from the unbiased softmax.
pub fn route_cache_prior(
    ctx: &RoutingContext,
    cache_mask: &[bool],
    k: usize,
    lambda: f64,
    delta: &DeltaTracker,
    top_j: usize,
    saturating: bool,
) -> Selection {
    let n = ctx.num_experts();
    let mut augmented: Vec<bool> = (0..n)
        .map(|e| cache_mask.get(e).copied().unwrap_or(false))
        .collect();
    for &e in ctx.ranking.top(top_j) {
        augmented[e] = true;
    }
    let d = delta.delta();
    // The saturating bias must strictly exceed the token's logit range even
    // when the range is zero.
    let bias = if saturating {
        d * (1.0 + 1e-6) + 1e-12
    } else {
        lambda * d
    };
    let biased: Vec<f64> = ctx
        .logits
        .values()
        .iter()
        .enumerate()
        .map(|(e, &z)| if augmented[e] { z + bias } else { z })
        .collect();
    let order = rank_values(&biased);
    Selection::from_ranked(ctx, &order[..k.min(n)], k)
}

/// Replace the expert at rank `swap_rank` (1-indexed) with a uniformly random
/// expert outside the original top-K. If no candidate exists (N == K) the
/// selection is returned unchanged with `swap_pool_exhausted` set.
pub fn swap_rank_random(
    ctx: &RoutingContext,
    k: usize,
    swap_rank: usize,
    rng: &mut impl Rng,
) -> Selection {
    let mut sel = route_original(ctx, k);
    let n = ctx.num_experts();
    if n == k {
        sel.swap_pool_exhausted = true;
        return sel;
    }
    let topk = ctx.ranking.top(k);
    let pool: Vec<usize> = (0..n).filter(|e| !topk.contains(e)).collect();
    let replacement = pool[rng.random_range(0..pool.len())];
    let slot = swap_rank - 1;
    sel.experts[slot] = replacement;
    sel.gate_weights[slot] = ctx.weights.probs[replacement];
    sel.swapped_flags[slot] = true;
    sel
}

/// Seeded convenience wrapper around [`swap_rank_random`].
pub fn swap_rank_random_seeded(
    ctx: &RoutingContext,
    k: usize,
    swap_rank: usize,
    seed: u64,
) -> Selection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    swap_rank_random(ctx, k, swap_rank, &mut rng)
}

/// Dispatch a strategy. `delta` is only read for the cache prior; `rng` is
/// only consumed by the random swap.
pub fn route(
    ctx: &RoutingContext,
    cache_mask: &[bool],
    params: &StrategyParams,
    k: usize,
    delta: &DeltaTracker,
    rng: &mut impl Rng,
) -> Selection {
    match params.kind {
        StrategyKind::Original => route_original(ctx, k),
        StrategyKind::Prune { h } => {
            route_pruned(ctx, k, h).expect("prune parameters validated up front")
        }
        StrategyKind::MaxRank { max_rank } => {
            route_max_rank(ctx, cache_mask, k, max_rank, params.top_j)
        }
        StrategyKind::Cumsum { threshold } => {
            route_cumsum(ctx, cache_mask, k, threshold, params.top_j)
        }
        StrategyKind::CachePrior {
            lambda, saturating, ..
        } => route_cache_prior(ctx, cache_mask, k, lambda, delta, params.top_j, saturating),
        StrategyKind::SwapRandom { swap_rank } => swap_rank_random(ctx, k, swap_rank, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(values: &[f64]) -> RoutingContext {
        RoutingContext::new(RouterLogits::new(values.to_vec()).unwrap())
    }

    fn mask(n: usize, cached: &[usize]) -> Vec<bool> {
        let mut m = vec![false; n];
        for &e in cached {
            m[e] = true;
        }
        m
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let w = softmax(&RouterLogits::new(vec![0.0; 4]).unwrap());
        for &p in w.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let w = softmax(&RouterLogits::new(vec![1000.0, 0.0]).unwrap());
        assert!(w.probs()[0] > 1.0 - 1e-12);
        assert!(w.probs()[1] < 1e-12);
        assert!(w.probs().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_reference_values() {
        // exp(1)=2.718282, exp(2)=7.389056, exp(3)=20.085537, sum=30.192875.
        let w = softmax(&RouterLogits::new(vec![1.0, 2.0, 3.0]).unwrap());
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (p, e) in w.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-5, "got {p}, want {e}");
        }
        let sum: f64 = w.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(
            RouterLogits::new(vec![1.0, f64::NAN]),
            Err(RoutingError::InvalidLogits(_))
        ));
        assert!(RouterLogits::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(RouterLogits::new(vec![]).is_err());
    }

    #[test]
    fn rank_sorts_descending() {
        let w = ExpertWeights {
            probs: vec![0.1, 0.7, 0.2],
        };
        assert_eq!(rank(&w).order(), &[1, 2, 0]);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        let w = ExpertWeights {
            probs: vec![0.5, 0.5],
        };
        assert_eq!(rank(&w).order(), &[0, 1]);
        let w = ExpertWeights {
            probs: vec![0.25; 4],
        };
        assert_eq!(rank(&w).order(), &[0, 1, 2, 3]);
    }

    #[test]
    fn promote_moves_subset_to_front() {
        // Worked example: r = [E1..E6] as indices 0..5, promote {E3, E4}.
        let r = Ranking::from_order(vec![0, 1, 2, 3, 4, 5]).unwrap();
        let p = promote(&[2, 3], &r).unwrap();
        assert_eq!(p.order(), &[2, 3, 0, 1, 4, 5]);
    }

    #[test]
    fn promote_identities() {
        let r = Ranking::from_order(vec![3, 1, 0, 2]).unwrap();
        assert_eq!(promote(&[], &r).unwrap(), r);
        let full: Vec<usize> = r.order().to_vec();
        assert_eq!(promote(&full, &r).unwrap(), r);
    }

    #[test]
    fn promote_rejects_foreign_elements() {
        let r = Ranking::from_order(vec![0, 1, 2]).unwrap();
        assert_eq!(promote(&[5], &r), Err(RoutingError::InvalidSubset(5)));
        assert_eq!(promote(&[1, 1], &r), Err(RoutingError::InvalidSubset(1)));
    }

    #[test]
    fn route_original_picks_top_k() {
        let c = ctx(&[3.0, 1.0, 2.0]);
        let sel = route_original(&c, 2);
        assert_eq!(sel.experts, vec![0, 2]);
        assert!(sel.swapped_flags.iter().all(|&s| !s));

        let c = ctx(&[0.0; 4]);
        assert_eq!(route_original(&c, 2).experts, vec![0, 1]);

        let c = ctx(&[0.5, 0.1, 0.9, 0.3]);
        assert_eq!(route_original(&c, 1).experts, vec![2]);
    }

    #[test]
    fn route_pruned_keeps_top_h_minus_one() {
        let c = ctx(&[3.0, 1.0, 2.0]);
        let sel = route_pruned(&c, 2, 2).unwrap();
        assert_eq!(sel.experts, vec![0]);
        assert_eq!(sel.inactive_slots, 1);
        assert_eq!(sel.k(), 2);

        // Degenerate h = 1: nothing active.
        let c = ctx(&[1.0, 2.0, 3.0, 4.0]);
        let sel = route_pruned(&c, 4, 1).unwrap();
        assert!(sel.experts.is_empty());
        assert_eq!(sel.inactive_slots, 4);

        assert!(route_pruned(&c, 4, 5).is_err());
        assert!(route_pruned(&c, 4, 0).is_err());
    }

    /// Worked promotion example: r = [E1..E6], C = {E3, E4, E6},
    /// M = 4, K = 2, J = 1. Expert Ei maps to index i-1.
    #[test]
    fn max_rank_worked_example() {
        // Descending logits give ranking [0, 1, 2, 3, 4, 5].
        let c = ctx(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(c.ranking().order(), &[0, 1, 2, 3, 4, 5]);
        let m = mask(6, &[2, 3, 5]);
        let sel = route_max_rank(&c, &m, 2, 4, 1);
        assert_eq!(sel.experts, vec![0, 2]); // E1 and E3
        assert_eq!(sel.swapped_flags, vec![false, true]);

        // The full promoted ranking behind that selection.
        let window: Vec<usize> = c
            .ranking()
            .top(4)
            .iter()
            .copied()
            .filter(|&e| m[e])
            .collect();
        let promoted = promote(&window, c.ranking()).unwrap();
        let final_ranking = promote(c.ranking().top(1), &promoted).unwrap();
        assert_eq!(final_ranking.order(), &[0, 2, 3, 1, 4, 5]);
    }

    #[test]
    fn max_rank_zero_window_is_original() {
        let c = ctx(&[1.0, 3.0, 2.0, 0.5]);
        let m = mask(4, &[0, 3]);
        assert_eq!(
            route_max_rank(&c, &m, 2, 0, 0).experts,
            route_original(&c, 2).experts
        );
    }

    #[test]
    fn max_rank_empty_cache_is_original() {
        let c = ctx(&[1.0, 3.0, 2.0, 0.5]);
        let m = mask(4, &[]);
        for max_rank in 0..=4 {
            assert_eq!(
                route_max_rank(&c, &m, 2, max_rank, 1).experts,
                route_original(&c, 2).experts
            );
        }
    }

    #[test]
    fn cumsum_window_follows_algorithm_loop() {
        // Sorted weights 0.5, 0.3, 0.1, 0.1: threshold 0.7 stops at M = 2.
        let w = ExpertWeights {
            probs: vec![0.5, 0.3, 0.1, 0.1],
        };
        let r = rank(&w);
        assert_eq!(cumsum_window(&w, &r, 0.7), 2);
        assert_eq!(cumsum_window(&w, &r, 0.0), 0);
        // Threshold 1.0 must consume every strictly positive weight.
        assert_eq!(cumsum_window(&w, &r, 1.0), 4);
    }

    #[test]
    fn cumsum_threshold_one_spans_all_experts_despite_rounding() {
        let c = ctx(&[0.3, -1.2, 2.4, 0.0, 1.1]);
        let m = cumsum_window(c.weights(), c.ranking(), 1.0);
        assert_eq!(m, 5);
    }

    #[test]
    fn cumsum_zero_is_original() {
        let c = ctx(&[1.0, 3.0, 2.0, 0.5]);
        let m = mask(4, &[0, 3]);
        assert_eq!(
            route_cumsum(&c, &m, 2, 0.0, 0).experts,
            route_original(&c, 2).experts
        );
    }

    #[test]
    fn cache_prior_boost_reference() {
        // z = [3.0, 2.5, 0.5, 1.0], C = {2}, J = 0, Δ = 2.5.
        let c = ctx(&[3.0, 2.5, 0.5, 1.0]);
        let m = mask(4, &[2]);
        let delta = DeltaTracker::calibrated(2.5);

        // λ = 0.9: boost 2.25 lifts expert 2 to 2.75, ahead of expert 1.
        let sel = route_cache_prior(&c, &m, 2, 0.9, &delta, 0, false);
        assert_eq!(sel.experts, vec![0, 2]);
        // Gate weights stay the unbiased probabilities.
        assert_eq!(sel.gate_weights[0], c.weights().probs()[0]);
        assert_eq!(sel.gate_weights[1], c.weights().probs()[2]);

        // λ = 0.5: boost 1.25 only reaches 1.75; selection unchanged.
        let sel = route_cache_prior(&c, &m, 2, 0.5, &delta, 0, false);
        assert_eq!(sel.experts, vec![0, 1]);
    }

    #[test]
    fn cache_prior_lambda_zero_is_original() {
        let c = ctx(&[0.3, -1.2, 2.4, 0.0, 1.1]);
        let m = mask(5, &[1, 3]);
        let delta = DeltaTracker::calibrated(7.0);
        let sel = route_cache_prior(&c, &m, 3, 0.0, &delta, 0, false);
        let orig = route_original(&c, 3);
        assert_eq!(sel.experts, orig.experts);
        assert_eq!(sel.gate_weights, orig.gate_weights);
    }

    #[test]
    fn cache_prior_top_j_enters_bitmask() {
        // Expert 0 leads; with J = 1 it is boosted alongside the cache so it
        // can never be displaced by cached experts.
        let c = ctx(&[3.0, 2.9, 0.0, 0.1]);
        let m = mask(4, &[2, 3]);
        let delta = DeltaTracker::calibrated(10.0);
        let sel = route_cache_prior(&c, &m, 2, 1.0, &delta, 1, false);
        assert!(sel.experts.contains(&0));
    }

    #[test]
    fn delta_tracker_running_mean() {
        let mut t = DeltaTracker::new(DeltaMode::RunningMean);
        assert_eq!(t.delta(), 0.0);
        t.observe(&RouterLogits::new(vec![0.0, 2.0]).unwrap()); // range 2
        assert!((t.delta() - 2.0).abs() < 1e-12);
        t.observe(&RouterLogits::new(vec![1.0, 5.0]).unwrap()); // range 4
        assert!((t.delta() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn delta_tracker_single_sample_mean() {
        let mut t = DeltaTracker::new(DeltaMode::RunningMean);
        t.observe(&RouterLogits::new(vec![-2.5, 2.5]).unwrap());
        assert!((t.delta() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn delta_tracker_ema() {
        let mut t = DeltaTracker::new(DeltaMode::Ema { decay: 0.5 });
        t.observe(&RouterLogits::new(vec![0.0, 2.0]).unwrap()); // init 2.0
        assert!((t.delta() - 2.0).abs() < 1e-12);
        t.observe(&RouterLogits::new(vec![0.0, 4.0]).unwrap()); // 0.5*2 + 0.5*4
        assert!((t.delta() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn delta_tracker_calibrated_ignores_observations() {
        let mut t = DeltaTracker::calibrated(1.5);
        t.observe(&RouterLogits::new(vec![0.0, 100.0]).unwrap());
        assert_eq!(t.delta(), 1.5);
    }

    #[test]
    fn delta_tracker_exact_per_token() {
        let mut t = DeltaTracker::new(DeltaMode::ExactPerToken);
        t.observe(&RouterLogits::new(vec![0.0, 7.0]).unwrap());
        assert_eq!(t.delta(), 7.0);
        t.observe(&RouterLogits::new(vec![0.0, 1.0]).unwrap());
        assert_eq!(t.delta(), 1.0);
    }

    #[test]
    fn swap_random_candidate_pool() {
        // Ranking: [0, 1, 2, 3] (ties on 1.0 broken by index). Rank 1 is
        // expert 0; the pool excludes the top-K set {0, 1}.
        let c = ctx(&[9.0, 1.0, 1.0, 1.0]);
        for seed in 0..32 {
            let sel = swap_rank_random_seeded(&c, 2, 1, seed);
            assert!(sel.experts[0] == 2 || sel.experts[0] == 3);
            assert_eq!(sel.experts[1], 1);
            assert!(sel.swapped_flags[0]);
            assert!(!sel.swap_pool_exhausted);
        }
    }

    #[test]
    fn swap_random_exhausted_pool() {
        let c = ctx(&[3.0, 1.0]);
        let sel = swap_rank_random_seeded(&c, 2, 1, 42);
        assert_eq!(sel.experts, vec![0, 1]);
        assert!(sel.swap_pool_exhausted);
        assert!(sel.swapped_flags.iter().all(|&s| !s));
    }

    #[test]
    fn swap_random_deterministic_per_seed() {
        let c = ctx(&[0.4, 0.8, 0.1, 0.9, 0.2, 0.5]);
        let a = swap_rank_random_seeded(&c, 3, 2, 1234);
        let b = swap_rank_random_seeded(&c, 3, 2, 1234);
        assert_eq!(a, b);
    }

    #[test]
    fn params_validation() {
        assert!(StrategyParams::cache_prior(1.5, DeltaMode::RunningMean, 0)
            .validate(2, 8)
            .is_err());
        assert!(StrategyParams::cumsum(-0.1, 0).validate(2, 8).is_err());
        assert!(StrategyParams::max_rank(9, 1).validate(2, 8).is_err());
        assert!(StrategyParams::prune(3).validate(2, 8).is_err());
        assert!(StrategyParams::swap_random(0).validate(2, 8).is_err());
        let warnings = StrategyParams::prune(1).validate(2, 8).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(StrategyParams::original().validate(2, 8).unwrap().is_empty());
    }

    #[test]
    fn renormalized_gates_sum_to_one() {
        let c = ctx(&[1.0, 2.0, 3.0, 4.0]);
        let mut sel = route_original(&c, 3);
        sel.renormalize_gates();
        let sum: f64 = sel.gate_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    // -- property tests ----------------------------------------------------

    fn arb_logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, n..=n)
    }

    proptest! {
        #[test]
        fn promote_returns_permutation(values in arb_logits(8), pick in prop::collection::vec(any::<bool>(), 8)) {
            let c = ctx(&values);
            let subset: Vec<usize> = c.ranking().order().iter().copied()
                .filter(|&e| pick[e]).collect();
            let p = promote(&subset, c.ranking()).unwrap();
            let mut sorted: Vec<usize> = p.order().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        }

        #[test]
        fn promote_is_idempotent(values in arb_logits(8), pick in prop::collection::vec(any::<bool>(), 8)) {
            let c = ctx(&values);
            let subset: Vec<usize> = c.ranking().order().iter().copied()
                .filter(|&e| pick[e]).collect();
            let once = promote(&subset, c.ranking()).unwrap();
            let twice = promote(&subset, &once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn lambda_zero_matches_original_set_and_order(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            k in 1usize..=8,
        ) {
            let c = ctx(&values);
            let delta = DeltaTracker::calibrated(123.0);
            let sel = route_cache_prior(&c, &cached, k, 0.0, &delta, 0, false);
            let orig = route_original(&c, k);
            prop_assert_eq!(sel.experts, orig.experts);
            prop_assert_eq!(sel.gate_weights, orig.gate_weights);
        }

        /// With a bias strictly above the token's logit range, every cached
        /// expert outranks every non-cached one, so whenever the cache and
        /// the forced top-J together cover K slots, all non-top-J selections
        /// are cache residents.
        #[test]
        fn saturating_bias_dominates(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            k in 1usize..=8,
            j in 0usize..=2,
        ) {
            let j = j.min(k);
            let c = ctx(&values);
            let mut delta = DeltaTracker::new(DeltaMode::ExactPerToken);
            delta.observe(c.logits());
            let sel = route_cache_prior(&c, &cached, k, 1.0, &delta, j, true);
            let top_j: Vec<usize> = c.ranking().top(j).to_vec();
            let covered = cached.iter().filter(|&&b| b).count()
                + top_j.iter().filter(|e| !cached[**e]).count();
            if covered >= k {
                for &e in &sel.experts {
                    prop_assert!(cached[e] || top_j.contains(&e),
                        "expert {} selected without being cached or forced", e);
                }
            }
        }

        /// The max-rank promotion candidate set grows with M.
        #[test]
        fn max_rank_candidates_monotone_in_m(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
        ) {
            let c = ctx(&values);
            let candidates = |m: usize| -> Vec<usize> {
                c.ranking().top(m).iter().copied().filter(|&e| cached[e]).collect()
            };
            for m in 0..8 {
                let small = candidates(m);
                let large = candidates(m + 1);
                prop_assert!(small.iter().all(|e| large.contains(e)));
            }
        }

        /// Cumsum must match max-rank once the window M is computed
        /// independently by prefix-summing the sorted weights.
        #[test]
        fn cumsum_reduces_to_max_rank(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            threshold in 0.0f64..=1.0,
            k in 1usize..=4,
            j in 0usize..=2,
        ) {
            let j = j.min(k);
            let c = ctx(&values);
            // Independent window computation: prefix sums of sorted weights.
            let mut prefix = 0.0;
            let mut m_independent = 0;
            for (i, &e) in c.ranking().order().iter().enumerate() {
                if prefix >= threshold {
                    break;
                }
                prefix += c.weights().probs()[e];
                m_independent = i + 1;
            }
            if threshold == 0.0 {
                m_independent = 0;
            }
            let via_cumsum = route_cumsum(&c, &cached, k, threshold, j);
            let via_max_rank = route_max_rank(&c, &cached, k, m_independent, j);
            prop_assert_eq!(via_cumsum.experts, via_max_rank.experts);
        }

        /// Gate weights always equal the unbiased softmax probabilities of
        /// the chosen experts, for every strategy.
        #[test]
        fn gate_weight_purity(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            lambda in 0.0f64..=1.0,
            k in 1usize..=6,
            seed in any::<u64>(),
        ) {
            let c = ctx(&values);
            let delta = DeltaTracker::calibrated(5.0);
            let selections = vec![
                route_original(&c, k),
                route_pruned(&c, k, k).unwrap(),
                route_max_rank(&c, &cached, k, 5, 1.min(k)),
                route_cumsum(&c, &cached, k, 0.8, 1.min(k)),
                route_cache_prior(&c, &cached, k, lambda, &delta, 1.min(k), false),
                swap_rank_random_seeded(&c, k, 1, seed),
            ];
            for sel in selections {
                for (e, w) in sel.experts.iter().zip(&sel.gate_weights) {
                    prop_assert_eq!(*w, c.weights().probs()[*e]);
                }
            }
        }

        /// The top-J experts of the original ranking are always selected by
        /// the strategies that take a top-J guarantee.
        #[test]
        fn top_j_guarantee(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            lambda in 0.0f64..=1.0,
            m in 0usize..=8,
            p in 0.0f64..=1.0,
            k in 1usize..=6,
            j in 1usize..=3,
        ) {
            let j = j.min(k);
            let c = ctx(&values);
            let delta = DeltaTracker::calibrated(50.0);
            let selections = vec![
                route_original(&c, k),
                route_max_rank(&c, &cached, k, m, j),
                route_cumsum(&c, &cached, k, p, j),
                route_cache_prior(&c, &cached, k, lambda, &delta, j, false),
            ];
            for sel in selections {
                for &e in c.ranking().top(j) {
                    prop_assert!(sel.experts.contains(&e));
                }
            }
        }

        #[test]
        fn selections_are_distinct(
            values in arb_logits(8),
            cached in prop::collection::vec(any::<bool>(), 8),
            m in 0usize..=8,
            k in 1usize..=8,
        ) {
            let c = ctx(&values);
            let sel = route_max_rank(&c, &cached, k, m, 1.min(k));
            let mut experts = sel.experts.clone();
            experts.sort_unstable();
            experts.dedup();
            prop_assert_eq!(experts.len(), sel.experts.len());
            prop_assert_eq!(sel.k(), k);
        }
    }
}
