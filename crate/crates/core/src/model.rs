//! MoE architecture shapes: expert counts, top-K, shared experts.

use crate::error::ConfigError;

/// Shape of a Mixture-of-Experts model as seen by the simulator: how many
/// MoE layers there are, how many routed experts each layer has, how many
/// are selected per token, and how many shared (always-on) experts exist.
///
/// Shared experts are pinned in memory on real deployments, so they never
/// enter the simulated cache and never count toward hits or misses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    /// Number of MoE layers simulated.
    pub num_layers: usize,
    /// Routed experts per layer (N). Shared experts are not included.
    pub experts_per_layer: usize,
    /// Experts selected per token per layer (K).
    pub top_k: usize,
    /// Always-active experts per layer (S); pinned, outside the cache.
    pub shared_experts: usize,
    /// Default number of top-ranked experts guaranteed to load (J).
    pub default_top_j: usize,
}

impl ModelConfig {
    pub fn new(
        name: impl Into<String>,
        num_layers: usize,
        experts_per_layer: usize,
        top_k: usize,
        shared_experts: usize,
        default_top_j: usize,
    ) -> Result<Self, ConfigError> {
        let cfg = Self {
            name: name.into(),
            num_layers,
            experts_per_layer,
            top_k,
            shared_experts,
            default_top_j,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.num_layers == 0 {
            return Err(ConfigError::new("num_layers must be >= 1"));
        }
        if self.experts_per_layer == 0 {
            return Err(ConfigError::new("experts_per_layer must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(ConfigError::new(format!(
                "top_k must satisfy 1 <= K <= N, got K={} N={}",
                self.top_k, self.experts_per_layer
            )));
        }
        if self.default_top_j > self.top_k {
            return Err(ConfigError::new(format!(
                "default_top_j must satisfy J <= K, got J={} K={}",
                self.default_top_j, self.top_k
            )));
        }
        Ok(())
    }

    /// Look up one of the built-in architecture presets by name.
    pub fn preset(name: &str) -> Option<Self> {
        let (layers, n, k, s, j) = match name {
            "mixtral-8x7b" => (32, 8, 2, 0, 1),
            "phi-3.5-moe" => (32, 16, 2, 0, 1),
            "deepseek-v2-lite" => (26, 64, 6, 2, 2),
            "qwen1.5-moe" => (24, 60, 4, 4, 2),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            num_layers: layers,
            experts_per_layer: n,
            top_k: k,
            shared_experts: s,
            default_top_j: j,
        })
    }

    /// Names accepted by [`ModelConfig::preset`].
    pub fn preset_names() -> &'static [&'static str] {
        &["mixtral-8x7b", "phi-3.5-moe", "deepseek-v2-lite", "qwen1.5-moe"]
    }

    /// Default per-layer cache capacity: half the routed experts, at least one.
    pub fn default_cache_size(&self) -> usize {
        (self.experts_per_layer / 2).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_architectures() {
        let m = ModelConfig::preset("mixtral-8x7b").unwrap();
        assert_eq!((m.experts_per_layer, m.top_k, m.shared_experts, m.default_top_j), (8, 2, 0, 1));

        let p = ModelConfig::preset("phi-3.5-moe").unwrap();
        assert_eq!((p.experts_per_layer, p.top_k, p.shared_experts, p.default_top_j), (16, 2, 0, 1));

        let d = ModelConfig::preset("deepseek-v2-lite").unwrap();
        assert_eq!((d.experts_per_layer, d.top_k, d.shared_experts, d.default_top_j), (64, 6, 2, 2));

        let q = ModelConfig::preset("qwen1.5-moe").unwrap();
        assert_eq!((q.experts_per_layer, q.top_k, q.shared_experts, q.default_top_j), (60, 4, 4, 2));
    }

    #[test]
    fn unknown_preset_is_none() {
        assert!(ModelConfig::preset("gpt-5").is_none());
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ModelConfig::new("x", 1, 4, 0, 0, 0).is_err()); // K = 0
        assert!(ModelConfig::new("x", 1, 4, 5, 0, 0).is_err()); // K > N
        assert!(ModelConfig::new("x", 1, 4, 2, 0, 3).is_err()); // J > K
        assert!(ModelConfig::new("x", 0, 4, 2, 0, 1).is_err()); // no layers
        assert!(ModelConfig::new("x", 1, 4, 2, 0, 2).is_ok()); // J = K allowed
    }

    #[test]
    fn default_cache_size_is_half_n() {
        let q = ModelConfig::preset("qwen1.5-moe").unwrap();
        assert_eq!(q.default_cache_size(), 30);
        let tiny = ModelConfig::new("t", 1, 1, 1, 0, 0).unwrap();
        assert_eq!(tiny.default_cache_size(), 1);
    }
}
