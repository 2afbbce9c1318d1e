//! Model configuration: variant, depth, widths, head counts, expert counts and
//! rotary bases. Serialized as TOML; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classically layered: `depth` independent layers, no depth attention.
    La,
    /// One shared layer applied `depth` times.
    Dr,
    /// Depth recurrence with depth attention.
    DrDa,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::La => "LA",
            Variant::Dr => "DR",
            Variant::DrDa => "DR+DA",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// DA, then SA, then EA, each on the previous residual.
    Sequential,
    /// DA and SA in parallel on the input, EA on their sum.
    PartialParallel,
    /// DA, SA and EA all read the layer input.
    FullParallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub experts: usize,
    pub active: usize,
    pub intermediate: usize,
    pub query_dim: usize,
    pub bias_rate: f64,
}

/// Routing of the attention projection MoEs (`depth` linear experts, top-1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionMoeConfig {
    pub query_dim: usize,
    pub bias_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub context: usize,
    pub composition: Composition,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    pub sa: AttentionConfig,
    pub da: AttentionConfig,
    pub ea: ExpertConfig,
    pub projection_moe: ProjectionMoeConfig,
    /// Overrides the variant default (on for DR variants, off for LA).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_norm: Option<bool>,
    /// Overrides the variant default (on for DR variants, off for LA).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_projections: Option<bool>,
}

impl ModelConfig {
    /// Hyperparameters of the 16/32-depth reference runs.
    pub fn full_scale(variant: Variant, depth: usize) -> Self {
        let (intermediate, experts) = match (variant, depth) {
            (Variant::La, _) => (512, 32),
            (Variant::Dr, 32) => (504, 1039),
            (Variant::Dr, _) => (504, 517),
            (Variant::DrDa, 32) => (472, 1097),
            (Variant::DrDa, _) => (480, 537),
        };
        Self {
            variant,
            depth,
            hidden: 1024,
            vocab: 128_256,
            context: 4096,
            composition: Composition::PartialParallel,
            tie_embeddings: true,
            norm_eps: crate::attention::NORM_EPS,
            sa: AttentionConfig {
                query_heads: 16,
                kv_heads: 8,
                head_dim: 128,
                rope_base: 10_000.0,
            },
            da: AttentionConfig {
                query_heads: 1,
                kv_heads: 1,
                head_dim: 128,
                rope_base: 500.0,
            },
            ea: ExpertConfig {
                experts,
                active: 8,
                intermediate,
                query_dim: 128,
                bias_rate: 1e-3,
            },
            projection_moe: ProjectionMoeConfig {
                query_dim: 128,
                bias_rate: 1e-2,
            },
            residual_norm: None,
            routed_projections: None,
        }
    }

    /// Small configuration that trains on a single CPU core.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            depth: 4,
            hidden: 64,
            vocab: 512,
            context: 256,
            composition: Composition::PartialParallel,
            tie_embeddings: true,
            norm_eps: crate::attention::NORM_EPS,
            sa: AttentionConfig {
                query_heads: 4,
                kv_heads: 2,
                head_dim: 16,
                rope_base: 10_000.0,
            },
            da: AttentionConfig {
                query_heads: 1,
                kv_heads: 1,
                head_dim: 16,
                rope_base: 500.0,
            },
            ea: ExpertConfig {
                experts: 8,
                active: 2,
                intermediate: 160,
                query_dim: 16,
                // short runs need the bias to track routing shifts within tens of steps
                bias_rate: 1e-2,
            },
            projection_moe: ProjectionMoeConfig {
                query_dim: 16,
                bias_rate: 1e-2,
            },
            residual_norm: None,
            routed_projections: None,
        }
    }

    pub fn has_da(&self) -> bool {
        self.variant == Variant::DrDa
    }

    pub fn is_recurrent(&self) -> bool {
        self.variant != Variant::La
    }

    pub fn uses_residual_norm(&self) -> bool {
        self.residual_norm.unwrap_or(self.is_recurrent())
    }

    pub fn uses_routed_projections(&self) -> bool {
        self.routed_projections.unwrap_or(self.is_recurrent())
    }

    /// Number of independent layer parameter sets.
    pub fn layer_sets(&self) -> usize {
        if self.is_recurrent() {
            1
        } else {
            self.depth
        }
    }

    pub fn projection_experts(&self) -> usize {
        self.depth
    }

    /// Number of attention dimensions feeding the output-projection init scale.
    pub fn attn_dims(&self) -> usize {
        if self.has_da() {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.hidden == 0 || self.vocab == 0 || self.context == 0 {
            return fail("depth, hidden, vocab and context must be positive".into());
        }
        if !(self.norm_eps >= 0.0) {
            return fail("norm_eps must be nonnegative".into());
        }
        for (name, a, rope_div) in [("sa", &self.sa, 2), ("da", &self.da, 4)] {
            if a.query_heads == 0 || a.kv_heads == 0 || a.head_dim == 0 {
                return fail(format!("{}: heads and head_dim must be positive", name));
            }
            if a.query_heads % a.kv_heads != 0 {
                return fail(format!(
                    "{}.query_heads ({}) must be a multiple of {}.kv_heads ({})",
                    name, a.query_heads, name, a.kv_heads
                ));
            }
            if a.head_dim % rope_div != 0 {
                return fail(format!("{}.head_dim must be divisible by {}", name, rope_div));
            }
            if !(a.rope_base > 0.0) {
                return fail(format!("{}.rope_base must be positive", name));
            }
        }
        if self.ea.experts == 0 || self.ea.active == 0 || self.ea.active > self.ea.experts {
            return fail(format!(
                "ea.active ({}) must be in 1..=ea.experts ({})",
                self.ea.active, self.ea.experts
            ));
        }
        if self.ea.intermediate == 0 {
            return fail("ea.intermediate must be positive".into());
        }
        if self.ea.query_dim == 0 || self.ea.query_dim % 4 != 0 {
            return fail("ea.query_dim must be a positive multiple of 4".into());
        }
        if self.projection_moe.query_dim == 0 || self.projection_moe.query_dim % 4 != 0 {
            return fail("projection_moe.query_dim must be a positive multiple of 4".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}
