//! Shared domain types: query segments, agents, template slots, evaluation
//! regimes, the attack configuration tuple, routing parameters, and
//! deterministic seed derivation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One segment of a decomposed user query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based position within the query.
    pub index: usize,
    /// Segment text, treated as opaque.
    pub text: String,
    /// Whether the segment carries account-lookup semantics. This is a
    /// scenario label, never inferred from the text.
    pub is_account: bool,
    /// Whether the trigger key has been inserted into this segment.
    pub has_key: bool,
}

/// A remote agent in the dispatch pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Unique identifier within the pool.
    pub id: String,
    /// Role description, treated as opaque.
    pub role: String,
    /// Whether this agent carries an injected template.
    pub compromised: bool,
    /// Slot of the injected template; present iff `compromised`.
    pub template_slot: Option<TemplateSlot>,
    /// Whether the agent holds privileged tool access. Exactly one agent per
    /// pool is privileged; account-sensitive segments route toward it.
    pub has_tools: bool,
}

/// Placement slot of the injected template relative to the routed segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSlot {
    Prefix,
    Wrap,
    Suffix,
}

impl TemplateSlot {
    pub const ALL: [TemplateSlot; 3] = [
        TemplateSlot::Prefix,
        TemplateSlot::Wrap,
        TemplateSlot::Suffix,
    ];

    /// Stable index used by logit vectors over slots.
    pub fn index(self) -> usize {
        match self {
            TemplateSlot::Prefix => 0,
            TemplateSlot::Wrap => 1,
            TemplateSlot::Suffix => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<TemplateSlot> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateSlot::Prefix => "prefix",
            TemplateSlot::Wrap => "wrap",
            TemplateSlot::Suffix => "suffix",
        }
    }
}

impl fmt::Display for TemplateSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The discrete attack configuration tuple: key placement, template slot,
/// and routing bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// 1-based index of the key-bearing segment.
    pub key_index: usize,
    /// Template placement slot at the compromised agent.
    pub slot: TemplateSlot,
    /// Routing bias toward key-bearing account segments, in [0, 1].
    pub routing_bias: f64,
}

impl AttackConfig {
    pub fn new(key_index: usize, slot: TemplateSlot, routing_bias: f64) -> Result<Self> {
        let config = AttackConfig {
            key_index,
            slot,
            routing_bias,
        };
        config.validate_bias()?;
        Ok(config)
    }

    fn validate_bias(&self) -> Result<()> {
        if !self.routing_bias.is_finite() || !(0.0..=1.0).contains(&self.routing_bias) {
            return Err(Error::Validation(format!(
                "routing_bias must lie in [0, 1], got {}",
                self.routing_bias
            )));
        }
        Ok(())
    }

    /// Check the tuple against a concrete segment count.
    pub fn validate(&self, segment_count: usize) -> Result<()> {
        self.validate_bias()?;
        if self.key_index < 1 || self.key_index > segment_count {
            return Err(Error::IndexOutOfRange {
                index: self.key_index,
                count: segment_count,
            });
        }
        Ok(())
    }
}

/// Evaluation regime: which attack components are present in an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    KeyOnly,
    TemplateOnly,
    Both,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Clean,
        Regime::KeyOnly,
        Regime::TemplateOnly,
        Regime::Both,
    ];

    /// Whether the trigger key is inserted into the query.
    pub fn key_present(self) -> bool {
        matches!(self, Regime::KeyOnly | Regime::Both)
    }

    /// Whether the injected template is present at the compromised agent.
    pub fn template_present(self) -> bool {
        matches!(self, Regime::TemplateOnly | Regime::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::KeyOnly => "key_only",
            Regime::TemplateOnly => "template_only",
            Regime::Both => "both",
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            Regime::Clean => 0x11,
            Regime::KeyOnly => 0x22,
            Regime::TemplateOnly => 0x33,
            Regime::Both => 0x44,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of the per-segment routing distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingParams {
    /// Baseline account affinity toward the privileged agent, in [0, 1].
    pub affinity: f64,
    /// Attacker-controlled routing bias, in [0, 1].
    pub routing_bias: f64,
    /// Number of benign agents sharing the residual probability mass.
    pub benign_count: usize,
}

impl RoutingParams {
    /// Build parameters, clamping both reals into [0, 1].
    pub fn new(affinity: f64, routing_bias: f64, benign_count: usize) -> Result<Self> {
        if !affinity.is_finite() || !routing_bias.is_finite() {
            return Err(Error::Validation(
                "routing parameters must be finite".to_string(),
            ));
        }
        if benign_count == 0 {
            return Err(Error::Config(
                "routing requires at least one benign agent".to_string(),
            ));
        }
        Ok(RoutingParams {
            affinity: affinity.clamp(0.0, 1.0),
            routing_bias: routing_bias.clamp(0.0, 1.0),
            benign_count,
        })
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit avalanche mix (splitmix64 finalizer).
fn mix64(value: u64) -> u64 {
    let mut z = value.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the RNG seed for one episode from the run seed, the episode index,
/// and the regime. Pure; distinct inputs map to distinct outputs with
/// overwhelming probability.
pub fn derive_episode_seed(run_seed: u64, episode_index: u64, regime: Regime) -> u64 {
    let mut h = mix64(run_seed);
    h = mix64(h ^ episode_index);
    mix64(h ^ regime.seed_tag())
}

/// Derive an independent seed stream for a named sub-experiment of a run
/// (e.g. one cell of a parameter grid).
pub fn derive_substream_seed(run_seed: u64, stream: u64) -> u64 {
    mix64(mix64(run_seed ^ GOLDEN_GAMMA) ^ stream)
}
