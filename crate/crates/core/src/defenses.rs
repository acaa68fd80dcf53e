//! System-level defense policies applied inside the episode runner.
//!
//! Defenses are modeled as Bernoulli suppression of the activation event:
//! a tool allowlist suppresses activations whose simulated behavior would
//! need a disallowed tool, and least-privilege input reduction suppresses
//! activations whose key/template adjacency the content reduction removes.
//! Benign outcomes are never flipped to activated.
//!
//! Classifier-based guard models are out of scope: they need real model
//! inference over message content. A content-aware detector would slot in
//! as a new [`PolicyId`] variant whose suppression decision inspects the
//! episode's prompts instead of drawing a calibrated Bernoulli.

use crate::error::{Error, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Suppression probability of the tool-allowlist control, calibrated so a
/// 0.73 baseline attack success attenuates to 0.62.
pub const TOOL_ALLOWLIST_SUPPRESSION: f64 = 1.0 - 0.62 / 0.73;

/// Suppression probability of the least-privilege control, calibrated so a
/// 0.73 baseline attack success attenuates to 0.58.
pub const LEAST_PRIVILEGE_SUPPRESSION: f64 = 1.0 - 0.58 / 0.73;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    None,
    ToolAllowlist,
    LeastPrivilege,
}

impl PolicyId {
    pub fn name(self) -> &'static str {
        match self {
            PolicyId::None => "none",
            PolicyId::ToolAllowlist => "tool_allowlist",
            PolicyId::LeastPrivilege => "least_privilege",
        }
    }
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A defense policy with its calibration parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: PolicyId,
    /// Tool ids permitted under the allowlist control.
    pub allowlist: BTreeSet<String>,
    /// Probability that an activation path requires a disallowed tool.
    pub needs_tool_prob: f64,
    /// Probability that minimal-content reduction removes the key/template
    /// adjacency.
    pub strip_fraction: f64,
}

impl Policy {
    pub fn none() -> Self {
        Policy {
            id: PolicyId::None,
            allowlist: BTreeSet::new(),
            needs_tool_prob: 0.0,
            strip_fraction: 0.0,
        }
    }

    pub fn tool_allowlist(allowlist: BTreeSet<String>, needs_tool_prob: f64) -> Result<Self> {
        check_unit("needs_tool_prob", needs_tool_prob)?;
        Ok(Policy {
            id: PolicyId::ToolAllowlist,
            allowlist,
            needs_tool_prob,
            strip_fraction: 0.0,
        })
    }

    pub fn least_privilege(strip_fraction: f64) -> Result<Self> {
        check_unit("strip_fraction", strip_fraction)?;
        Ok(Policy {
            id: PolicyId::LeastPrivilege,
            allowlist: BTreeSet::new(),
            needs_tool_prob: 0.0,
            strip_fraction,
        })
    }

    /// Tool-allowlist control at its reference attenuation.
    pub fn calibrated_tool_allowlist() -> Self {
        Policy::tool_allowlist(BTreeSet::new(), TOOL_ALLOWLIST_SUPPRESSION)
            .expect("calibrated constant is in range")
    }

    /// Least-privilege control at its reference attenuation.
    pub fn calibrated_least_privilege() -> Self {
        Policy::least_privilege(LEAST_PRIVILEGE_SUPPRESSION)
            .expect("calibrated constant is in range")
    }
}

fn check_unit(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(Error::Validation(format!(
            "{name} must lie in [0, 1], got {value}"
        )));
    }
    Ok(())
}

fn next_unit(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Apply one policy to the activation outcome. Activations are suppressed
/// with the policy's calibrated probability; benign outcomes pass through
/// unchanged.
pub fn apply_policy(policy: &Policy, would_activate: bool, rng: &mut dyn RngCore) -> bool {
    if !would_activate {
        return false;
    }
    let suppression = match policy.id {
        PolicyId::None => return true,
        PolicyId::ToolAllowlist => policy.needs_tool_prob,
        PolicyId::LeastPrivilege => policy.strip_fraction,
    };
    if suppression > 0.0 && next_unit(rng) < suppression {
        return false;
    }
    true
}
