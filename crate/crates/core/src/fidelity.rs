//! Surrogate-fidelity analytics: empirical decomposition of attack success
//! into routing and template factors, correlation statistics, and the
//! two-anchor calibration that pins the simulator parameters.

use crate::agents::AgentBackend;
use crate::error::{Error, Result};
use crate::evaluation::{run_regime, EpisodeRecord, Scenario};
use crate::routing::{Topology, TopologyKind};
use crate::types::{derive_substream_seed, AttackConfig, Regime};
use serde::{Deserialize, Serialize};

/// Reference both-regime ASR anchors measured on the star topology:
/// unbiased routing and routing bias 0.8.
pub const REFERENCE_ASR_UNBIASED: f64 = 0.28;
pub const REFERENCE_ASR_BIASED: f64 = 0.74;
pub const REFERENCE_BIAS: f64 = 0.8;

/// Empirical decomposition of one record set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Fraction of episodes whose key-bearing segment reached the
    /// compromised agent.
    pub p_route: f64,
    /// Conditional activation probability given successful routing; absent
    /// when no episode routed.
    pub p_template: Option<f64>,
    /// Overall activated fraction.
    pub asr: f64,
}

/// One cell of the fidelity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub topology_kind: TopologyKind,
    pub rho: f64,
    pub p_route_emp: f64,
    pub p_template_emp: Option<f64>,
    pub asr_emp: f64,
    /// Product of the empirical factors.
    pub asr_surrogate: f64,
}

/// Full fidelity grid with its correlation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityGrid {
    pub points: Vec<FidelityPoint>,
    pub pearson: f64,
    pub spearman: f64,
}

/// Decompose both-regime records into routing and template factors.
///
/// The caller supplies the key segment index and the compromised agent id;
/// episode records intentionally do not duplicate scenario context.
pub fn decompose(
    records: &[EpisodeRecord],
    key_index: usize,
    compromised_id: &str,
) -> Result<Decomposition> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if records.iter().any(|r| r.regime != Regime::Both) {
        return Err(Error::Validation(
            "decomposition requires both-regime records".to_string(),
        ));
    }
    let mut routed = 0usize;
    let mut activated_routed = 0usize;
    let mut activated = 0usize;
    for record in records {
        let entry = record
            .routing_trace
            .iter()
            .find(|e| e.segment_index == key_index)
            .ok_or_else(|| Error::Validation(format!("no trace entry for segment {key_index}")))?;
        let reached = entry.handler == compromised_id;
        if reached {
            routed += 1;
        }
        if record.activated {
            activated += 1;
            if reached {
                activated_routed += 1;
            }
        }
    }
    let total = records.len() as f64;
    Ok(Decomposition {
        p_route: routed as f64 / total,
        p_template: (routed > 0).then(|| activated_routed as f64 / routed as f64),
        asr: activated as f64 / total,
    })
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Validation(
            "correlation requires two equal-length series of length >= 2".to_string(),
        ));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::UndefinedStatistic(
            "pearson correlation of a zero-variance series".to_string(),
        ));
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

/// Average ranks with ties averaged.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks; tied entries share the mean rank of their block.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: product-moment correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One calibration branch: the affinity and template-effectiveness pair that
/// reproduces the anchors under the single-dispatch model
/// `asr(rho) = clip(alpha + rho) * effectiveness`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSolution {
    pub affinity: f64,
    pub template_effectiveness: f64,
    /// Whether the branch assumes the biased anchor saturates the clip.
    pub clipped: bool,
    /// Whether the branch is consistent with its own clipping assumption.
    pub consistent: bool,
}

/// Both calibration branches: the clipped primary solution and the
/// unclipped alternative kept for sensitivity runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub primary: CalibrationSolution,
    pub alternative: CalibrationSolution,
}

/// Solve the two-anchor system for `(alpha, effectiveness)`.
///
/// Clipped branch: `alpha + bias >= 1`, so the biased anchor equals the
/// effectiveness outright and the unbiased anchor fixes alpha. Unclipped
/// branch: both anchors stay linear in rho. Each branch records whether it
/// is consistent with its own clipping assumption.
pub fn calibrate_from_anchors(asr_unbiased: f64, asr_biased: f64, bias: f64) -> Calibration {
    let clipped_effectiveness = asr_biased;
    let clipped_affinity = asr_unbiased / clipped_effectiveness;
    let primary = CalibrationSolution {
        affinity: clipped_affinity,
        template_effectiveness: clipped_effectiveness,
        clipped: true,
        consistent: clipped_affinity + bias >= 1.0,
    };

    let unclipped_effectiveness = (asr_biased - asr_unbiased) / bias;
    let unclipped_affinity = asr_unbiased / unclipped_effectiveness;
    let alternative = CalibrationSolution {
        affinity: unclipped_affinity,
        template_effectiveness: unclipped_effectiveness,
        clipped: false,
        consistent: unclipped_affinity + bias <= 1.0,
    };

    Calibration {
        primary,
        alternative,
    }
}

/// Calibration against the built-in reference anchors.
pub fn reference_calibration() -> Calibration {
    calibrate_from_anchors(REFERENCE_ASR_UNBIASED, REFERENCE_ASR_BIASED, REFERENCE_BIAS)
}

/// Run the fidelity grid: for every topology and routing-bias value, run
/// both-regime episodes, decompose them, and correlate the surrogate product
/// against the empirical ASR across all cells.
pub fn run_fidelity_grid(
    scenario: &Scenario,
    attack: &AttackConfig,
    backend: &dyn AgentBackend,
    run_seed: u64,
    episodes: usize,
    rhos: &[f64],
    kinds: &[TopologyKind],
) -> Result<FidelityGrid> {
    let mut points = Vec::with_capacity(rhos.len() * kinds.len());
    let mut cell = 0u64;
    for &kind in kinds {
        let mut cell_scenario = scenario.clone();
        cell_scenario.topology = Topology::of_kind(kind);
        for &rho in rhos {
            let mut cell_attack = attack.clone();
            cell_attack.routing_bias = rho;
            let seed = derive_substream_seed(run_seed, cell);
            cell += 1;
            let records = run_regime(
                &cell_scenario,
                Regime::Both,
                &cell_attack,
                backend,
                &[],
                seed,
                episodes,
            )?;
            let d = decompose(&records, attack.key_index, scenario.designated_agent_id())?;
            points.push(FidelityPoint {
                topology_kind: kind,
                rho,
                p_route_emp: d.p_route,
                p_template_emp: d.p_template,
                asr_emp: d.asr,
                asr_surrogate: d.p_route * d.p_template.unwrap_or(0.0),
            });
        }
    }
    let surrogate: Vec<f64> = points.iter().map(|p| p.asr_surrogate).collect();
    let empirical: Vec<f64> = points.iter().map(|p| p.asr_emp).collect();
    Ok(FidelityGrid {
        pearson: pearson(&surrogate, &empirical)?,
        spearman: spearman(&surrogate, &empirical)?,
        points,
    })
}
