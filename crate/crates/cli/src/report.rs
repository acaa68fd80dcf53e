//! Report assembly and rendering: per-regime ASR, topology aggregation,
//! fidelity decomposition, and defense attenuation.

use conjsim::defenses::PolicyId;
use conjsim::error::Result;
use conjsim::evaluation::{aggregate_topologies, EpisodeRecord, RegimeReport};
use conjsim::fidelity::{decompose, Calibration, FidelityGrid};
use conjsim::routing::TopologyKind;
use conjsim::types::Regime;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Assembled report over a set of episode records.
#[derive(Debug, Serialize)]
pub struct ReportData {
    pub per_topology: BTreeMap<TopologyKind, TopologyReport>,
    /// Min/mean/max of undefended both-regime ASR across topologies.
    pub aggregate_both: Option<(f64, f64, f64)>,
    pub fidelity: Vec<FidelityRow>,
    pub defense: Vec<DefenseRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TopologyReport {
    pub asr: BTreeMap<Regime, f64>,
    pub fa: Option<f64>,
    pub episodes: usize,
}

#[derive(Debug, Serialize)]
pub struct FidelityRow {
    pub topology_kind: TopologyKind,
    pub p_route_emp: f64,
    pub p_template_emp: Option<f64>,
    pub asr_emp: f64,
    pub asr_surrogate: f64,
}

#[derive(Debug, Serialize)]
pub struct DefenseRow {
    pub flags: Vec<PolicyId>,
    pub both_asr: f64,
    pub fa: Option<f64>,
    /// Relative drop against the undefended both-regime ASR of the same
    /// topology mix, when both are present.
    pub relative_drop: Option<f64>,
}

fn asr_of(records: &[&EpisodeRecord]) -> f64 {
    records.iter().filter(|r| r.activated).count() as f64 / records.len() as f64
}

/// Group records into the report tables. `context` carries
/// `(key_index, compromised_id)` and unlocks the fidelity section.
pub fn build_report(
    records: &[EpisodeRecord],
    context: Option<&(usize, String)>,
) -> Result<ReportData> {
    let mut warnings = Vec::new();

    // Per-topology regime tables over undefended records.
    let undefended: Vec<&EpisodeRecord> = records
        .iter()
        .filter(|r| r.defense_flags.is_empty())
        .collect();
    let mut per_topology = BTreeMap::new();
    let kinds: BTreeSet<TopologyKind> = undefended.iter().map(|r| r.topology_kind).collect();
    for kind in kinds {
        let mut asr = BTreeMap::new();
        let mut episodes = 0usize;
        for regime in Regime::ALL {
            let group: Vec<&EpisodeRecord> = undefended
                .iter()
                .copied()
                .filter(|r| r.topology_kind == kind && r.regime == regime)
                .collect();
            if group.is_empty() {
                warnings.push(format!("{kind}: regime {regime} absent from the logs"));
                continue;
            }
            episodes = episodes.max(group.len());
            asr.insert(regime, asr_of(&group));
        }
        let fa = match (asr.get(&Regime::KeyOnly), asr.get(&Regime::TemplateOnly)) {
            (Some(k), Some(t)) => Some(k + t),
            _ => None,
        };
        per_topology.insert(kind, TopologyReport { asr, fa, episodes });
    }

    let both_by_topology: BTreeMap<TopologyKind, f64> = per_topology
        .iter()
        .filter_map(|(kind, report)| report.asr.get(&Regime::Both).map(|&asr| (*kind, asr)))
        .collect();
    let aggregate_both = (!both_by_topology.is_empty())
        .then(|| aggregate_topologies(&both_by_topology))
        .transpose()?;

    // Fidelity decomposition needs scenario context.
    let mut fidelity = Vec::new();
    if let Some((key_index, compromised_id)) = context {
        for kind in per_topology.keys() {
            let group: Vec<EpisodeRecord> = undefended
                .iter()
                .filter(|r| r.topology_kind == *kind && r.regime == Regime::Both)
                .map(|r| (*r).clone())
                .collect();
            if group.is_empty() {
                continue;
            }
            let d = decompose(&group, *key_index, compromised_id)?;
            fidelity.push(FidelityRow {
                topology_kind: *kind,
                p_route_emp: d.p_route,
                p_template_emp: d.p_template,
                asr_emp: d.asr,
                asr_surrogate: d.p_route * d.p_template.unwrap_or(0.0),
            });
        }
    } else if records.iter().any(|r| r.regime == Regime::Both) {
        warnings
            .push("fidelity section omitted: pass --config to supply scenario context".to_string());
    }

    // Defense attenuation: defended flag sets against the undefended
    // baseline.
    let mut defense = Vec::new();
    let flag_sets: BTreeSet<BTreeSet<PolicyId>> = records
        .iter()
        .filter(|r| !r.defense_flags.is_empty())
        .map(|r| r.defense_flags.clone())
        .collect();
    let baseline_both: Vec<&EpisodeRecord> = undefended
        .iter()
        .copied()
        .filter(|r| r.regime == Regime::Both)
        .collect();
    let baseline = (!baseline_both.is_empty()).then(|| asr_of(&baseline_both));
    for flags in flag_sets {
        let both: Vec<&EpisodeRecord> = records
            .iter()
            .filter(|r| r.defense_flags == flags && r.regime == Regime::Both)
            .collect();
        if both.is_empty() {
            continue;
        }
        let both_asr = asr_of(&both);
        let key_only: Vec<&EpisodeRecord> = records
            .iter()
            .filter(|r| r.defense_flags == flags && r.regime == Regime::KeyOnly)
            .collect();
        let template_only: Vec<&EpisodeRecord> = records
            .iter()
            .filter(|r| r.defense_flags == flags && r.regime == Regime::TemplateOnly)
            .collect();
        let fa = (!key_only.is_empty() && !template_only.is_empty())
            .then(|| asr_of(&key_only) + asr_of(&template_only));
        defense.push(DefenseRow {
            flags: flags.iter().copied().collect(),
            both_asr,
            fa,
            relative_drop: baseline.map(|b| if b > 0.0 { 1.0 - both_asr / b } else { 0.0 }),
        });
    }

    Ok(ReportData {
        per_topology,
        aggregate_both,
        fidelity,
        defense,
        warnings,
    })
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

pub fn render_regime_report(report: &RegimeReport, topology: TopologyKind) -> String {
    let mut out = format!(
        "regime report ({topology}, {} episodes per regime)\n",
        report.episodes_per_regime
    );
    out.push_str("  regime          asr\n");
    for regime in Regime::ALL {
        if let Some(asr) = report.asr.get(&regime) {
            out.push_str(&format!("  {:<15} {asr:.4}\n", regime.name()));
        }
    }
    out.push_str(&format!("  fa              {:.4}\n", report.fa));
    out
}

pub fn render_fidelity(grid: &FidelityGrid) -> String {
    let mut out = String::from("surrogate fidelity grid (both regime)\n");
    out.push_str("  topology  rho    p_route  p_template  asr_emp  surrogate  |diff|\n");
    for point in &grid.points {
        let diff = (point.asr_surrogate - point.asr_emp).abs();
        out.push_str(&format!(
            "  {:<8} {:>5.2}  {:>7.4}  {:>10}  {:>7.4}  {:>9.4}  {:>6.4}\n",
            point.topology_kind.name(),
            point.rho,
            point.p_route_emp,
            fmt_opt(point.p_template_emp),
            point.asr_emp,
            point.asr_surrogate,
            diff
        ));
    }
    // Per-topology min/mean/max over the bias grid.
    let kinds: BTreeSet<TopologyKind> = grid.points.iter().map(|p| p.topology_kind).collect();
    out.push_str("  topology  surrogate min/mean/max     empirical min/mean/max\n");
    for kind in kinds {
        let surrogate: Vec<f64> = grid
            .points
            .iter()
            .filter(|p| p.topology_kind == kind)
            .map(|p| p.asr_surrogate)
            .collect();
        let empirical: Vec<f64> = grid
            .points
            .iter()
            .filter(|p| p.topology_kind == kind)
            .map(|p| p.asr_emp)
            .collect();
        out.push_str(&format!(
            "  {:<8} {:.2}/{:.2}/{:.2}                   {:.2}/{:.2}/{:.2}\n",
            kind.name(),
            min(&surrogate),
            mean(&surrogate),
            max(&surrogate),
            min(&empirical),
            mean(&empirical),
            max(&empirical),
        ));
    }
    out.push_str(&format!(
        "  pearson = {:.4}, spearman = {:.4}\n",
        grid.pearson, grid.spearman
    ));
    out
}

pub fn render_calibration(calibration: &Calibration) -> String {
    let mut out =
        String::from("two-anchor calibration (asr = clip(alpha + rho) * effectiveness)\n");
    for (name, solution) in [
        ("primary (clipped)", &calibration.primary),
        ("alternative (unclipped)", &calibration.alternative),
    ] {
        out.push_str(&format!(
            "  {:<24} alpha = {:.4}, effectiveness = {:.4}, self-consistent = {}\n",
            name, solution.affinity, solution.template_effectiveness, solution.consistent
        ));
    }
    out
}

pub fn render_report(data: &ReportData) -> String {
    let mut out = String::new();
    for (kind, report) in &data.per_topology {
        out.push_str(&format!(
            "regime report ({kind}, {} episodes per regime)\n",
            report.episodes
        ));
        out.push_str("  regime          asr\n");
        for regime in Regime::ALL {
            out.push_str(&format!(
                "  {:<15} {}\n",
                regime.name(),
                fmt_opt(report.asr.get(&regime).copied())
            ));
        }
        out.push_str(&format!("  fa              {}\n", fmt_opt(report.fa)));
    }
    if let Some((min, mean, max)) = data.aggregate_both {
        out.push_str(&format!(
            "topology aggregation (both): min = {min:.4}, mean = {mean:.4}, max = {max:.4}\n"
        ));
    }
    if !data.fidelity.is_empty() {
        out.push_str("fidelity decomposition (both regime)\n");
        out.push_str("  topology  p_route  p_template  asr_emp  surrogate\n");
        for row in &data.fidelity {
            out.push_str(&format!(
                "  {:<8} {:>7.4}  {:>10}  {:>7.4}  {:>9.4}\n",
                row.topology_kind.name(),
                row.p_route_emp,
                fmt_opt(row.p_template_emp),
                row.asr_emp,
                row.asr_surrogate
            ));
        }
    }
    if !data.defense.is_empty() {
        out.push_str("defense attenuation (both regime)\n");
        out.push_str("  policies                 both_asr  fa      drop\n");
        for row in &data.defense {
            let flags = row
                .flags
                .iter()
                .map(|f| f.name())
                .collect::<Vec<_>>()
                .join("+");
            let drop = match row.relative_drop {
                Some(d) => format!("{:+.0}%", -d * 100.0),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "  {:<24} {:>8.4}  {:>6}  {drop}\n",
                flags,
                row.both_asr,
                fmt_opt(row.fa)
            ));
        }
    }
    out
}

fn min(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
