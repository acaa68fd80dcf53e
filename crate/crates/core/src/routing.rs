//! Stochastic dispatcher: per-segment routing probability and the star,
//! chain, and DAG topology engines.

use crate::error::{Error, Result};
use crate::types::{AgentSpec, RoutingParams, Segment};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub const DEFAULT_CHAIN_LENGTH: usize = 3;
pub const DEFAULT_DAG_LAYERS: usize = 3;

/// Virtual entry node used by generated layered DAGs. It is not an agent and
/// never appears in hop sequences.
pub const DAG_VIRTUAL_SOURCE: &str = "client";

/// Communication structure of the agent pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Star,
    Chain,
    Dag,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 3] = [TopologyKind::Star, TopologyKind::Chain, TopologyKind::Dag];

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Star => "star",
            TopologyKind::Chain => "chain",
            TopologyKind::Dag => "dag",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Explicit DAG structure over agent ids. The designated source may be a
/// virtual id outside the pool, in which case it only anchors the first
/// branch and never handles segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagSpec {
    pub source: String,
    pub edges: BTreeMap<String, Vec<String>>,
}

impl DagSpec {
    /// Cycle check via Kahn's algorithm over every node mentioned in the
    /// edge map.
    pub fn validate(&self) -> Result<()> {
        let mut nodes: BTreeSet<&str> = BTreeSet::new();
        nodes.insert(self.source.as_str());
        for (from, tos) in &self.edges {
            nodes.insert(from.as_str());
            for to in tos {
                nodes.insert(to.as_str());
            }
        }
        let mut in_degree: BTreeMap<&str, usize> = nodes.iter().map(|&n| (n, 0)).collect();
        for tos in self.edges.values() {
            for to in tos {
                *in_degree.get_mut(to.as_str()).unwrap() += 1;
            }
        }
        let mut queue: Vec<&str> = in_degree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut visited = 0usize;
        while let Some(node) = queue.pop() {
            visited += 1;
            if let Some(tos) = self.edges.get(node) {
                for to in tos {
                    let d = in_degree.get_mut(to.as_str()).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        queue.push(to);
                    }
                }
            }
        }
        if visited != nodes.len() {
            return Err(Error::Validation("dag edges contain a cycle".to_string()));
        }
        if *in_degree.get(self.source.as_str()).unwrap_or(&1) != 0 {
            return Err(Error::Validation(
                "dag source must have no incoming edges".to_string(),
            ));
        }
        Ok(())
    }

    /// Build the default layered DAG for a pool: agents are chunked into
    /// `layers` contiguous groups in pool order, a virtual source feeds the
    /// first layer, and consecutive layers are fully connected.
    pub fn layered(pool: &[AgentSpec], layers: usize) -> Result<DagSpec> {
        if pool.is_empty() {
            return Err(Error::Config(
                "cannot build a dag over an empty pool".to_string(),
            ));
        }
        if layers == 0 {
            return Err(Error::Validation(
                "dag must have at least one layer".to_string(),
            ));
        }
        let layers = layers.min(pool.len());
        let chunk = pool.len().div_ceil(layers);
        let groups: Vec<Vec<String>> = pool
            .chunks(chunk)
            .map(|agents| agents.iter().map(|a| a.id.clone()).collect())
            .collect();
        let mut edges: BTreeMap<String, Vec<String>> = BTreeMap::new();
        edges.insert(DAG_VIRTUAL_SOURCE.to_string(), groups[0].clone());
        for window in groups.windows(2) {
            for from in &window[0] {
                edges.insert(from.clone(), window[1].clone());
            }
        }
        Ok(DagSpec {
            source: DAG_VIRTUAL_SOURCE.to_string(),
            edges,
        })
    }
}

/// Topology description. `chain_length` applies to chains, `dag_layers` to
/// generated layered DAGs, and `dag_edges` overrides generation with an
/// explicit structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    pub chain_length: Option<usize>,
    pub dag_layers: Option<usize>,
    pub dag_edges: Option<DagSpec>,
}

impl Topology {
    pub fn star() -> Self {
        Topology {
            kind: TopologyKind::Star,
            chain_length: None,
            dag_layers: None,
            dag_edges: None,
        }
    }

    pub fn chain(length: usize) -> Self {
        Topology {
            kind: TopologyKind::Chain,
            chain_length: Some(length),
            dag_layers: None,
            dag_edges: None,
        }
    }

    pub fn dag_layered(layers: usize) -> Self {
        Topology {
            kind: TopologyKind::Dag,
            chain_length: None,
            dag_layers: Some(layers),
            dag_edges: None,
        }
    }

    pub fn dag_explicit(spec: DagSpec) -> Self {
        Topology {
            kind: TopologyKind::Dag,
            chain_length: None,
            dag_layers: None,
            dag_edges: Some(spec),
        }
    }

    pub fn of_kind(kind: TopologyKind) -> Self {
        match kind {
            TopologyKind::Star => Topology::star(),
            TopologyKind::Chain => Topology::chain(DEFAULT_CHAIN_LENGTH),
            TopologyKind::Dag => Topology::dag_layered(DEFAULT_DAG_LAYERS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TopologyKind::Chain => {
                if self.chain_length.unwrap_or(DEFAULT_CHAIN_LENGTH) == 0 {
                    return Err(Error::Validation(
                        "chain_length must be at least 1".to_string(),
                    ));
                }
            }
            TopologyKind::Dag => {
                if let Some(spec) = &self.dag_edges {
                    spec.validate()?;
                } else if self.dag_layers.unwrap_or(DEFAULT_DAG_LAYERS) == 0 {
                    return Err(Error::Validation(
                        "dag_layers must be at least 1".to_string(),
                    ));
                }
            }
            TopologyKind::Star => {}
        }
        Ok(())
    }
}

/// Routing outcome for one segment: every agent the segment visited, in
/// order, plus the agent that finally handled it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub segment_index: usize,
    pub hops: Vec<String>,
    pub handler: String,
}

/// Per-segment routing outcomes for a whole episode.
pub type RoutingTrace = Vec<TraceEntry>;

/// Probability that a segment routes to the privileged/compromised agent:
/// `clip_[0,1](affinity * I_acc + bias * I_acc * I_key)`.
pub fn compromised_probability(segment: &Segment, params: &RoutingParams) -> f64 {
    let account = if segment.is_account { 1.0 } else { 0.0 };
    let keyed = if segment.has_key { 1.0 } else { 0.0 };
    (params.affinity * account + params.routing_bias * account * keyed).clamp(0.0, 1.0)
}

/// Per-agent share of the residual mass distributed uniformly over the
/// benign agents.
pub fn benign_probability(p_star: f64, benign_count: usize) -> Result<f64> {
    if benign_count == 0 {
        return Err(Error::Config(
            "benign probability undefined without benign agents".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&p_star) {
        return Err(Error::Validation(format!(
            "p_star must lie in [0, 1], got {p_star}"
        )));
    }
    Ok((1.0 - p_star) / benign_count as f64)
}

fn next_unit(rng: &mut dyn RngCore) -> f64 {
    // 53-bit uniform in [0, 1); independent of rand's float distributions so
    // the draw sequence stays stable.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF draw over `(id, mass)` pairs in their given order.
fn draw_categorical<'a>(choices: &[(&'a str, f64)], rng: &mut dyn RngCore) -> &'a str {
    let u = next_unit(rng);
    let mut cumulative = 0.0;
    for (id, mass) in choices {
        cumulative += mass;
        if u < cumulative {
            return id;
        }
    }
    // Floating-point slack: fall back to the last positive-mass entry.
    choices
        .iter()
        .rev()
        .find(|(_, mass)| *mass > 0.0)
        .map(|(id, _)| *id)
        .unwrap_or(choices[choices.len() - 1].0)
}

fn privileged_id(pool: &[AgentSpec]) -> Result<&str> {
    let mut privileged = pool.iter().filter(|a| a.has_tools);
    let first = privileged
        .next()
        .ok_or_else(|| Error::Config("pool must contain a privileged agent".to_string()))?;
    if privileged.next().is_some() {
        return Err(Error::Config(
            "pool must contain exactly one privileged agent".to_string(),
        ));
    }
    Ok(&first.id)
}

/// One categorical draw over the full pool with the privileged agent at mass
/// `p_star` and the rest uniform.
fn draw_over_pool<'a>(
    pool: &'a [AgentSpec],
    target: &str,
    p_star: f64,
    rng: &mut dyn RngCore,
) -> &'a str {
    let benign_count = pool.len() - 1;
    let benign_mass = if benign_count == 0 {
        0.0
    } else {
        (1.0 - p_star) / benign_count as f64
    };
    let choices: Vec<(&str, f64)> = pool
        .iter()
        .map(|agent| {
            let mass = if agent.id == target {
                if benign_count == 0 {
                    1.0
                } else {
                    p_star
                }
            } else {
                benign_mass
            };
            (agent.id.as_str(), mass)
        })
        .collect();
    draw_categorical(&choices, rng)
}

/// Restricted draw over a successor set: the privileged agent keeps mass
/// `p_star` when present, the benign successors share the rest; without the
/// privileged agent the draw is uniform.
fn draw_over_successors<'a>(
    successors: &'a [String],
    target: &str,
    p_star: f64,
    rng: &mut dyn RngCore,
) -> &'a str {
    let has_target = successors.iter().any(|s| s == target);
    let benign_count = successors.iter().filter(|s| *s != target).count();
    let choices: Vec<(&str, f64)> = successors
        .iter()
        .map(|id| {
            let mass = if has_target {
                if id == target {
                    if benign_count == 0 {
                        1.0
                    } else {
                        p_star
                    }
                } else {
                    (1.0 - p_star) / benign_count as f64
                }
            } else {
                1.0 / successors.len() as f64
            };
            (id.as_str(), mass)
        })
        .collect();
    draw_categorical(&choices, rng)
}

/// Route one segment through the topology, drawing deterministically from
/// `rng`, and return its trace entry.
///
/// Star: a single categorical draw. Chain: `chain_length` independent hop
/// draws; the handler is the privileged agent iff any hop selects it, else
/// the last hop. DAG: a source-to-sink path with the categorical restricted
/// to each node's successors; the handler is the first privileged agent on
/// the path, else the sink.
pub fn dispatch(
    segment: &Segment,
    pool: &[AgentSpec],
    params: &RoutingParams,
    topology: &Topology,
    rng: &mut dyn RngCore,
) -> Result<TraceEntry> {
    if pool.is_empty() {
        return Err(Error::Config("agent pool is empty".to_string()));
    }
    if pool.iter().filter(|a| a.compromised).count() > 1 {
        return Err(Error::Config(
            "pool contains more than one compromised agent".to_string(),
        ));
    }
    topology.validate()?;
    let target = privileged_id(pool)?.to_string();
    let p_star = compromised_probability(segment, params);

    let (hops, handler) = match topology.kind {
        TopologyKind::Star => {
            let chosen = draw_over_pool(pool, &target, p_star, rng).to_string();
            (vec![chosen.clone()], chosen)
        }
        TopologyKind::Chain => {
            let length = topology.chain_length.unwrap_or(DEFAULT_CHAIN_LENGTH);
            let hops: Vec<String> = (0..length)
                .map(|_| draw_over_pool(pool, &target, p_star, rng).to_string())
                .collect();
            let handler = if hops.contains(&target) {
                target.clone()
            } else {
                hops[hops.len() - 1].clone()
            };
            (hops, handler)
        }
        TopologyKind::Dag => {
            let generated;
            let spec = match &topology.dag_edges {
                Some(spec) => spec,
                None => {
                    generated =
                        DagSpec::layered(pool, topology.dag_layers.unwrap_or(DEFAULT_DAG_LAYERS))?;
                    &generated
                }
            };
            spec.validate()?;
            let pool_ids: BTreeSet<&str> = pool.iter().map(|a| a.id.as_str()).collect();
            for (from, tos) in &spec.edges {
                if from != &spec.source && !pool_ids.contains(from.as_str()) {
                    return Err(Error::Config(format!("dag node {from} is not in the pool")));
                }
                if let Some(missing) = tos.iter().find(|t| !pool_ids.contains(t.as_str())) {
                    return Err(Error::Config(format!(
                        "dag node {missing} is not in the pool"
                    )));
                }
            }

            let mut current = spec.source.clone();
            let mut path: Vec<String> = Vec::new();
            if pool_ids.contains(current.as_str()) {
                path.push(current.clone());
            }
            // Acyclicity was validated above, so the walk terminates.
            while let Some(successors) = spec.edges.get(&current) {
                if successors.is_empty() {
                    break;
                }
                let chosen = draw_over_successors(successors, &target, p_star, rng).to_string();
                path.push(chosen.clone());
                current = chosen;
            }
            if path.is_empty() {
                return Err(Error::Config(
                    "dag source has no successors in the pool".to_string(),
                ));
            }
            let handler = path
                .iter()
                .find(|id| **id == target)
                .cloned()
                .unwrap_or_else(|| path[path.len() - 1].clone());
            (path, handler)
        }
    };

    Ok(TraceEntry {
        segment_index: segment.index,
        hops,
        handler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TemplateSlot;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(is_account: bool, has_key: bool) -> Segment {
        Segment {
            index: 1,
            text: "check balance".to_string(),
            is_account,
            has_key,
        }
    }

    fn pool(benign: usize) -> Vec<AgentSpec> {
        let mut agents = vec![AgentSpec {
            id: "account".to_string(),
            role: "Account and rewards operations".to_string(),
            compromised: true,
            template_slot: Some(TemplateSlot::Suffix),
            has_tools: true,
        }];
        for i in 0..benign {
            agents.push(AgentSpec {
                id: format!("benign_{i}"),
                role: format!("Benign service {i}"),
                compromised: false,
                template_slot: None,
                has_tools: false,
            });
        }
        agents
    }

    fn params(affinity: f64, bias: f64, benign: usize) -> RoutingParams {
        RoutingParams::new(affinity, bias, benign).unwrap()
    }

    #[test]
    fn probability_zero_without_account_semantics() {
        let p = compromised_probability(&seg(false, true), &params(0.9, 0.9, 4));
        assert_eq!(p, 0.0);
    }

    #[test]
    fn probability_adds_bias_for_keyed_account_segments() {
        let p = compromised_probability(&seg(true, true), &params(0.4, 0.5, 4));
        assert!((p - 0.9).abs() < 1e-12);
    }

    #[test]
    fn probability_clips_at_one() {
        let p = compromised_probability(&seg(true, true), &params(0.378, 0.8, 4));
        assert_eq!(p, 1.0);
    }

    #[test]
    fn benign_probability_splits_residual_mass() {
        assert!((benign_probability(0.6, 4).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(benign_probability(1.0, 3).unwrap(), 0.0);
        assert!(benign_probability(0.5, 0).is_err());
    }

    #[test]
    fn induced_distribution_sums_to_one() {
        for benign in [1usize, 3, 7] {
            for p_star in [0.0, 0.25, 0.6, 1.0] {
                let share = benign_probability(p_star, benign).unwrap();
                let total = p_star + share * benign as f64;
                assert!((total - 1.0).abs() < 1e-12, "p_star={p_star} n={benign}");
            }
        }
    }

    #[test]
    fn star_with_full_mass_always_picks_privileged() {
        let pool = pool(4);
        let topology = Topology::star();
        let p = params(1.0, 0.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let entry = dispatch(&seg(true, false), &pool, &p, &topology, &mut rng).unwrap();
            assert_eq!(entry.handler, "account");
            assert_eq!(entry.hops.len(), 1);
        }
    }

    // Monte Carlo against the exact categorical: empirical frequency of the
    // privileged handler must sit within 0.01 of p_star = 0.6.
    #[test]
    fn star_handler_frequency_matches_categorical() {
        let pool = pool(4);
        let topology = Topology::star();
        let p = params(0.6, 0.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            let entry = dispatch(&seg(true, false), &pool, &p, &topology, &mut rng).unwrap();
            if entry.handler == "account" {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.6).abs() < 0.01, "freq={freq}");
    }

    // Closed-form complement oracle: reach probability over a 3-hop chain
    // with per-hop p_star = 0.3 is 1 - 0.7^3.
    #[test]
    fn chain_reach_frequency_matches_complement() {
        let pool = pool(4);
        let topology = Topology::chain(3);
        let p = params(0.3, 0.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let draws = 100_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            let entry = dispatch(&seg(true, false), &pool, &p, &topology, &mut rng).unwrap();
            assert_eq!(entry.hops.len(), 3);
            if entry.handler == "account" {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        let expected = 1.0 - 0.7f64.powi(3);
        assert!(
            (freq - expected).abs() < 0.01,
            "freq={freq} expected={expected}"
        );
    }

    #[test]
    fn dag_walks_source_to_sink() {
        let pool = pool(5);
        let topology = Topology::dag_layered(3);
        let p = params(0.5, 0.2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let entry = dispatch(&seg(true, true), &pool, &p, &topology, &mut rng).unwrap();
            assert!(entry.hops.contains(&entry.handler));
            assert!(!entry.hops.iter().any(|h| h == DAG_VIRTUAL_SOURCE));
        }
    }

    #[test]
    fn cyclic_dag_rejected() {
        let mut edges = BTreeMap::new();
        edges.insert("client".to_string(), vec!["a".to_string()]);
        edges.insert("a".to_string(), vec!["b".to_string()]);
        edges.insert("b".to_string(), vec!["a".to_string()]);
        let spec = DagSpec {
            source: "client".to_string(),
            edges,
        };
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_pool_rejected() {
        let topology = Topology::star();
        let p = params(0.5, 0.5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            dispatch(&seg(true, true), &[], &p, &topology, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dispatch_is_bitwise_reproducible() {
        let pool = pool(4);
        let topology = Topology::chain(3);
        let p = params(0.4, 0.3, 4);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| dispatch(&seg(true, true), &pool, &p, &topology, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(99), run(99));
    }

    #[test]
    fn monotone_in_bias_for_keyed_account_segments() {
        let segment = seg(true, true);
        let mut previous = -1.0;
        for step in 0..=10 {
            let bias = step as f64 / 10.0;
            let p = compromised_probability(&segment, &params(0.3, bias, 4));
            assert!(p >= previous);
            previous = p;
        }
    }

    proptest! {
        // Segments without account semantics never route to the privileged
        // agent with positive probability.
        #[test]
        fn non_account_segments_never_attract_mass(
            affinity in 0.0f64..=1.0,
            bias in 0.0f64..=1.0,
            has_key in proptest::bool::ANY,
        ) {
            let p = compromised_probability(&seg(false, has_key), &params(affinity, bias, 3));
            prop_assert_eq!(p, 0.0);
        }
    }
}
