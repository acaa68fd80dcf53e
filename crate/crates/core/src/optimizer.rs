//! Routing-aware counterpart optimizer: Gumbel-Softmax relaxation of the
//! discrete attack configuration, the surrogate success objective with its
//! regularizers, exact pathwise gradients, and annealed gradient descent
//! with argmax decoding.

use crate::error::{Error, Result};
use crate::types::{AttackConfig, TemplateSlot};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SLOT_COUNT: usize = 3;

/// Continuous relaxation state of the discrete configuration.
///
/// `key_logits` relax key placement over segments, `slot_logits` relax the
/// template slot, `bias_logit` parameterizes the routing bias through a
/// sigmoid, and `slot_weights` parameterize per-slot effectiveness. The
/// affinity vector is the per-segment account weight in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterpartState {
    pub key_logits: Vec<f64>,
    pub slot_logits: Vec<f64>,
    pub bias_logit: f64,
    pub slot_weights: Vec<f64>,
    pub temperature: f64,
    pub affinity: Vec<f64>,
}

impl CounterpartState {
    /// Fresh state with zero logits (uniform relaxed distributions, bias
    /// 0.5) at unit temperature.
    pub fn new(affinity: Vec<f64>) -> Result<Self> {
        let state = CounterpartState {
            key_logits: vec![0.0; affinity.len()],
            slot_logits: vec![0.0; SLOT_COUNT],
            bias_logit: 0.0,
            slot_weights: vec![0.0; SLOT_COUNT],
            temperature: 1.0,
            affinity,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.affinity.is_empty() {
            return Err(Error::Validation(
                "affinity vector must be nonempty".to_string(),
            ));
        }
        if self.key_logits.len() != self.affinity.len() {
            return Err(Error::Validation(format!(
                "key_logits length {} does not match affinity length {}",
                self.key_logits.len(),
                self.affinity.len()
            )));
        }
        if self.slot_logits.len() != SLOT_COUNT || self.slot_weights.len() != SLOT_COUNT {
            return Err(Error::Validation(
                "slot logits and weights must have length 3".to_string(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for &a in &self.affinity {
            if !a.is_finite() || !(0.0..=1.0).contains(&a) {
                return Err(Error::Validation(format!(
                    "affinity entries must lie in [0, 1], got {a}"
                )));
            }
        }
        let all_finite = self
            .key_logits
            .iter()
            .chain(&self.slot_logits)
            .chain(&self.slot_weights)
            .chain(std::iter::once(&self.bias_logit))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Nonfinite("counterpart state".to_string()));
        }
        Ok(())
    }
}

/// Loss hyperparameters and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Regularizer weights: off-affinity key mass, routing bias, template
    /// effectiveness, key entropy, slot entropy.
    pub lambdas: [f64; 5],
    pub steps: usize,
    pub learning_rate: f64,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambdas: [0.1, 0.01, 0.05, 0.01, 0.01],
            steps: 500,
            learning_rate: 0.05,
            temp_start: 1.0,
            temp_end: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be at least 1".to_string()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(
                "learning_rate must be positive".to_string(),
            ));
        }
        if !(self.temp_start > 0.0 && self.temp_end > 0.0 && self.temp_end <= self.temp_start) {
            return Err(Error::Validation(
                "temperatures must satisfy 0 < temp_end <= temp_start".to_string(),
            ));
        }
        // The template-effectiveness weight may be negative to flip the term
        // from penalty to reward; the others are penalties/entropy weights.
        for (i, &lambda) in self.lambdas.iter().enumerate() {
            if !lambda.is_finite() {
                return Err(Error::Nonfinite(format!("lambda{}", i + 1)));
            }
            if i != 2 && lambda < 0.0 {
                return Err(Error::Validation(format!(
                    "lambda{} must be nonnegative, got {lambda}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Which logits a run trains; frozen logits stay at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptLevel {
    /// Only the routing-bias logit.
    Routing,
    /// Routing bias and key placement.
    RoutingKey,
    /// Routing bias, key placement, and slot placement.
    Full,
}

impl OptLevel {
    pub const ALL: [OptLevel; 3] = [OptLevel::Routing, OptLevel::RoutingKey, OptLevel::Full];

    pub fn name(self) -> &'static str {
        match self {
            OptLevel::Routing => "routing",
            OptLevel::RoutingKey => "routing_key",
            OptLevel::Full => "full",
        }
    }

    fn trains_key(self) -> bool {
        matches!(self, OptLevel::RoutingKey | OptLevel::Full)
    }

    fn trains_slot(self) -> bool {
        matches!(self, OptLevel::Full)
    }
}

impl std::fmt::Display for OptLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Initialization of the slot-effectiveness weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightInit {
    /// All-zero weights (effectiveness 0.5 per slot).
    Zeros,
    /// Explicit weight values, e.g. logits of known backend effectiveness.
    Values([f64; 3]),
}

/// Options for one optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    pub level: OptLevel,
    pub weight_init: WeightInit,
    /// Whether slot weights are trained at the full level or stay frozen.
    pub train_weights: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            level: OptLevel::Full,
            weight_init: WeightInit::Zeros,
            train_weights: true,
        }
    }
}

/// Decoded result of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub config: AttackConfig,
    pub loss_trace: Vec<f64>,
    pub final_state: CounterpartState,
}

/// Fixed Gumbel perturbations for one relaxed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub key: Vec<f64>,
    pub slot: Vec<f64>,
}

fn next_unit_open(rng: &mut dyn RngCore) -> f64 {
    // Uniform in (0, 1): the Gumbel transform diverges at both endpoints.
    loop {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u > 0.0 {
            return u;
        }
    }
}

/// Draw standard Gumbel noise `g = -ln(-ln(u))`.
pub fn sample_gumbel(len: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u = next_unit_open(rng);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Draw one noise bundle for a state with `segments` key positions.
pub fn sample_noise(segments: usize, rng: &mut dyn RngCore) -> GumbelNoise {
    GumbelNoise {
        key: sample_gumbel(segments, rng),
        slot: sample_gumbel(SLOT_COUNT, rng),
    }
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of the logistic, clamped away from the endpoints.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Relaxed categorical sample: `softmax((logits + g) / temperature)` with
/// fixed noise `g`.
pub fn gumbel_softmax_with_noise(
    logits: &[f64],
    noise: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Nonfinite("gumbel-softmax logits".to_string()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.len() != noise.len() {
        return Err(Error::Validation(
            "noise length must match logits length".to_string(),
        ));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    Ok(softmax(&perturbed))
}

/// Relaxed categorical sample with fresh Gumbel noise from `rng`.
pub fn gumbel_softmax(logits: &[f64], temperature: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let noise = sample_gumbel(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// Shannon entropy in nats with the `0 ln 0 = 0` convention.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation(
            "entropy requires nonnegative finite entries".to_string(),
        ));
    }
    Ok(-dist.iter().map(|&v| xlnx(v)).sum::<f64>())
}

fn xlnx(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

/// Surrogate routing probability: `rho * sum_i p_i * a_i`.
pub fn surrogate_p_route(p: &[f64], affinity: &[f64], rho: f64) -> f64 {
    rho * p.iter().zip(affinity).map(|(pi, ai)| pi * ai).sum::<f64>()
}

/// Surrogate template effectiveness: `sum_t q_t * sigmoid(w_t)`.
pub fn surrogate_p_template(q: &[f64], weights: &[f64]) -> f64 {
    q.iter()
        .zip(weights)
        .map(|(qt, wt)| qt * logistic(*wt))
        .sum()
}

/// Surrogate attack success: the product of the routing and template
/// factors.
pub fn surrogate_asr(p: &[f64], q: &[f64], rho: f64, affinity: &[f64], weights: &[f64]) -> f64 {
    surrogate_p_route(p, affinity, rho) * surrogate_p_template(q, weights)
}

/// Full relaxed loss:
/// `-P_route*P_template + l1*sum p_i(1-a_i) + l2*rho + l3*P_template
///  - l4*H(p) - l5*H(q)`.
pub fn relaxed_loss(
    state: &CounterpartState,
    p: &[f64],
    q: &[f64],
    rho: f64,
    hyper: &Hyperparams,
) -> f64 {
    let [l1, l2, l3, l4, l5] = hyper.lambdas;
    let p_route = surrogate_p_route(p, &state.affinity, rho);
    let p_template = surrogate_p_template(q, &state.slot_weights);
    let off_affinity: f64 = p
        .iter()
        .zip(&state.affinity)
        .map(|(pi, ai)| pi * (1.0 - ai))
        .sum();
    let h_p = -p.iter().map(|&v| xlnx(v)).sum::<f64>();
    let h_q = -q.iter().map(|&v| xlnx(v)).sum::<f64>();
    -p_route * p_template + l1 * off_affinity + l2 * rho + l3 * p_template - l4 * h_p - l5 * h_q
}

/// Loss of one relaxed sample under fixed Gumbel noise.
pub fn loss_with_noise(
    state: &CounterpartState,
    noise: &GumbelNoise,
    hyper: &Hyperparams,
) -> Result<f64> {
    state.validate()?;
    let p = gumbel_softmax_with_noise(&state.key_logits, &noise.key, state.temperature)?;
    let q = gumbel_softmax_with_noise(&state.slot_logits, &noise.slot, state.temperature)?;
    let rho = logistic(state.bias_logit);
    Ok(relaxed_loss(state, &p, &q, rho, hyper))
}

/// Gradient bundle of the relaxed loss with respect to every logit group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub key_logits: Vec<f64>,
    pub slot_logits: Vec<f64>,
    pub bias_logit: f64,
    pub slot_weights: Vec<f64>,
}

/// Exact pathwise gradients of the single-sample relaxed loss, holding the
/// Gumbel noise fixed.
pub fn gradients_with_noise(
    state: &CounterpartState,
    noise: &GumbelNoise,
    hyper: &Hyperparams,
) -> Result<Gradients> {
    state.validate()?;
    let [l1, l2, l3, l4, l5] = hyper.lambdas;
    let temperature = state.temperature;
    let p = gumbel_softmax_with_noise(&state.key_logits, &noise.key, temperature)?;
    let q = gumbel_softmax_with_noise(&state.slot_logits, &noise.slot, temperature)?;
    let rho = logistic(state.bias_logit);

    let affinity_mass: f64 = p.iter().zip(&state.affinity).map(|(pi, ai)| pi * ai).sum();
    let p_template = surrogate_p_template(&q, &state.slot_weights);

    // dL/dp_i = -rho*a_i*P_template + l1*(1 - a_i) + l4*(ln p_i + 1).
    // Chain through the softmax: dL/dalpha_i = (p_i*(dL/dp_i) -
    // p_i * sum_k p_k*(dL/dp_k)) / T. Products p_i*ln(p_i) are evaluated
    // through xlnx so vanishing components stay finite.
    let weighted_p: Vec<f64> = p
        .iter()
        .zip(&state.affinity)
        .map(|(&pi, &ai)| pi * (-rho * ai * p_template + l1 * (1.0 - ai) + l4) + l4 * xlnx(pi))
        .collect();
    let sum_weighted_p: f64 = weighted_p.iter().sum();
    let key_grad: Vec<f64> = p
        .iter()
        .zip(&weighted_p)
        .map(|(&pi, &wi)| (wi - pi * sum_weighted_p) / temperature)
        .collect();

    // dL/dq_t = (l3 - P_route)*sigmoid(w_t) + l5*(ln q_t + 1).
    let p_route = rho * affinity_mass;
    let weighted_q: Vec<f64> = q
        .iter()
        .zip(&state.slot_weights)
        .map(|(&qt, &wt)| qt * ((l3 - p_route) * logistic(wt) + l5) + l5 * xlnx(qt))
        .collect();
    let sum_weighted_q: f64 = weighted_q.iter().sum();
    let slot_grad: Vec<f64> = q
        .iter()
        .zip(&weighted_q)
        .map(|(&qt, &wt)| (wt - qt * sum_weighted_q) / temperature)
        .collect();

    // dL/drho = -affinity_mass*P_template + l2; chain through the sigmoid.
    let bias_grad = (-affinity_mass * p_template + l2) * rho * (1.0 - rho);

    // dL/dw_t = (l3 - P_route)*q_t*sigmoid'(w_t).
    let weight_grad: Vec<f64> = q
        .iter()
        .zip(&state.slot_weights)
        .map(|(&qt, &wt)| {
            let s = logistic(wt);
            (l3 - p_route) * qt * s * (1.0 - s)
        })
        .collect();

    Ok(Gradients {
        key_logits: key_grad,
        slot_logits: slot_grad,
        bias_logit: bias_grad,
        slot_weights: weight_grad,
    })
}

/// Pathwise gradients for one fresh relaxed sample.
pub fn gradients(
    state: &CounterpartState,
    hyper: &Hyperparams,
    rng: &mut dyn RngCore,
) -> Result<Gradients> {
    let noise = sample_noise(state.affinity.len(), rng);
    gradients_with_noise(state, &noise, hyper)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Run annealed gradient descent on the counterpart objective and decode the
/// discrete configuration.
///
/// Each step samples one relaxed configuration, computes the loss and its
/// pathwise gradients, applies a plain gradient step to the logits the level
/// trains, and anneals the temperature geometrically. Decoding takes the
/// argmax of the final key and slot logits and keeps the learned bias value.
pub fn optimize(
    affinity: &[f64],
    hyper: &Hyperparams,
    seed: u64,
    options: &OptimizeOptions,
) -> Result<OptimizeOutcome> {
    hyper.validate()?;
    let mut state = CounterpartState::new(affinity.to_vec())?;
    if let WeightInit::Values(values) = options.weight_init {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Nonfinite("slot weight initialization".to_string()));
        }
        state.slot_weights = values.to_vec();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    let decay = hyper.temp_end / hyper.temp_start;
    let denom = hyper.steps.saturating_sub(1).max(1) as f64;

    for step in 0..hyper.steps {
        state.temperature = hyper.temp_start * decay.powf(step as f64 / denom);
        let noise = sample_noise(state.affinity.len(), &mut rng);
        let loss = loss_with_noise(&state, &noise, hyper)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        loss_trace.push(loss);

        let grads = gradients_with_noise(&state, &noise, hyper)?;
        let lr = hyper.learning_rate;
        state.bias_logit -= lr * grads.bias_logit;
        if options.level.trains_key() {
            for (logit, grad) in state.key_logits.iter_mut().zip(&grads.key_logits) {
                *logit -= lr * grad;
            }
        }
        if options.level.trains_slot() {
            for (logit, grad) in state.slot_logits.iter_mut().zip(&grads.slot_logits) {
                *logit -= lr * grad;
            }
            if options.train_weights {
                for (weight, grad) in state.slot_weights.iter_mut().zip(&grads.slot_weights) {
                    *weight -= lr * grad;
                }
            }
        }
    }

    let key_index = argmax(&state.key_logits) + 1;
    let slot = TemplateSlot::from_index(argmax(&state.slot_logits)).expect("slot index in range");
    let routing_bias = logistic(state.bias_logit);
    let config = AttackConfig::new(key_index, slot, routing_bias)?;
    Ok(OptimizeOutcome {
        config,
        loss_trace,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_hyper(lambdas: [f64; 5]) -> Hyperparams {
        Hyperparams {
            lambdas,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn gumbel_softmax_is_one_hot_at_tiny_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.3, -1.2, 2.0, 0.0];
        for _ in 0..200 {
            let noise = sample_gumbel(4, &mut rng);
            let out = gumbel_softmax_with_noise(&logits, &noise, 1e-4).unwrap();
            let winner = argmax(
                &logits
                    .iter()
                    .zip(&noise)
                    .map(|(l, g)| l + g)
                    .collect::<Vec<_>>(),
            );
            assert!((out[winner] - 1.0).abs() < 1e-6);
            for (i, &v) in out.iter().enumerate() {
                if i != winner {
                    assert!(v < 1e-6);
                }
            }
        }
    }

    // Symmetry oracle: with equal logits the mean relaxed sample is uniform.
    #[test]
    fn gumbel_softmax_mean_is_uniform_for_equal_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = [0.0; 4];
        let samples = 100_000;
        let mut mean = [0.0f64; 4];
        for _ in 0..samples {
            let out = gumbel_softmax(&logits, 1.0, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&out) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= samples as f64;
            assert!((*m - 0.25).abs() < 0.01, "mean={m}");
        }
    }

    // Gumbel-max oracle: argmax frequencies follow softmax(logits).
    #[test]
    fn gumbel_argmax_frequencies_match_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.5, -0.3, 1.2, 0.0];
        let expected = softmax(&logits);
        let samples = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..samples {
            let noise = sample_gumbel(4, &mut rng);
            let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| l + g).collect();
            counts[argmax(&perturbed)] += 1;
        }
        for (count, exp) in counts.iter().zip(&expected) {
            let freq = *count as f64 / samples as f64;
            assert!((freq - exp).abs() < 0.01, "freq={freq} expected={exp}");
        }
    }

    #[test]
    fn gumbel_softmax_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(gumbel_softmax(&[f64::NAN, 0.0], 1.0, &mut rng).is_err());
        assert!(gumbel_softmax(&[0.0, 0.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn surrogate_route_examples() {
        assert!((surrogate_p_route(&[1.0, 0.0], &[1.0, 0.0], 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(surrogate_p_route(&[0.3, 0.7], &[0.9, 0.4], 0.0), 0.0);
        let p = [0.25; 4];
        let a = [1.0, 0.0, 0.0, 0.0];
        assert!((surrogate_p_route(&p, &a, 1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn surrogate_template_examples() {
        assert!((surrogate_p_template(&[1.0, 0.0, 0.0], &[0.0, 5.0, -5.0]) - 0.5).abs() < 1e-12);
        let q = [1.0 / 3.0; 3];
        assert!((surrogate_p_template(&q, &[0.0; 3]) - 0.5).abs() < 1e-12);
        let q = [0.2, 0.3, 0.5];
        let w = [-700.0, 0.0, 700.0];
        assert!((surrogate_p_template(&q, &w) - 0.65).abs() < 1e-9);
    }

    #[test]
    fn surrogate_asr_is_the_product() {
        let p = [1.0, 0.0];
        let a = [1.0, 0.0];
        let q = [0.0, 0.0, 1.0];
        let w = [0.0, 0.0, logit(0.8)];
        let s = surrogate_asr(&p, &q, 0.5, &a, &w);
        assert!((s - 0.4).abs() < 1e-9);
        assert_eq!(surrogate_asr(&p, &q, 0.0, &a, &w), 0.0);
    }

    #[test]
    fn route_slope_in_bias_is_the_affinity_mass() {
        // P_route is linear in rho, so its slope equals sum_i p_i * a_i
        // exactly.
        let p = [0.6, 0.3, 0.1];
        let a = [1.0, 0.5, 0.0];
        let mass: f64 = p.iter().zip(&a).map(|(pi, ai)| pi * ai).sum();
        assert_eq!(surrogate_p_route(&p, &a, 0.0), 0.0);
        assert_eq!(surrogate_p_route(&p, &a, 1.0), mass);
        assert!(mass >= 0.0);
    }

    #[test]
    fn surrogate_asr_monotone_in_bias() {
        let p = [0.6, 0.4];
        let a = [1.0, 0.2];
        let q = [0.5, 0.3, 0.2];
        let w = [0.1, 0.4, 0.9];
        let mut previous = -1.0;
        for step in 0..=10 {
            let rho = step as f64 / 10.0;
            let s = surrogate_asr(&p, &q, rho, &a, &w);
            assert!(s >= previous);
            previous = s;
        }
    }

    #[test]
    fn loss_reduces_to_negative_surrogate_without_regularizers() {
        let state = CounterpartState::new(vec![1.0, 0.0]).unwrap();
        let hyper = uniform_hyper([0.0; 5]);
        let p = [0.7, 0.3];
        let q = [0.2, 0.3, 0.5];
        let loss = relaxed_loss(&state, &p, &q, 0.6, &hyper);
        let expected = -surrogate_asr(&p, &q, 0.6, &state.affinity, &state.slot_weights);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_off_affinity_penalty_case() {
        let state = CounterpartState::new(vec![1.0, 0.0]).unwrap();
        let hyper = uniform_hyper([1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = [0.5, 0.5];
        let q = [1.0, 0.0, 0.0];
        // rho = 0 kills the attack term; only the off-affinity penalty
        // survives: 0.5 * (1 - 1) + 0.5 * (1 - 0) = 0.5.
        let loss = relaxed_loss(&state, &p, &q, 0.0, &hyper);
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let n = 5;
        let uniform = vec![1.0 / n as f64; n];
        assert!((entropy(&uniform).unwrap() - (n as f64).ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    fn finite_difference_check(state: &CounterpartState, hyper: &Hyperparams, noise: &GumbelNoise) {
        let h = 1e-5;
        let analytic = gradients_with_noise(state, noise, hyper).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);

        let mut probe = state.clone();
        for i in 0..state.key_logits.len() {
            probe.key_logits[i] = state.key_logits[i] + h;
            let up = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.key_logits[i] = state.key_logits[i] - h;
            let down = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.key_logits[i] = state.key_logits[i];
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel(analytic.key_logits[i], fd) <= 1e-4,
                "key[{i}]: analytic={} fd={fd}",
                analytic.key_logits[i]
            );
        }
        for i in 0..3 {
            probe.slot_logits[i] = state.slot_logits[i] + h;
            let up = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.slot_logits[i] = state.slot_logits[i] - h;
            let down = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.slot_logits[i] = state.slot_logits[i];
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel(analytic.slot_logits[i], fd) <= 1e-4,
                "slot[{i}]: analytic={} fd={fd}",
                analytic.slot_logits[i]
            );
        }
        {
            probe.bias_logit = state.bias_logit + h;
            let up = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.bias_logit = state.bias_logit - h;
            let down = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.bias_logit = state.bias_logit;
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel(analytic.bias_logit, fd) <= 1e-4,
                "bias: analytic={} fd={fd}",
                analytic.bias_logit
            );
        }
        for i in 0..3 {
            probe.slot_weights[i] = state.slot_weights[i] + h;
            let up = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.slot_weights[i] = state.slot_weights[i] - h;
            let down = loss_with_noise(&probe, noise, hyper).unwrap();
            probe.slot_weights[i] = state.slot_weights[i];
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel(analytic.slot_weights[i], fd) <= 1e-4,
                "weight[{i}]: analytic={} fd={fd}",
                analytic.slot_weights[i]
            );
        }
    }

    pub(crate) fn random_state(
        rng: &mut ChaCha8Rng,
    ) -> (CounterpartState, Hyperparams, GumbelNoise) {
        let segments = rng.gen_range(2usize..=8);
        let mut state =
            CounterpartState::new((0..segments).map(|_| rng.gen_range(0.0..=1.0)).collect())
                .unwrap();
        for logit in state.key_logits.iter_mut() {
            *logit = rng.gen_range(-2.0..2.0);
        }
        for logit in state.slot_logits.iter_mut() {
            *logit = rng.gen_range(-2.0..2.0);
        }
        for weight in state.slot_weights.iter_mut() {
            *weight = rng.gen_range(-2.0..2.0);
        }
        state.bias_logit = rng.gen_range(-2.0..2.0);
        state.temperature = rng.gen_range(0.3..2.0);
        let hyper = Hyperparams {
            lambdas: [
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
                rng.gen_range(-0.2..0.5),
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
            ],
            ..Hyperparams::default()
        };
        let noise = sample_noise(segments, rng);
        (state, hyper, noise)
    }

    // Finite-difference oracle over random states; the acceptance suite
    // widens this to 100 states.
    #[test]
    fn pathwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (state, hyper, noise) = random_state(&mut rng);
            finite_difference_check(&state, &hyper, &noise);
        }
    }

    #[test]
    fn bias_gradient_pushes_rho_up_without_regularizers() {
        let mut state = CounterpartState::new(vec![0.0, 1.0, 0.0]).unwrap();
        state.key_logits = vec![0.0, 3.0, 0.0];
        state.slot_weights = vec![1.0, 1.0, 1.0];
        let hyper = uniform_hyper([0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let grads = gradients(&state, &hyper, &mut rng).unwrap();
            assert!(grads.bias_logit <= 0.0, "descent must increase the bias");
        }
    }

    #[test]
    fn entropy_only_objective_is_stationary_at_uniform() {
        // Zero affinity turns the attack term off; with only the entropy
        // terms active and zero noise, the uniform state is the exact
        // optimum, so all gradients vanish.
        let state = CounterpartState::new(vec![0.0, 0.0, 0.0]).unwrap();
        let hyper = uniform_hyper([0.0, 0.0, 0.0, 0.3, 0.3]);
        let noise = GumbelNoise {
            key: vec![0.0; 3],
            slot: vec![0.0; 3],
        };
        let grads = gradients_with_noise(&state, &noise, &hyper).unwrap();
        for g in grads.key_logits.iter().chain(&grads.slot_logits) {
            assert!(g.abs() < 1e-12, "gradient {g} at uniform optimum");
        }
        assert!(grads.bias_logit.abs() < 1e-12);
    }

    #[test]
    fn optimize_recovers_planted_account_segment() {
        let hyper = Hyperparams::default();
        let options = OptimizeOptions {
            weight_init: WeightInit::Values([logit(0.55), logit(0.65), logit(0.74)]),
            train_weights: false,
            ..OptimizeOptions::default()
        };
        let mut correct = 0;
        for seed in 0..5 {
            let outcome = optimize(&[0.0, 1.0, 0.0], &hyper, seed, &options).unwrap();
            if outcome.config.key_index == 2 {
                correct += 1;
            }
        }
        assert!(correct >= 4, "recovered {correct}/5");
    }

    #[test]
    fn frozen_levels_keep_initialization_argmax() {
        let hyper = Hyperparams::default();
        let options = OptimizeOptions {
            level: OptLevel::Routing,
            ..OptimizeOptions::default()
        };
        let outcome = optimize(&[0.0, 1.0, 0.0], &hyper, 9, &options).unwrap();
        // Untouched zero logits decode to the first index.
        assert_eq!(outcome.config.key_index, 1);
        assert_eq!(outcome.config.slot, TemplateSlot::Prefix);
        assert_eq!(outcome.final_state.key_logits, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn dominant_frozen_weight_decodes_its_slot() {
        let hyper = Hyperparams::default();
        let options = OptimizeOptions {
            weight_init: WeightInit::Values([-2.0, -2.0, 5.0]),
            train_weights: false,
            ..OptimizeOptions::default()
        };
        let outcome = optimize(&[1.0, 0.0], &hyper, 17, &options).unwrap();
        assert_eq!(outcome.config.slot, TemplateSlot::Suffix);
    }

    #[test]
    fn optimize_is_bitwise_deterministic() {
        let hyper = Hyperparams::default();
        let options = OptimizeOptions::default();
        let a = optimize(&[0.0, 1.0, 0.0], &hyper, 123, &options).unwrap();
        let b = optimize(&[0.0, 1.0, 0.0], &hyper, 123, &options).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.loss_trace).unwrap(),
            serde_json::to_string(&b.loss_trace).unwrap()
        );
    }

    #[test]
    fn loss_trace_stays_finite_with_defaults() {
        let hyper = Hyperparams::default();
        let options = OptimizeOptions::default();
        for seed in 0..20 {
            let outcome = optimize(&[0.0, 1.0, 0.0], &hyper, seed, &options).unwrap();
            assert_eq!(outcome.loss_trace.len(), hyper.steps);
            assert!(outcome.loss_trace.iter().all(|l| l.is_finite()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        // The relaxed sample is a valid simplex vector across temperatures.
        #[test]
        fn gumbel_softmax_output_is_a_simplex(
            seed in proptest::num::u64::ANY,
            len in 2usize..10,
            temp_pick in 0usize..4,
        ) {
            let temperature = [1e-4, 0.1, 1.0, 10.0][temp_pick];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = gumbel_softmax(&logits, temperature, &mut rng).unwrap();
            prop_assert!(out.iter().all(|&v| v >= 0.0));
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        // With the off-affinity penalty active, decoding never places the
        // key on a zero-affinity segment while positive-affinity segments
        // exist.
        #[test]
        fn decode_avoids_zero_affinity_segments(
            seed in proptest::num::u64::ANY,
            len in 2usize..6,
            positive in 0usize..6,
            level in 0.3f64..1.0,
        ) {
            let positive = positive % len;
            let affinity: Vec<f64> = (0..len)
                .map(|i| if i == positive { level } else { 0.0 })
                .collect();
            let outcome = optimize(
                &affinity,
                &Hyperparams::default(),
                seed,
                &OptimizeOptions::default(),
            ).unwrap();
            prop_assert!(affinity[outcome.config.key_index - 1] > 0.0);
        }
    }
}
