//! Multi-source particle filter.
//!
//! Every tracked source owns a set of particles on the unit sphere. Each
//! update predicts the particles, scores every way of assigning the
//! beamformer peaks to tracked sources, new sources or false detections,
//! and turns the assignment marginals into particle weights, existence and
//! activity probabilities, and source creation/removal decisions.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::beamformer::Observation;
use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Assignment value for a false detection.
pub const FALSE_DETECTION: i32 = -2;
/// Assignment value for a new, not yet tracked source.
pub const NEW_SOURCE: i32 = -1;

/// Largest number of tracked sources the assignment enumeration accepts.
pub const MAX_ENUMERATED_SOURCES: usize = 16;

const UNIFORM_SPHERE_DENSITY: f64 = 1.0 / (4.0 * std::f64::consts::PI);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsClass {
    Stationary,
    ConstantVelocity,
    Accelerated,
}

impl DynamicsClass {
    pub const ALL: [DynamicsClass; 3] = [
        DynamicsClass::Stationary,
        DynamicsClass::ConstantVelocity,
        DynamicsClass::Accelerated,
    ];

    /// Damping rate (1/s) and excitation level of the velocity process.
    pub fn parameters(self) -> (f64, f64) {
        match self {
            DynamicsClass::Stationary => (2.0, 0.04),
            DynamicsClass::ConstantVelocity => (0.05, 0.2),
            DynamicsClass::Accelerated => (0.5, 0.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub particles_per_source: usize,
    /// Standard deviation of the beamformer direction error (unit sphere).
    pub sigma: f64,
    /// Prior probability that an existing source goes undetected.
    pub p_unobserved: f64,
    pub p_stay_active: f64,
    pub p_become_active: f64,
    pub p_new: f64,
    pub p_false: f64,
    pub new_source_threshold: f64,
    pub confirm_threshold: f64,
    /// A source counts as observed when its assignment probability reaches
    /// this value.
    pub observed_threshold: f64,
    /// Seconds a source may stay unobserved before it is removed.
    pub removal_horizon: f64,
    pub resample_fraction: f64,
    pub init_sigma: f64,
    /// Particle fractions for the stationary, constant-velocity and
    /// accelerated classes.
    pub class_fractions: [f64; 3],
    /// No source is created within this angle of a confirmed source.
    pub duplicate_exclusion_deg: f64,
    pub initial_existence: f64,
    pub initial_activity: f64,
    /// Instantaneous activity evidence is mapped linearly from
    /// `[0, 1]` assignment probability onto `[low, high]`.
    pub activity_evidence: [f64; 2],
    /// Number of past particle positions kept for delayed estimation.
    pub history_length: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            particles_per_source: 1000,
            sigma: 0.05,
            p_unobserved: 0.2,
            p_stay_active: 0.95,
            p_become_active: 0.05,
            p_new: 0.005,
            p_false: 0.05,
            new_source_threshold: 0.3,
            confirm_threshold: 0.98,
            observed_threshold: 0.5,
            removal_horizon: 2.0,
            resample_fraction: 0.7,
            init_sigma: 0.05,
            class_fractions: [0.3, 0.4, 0.3],
            duplicate_exclusion_deg: 10.0,
            initial_existence: 0.5,
            initial_activity: 0.5,
            activity_evidence: [0.15, 0.85],
            history_length: 24,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "tracker.{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        prob("p_unobserved", self.p_unobserved)?;
        prob("p_stay_active", self.p_stay_active)?;
        prob("p_become_active", self.p_become_active)?;
        prob("p_new", self.p_new)?;
        prob("p_false", self.p_false)?;
        prob("new_source_threshold", self.new_source_threshold)?;
        prob("confirm_threshold", self.confirm_threshold)?;
        prob("observed_threshold", self.observed_threshold)?;
        prob("resample_fraction", self.resample_fraction)?;
        prob("initial_existence", self.initial_existence)?;
        prob("initial_activity", self.initial_activity)?;
        prob("activity_evidence[0]", self.activity_evidence[0])?;
        prob("activity_evidence[1]", self.activity_evidence[1])?;
        if self.particles_per_source == 0 {
            return Err(Error::InvalidConfig(
                "tracker.particles_per_source must be >= 1".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.init_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "tracker.sigma must be positive and init_sigma non-negative".into(),
            ));
        }
        if !(self.removal_horizon >= 0.0) {
            return Err(Error::InvalidConfig(
                "tracker.removal_horizon must be >= 0".into(),
            ));
        }
        let total: f64 = self.class_fractions.iter().sum();
        if self.class_fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "tracker.class_fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.history_length == 0 {
            return Err(Error::InvalidConfig(
                "tracker.history_length must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Class of particle `index` out of `count` under the fixed proportions.
    pub fn class_for(&self, index: usize, count: usize) -> DynamicsClass {
        let position = (index as f64 + 0.5) / count as f64;
        let mut edge = 0.0;
        for (class, fraction) in DynamicsClass::ALL.iter().zip(self.class_fractions) {
            edge += fraction;
            if position < edge {
                return *class;
            }
        }
        DynamicsClass::Accelerated
    }
}

/// Isotropic normal density on the tangent plane evaluated at the chordal
/// distance between the particle direction and the observed direction.
pub fn observation_likelihood(particle: Vec3, observed: Vec3, sigma: f64) -> f64 {
    let d2 = (observed - particle).norm_squared();
    let var = sigma * sigma;
    (-d2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var)
}

/// One scored source-observation assignment. `mapping[q]` is the tracked
/// source index, [`NEW_SOURCE`] or [`FALSE_DETECTION`].
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub mapping: Vec<i32>,
    pub posterior: f64,
}

/// Inputs of the assignment posterior for one update.
#[derive(Clone, Debug)]
pub struct AssignmentProblem<'a> {
    /// Confidence of each potential source.
    pub confidences: &'a [f64],
    /// `likelihoods[j][q]`: density of observation `q` under tracked source
    /// `j` (particle-weighted).
    pub likelihoods: &'a [Vec<f64>],
    /// Prior probability that tracked source `j` is observable.
    pub observability: &'a [f64],
    pub p_new: f64,
    pub p_false: f64,
}

impl AssignmentProblem<'_> {
    fn num_sources(&self) -> usize {
        self.observability.len()
    }

    /// Prior times likelihood of one observation under one hypothesis.
    pub fn term(&self, q: usize, target: i32) -> f64 {
        let pq = self.confidences[q];
        match target {
            FALSE_DETECTION => (1.0 - pq) * self.p_false * UNIFORM_SPHERE_DENSITY,
            NEW_SOURCE => pq * self.p_new * UNIFORM_SPHERE_DENSITY,
            j => {
                let j = j as usize;
                pq * self.observability[j] * self.likelihoods[j][q]
            }
        }
    }
}

/// All assignments in which no tracked source receives two observations,
/// with posteriors normalized to sum to one.
pub fn enumerate_assignments(problem: &AssignmentProblem<'_>) -> Result<Vec<Assignment>> {
    let m = problem.num_sources();
    if m > MAX_ENUMERATED_SOURCES {
        return Err(Error::SizeLimit(format!(
            "{m} tracked sources exceed the enumeration limit of {MAX_ENUMERATED_SOURCES}"
        )));
    }
    if problem.likelihoods.len() != m {
        return Err(Error::ConfigMismatch(
            "one likelihood row per tracked source is required".into(),
        ));
    }
    let q_count = problem.confidences.len();
    let mut out = Vec::new();
    let mut mapping = Vec::with_capacity(q_count);
    let mut used = vec![false; m];
    enumerate_rec(problem, 1.0, &mut mapping, &mut used, &mut out);
    let total: f64 = out.iter().map(|a| a.posterior).sum();
    if total > 0.0 && total.is_finite() {
        out.iter_mut().for_each(|a| a.posterior /= total);
    } else {
        let uniform = 1.0 / out.len() as f64;
        out.iter_mut().for_each(|a| a.posterior = uniform);
    }
    Ok(out)
}

fn enumerate_rec(
    problem: &AssignmentProblem<'_>,
    score: f64,
    mapping: &mut Vec<i32>,
    used: &mut [bool],
    out: &mut Vec<Assignment>,
) {
    let q = mapping.len();
    if q == problem.confidences.len() {
        out.push(Assignment {
            mapping: mapping.clone(),
            posterior: score,
        });
        return;
    }
    for target in [FALSE_DETECTION, NEW_SOURCE] {
        mapping.push(target);
        enumerate_rec(problem, score * problem.term(q, target), mapping, used, out);
        mapping.pop();
    }
    for j in 0..used.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        mapping.push(j as i32);
        enumerate_rec(problem, score * problem.term(q, j as i32), mapping, used, out);
        mapping.pop();
        used[j] = false;
    }
}

/// Per-observation marginals of the assignment posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    /// `source[q][j]`: probability that observation `q` is tracked source `j`.
    pub source: Vec<Vec<f64>>,
    pub false_detection: Vec<f64>,
    pub new_source: Vec<f64>,
}

impl Marginals {
    /// Probability that tracked source `j` is observed by any peak.
    pub fn observed(&self, j: usize) -> f64 {
        self.source.iter().map(|row| row[j]).sum::<f64>().min(1.0)
    }
}

pub fn assignment_marginals(
    assignments: &[Assignment],
    num_observations: usize,
    num_sources: usize,
) -> Marginals {
    let mut m = Marginals {
        source: vec![vec![0.0; num_sources]; num_observations],
        false_detection: vec![0.0; num_observations],
        new_source: vec![0.0; num_observations],
    };
    for a in assignments {
        for (q, &target) in a.mapping.iter().enumerate() {
            match target {
                FALSE_DETECTION => m.false_detection[q] += a.posterior,
                NEW_SOURCE => m.new_source[q] += a.posterior,
                j => m.source[q][j as usize] += a.posterior,
            }
        }
    }
    m
}

/// Existence probability given the previous update's observation
/// probability `observed` and the previous existence estimate.
pub fn existence_update(observed: f64, previous: f64, p_unobserved: f64) -> f64 {
    let carry = p_unobserved * previous / (1.0 - (1.0 - p_unobserved) * previous);
    (observed + (1.0 - observed) * carry).clamp(0.0, 1.0)
}

/// Activity predicted through the two-state Markov chain.
pub fn activity_prior(previous: f64, p_stay: f64, p_become: f64) -> f64 {
    (p_stay * previous + p_become * (1.0 - previous)).clamp(0.0, 1.0)
}

/// Fuses the predicted activity with instantaneous evidence, assuming equal
/// prior odds for the active and inactive states.
pub fn activity_posterior(prior: f64, evidence: f64) -> f64 {
    let num = prior * evidence;
    let den = num + (1.0 - prior) * (1.0 - evidence);
    if den <= 0.0 {
        prior
    } else {
        num / den
    }
}

/// Instantaneous per-particle probability given the observation and the
/// resulting normalized weights. `likelihoods[q][i]` is the density of
/// observation `q` at particle `i` and `assoc[q]` its association
/// probability with this source. Returns `false` when the update underflowed
/// and the weights were reset to uniform.
pub fn update_weights(
    weights: &mut [f64],
    likelihoods: &[Vec<f64>],
    assoc: &[f64],
    observed: f64,
) -> bool {
    let n = weights.len();
    let uniform = 1.0 / n as f64;
    let mut matched = vec![0.0; n];
    for (row, &p) in likelihoods.iter().zip(assoc) {
        if p > 0.0 {
            for (m, &l) in matched.iter_mut().zip(row) {
                *m += p * l;
            }
        }
    }
    let matched_total: f64 = matched.iter().sum();
    let mut total = 0.0;
    for i in 0..n {
        let matched_term = if matched_total > 0.0 && matched_total.is_finite() {
            matched[i] / matched_total
        } else {
            uniform
        };
        let instant = (1.0 - observed) * uniform + observed * matched_term;
        weights[i] *= instant;
        total += weights[i];
    }
    if total > 0.0 && total.is_finite() {
        weights.iter_mut().for_each(|w| *w /= total);
        true
    } else {
        warn!("particle weights underflowed; resetting to uniform");
        weights.iter_mut().for_each(|w| *w = uniform);
        false
    }
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Ancestor indices from systematic resampling with offset `u0 in [0, 1)`.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = (u0 + k as f64) * step;
        while u > cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

/// Ring buffer of per-particle positions, newest last.
#[derive(Clone, Debug)]
struct PositionHistory {
    snapshots: Vec<Vec<Vec3>>,
    capacity: usize,
    head: usize,
    len: usize,
}

impl PositionHistory {
    fn new(capacity: usize) -> Self {
        Self {
            snapshots: Vec::with_capacity(capacity),
            capacity,
            head: 0,
            len: 0,
        }
    }

    fn push(&mut self, positions: &[Vec3]) {
        if self.snapshots.len() < self.capacity {
            self.snapshots.push(positions.to_vec());
            self.head = self.snapshots.len() - 1;
        } else {
            self.head = (self.head + 1) % self.capacity;
            self.snapshots[self.head].copy_from_slice(positions);
        }
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Positions `age` updates ago (0 is the newest).
    fn get(&self, age: usize) -> Option<&[Vec3]> {
        if age >= self.len {
            return None;
        }
        let index = (self.head + self.capacity - age) % self.capacity;
        Some(&self.snapshots[index])
    }

    fn reorder(&mut self, ancestors: &[usize]) {
        for snapshot in &mut self.snapshots {
            let old = snapshot.clone();
            for (dst, &a) in snapshot.iter_mut().zip(ancestors) {
                *dst = old[a];
            }
        }
    }
}

/// Particle set and bookkeeping of one tracked source.
#[derive(Clone, Debug)]
pub struct TrackedSource {
    id: u64,
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    weights: Vec<f64>,
    classes: Vec<DynamicsClass>,
    history: PositionHistory,
    existence: f64,
    activity: f64,
    observed: f64,
    confirmed: bool,
    unobserved_updates: usize,
    age: usize,
    estimate: Vec3,
}

impl TrackedSource {
    /// Particles drawn around `direction` with the observation kernel, zero
    /// velocity and uniform weights.
    pub fn spawn(id: u64, direction: Vec3, config: &TrackerConfig, rng: &mut impl Rng) -> Self {
        let n = config.particles_per_source;
        let direction = direction.normalize();
        let positions: Vec<Vec3> = (0..n)
            .map(|_| {
                let offset = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let tangent = offset - direction * offset.dot(direction);
                (direction + tangent * config.init_sigma)
                    .try_normalize()
                    .unwrap_or(direction)
            })
            .collect();
        Self::from_particles(id, positions, vec![Vec3::ZERO; n], config)
    }

    /// Builds a source from explicit particle states with uniform weights.
    pub fn from_particles(
        id: u64,
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        config: &TrackerConfig,
    ) -> Self {
        let n = positions.len();
        assert!(n > 0 && velocities.len() == n);
        let classes = (0..n).map(|i| config.class_for(i, n)).collect();
        let mut history = PositionHistory::new(config.history_length + 1);
        history.push(&positions);
        let mut source = Self {
            id,
            weights: vec![1.0 / n as f64; n],
            history,
            classes,
            existence: config.initial_existence,
            activity: config.initial_activity,
            observed: 0.0,
            confirmed: false,
            unobserved_updates: 0,
            age: 0,
            estimate: Vec3::ZERO,
            positions,
            velocities,
        };
        source.estimate = source.mean_direction(0).unwrap_or_else(|| source.positions[0]);
        source
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn classes(&self) -> &[DynamicsClass] {
        &self.classes
    }

    pub fn existence(&self) -> f64 {
        self.existence
    }

    pub fn activity(&self) -> f64 {
        self.activity
    }

    /// Probability that the source was observed in the latest update.
    pub fn observed(&self) -> f64 {
        self.observed
    }

    pub fn is_confirmed(&self) -> bool {
        self.confirmed
    }

    pub fn age(&self) -> usize {
        self.age
    }

    /// Latest (non-delayed) direction estimate.
    pub fn estimate(&self) -> Vec3 {
        self.estimate
    }

    /// Excitation-damping prediction of every particle over `dt` seconds.
    pub fn predict(&mut self, dt: f64, rng: &mut impl Rng) {
        for i in 0..self.positions.len() {
            let (alpha, beta) = self.classes[i].parameters();
            let a = (-alpha * dt).exp();
            let b = beta * (1.0 - a * a).sqrt();
            let excitation = Vec3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            let v = self.velocities[i] * a + excitation * b;
            let x = (self.positions[i] + v * dt)
                .try_normalize()
                .unwrap_or(self.positions[i]);
            self.positions[i] = x;
            self.velocities[i] = v - x * v.dot(x);
        }
        self.history.push(&self.positions);
    }

    /// Particle-weighted likelihood of an observed direction.
    pub fn likelihood(&self, observed: Vec3, sigma: f64) -> f64 {
        self.positions
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * observation_likelihood(x, observed, sigma))
            .sum()
    }

    /// Weighted mean of the particle positions `delay` updates ago, using
    /// the current weights. `None` when the mean is too close to zero to
    /// define a direction.
    pub fn mean_direction(&self, delay: usize) -> Option<Vec3> {
        let positions = self.history.get(delay)?;
        let mean = positions
            .iter()
            .zip(&self.weights)
            .fold(Vec3::ZERO, |acc, (&x, &w)| acc + x * w);
        if mean.norm() < 0.05 {
            None
        } else {
            mean.try_normalize()
        }
    }

    /// Direction estimate delayed by `delay` updates; the delay is clamped
    /// to the available history.
    pub fn delayed_estimate(&self, delay: usize) -> Vec3 {
        let available = self.history.len.saturating_sub(1);
        let delay = if delay > available {
            if self.history.capacity <= delay {
                warn!(
                    "estimation delay {delay} exceeds history length {}; clamping",
                    self.history.capacity - 1
                );
            }
            available
        } else {
            delay
        };
        self.mean_direction(delay).unwrap_or(self.estimate)
    }

    fn refresh_estimate(&mut self) {
        match self.mean_direction(0) {
            Some(e) => self.estimate = e,
            None => debug!("source {}: degenerate particle mean, keeping estimate", self.id),
        }
    }

    /// Systematic resampling when the effective sample size drops below
    /// `fraction * N`. Returns whether resampling happened.
    pub fn resample_if_needed(
        &mut self,
        fraction: f64,
        config: &TrackerConfig,
        rng: &mut impl Rng,
    ) -> bool {
        let n = self.weights.len();
        if effective_sample_size(&self.weights) >= fraction * n as f64 {
            return false;
        }
        let ancestors = systematic_resample(&self.weights, rng.random::<f64>());
        self.positions = ancestors.iter().map(|&a| self.positions[a]).collect();
        self.velocities = ancestors.iter().map(|&a| self.velocities[a]).collect();
        self.history.reorder(&ancestors);
        self.weights = vec![1.0 / n as f64; n];
        for (i, c) in self.classes.iter_mut().enumerate() {
            *c = config.class_for(i, n);
        }
        true
    }
}

/// Per-source state reported after an update.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceReport {
    pub id: u64,
    pub direction: Vec3,
    pub delayed_direction: Vec3,
    pub existence: f64,
    pub activity: f64,
    pub observed: f64,
    pub confirmed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub timestamp: f64,
    pub sources: Vec<SourceReport>,
    pub created: Vec<u64>,
    pub removed: Vec<u64>,
    pub marginals: Marginals,
}

/// The tracker state machine. Updates must arrive in timestamp order.
#[derive(Clone, Debug)]
pub struct ParticleTracker {
    config: TrackerConfig,
    dt: f64,
    sources: Vec<TrackedSource>,
    next_id: u64,
    rng: ChaCha8Rng,
    estimation_delay: usize,
}

impl ParticleTracker {
    /// `dt` is the time between updates in seconds.
    pub fn new(config: TrackerConfig, dt: f64) -> Result<Self> {
        config.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "update interval must be positive, got {dt}"
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            dt,
            sources: Vec::new(),
            next_id: 0,
            estimation_delay: 0,
        })
    }

    /// Sets the delay (in updates) of [`SourceReport::delayed_direction`].
    pub fn with_estimation_delay(mut self, delay: usize) -> Self {
        if delay > self.config.history_length {
            warn!(
                "estimation delay {delay} exceeds history length {}; clamping",
                self.config.history_length
            );
        }
        self.estimation_delay = delay.min(self.config.history_length);
        self
    }

    pub fn estimation_delay(&self) -> usize {
        self.estimation_delay
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sources(&self) -> &[TrackedSource] {
        &self.sources
    }

    /// Adds a source directly, bypassing the creation rule.
    pub fn insert_source(&mut self, mut source: TrackedSource) -> u64 {
        source.id = self.next_id;
        self.next_id += 1;
        let id = source.id;
        self.sources.push(source);
        id
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn update(&mut self, observation: &Observation) -> Result<UpdateReport> {
        let c = self.config.clone();
        let obs = &observation.sources;

        // Observability from the previous update's evidence.
        let mut observability = Vec::with_capacity(self.sources.len());
        let mut predicted_activity = Vec::with_capacity(self.sources.len());
        for s in &mut self.sources {
            if !s.confirmed {
                s.existence = existence_update(s.observed, s.existence, c.p_unobserved);
                if s.existence >= c.confirm_threshold {
                    s.confirmed = true;
                }
            }
            if s.confirmed {
                s.existence = 1.0;
            }
            let a = activity_prior(s.activity, c.p_stay_active, c.p_become_active);
            predicted_activity.push(a);
            observability.push(s.existence * a);
        }

        for s in &mut self.sources {
            s.predict(self.dt, &mut self.rng);
        }

        // likelihoods[j][q][i] per particle, and particle-weighted sums.
        let per_particle: Vec<Vec<Vec<f64>>> = self
            .sources
            .iter()
            .map(|s| {
                obs.iter()
                    .map(|o| {
                        s.positions
                            .iter()
                            .map(|&x| observation_likelihood(x, o.direction, c.sigma))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let source_likelihoods: Vec<Vec<f64>> = self
            .sources
            .iter()
            .zip(&per_particle)
            .map(|(s, rows)| {
                rows.iter()
                    .map(|row| row.iter().zip(&s.weights).map(|(l, w)| l * w).sum())
                    .collect()
            })
            .collect();
        let confidences: Vec<f64> = obs.iter().map(|o| o.confidence).collect();
        let problem = AssignmentProblem {
            confidences: &confidences,
            likelihoods: &source_likelihoods,
            observability: &observability,
            p_new: c.p_new,
            p_false: c.p_false,
        };
        let assignments = enumerate_assignments(&problem)?;
        let marginals = assignment_marginals(&assignments, obs.len(), self.sources.len());

        for (j, s) in self.sources.iter_mut().enumerate() {
            let observed = marginals.observed(j);
            let assoc: Vec<f64> = marginals.source.iter().map(|row| row[j]).collect();
            update_weights(&mut s.weights, &per_particle[j], &assoc, observed);
            let [lo, hi] = c.activity_evidence;
            s.activity = activity_posterior(predicted_activity[j], lo + (hi - lo) * observed);
            s.observed = observed;
            s.age += 1;
            if observed < c.observed_threshold {
                s.unobserved_updates += 1;
            } else {
                s.unobserved_updates = 0;
            }
        }

        // Removal of sources unobserved for longer than the horizon.
        let horizon = c.removal_horizon;
        let dt = self.dt;
        let mut removed = Vec::new();
        self.sources.retain(|s| {
            let keep = s.unobserved_updates as f64 * dt <= horizon;
            if !keep {
                removed.push(s.id);
            }
            keep
        });

        for s in &mut self.sources {
            s.refresh_estimate();
        }

        let mut created = Vec::new();
        let exclusion = c.duplicate_exclusion_deg.to_radians();
        let mut blocked: Vec<Vec3> = self
            .sources
            .iter()
            .filter(|s| s.confirmed)
            .map(|s| s.estimate)
            .collect();
        for (q, o) in obs.iter().enumerate() {
            if marginals.new_source[q] <= c.new_source_threshold {
                continue;
            }
            if blocked.iter().any(|b| b.angle_to(o.direction) < exclusion) {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            let source = TrackedSource::spawn(id, o.direction, &c, &mut self.rng);
            blocked.push(o.direction);
            created.push(id);
            self.sources.push(source);
        }

        let reports = self
            .sources
            .iter()
            .map(|s| SourceReport {
                id: s.id,
                direction: s.estimate,
                delayed_direction: s.delayed_estimate(self.estimation_delay),
                existence: s.existence,
                activity: s.activity,
                observed: s.observed,
                confirmed: s.confirmed,
            })
            .collect();

        for s in &mut self.sources {
            s.resample_if_needed(c.resample_fraction, &c, &mut self.rng);
        }

        Ok(UpdateReport {
            timestamp: observation.timestamp,
            sources: reports,
            created,
            removed,
            marginals,
        })
    }
}
