//! Frequency-domain front end: windowed STFT, per-channel noise and
//! reverberation tracking, SNR-based spectral weighting and the weighted,
//! whitened cross-correlations consumed by the beamformer.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mic_pairs;

pub type Spectrum = Vec<Complex<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann; overlapping copies at 50% hop sum to one.
    Hann,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// SNR-weighted, whitened cross-correlation.
    Enhanced,
    /// Whitened cross-correlation with unit weights on every bin.
    Whitened,
    /// Plain cross-correlation, normalized so lag `tau` equals
    /// `sum_n x_i(n) x_j(n + tau)` (circular).
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub frames_per_update: usize,
    pub window: WindowKind,
    pub mode: CorrelationMode,
    /// Decision-directed adaptation rate.
    pub alpha_d: f64,
    /// Reverberation decay per frame.
    pub gamma: f64,
    /// Reverberation level.
    pub delta: f64,
    pub magnitude_floor: f64,
    pub noise_floor: f64,
    pub noise: NoiseTrackerConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_length: 1024,
            hop: 512,
            frames_per_update: 4,
            window: WindowKind::Hann,
            mode: CorrelationMode::Enhanced,
            alpha_d: 0.1,
            gamma: 0.65,
            delta: 1.0,
            magnitude_floor: 1e-12,
            noise_floor: 1e-20,
            noise: NoiseTrackerConfig::default(),
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.frame_length;
        if l < 8 || !l.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "frame_length must be a power of two >= 8, got {l}"
            )));
        }
        if self.hop * 2 != l {
            return Err(Error::InvalidConfig(format!(
                "hop must be half the frame length ({}), got {}",
                l / 2,
                self.hop
            )));
        }
        if self.frames_per_update == 0 {
            return Err(Error::InvalidConfig("frames_per_update must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_d) {
            return Err(Error::InvalidConfig(format!(
                "alpha_d must lie in [0, 1], got {}",
                self.alpha_d
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if !(self.magnitude_floor > 0.0 && self.noise_floor > 0.0) {
            return Err(Error::InvalidConfig("floors must be positive".into()));
        }
        self.noise.validate()
    }

    pub fn num_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// Seconds between two consecutive cross-correlation sets.
    pub fn update_period(&self, sample_rate: u32) -> f64 {
        (self.hop * self.frames_per_update) as f64 / sample_rate as f64
    }

    /// Center time (seconds) of the samples covered by update `index`.
    pub fn update_timestamp(&self, index: usize, sample_rate: u32) -> f64 {
        let first_frame = index * self.frames_per_update;
        let start = first_frame * self.hop;
        let span = (self.frames_per_update - 1) * self.hop + self.frame_length;
        (start as f64 + span as f64 / 2.0) / sample_rate as f64
    }
}

/// Minima-controlled recursive averaging of the noise power spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseTrackerConfig {
    /// Smoothing of the power spectrum used for minimum tracking.
    pub psd_smoothing: f64,
    /// Length of the minimum search window in frames.
    pub minimum_window_frames: usize,
    /// Smoothed power above `presence_ratio * minimum` counts as signal.
    pub presence_ratio: f64,
    /// Recursion coefficient of the noise average when no signal is present.
    pub noise_smoothing: f64,
    /// Smoothing of the signal-presence probability.
    pub presence_smoothing: f64,
}

impl Default for NoiseTrackerConfig {
    fn default() -> Self {
        Self {
            psd_smoothing: 0.8,
            // ~1 s at 48 kHz with a 512-sample hop.
            minimum_window_frames: 94,
            presence_ratio: 5.0,
            noise_smoothing: 0.95,
            presence_smoothing: 0.2,
        }
    }
}

impl NoiseTrackerConfig {
    fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "noise.{name} must lie in [0, 1), got {v}"
                )))
            }
        };
        unit("psd_smoothing", self.psd_smoothing)?;
        unit("noise_smoothing", self.noise_smoothing)?;
        unit("presence_smoothing", self.presence_smoothing)?;
        if self.minimum_window_frames == 0 {
            return Err(Error::InvalidConfig(
                "noise.minimum_window_frames must be >= 1".into(),
            ));
        }
        if !(self.presence_ratio >= 1.0) {
            return Err(Error::InvalidConfig(
                "noise.presence_ratio must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn window(kind: WindowKind, length: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hann => (0..length)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / length as f64).cos())
            .collect(),
        WindowKind::Rectangular => vec![1.0; length],
    }
}

/// Real-input DFT of windowed frames, keeping bins `0..=L/2`.
pub struct FrameAnalyzer {
    window: Vec<f64>,
    fft: Arc<dyn RealToComplex<f64>>,
    scratch: Vec<Complex<f64>>,
    buffer: Vec<f64>,
}

impl FrameAnalyzer {
    pub fn new(frame_length: usize, kind: WindowKind) -> Self {
        let fft = RealFftPlanner::<f64>::new().plan_fft_forward(frame_length);
        Self {
            window: window(kind, frame_length),
            scratch: fft.make_scratch_vec(),
            buffer: vec![0.0; frame_length],
            fft,
        }
    }

    pub fn frame_length(&self) -> usize {
        self.window.len()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Applies the analysis window to `samples` and writes `L/2 + 1` bins.
    pub fn analyze_into(&mut self, samples: &[f64], out: &mut [Complex<f64>]) -> Result<()> {
        let l = self.window.len();
        if samples.len() != l {
            return Err(Error::ConfigMismatch(format!(
                "frame has {} samples, expected {l}",
                samples.len()
            )));
        }
        for ((b, &x), &w) in self.buffer.iter_mut().zip(samples).zip(&self.window) {
            *b = x * w;
        }
        self.fft
            .process_with_scratch(&mut self.buffer, out, &mut self.scratch)
            .map_err(|e| Error::ConfigMismatch(e.to_string()))
    }

    pub fn analyze(&mut self, samples: &[f64]) -> Result<Spectrum> {
        let mut out = vec![Complex::new(0.0, 0.0); self.window.len() / 2 + 1];
        self.analyze_into(samples, &mut out)?;
        Ok(out)
    }

    /// Spectra for all channels of one frame.
    pub fn analyze_frame(&mut self, channels: &[&[f64]]) -> Result<Vec<Spectrum>> {
        channels.iter().map(|c| self.analyze(c)).collect()
    }
}

/// Per-bin noise power tracker driven by the running minimum of the
/// smoothed power spectrum. The estimate follows a recursive average that
/// only adapts while the smoothed power stays close to its minimum, i.e.
/// during low-energy periods.
#[derive(Clone, Debug)]
pub struct NoiseTracker {
    config: NoiseTrackerConfig,
    floor: f64,
    smoothed: Vec<f64>,
    minimum: Vec<f64>,
    candidate_minimum: Vec<f64>,
    presence: Vec<f64>,
    noise: Vec<f64>,
    frames_in_window: usize,
    initialized: bool,
}

impl NoiseTracker {
    pub fn new(config: NoiseTrackerConfig, num_bins: usize, floor: f64) -> Self {
        Self {
            config,
            floor,
            smoothed: vec![0.0; num_bins],
            minimum: vec![0.0; num_bins],
            candidate_minimum: vec![0.0; num_bins],
            presence: vec![0.0; num_bins],
            noise: vec![floor; num_bins],
            frames_in_window: 0,
            initialized: false,
        }
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn update(&mut self, power: &[f64]) -> &[f64] {
        debug_assert_eq!(power.len(), self.noise.len());
        let c = &self.config;
        if !self.initialized {
            for k in 0..power.len() {
                let p = power[k].max(0.0);
                self.smoothed[k] = p;
                self.minimum[k] = p;
                self.candidate_minimum[k] = p;
                self.noise[k] = p.max(self.floor);
            }
            self.initialized = true;
            self.frames_in_window = 1;
            return &self.noise;
        }
        for k in 0..power.len() {
            let p = power[k].max(0.0);
            let s = c.psd_smoothing * self.smoothed[k] + (1.0 - c.psd_smoothing) * p;
            self.smoothed[k] = s;
            self.minimum[k] = self.minimum[k].min(s);
            self.candidate_minimum[k] = self.candidate_minimum[k].min(s);
            let present = if s > c.presence_ratio * self.minimum[k] {
                1.0
            } else {
                0.0
            };
            self.presence[k] =
                c.presence_smoothing * self.presence[k] + (1.0 - c.presence_smoothing) * present;
            // Frames flagged as signal never feed the average.
            if present == 0.0 {
                let a = c.noise_smoothing + (1.0 - c.noise_smoothing) * self.presence[k];
                self.noise[k] = (a * self.noise[k] + (1.0 - a) * p).max(self.floor);
            }
        }
        self.frames_in_window += 1;
        if self.frames_in_window >= c.minimum_window_frames {
            for k in 0..power.len() {
                self.minimum[k] = self.candidate_minimum[k].min(self.smoothed[k]);
                self.candidate_minimum[k] = self.smoothed[k];
            }
            self.frames_in_window = 0;
        }
        &self.noise
    }
}

/// Mapping from a priori SNR to the spectral weight, `xi / (xi + 1)`.
pub fn snr_weight(xi: f64) -> f64 {
    if xi <= 0.0 {
        0.0
    } else if xi.is_infinite() {
        1.0
    } else {
        xi / (xi + 1.0)
    }
}

/// Decision-directed SNR and reverberation state of one microphone.
#[derive(Clone, Debug)]
pub struct ChannelSpectralState {
    pub noise: NoiseTracker,
    /// Late-reverberation power per bin.
    pub reverb: Vec<f64>,
    /// Weights of the previous frame.
    pub prev_weight: Vec<f64>,
    /// Power of the previous frame.
    pub prev_power: Vec<f64>,
    /// Weights of the current frame.
    pub weight: Vec<f64>,
}

impl ChannelSpectralState {
    pub fn new(config: &FrontendConfig) -> Self {
        let bins = config.num_bins();
        Self {
            noise: NoiseTracker::new(config.noise.clone(), bins, config.noise_floor),
            reverb: vec![0.0; bins],
            prev_weight: vec![0.0; bins],
            prev_power: vec![0.0; bins],
            weight: vec![0.0; bins],
        }
    }

    /// Effective noise: stationary noise plus reverberation power.
    pub fn effective_noise(&self, floor: f64) -> Vec<f64> {
        self.noise
            .noise()
            .iter()
            .zip(&self.reverb)
            .map(|(n, r)| (n + r).max(floor))
            .collect()
    }

    /// Decision-directed a priori SNR and the resulting weights for the
    /// current frame's power spectrum.
    pub fn compute_snr_weights(&mut self, power: &[f64], noise: &[f64], alpha_d: f64) -> &[f64] {
        for k in 0..power.len() {
            let prev = self.prev_weight[k] * self.prev_weight[k] * self.prev_power[k];
            let xi = ((1.0 - alpha_d) * prev + alpha_d * power[k]) / noise[k];
            self.weight[k] = snr_weight(xi);
        }
        &self.weight
    }

    /// Reverberation recursion driven by the current weights applied to the
    /// previous frame's power.
    pub fn update_reverb_estimate(&mut self, gamma: f64, delta: f64) {
        for k in 0..self.reverb.len() {
            let weighted = self.weight[k] * self.weight[k] * self.prev_power[k];
            self.reverb[k] = gamma * self.reverb[k] + (1.0 - gamma) * delta * weighted;
        }
    }

    /// Shifts the current frame into the "previous" slots.
    pub fn advance(&mut self, power: &[f64]) {
        self.prev_weight.copy_from_slice(&self.weight);
        self.prev_power.copy_from_slice(power);
    }

    /// Full per-frame update; returns the weights of this frame.
    pub fn process(&mut self, power: &[f64], config: &FrontendConfig) -> &[f64] {
        self.noise.update(power);
        let noise = self.effective_noise(config.noise_floor);
        self.compute_snr_weights(power, &noise, config.alpha_d);
        self.update_reverb_estimate(config.gamma, config.delta);
        self.advance(power);
        &self.weight
    }
}

/// Weighted cross-correlations of all microphone pairs over one update
/// period, stored over the full circular lag range `0..L` (negative lags
/// wrap around).
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrelationSet {
    values: Vec<f64>,
    frame_length: usize,
    num_pairs: usize,
    pub timestamp: f64,
    pub update_index: usize,
}

impl CrossCorrelationSet {
    pub fn zeros(num_pairs: usize, frame_length: usize) -> Self {
        Self {
            values: vec![0.0; num_pairs * frame_length],
            frame_length,
            num_pairs,
            timestamp: 0.0,
            update_index: 0,
        }
    }

    /// Builds a set from per-pair lag vectors of length `frame_length`.
    pub fn from_pairs(pairs: Vec<Vec<f64>>) -> Result<Self> {
        let frame_length = pairs.first().map_or(0, Vec::len);
        if pairs.iter().any(|p| p.len() != frame_length) {
            return Err(Error::ConfigMismatch(
                "all pair correlations must have the same length".into(),
            ));
        }
        Ok(Self {
            num_pairs: pairs.len(),
            values: pairs.concat(),
            frame_length,
            timestamp: 0.0,
            update_index: 0,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    fn index(&self, pair: usize, lag: i32) -> usize {
        pair * self.frame_length + lag.rem_euclid(self.frame_length as i32) as usize
    }

    pub fn get(&self, pair: usize, lag: i32) -> f64 {
        self.values[self.index(pair, lag)]
    }

    pub fn set(&mut self, pair: usize, lag: i32, value: f64) {
        let i = self.index(pair, lag);
        self.values[i] = value;
    }

    /// Lag values of one pair, index `n` holding lag `n` (mod L).
    pub fn pair(&self, pair: usize) -> &[f64] {
        &self.values[pair * self.frame_length..(pair + 1) * self.frame_length]
    }

    pub fn pair_mut(&mut self, pair: usize) -> &mut [f64] {
        &mut self.values[pair * self.frame_length..(pair + 1) * self.frame_length]
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Lag in `[-L/2, L/2)` with the largest value for a pair.
    pub fn argmax_lag(&self, pair: usize) -> i32 {
        let l = self.frame_length as i32;
        let mut best = (f64::NEG_INFINITY, 0);
        for lag in -l / 2..l / 2 {
            let v = self.get(pair, lag);
            if v > best.0 {
                best = (v, lag);
            }
        }
        best.1
    }
}

/// Streaming front end: feed one multichannel frame per hop, receive a
/// cross-correlation set every `frames_per_update` frames.
pub struct SpectralFrontend {
    config: FrontendConfig,
    sample_rate: u32,
    num_channels: usize,
    pairs: Vec<(usize, usize)>,
    analyzer: FrameAnalyzer,
    inverse: Arc<dyn ComplexToReal<f64>>,
    channels: Vec<ChannelSpectralState>,
    spectrum: Spectrum,
    normalized: Vec<Spectrum>,
    power: Vec<f64>,
    accumulators: Vec<Spectrum>,
    frames_accumulated: usize,
    updates_emitted: usize,
}

impl SpectralFrontend {
    pub fn new(config: FrontendConfig, num_channels: usize, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if num_channels < 2 {
            return Err(Error::ConfigMismatch(
                "at least two channels are required".into(),
            ));
        }
        let bins = config.num_bins();
        let pairs = mic_pairs(num_channels);
        let inverse = RealFftPlanner::<f64>::new().plan_fft_inverse(config.frame_length);
        let zero = Complex::new(0.0, 0.0);
        Ok(Self {
            analyzer: FrameAnalyzer::new(config.frame_length, config.window),
            inverse,
            channels: (0..num_channels)
                .map(|_| ChannelSpectralState::new(&config))
                .collect(),
            spectrum: vec![zero; bins],
            normalized: vec![vec![zero; bins]; num_channels],
            power: vec![0.0; bins],
            accumulators: vec![vec![zero; bins]; pairs.len()],
            frames_accumulated: 0,
            updates_emitted: 0,
            pairs,
            num_channels,
            sample_rate,
            config,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn channel_state(&self, channel: usize) -> &ChannelSpectralState {
        &self.channels[channel]
    }

    /// Processes one frame (`frame_length` samples per channel).
    pub fn process_frame(&mut self, frame: &[&[f64]]) -> Result<Option<CrossCorrelationSet>> {
        if frame.len() != self.num_channels {
            return Err(Error::ConfigMismatch(format!(
                "frame has {} channels, expected {}",
                frame.len(),
                self.num_channels
            )));
        }
        let floor = self.config.magnitude_floor;
        for (c, samples) in frame.iter().enumerate() {
            self.analyzer.analyze_into(samples, &mut self.spectrum)?;
            for (p, x) in self.power.iter_mut().zip(&self.spectrum) {
                *p = x.norm_sqr();
            }
            let out = &mut self.normalized[c];
            match self.config.mode {
                CorrelationMode::Enhanced => {
                    let weights = self.channels[c].process(&self.power, &self.config);
                    for k in 0..out.len() {
                        let x = self.spectrum[k];
                        out[k] = x * (weights[k] / x.norm().max(floor));
                    }
                }
                CorrelationMode::Whitened => {
                    for k in 0..out.len() {
                        let x = self.spectrum[k];
                        out[k] = x / x.norm().max(floor);
                    }
                }
                CorrelationMode::Raw => out.copy_from_slice(&self.spectrum),
            }
        }
        for (acc, &(i, j)) in self.accumulators.iter_mut().zip(&self.pairs) {
            let (yi, yj) = (&self.normalized[i], &self.normalized[j]);
            for k in 0..acc.len() {
                acc[k] += yi[k].conj() * yj[k];
            }
        }
        self.frames_accumulated += 1;
        if self.frames_accumulated < self.config.frames_per_update {
            return Ok(None);
        }
        Ok(Some(self.emit()))
    }

    fn emit(&mut self) -> CrossCorrelationSet {
        let l = self.config.frame_length;
        let mut scale = 1.0 / self.frames_accumulated as f64;
        if self.config.mode == CorrelationMode::Raw {
            scale /= l as f64;
        }
        let mut set = CrossCorrelationSet::zeros(self.pairs.len(), l);
        let mut scratch = self.inverse.make_scratch_vec();
        for (p, acc) in self.accumulators.iter_mut().enumerate() {
            for v in acc.iter_mut() {
                *v *= scale;
            }
            // DC and Nyquist bins of a real signal's cross-spectrum are real.
            acc[0].im = 0.0;
            let last = acc.len() - 1;
            acc[last].im = 0.0;
            self.inverse
                .process_with_scratch(acc, set.pair_mut(p), &mut scratch)
                .expect("buffer sizes match the plan");
            acc.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        }
        set.timestamp = self
            .config
            .update_timestamp(self.updates_emitted, self.sample_rate);
        set.update_index = self.updates_emitted;
        self.updates_emitted += 1;
        self.frames_accumulated = 0;
        set
    }

    /// Runs a whole multichannel buffer through the front end. Trailing
    /// samples that do not fill a frame are dropped.
    pub fn process_buffer(&mut self, channels: &[Vec<f64>]) -> Result<Vec<CrossCorrelationSet>> {
        let mut out = Vec::new();
        let l = self.config.frame_length;
        let hop = self.config.hop;
        let len = channels.iter().map(Vec::len).min().unwrap_or(0);
        let mut start = 0;
        while start + l <= len {
            let frame: Vec<&[f64]> = channels.iter().map(|c| &c[start..start + l]).collect();
            if let Some(set) = self.process_frame(&frame)? {
                out.push(set);
            }
            start += hop;
        }
        Ok(out)
    }
}
