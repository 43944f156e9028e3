//! Synthetic multichannel scenes: scripted sources rendered onto an array
//! with fractional propagation delays, spherical spreading, an optional
//! diffuse reverberation tail and white sensor noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, REFINED_MIN_DISTANCE};
use crate::vec3::Vec3;

const FD_TAPS: usize = 16;
const FD_PHASES: usize = 256;
const MAX_KEYPOINT_SEPARATION_DEG: f64 = 170.0;

/// Fade-in and fade-out length of on intervals, seconds.
pub const GATE_RAMP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    /// Band-limited noise with a syllable-rate envelope and pauses.
    Speech {
        level: f64,
        #[serde(default = "default_syllable_rate")]
        syllable_rate: f64,
    },
    /// Continuous white noise.
    WhiteNoise { level: f64 },
    /// Short decaying noise transients repeated every `interval` seconds.
    Clap {
        level: f64,
        #[serde(default = "default_clap_interval")]
        interval: f64,
    },
    Tone { frequency: f64, level: f64 },
}

fn default_syllable_rate() -> f64 {
    4.0
}

fn default_clap_interval() -> f64 {
    0.5
}

impl SignalSpec {
    /// RMS amplitude at 1 m while the source is emitting.
    pub fn level(&self) -> f64 {
        match *self {
            SignalSpec::Speech { level, .. }
            | SignalSpec::WhiteNoise { level }
            | SignalSpec::Clap { level, .. }
            | SignalSpec::Tone { level, .. } => level,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub time: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl Keypoint {
    pub fn direction(&self) -> Vec3 {
        Vec3::from_azimuth_elevation_deg(self.azimuth, self.elevation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceScript {
    pub signal: SignalSpec,
    pub trajectory: Vec<Keypoint>,
    /// On intervals `[start, end]` in seconds; empty means always on.
    #[serde(default)]
    pub active: Vec<[f64; 2]>,
}

impl SourceScript {
    pub fn is_active(&self, t: f64) -> bool {
        self.active.is_empty() || self.active.iter().any(|&[a, b]| t >= a && t < b)
    }

    /// Amplitude gate at time `t`: raised-cosine ramps of [`GATE_RAMP`]
    /// seconds at every switch so that onsets do not add a broadband click.
    pub fn gate(&self, t: f64) -> f64 {
        if self.active.is_empty() {
            return 1.0;
        }
        let smooth = |u: f64| {
            if u >= 1.0 {
                1.0
            } else {
                0.5 - 0.5 * (PI * u).cos()
            }
        };
        self.active
            .iter()
            .filter(|&&[a, b]| t >= a && t < b)
            .map(|&[a, b]| {
                let r = GATE_RAMP.min(0.5 * (b - a));
                smooth((t - a) / r) * smooth((b - t) / r)
            })
            .fold(0.0, f64::max)
    }

    /// Position (direction, distance) at time `t`, held constant outside the
    /// scripted range.
    pub fn position_at(&self, t: f64) -> (Vec3, f64) {
        let k = &self.trajectory;
        if t <= k[0].time {
            return (k[0].direction(), k[0].distance);
        }
        let last = k[k.len() - 1];
        if t >= last.time {
            return (last.direction(), last.distance);
        }
        let i = k.partition_point(|p| p.time <= t) - 1;
        let (a, b) = (k[i], k[i + 1]);
        let span = b.time - a.time;
        let s = if span > 0.0 { (t - a.time) / span } else { 1.0 };
        let dir = (a.direction() * (1.0 - s) + b.direction() * s).normalize();
        (dir, a.distance + (b.distance - a.distance) * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverbSpec {
    /// Time for the tail to decay by 60 dB, seconds.
    pub rt60: f64,
    /// RMS of the reverberant part relative to the direct sound.
    pub wet_level: f64,
    #[serde(default = "default_predelay")]
    pub predelay: f64,
}

fn default_predelay() -> f64 {
    0.005
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub duration: f64,
    #[serde(default)]
    pub sources: Vec<SourceScript>,
    /// Standard deviation of the white noise added to every channel.
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub reverb: Option<ReverbSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "scene".into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scene duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidConfig("noise_level must be >= 0".into()));
        }
        if let Some(r) = self.reverb {
            if !(r.rt60 > 0.0 && r.wet_level >= 0.0 && r.predelay >= 0.0) {
                return Err(Error::InvalidConfig(
                    "reverb needs rt60 > 0, wet_level >= 0 and predelay >= 0".into(),
                ));
            }
        }
        for (s, src) in self.sources.iter().enumerate() {
            if src.trajectory.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "sources[{s}].trajectory is empty"
                )));
            }
            if !(src.signal.level() >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "sources[{s}].signal.level must be >= 0"
                )));
            }
            match src.signal {
                SignalSpec::Tone { frequency, .. } if !(frequency > 0.0) => {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].signal.frequency must be positive"
                    )))
                }
                SignalSpec::Clap { interval, .. } if !(interval > 0.0) => {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].signal.interval must be positive"
                    )))
                }
                SignalSpec::Speech { syllable_rate, .. } if !(syllable_rate > 0.0) => {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].signal.syllable_rate must be positive"
                    )))
                }
                _ => {}
            }
            for (k, p) in src.trajectory.iter().enumerate() {
                if !(p.distance >= REFINED_MIN_DISTANCE) {
                    return Err(Error::Domain(format!(
                        "sources[{s}].trajectory[{k}].distance {} m is below {REFINED_MIN_DISTANCE} m",
                        p.distance
                    )));
                }
                if !(p.time >= 0.0 && p.time <= self.duration) {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].trajectory[{k}].time lies outside the scene"
                    )));
                }
                if !(p.azimuth.is_finite() && (-90.0..=90.0).contains(&p.elevation)) {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].trajectory[{k}] has an invalid direction"
                    )));
                }
                if k > 0 {
                    let prev = src.trajectory[k - 1];
                    if p.time < prev.time {
                        return Err(Error::InvalidConfig(format!(
                            "sources[{s}].trajectory times must be non-decreasing"
                        )));
                    }
                    if prev.direction().angle_to(p.direction()).to_degrees()
                        > MAX_KEYPOINT_SEPARATION_DEG
                    {
                        return Err(Error::InvalidConfig(format!(
                            "sources[{s}].trajectory[{k}] is more than {MAX_KEYPOINT_SEPARATION_DEG} deg from its predecessor; add intermediate keypoints"
                        )));
                    }
                }
            }
            for (k, &[a, b]) in src.active.iter().enumerate() {
                if !(a >= 0.0 && b >= a && b <= self.duration) {
                    return Err(Error::InvalidConfig(format!(
                        "sources[{s}].active[{k}] must satisfy 0 <= start <= end <= duration"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One ground-truth row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub timestamp: f64,
    pub source_id: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthEntry {
    pub source_id: usize,
    pub direction: Vec3,
    pub distance: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    duration: f64,
    sources: Vec<SourceScript>,
}

impl GroundTruth {
    pub fn new(spec: &SceneSpec) -> Self {
        Self {
            duration: spec.duration,
            sources: spec.sources.clone(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn at(&self, timestamp: f64) -> Result<Vec<GroundTruthEntry>> {
        if !(0.0..=self.duration).contains(&timestamp) {
            return Err(Error::Domain(format!(
                "timestamp {timestamp} s outside scene [0, {}]",
                self.duration
            )));
        }
        Ok(self
            .sources
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let (direction, distance) = s.position_at(timestamp);
                GroundTruthEntry {
                    source_id: id,
                    direction,
                    distance,
                    active: s.is_active(timestamp),
                }
            })
            .collect())
    }

    /// Rows for the given timestamps; timestamps outside the scene are
    /// skipped.
    pub fn rows(&self, timestamps: impl IntoIterator<Item = f64>) -> Vec<GroundTruthRow> {
        let mut out = Vec::new();
        for t in timestamps {
            let Ok(entries) = self.at(t) else { continue };
            for e in entries {
                let (azimuth, elevation) = e.direction.to_azimuth_elevation_deg();
                out.push(GroundTruthRow {
                    timestamp: t,
                    source_id: e.source_id,
                    azimuth,
                    elevation,
                    active: e.active,
                });
            }
        }
        out
    }
}

/// Rendered audio, one vector per microphone.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

/// Polyphase windowed-sinc fractional-delay table.
struct FractionalDelay {
    table: Vec<[f64; FD_TAPS]>,
}

impl FractionalDelay {
    fn new() -> Self {
        let half = (FD_TAPS / 2) as f64;
        let table = (0..=FD_PHASES)
            .map(|p| {
                let frac = p as f64 / FD_PHASES as f64;
                let mut taps = [0.0; FD_TAPS];
                for (k, tap) in taps.iter_mut().enumerate() {
                    // Tap k multiplies x[i + k - 7]; its offset from the
                    // interpolation point is (k - 7) - frac.
                    let x = k as f64 - (half - 1.0) - frac;
                    let sinc = if x.abs() < 1e-12 {
                        1.0
                    } else {
                        (PI * x).sin() / (PI * x)
                    };
                    // Blackman window over (-half, half).
                    let w = 0.42 + 0.5 * (PI * x / half).cos() + 0.08 * (2.0 * PI * x / half).cos();
                    *tap = sinc * w.max(0.0);
                }
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();
        Self { table }
    }

    /// Value of `x` at fractional position `pos` (zero outside the buffer).
    fn sample(&self, x: &[f64], pos: f64) -> f64 {
        let base = pos.floor();
        let mut i = base as i64;
        let mut phase = ((pos - base) * FD_PHASES as f64).round() as usize;
        if phase == FD_PHASES {
            phase = 0;
            i += 1;
        }
        let taps = &self.table[phase];
        let start = i - (FD_TAPS as i64 / 2 - 1);
        let n = x.len() as i64;
        if start >= 0 && start + FD_TAPS as i64 <= n {
            let s = start as usize;
            x[s..s + FD_TAPS].iter().zip(taps).map(|(a, b)| a * b).sum()
        } else {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let idx = start + k as i64;
                if idx >= 0 && idx < n {
                    acc += x[idx as usize] * t;
                }
            }
            acc
        }
    }
}

/// Second-order band-pass section (constant peak gain).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn band_pass(center: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

fn normalize_rms(x: &mut [f64], mask: &[bool], level: f64) {
    let (sum, count) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v * v, c + 1));
    if count == 0 || sum <= 0.0 {
        return;
    }
    let gain = level / (sum / count as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= gain);
}

/// Dry source signal at 1 m, already gated by the on intervals.
pub fn source_signal(
    script: &SourceScript,
    len: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mask: Vec<bool> = (0..len).map(|n| script.is_active(n as f64 / fs)).collect();
    let mut x: Vec<f64> = match script.signal {
        SignalSpec::WhiteNoise { .. } => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        SignalSpec::Tone { frequency, .. } => (0..len)
            .map(|n| (2.0 * PI * frequency * n as f64 / fs).sin())
            .collect(),
        SignalSpec::Clap { interval, .. } => {
            let mut x = vec![0.0; len];
            let period = (interval * fs).round().max(1.0) as usize;
            let decay = 0.01 * fs;
            let burst = (0.06 * fs) as usize;
            let mut start = 0;
            while start < len {
                for k in 0..burst.min(len - start) {
                    let n: f64 = rng.sample(StandardNormal);
                    x[start + k] = n * (-(k as f64) / decay).exp();
                }
                start += period;
            }
            x
        }
        SignalSpec::Speech { syllable_rate, .. } => {
            let mut noise: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            // Two resonances give a voice-band spectrum.
            let mut low = noise.clone();
            Biquad::band_pass(500.0, 0.9, fs).run(&mut low);
            Biquad::band_pass(2000.0, 0.7, fs).run(&mut noise);
            for (n, l) in noise.iter_mut().zip(&low) {
                *n = 0.5 * *n + *l;
            }
            let mut env = vec![0.0; len];
            let mut pos = 0usize;
            let mean_syllable = 1.0 / syllable_rate;
            while pos < len {
                let syl = (rng.random_range(0.6..1.4) * mean_syllable * fs) as usize;
                for k in 0..syl.min(len - pos) {
                    let phase = k as f64 / syl as f64;
                    env[pos + k] = (PI * phase).sin().powi(2);
                }
                pos += syl;
                // Occasional longer pauses between words.
                let pause = if rng.random::<f64>() < 0.3 {
                    rng.random_range(0.1..0.4)
                } else {
                    rng.random_range(0.0..0.05)
                };
                pos += (pause * fs) as usize;
            }
            noise.iter().zip(&env).map(|(n, e)| n * e).collect()
        }
    };
    if !script.active.is_empty() {
        for (n, v) in x.iter_mut().enumerate() {
            *v *= script.gate(n as f64 / fs);
        }
    }
    normalize_rms(&mut x, &mask, script.signal.level());
    x
}

fn reverb_tail(spec: &ReverbSpec, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let fs = sample_rate as f64;
    let pre = (spec.predelay * fs).round() as usize;
    let len = (spec.rt60 * fs).ceil() as usize;
    // exp(-k n) falls 60 dB (amplitude 1e-3) after rt60.
    let k = 3.0 * std::f64::consts::LN_10 / (spec.rt60 * fs);
    let mut h = vec![0.0; pre + len];
    let mut energy = 0.0;
    for n in 0..len {
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * (-k * n as f64).exp();
        energy += v * v;
        h[pre + n] = v;
    }
    let gain = if energy > 0.0 { spec.wet_level / energy.sqrt() } else { 0.0 };
    h.iter_mut().for_each(|v| *v *= gain);
    h
}

/// Linear convolution of `x` with `h`, truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a = vec![0.0; n];
    a[..x.len()].copy_from_slice(x);
    let mut b = vec![0.0; n];
    b[..h.len()].copy_from_slice(h);
    let mut sa = fwd.make_output_vec();
    let mut sb = fwd.make_output_vec();
    fwd.process(&mut a, &mut sa).expect("fft length");
    fwd.process(&mut b, &mut sb).expect("fft length");
    for (p, q) in sa.iter_mut().zip(&sb) {
        *p *= *q;
    }
    // Real-signal spectra have real DC and Nyquist bins; clear rounding
    // residue so the inverse accepts them.
    sa[0].im = 0.0;
    let last = sa.len() - 1;
    sa[last].im = 0.0;
    inv.process(&mut sa, &mut a).expect("fft length");
    a.truncate(x.len());
    a.iter_mut().for_each(|v| *v /= n as f64);
    a
}

/// Renders `spec` onto `geometry`. Deterministic for a fixed seed.
pub fn render_scene(spec: &SceneSpec, geometry: &ArrayGeometry) -> Result<(Rendered, GroundTruth)> {
    spec.validate()?;
    let fs = geometry.sample_rate();
    let fs_f = fs as f64;
    let len = (spec.duration * fs_f).round() as usize;
    let c = geometry.speed_of_sound();
    let mics = geometry.mic_positions();
    let mut channels = vec![vec![0.0; len]; mics.len()];
    let fd = FractionalDelay::new();

    for (s, script) in spec.sources.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + s as u64);
        let dry = source_signal(script, len, fs, &mut rng);
        if dry.iter().all(|&v| v == 0.0) {
            continue;
        }
        for n in 0..len {
            let (dir, dist) = script.position_at(n as f64 / fs_f);
            let pos = dir * dist;
            for (m, p) in mics.iter().enumerate() {
                let r = (pos - *p).norm();
                let delay = (r - dist) / c * fs_f;
                channels[m][n] += fd.sample(&dry, n as f64 - delay) / r;
            }
        }
    }

    if let Some(reverb) = &spec.reverb {
        for (m, ch) in channels.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1_000_000 + m as u64);
            let h = reverb_tail(reverb, fs, &mut rng);
            let wet = fft_convolve(ch, &h);
            ch.iter_mut().zip(&wet).for_each(|(a, b)| *a += b);
        }
    }

    if spec.noise_level > 0.0 {
        for (m, ch) in channels.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2_000_000 + m as u64);
            for v in ch.iter_mut() {
                *v += spec.noise_level * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    Ok((
        Rendered {
            channels,
            sample_rate: fs,
        },
        GroundTruth::new(spec),
    ))
}
