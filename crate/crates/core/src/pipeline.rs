//! End-to-end processing: audio frames through the spectral front end, the
//! steered beamformer and the particle tracker.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::beamformer::{BeamformerConfig, Localization, SteeredBeamformer};
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, SpectralFrontend};
use crate::geometry::ArrayGeometry;
use crate::io::{DiagnosticRecord, TrajectoryRecord};
use crate::tracker::{ParticleTracker, TrackerConfig, UpdateReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub trajectory: Option<PathBuf>,
    pub format: TrajectoryFormat,
    pub diagnostics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub geometry: Option<PathBuf>,
    pub frontend: FrontendConfig,
    pub beamformer: BeamformerConfig,
    pub tracker: TrackerConfig,
    /// Lag of the reported positions in seconds; 0 reports the current
    /// estimate.
    pub estimation_delay: f64,
    pub output: OutputConfig,
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "pipeline config".into(),
            message: e.to_string(),
        })
    }

    /// Loads a config; a relative geometry path is resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        if let (Some(g), Some(dir)) = (&config.geometry, path.parent()) {
            if g.is_relative() {
                config.geometry = Some(dir.join(g));
            }
        }
        Ok(config)
    }

    /// Applies a `dotted.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override '{assignment}' is not of the form key=value"))
        })?;
        let key = key.trim();
        let value: Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::InvalidConfig(format!("override key '{key}': '{part}' is not a section"))
            })?;
            if !obj.contains_key(*part) {
                return Err(Error::InvalidConfig(format!(
                    "override key '{key}': unknown field '{part}'"
                )));
            }
            let child = obj.get_mut(*part).expect("checked");
            if depth + 1 == parts.len() {
                *child = value.clone();
                break;
            }
            node = child;
        }
        *self = serde_json::from_value(doc).map_err(|e| Error::Parse {
            what: format!("override '{key}'"),
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.beamformer.validate()?;
        self.tracker.validate()?;
        if !(self.estimation_delay >= 0.0 && self.estimation_delay.is_finite()) {
            return Err(Error::InvalidConfig(
                "estimation_delay must be >= 0".into(),
            ));
        }
        if let Some(g) = &self.geometry {
            if !g.exists() {
                return Err(Error::io(
                    g,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "geometry file not found"),
                ));
            }
        }
        Ok(())
    }

    /// Estimation delay in whole updates.
    pub fn delay_updates(&self, sample_rate: u32) -> usize {
        (self.estimation_delay / self.frontend.update_period(sample_rate)).round() as usize
    }
}

/// Output of one pipeline update.
#[derive(Clone, Debug)]
pub struct PipelineUpdate {
    pub index: usize,
    pub localization: Localization,
    pub report: UpdateReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub samples: usize,
    pub updates: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub real_time_factor: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub trajectory: Vec<TrajectoryRecord>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub stats: Option<RunStats>,
}

pub struct Pipeline {
    config: PipelineConfig,
    frontend: SpectralFrontend,
    beamformer: SteeredBeamformer,
    tracker: ParticleTracker,
    delay_updates: usize,
    sample_rate: u32,
    updates: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, geometry: ArrayGeometry) -> Result<Self> {
        config.frontend.validate()?;
        config.beamformer.validate()?;
        config.tracker.validate()?;
        let fs = geometry.sample_rate();
        let delay_updates = config.delay_updates(fs);
        let frontend = SpectralFrontend::new(config.frontend.clone(), geometry.num_mics(), fs)?;
        let beamformer = SteeredBeamformer::new(geometry, config.beamformer.clone())?;
        let tracker = ParticleTracker::new(config.tracker.clone(), config.frontend.update_period(fs))?
            .with_estimation_delay(delay_updates);
        Ok(Self {
            delay_updates: tracker.estimation_delay(),
            config,
            frontend,
            beamformer,
            tracker,
            sample_rate: fs,
            updates: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tracker(&self) -> &ParticleTracker {
        &self.tracker
    }

    pub fn beamformer(&self) -> &SteeredBeamformer {
        &self.beamformer
    }

    pub fn delay_updates(&self) -> usize {
        self.delay_updates
    }

    /// Feeds one analysis frame (`frame_length` samples per channel).
    pub fn process_frame(&mut self, frame: &[&[f64]]) -> Result<Option<PipelineUpdate>> {
        let Some(correlations) = self.frontend.process_frame(frame)? else {
            return Ok(None);
        };
        let localization = self.beamformer.localize(&correlations)?;
        let report = self.tracker.update(&localization.observation)?;
        for id in &report.created {
            debug!("t={:.3}s: new source {id}", report.timestamp);
        }
        for id in &report.removed {
            debug!("t={:.3}s: removed source {id}", report.timestamp);
        }
        let index = self.updates;
        self.updates += 1;
        Ok(Some(PipelineUpdate {
            index,
            localization,
            report,
        }))
    }

    /// Trajectory rows for one update: confirmed sources only. With a
    /// delay, rows carry the timestamp the delayed positions refer to and
    /// the first `delay` updates produce nothing.
    pub fn records(&self, update: &PipelineUpdate) -> Vec<TrajectoryRecord> {
        let d = self.delay_updates;
        if update.index < d {
            return Vec::new();
        }
        let timestamp = self
            .config
            .frontend
            .update_timestamp(update.index - d, self.sample_rate);
        update
            .report
            .sources
            .iter()
            .filter(|s| s.confirmed)
            .map(|s| {
                let dir = if d == 0 { s.direction } else { s.delayed_direction };
                let (azimuth, elevation) = dir.to_azimuth_elevation_deg();
                TrajectoryRecord {
                    timestamp,
                    source_id: s.id,
                    azimuth,
                    elevation,
                    existence: s.existence,
                    activity: s.activity,
                }
            })
            .collect()
    }

    pub fn diagnostics(update: &PipelineUpdate) -> Vec<DiagnosticRecord> {
        let obs = &update.localization.observation;
        obs.sources
            .iter()
            .map(|p| {
                let (azimuth, elevation) = p.direction.to_azimuth_elevation_deg();
                DiagnosticRecord {
                    timestamp: obs.timestamp,
                    rank: p.rank,
                    azimuth,
                    elevation,
                    energy: p.energy,
                    confidence: p.confidence,
                    distance: p.distance,
                }
            })
            .collect()
    }

    /// Runs a whole recording. Trailing samples that do not fill a frame
    /// are dropped.
    pub fn run(&mut self, channels: &[Vec<f64>]) -> Result<RunOutput> {
        self.run_with(channels, |_, _| {})
    }

    /// Like [`Pipeline::run`], calling `observe` after every update.
    pub fn run_with(
        &mut self,
        channels: &[Vec<f64>],
        mut observe: impl FnMut(&Self, &PipelineUpdate),
    ) -> Result<RunOutput> {
        let expected = self.beamformer.geometry().num_mics();
        if channels.len() != expected {
            return Err(Error::ConfigMismatch(format!(
                "recording has {} channels, geometry has {expected} microphones",
                channels.len()
            )));
        }
        let started = Instant::now();
        let l = self.config.frontend.frame_length;
        let hop = self.config.frontend.hop;
        let len = channels.iter().map(Vec::len).min().unwrap_or(0);
        let mut out = RunOutput::default();
        let mut start = 0;
        let mut updates = 0;
        while start + l <= len {
            let frame: Vec<&[f64]> = channels.iter().map(|c| &c[start..start + l]).collect();
            if let Some(update) = self.process_frame(&frame)? {
                out.trajectory.extend(self.records(&update));
                out.diagnostics.extend(Self::diagnostics(&update));
                observe(self, &update);
                updates += 1;
            }
            start += hop;
        }
        let wall = started.elapsed().as_secs_f64();
        let audio = len as f64 / self.sample_rate as f64;
        let stats = RunStats {
            samples: len,
            updates,
            audio_seconds: audio,
            wall_seconds: wall,
            real_time_factor: if wall > 0.0 { audio / wall } else { f64::INFINITY },
        };
        info!(
            "processed {:.2} s of audio in {:.3} s ({:.1}x real time)",
            audio, wall, stats.real_time_factor
        );
        out.stats = Some(stats);
        Ok(out)
    }
}

/// Mean wall time per tracker update (seconds) with `num_sources` confirmed
/// stationary sources, each observed by one peak per update.
pub fn tracker_update_cost(config: &TrackerConfig, num_sources: usize, updates: usize) -> Result<f64> {
    use crate::beamformer::{Observation, PotentialSource};
    use crate::vec3::Vec3;

    let dt = FrontendConfig::default().update_period(crate::geometry::DEFAULT_SAMPLE_RATE);
    let mut tracker = ParticleTracker::new(config.clone(), dt)?;
    let dirs: Vec<Vec3> = (0..num_sources)
        .map(|k| Vec3::from_azimuth_elevation_deg(-180.0 + 360.0 * (k as f64 + 0.5) / num_sources as f64, 10.0))
        .collect();
    let observation = Observation {
        timestamp: 0.0,
        sources: (0..4)
            .map(|q| PotentialSource {
                direction: if q < num_sources {
                    dirs[q]
                } else {
                    Vec3::new(0.0, 0.0, -1.0)
                },
                energy: 0.0,
                rank: q,
                confidence: if q < num_sources { 0.95 } else { 0.03 },
                vertex: 0,
                distance: None,
            })
            .collect(),
    };
    // Warm up until every source is confirmed.
    for _ in 0..20 {
        tracker.update(&observation)?;
    }
    let started = Instant::now();
    for _ in 0..updates {
        tracker.update(&observation)?;
    }
    Ok(started.elapsed().as_secs_f64() / updates.max(1) as f64)
}
