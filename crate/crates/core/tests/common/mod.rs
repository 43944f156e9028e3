//! Scenario builders shared by the integration suites.
#![allow(dead_code)]

use beamtrack::eval::{evaluate, EvalOptions, EvalReport};
use beamtrack::geometry::ArrayGeometry;
use beamtrack::pipeline::{Pipeline, PipelineConfig, RunOutput};
use beamtrack::simulator::{
    render_scene, GroundTruthRow, Keypoint, ReverbSpec, SceneSpec, SignalSpec, SourceScript,
};

pub const LEVEL: f64 = 0.1;
pub const DISTANCE: f64 = 2.0;

pub fn cube() -> ArrayGeometry {
    ArrayGeometry::cube(0.16)
}

pub fn speech() -> SignalSpec {
    SignalSpec::Speech {
        level: LEVEL,
        syllable_rate: 4.0,
    }
}

pub fn burst() -> SignalSpec {
    SignalSpec::WhiteNoise { level: LEVEL }
}

pub fn tone() -> SignalSpec {
    SignalSpec::Tone {
        frequency: 1000.0,
        level: LEVEL,
    }
}

/// Sensor noise standard deviation giving `snr_db` per channel for a source
/// of RMS `LEVEL` at `DISTANCE`.
pub fn noise_for_snr(snr_db: f64) -> f64 {
    LEVEL / DISTANCE / 10f64.powf(snr_db / 20.0)
}

pub fn reverb(rt60: f64) -> ReverbSpec {
    ReverbSpec {
        rt60,
        wet_level: 0.3,
        predelay: 0.005,
    }
}

pub fn kp(time: f64, azimuth: f64, elevation: f64) -> Keypoint {
    Keypoint {
        time,
        azimuth,
        elevation,
        distance: DISTANCE,
    }
}

/// One static source switched on at 0.4 s after a noise-only lead-in.
pub fn single_source_scene(
    signal: SignalSpec,
    azimuth: f64,
    elevation: f64,
    snr_db: f64,
    reverb: Option<ReverbSpec>,
    seed: u64,
) -> SceneSpec {
    SceneSpec {
        duration: 1.5,
        sources: vec![SourceScript {
            signal,
            trajectory: vec![kp(0.0, azimuth, elevation)],
            active: vec![[0.4, 1.5]],
        }],
        noise_level: noise_for_snr(snr_db),
        reverb,
        seed,
    }
}

/// Four talkers 90 degrees apart that all turn +90 degrees in 10 s and
/// then -180 degrees in 20 s.
pub fn four_moving_sources(seed: u64) -> SceneSpec {
    let starts = [(0.0, 5.0), (90.0, 15.0), (180.0, -5.0), (-90.0, 25.0)];
    let sources = starts
        .iter()
        .map(|&(az0, el)| {
            let mut trajectory = Vec::new();
            for k in 0..=2 {
                trajectory.push(kp(5.0 * k as f64, az0 + 45.0 * k as f64, el));
            }
            for k in 1..=4 {
                trajectory.push(kp(10.0 + 5.0 * k as f64, az0 + 90.0 - 45.0 * k as f64, el));
            }
            SourceScript {
                signal: speech(),
                trajectory,
                active: vec![],
            }
        })
        .collect();
    SceneSpec {
        duration: 30.0,
        sources,
        noise_level: noise_for_snr(20.0),
        reverb: Some(reverb(0.35)),
        seed,
    }
}

/// Two talkers sweeping past each other in front of the array at
/// 15 degrees per second.
pub fn crossing_sources(seed: u64) -> SceneSpec {
    let path = |from: f64, to: f64| {
        vec![kp(0.0, from, 0.0), kp(1.0, from, 0.0), kp(9.0, to, 0.0), kp(10.0, to, 0.0)]
    };
    SceneSpec {
        duration: 10.0,
        sources: vec![
            SourceScript {
                signal: speech(),
                trajectory: path(-60.0, 60.0),
                active: vec![],
            },
            SourceScript {
                signal: speech(),
                trajectory: path(60.0, -60.0),
                active: vec![],
            },
        ],
        noise_level: noise_for_snr(20.0),
        reverb: Some(reverb(0.35)),
        seed,
    }
}

pub struct Run {
    pub output: RunOutput,
    pub truth: Vec<GroundTruthRow>,
}

impl Run {
    pub fn evaluate(&self, options: &EvalOptions) -> EvalReport {
        evaluate(&self.output.trajectory, &self.truth, options)
    }
}

/// Renders the scene on `render_geometry`, keeps `channels` (all when
/// `None`) and tracks with the matching subset geometry.
pub fn run_scene(
    scene: &SceneSpec,
    render_geometry: &ArrayGeometry,
    channels: Option<&[usize]>,
    config: &PipelineConfig,
) -> Run {
    let (audio, gt) = render_scene(scene, render_geometry).expect("scene renders");
    let (geometry, audio) = match channels {
        Some(ch) => (
            render_geometry.subset(ch).expect("valid subset"),
            ch.iter().map(|&c| audio.channels[c].clone()).collect::<Vec<_>>(),
        ),
        None => (render_geometry.clone(), audio.channels),
    };
    let fs = geometry.sample_rate();
    let mut pipeline = Pipeline::new(config.clone(), geometry).expect("pipeline builds");
    let output = pipeline.run(&audio).expect("pipeline runs");
    let updates = output.stats.as_ref().map_or(0, |s| s.updates);
    let truth = gt.rows((0..updates).map(|k| config.frontend.update_timestamp(k, fs)));
    Run { output, truth }
}

/// Cuts a scene to `duration`, ending each trajectory at its position then.
pub fn truncated(scene: &SceneSpec, duration: f64) -> SceneSpec {
    let mut out = scene.clone();
    out.duration = duration;
    for s in &mut out.sources {
        let (direction, distance) = s.position_at(duration);
        let (azimuth, elevation) = direction.to_azimuth_elevation_deg();
        s.trajectory.retain(|k| k.time < duration);
        s.trajectory.push(Keypoint {
            time: duration,
            azimuth,
            elevation,
            distance,
        });
        for a in &mut s.active {
            a[1] = a[1].min(duration);
        }
        s.active.retain(|a| a[0] < a[1]);
    }
    out
}
