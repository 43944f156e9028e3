//! Scoring of trajectories against ground truth.
//!
//! At each ground-truth update, active sources and reported tracks are
//! matched with the Hungarian algorithm on angular distance; pairs farther
//! apart than the gate are discarded. Each ground-truth source then keeps an
//! identity (the track it was last unambiguously matched to) over time.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::io::TrajectoryRecord;
use crate::simulator::GroundTruthRow;
use crate::vec3::{wrap_degrees, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Match gate in degrees.
    pub gate_deg: f64,
    /// A track matched in less than this fraction of its reports is false.
    pub false_track_fraction: f64,
    /// Maximum timestamp difference for a track report to belong to a
    /// ground-truth update; defaults to half the ground-truth spacing.
    pub time_tolerance: Option<f64>,
    /// Only ground-truth updates in `[start, end]` are scored.
    pub start: Option<f64>,
    pub end: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gate_deg: 10.0,
            false_track_fraction: 0.5,
            time_tolerance: None,
            start: None,
            end: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub source_id: usize,
    pub active_updates: usize,
    pub detected_updates: usize,
    pub detection_rate: f64,
    pub azimuth_rms_deg: f64,
    pub elevation_rms_deg: f64,
    pub mean_error_deg: f64,
    /// Signed mean azimuth error over detected updates.
    pub mean_azimuth_error_deg: f64,
    pub id_swaps: usize,
    /// Fraction of active updates matched to the single track that matched
    /// this source most often.
    pub dominant_track_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub status: ReportStatus,
    pub updates: usize,
    pub sources: Vec<SourceMetrics>,
    pub detection_rate: f64,
    pub azimuth_rms_deg: f64,
    pub elevation_rms_deg: f64,
    pub tracks: usize,
    pub false_tracks: usize,
    /// Identity changes while the previous track was still reported.
    pub id_swaps: usize,
    /// Identity changes after the previous track disappeared.
    pub fragmentations: usize,
}

impl EvalReport {
    fn empty() -> Self {
        Self {
            status: ReportStatus::Empty,
            updates: 0,
            sources: Vec::new(),
            detection_rate: 0.0,
            azimuth_rms_deg: 0.0,
            elevation_rms_deg: 0.0,
            tracks: 0,
            false_tracks: 0,
            id_swaps: 0,
            fragmentations: 0,
        }
    }

    /// Number of sources followed by one track for at least `threshold` of
    /// their active updates.
    pub fn reliably_tracked(&self, threshold: f64) -> usize {
        self.sources
            .iter()
            .filter(|s| s.active_updates > 0 && s.dominant_track_fraction >= threshold)
            .count()
    }
}

/// Minimum-cost assignment of rows to columns for a rectangular cost
/// matrix. Returns `assignment[row] = Some(col)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let big = cost
        .iter()
        .flatten()
        .fold(0.0f64, |m, &c| m.max(c.abs()))
        * 2.0
        + 1.0;
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            big
        }
    };
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

fn group_by_time<T>(items: &[T], time: impl Fn(&T) -> f64) -> Vec<(f64, Vec<&T>)> {
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort_by(|a, b| time(a).total_cmp(&time(b)));
    let mut out: Vec<(f64, Vec<&T>)> = Vec::new();
    for item in sorted {
        let t = time(item);
        match out.last_mut() {
            Some((last, group)) if (t - *last).abs() < 1e-9 => group.push(item),
            _ => out.push((t, vec![item])),
        }
    }
    out
}

#[derive(Default)]
struct SourceAccumulator {
    active: usize,
    detected: usize,
    az_sq: f64,
    el_sq: f64,
    err: f64,
    az_signed: f64,
    identity: Option<u64>,
    swaps: usize,
    per_track: HashMap<u64, usize>,
}

pub fn evaluate(
    tracks: &[TrajectoryRecord],
    truth: &[GroundTruthRow],
    options: &EvalOptions,
) -> EvalReport {
    let gt_updates: Vec<(f64, Vec<&GroundTruthRow>)> = group_by_time(truth, |r| r.timestamp)
        .into_iter()
        .filter(|(t, _)| {
            options.start.is_none_or(|s| *t >= s - 1e-9) && options.end.is_none_or(|e| *t <= e + 1e-9)
        })
        .collect();
    if gt_updates.is_empty() {
        return EvalReport::empty();
    }
    let tolerance = options.time_tolerance.unwrap_or_else(|| {
        let min_gap = gt_updates
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .fold(f64::INFINITY, f64::min);
        if min_gap.is_finite() {
            0.5 * min_gap
        } else {
            1e-6
        }
    });
    let track_updates = group_by_time(tracks, |r| r.timestamp);
    let gate = options.gate_deg;

    let mut source_ids: Vec<usize> = truth.iter().map(|r| r.source_id).collect();
    source_ids.sort_unstable();
    source_ids.dedup();
    let mut acc: BTreeMap<usize, SourceAccumulator> =
        source_ids.iter().map(|&s| (s, SourceAccumulator::default())).collect();
    // Per track id: (reports within the scored window, matched reports).
    let mut track_stats: HashMap<u64, (usize, usize)> = HashMap::new();
    let mut fragmentations = 0;
    let mut cursor = 0;

    for (t, gt_rows) in &gt_updates {
        while cursor < track_updates.len() && track_updates[cursor].0 < t - tolerance {
            cursor += 1;
        }
        let reports: &[&TrajectoryRecord] = match track_updates.get(cursor) {
            Some((tt, rows)) if (tt - t).abs() <= tolerance => rows,
            _ => &[],
        };
        for r in reports {
            track_stats.entry(r.source_id).or_default().0 += 1;
        }
        let active: Vec<&GroundTruthRow> = gt_rows.iter().copied().filter(|r| r.active).collect();
        for a in &active {
            acc.get_mut(&a.source_id).expect("known source").active += 1;
        }
        if active.is_empty() || reports.is_empty() {
            continue;
        }
        let gt_dirs: Vec<Vec3> = active
            .iter()
            .map(|r| Vec3::from_azimuth_elevation_deg(r.azimuth, r.elevation))
            .collect();
        let tr_dirs: Vec<Vec3> = reports
            .iter()
            .map(|r| Vec3::from_azimuth_elevation_deg(r.azimuth, r.elevation))
            .collect();
        let cost: Vec<Vec<f64>> = gt_dirs
            .iter()
            .map(|g| tr_dirs.iter().map(|d| g.angle_to(*d).to_degrees()).collect())
            .collect();
        for (gi, assigned) in hungarian(&cost).into_iter().enumerate() {
            let Some(ti) = assigned else { continue };
            let err = cost[gi][ti];
            if err > gate {
                continue;
            }
            let g = active[gi];
            let r = reports[ti];
            track_stats.entry(r.source_id).or_default().1 += 1;
            let a = acc.get_mut(&g.source_id).expect("known source");
            a.detected += 1;
            let daz = wrap_degrees(r.azimuth - g.azimuth);
            let del = r.elevation - g.elevation;
            a.az_sq += daz * daz;
            a.el_sq += del * del;
            a.err += err;
            a.az_signed += daz;
            *a.per_track.entry(r.source_id).or_default() += 1;
            // Identity only follows unambiguous matches.
            let ambiguous = gt_dirs
                .iter()
                .enumerate()
                .any(|(k, d)| k != gi && d.angle_to(tr_dirs[ti]).to_degrees() <= gate);
            if ambiguous {
                continue;
            }
            match a.identity {
                Some(prev) if prev != r.source_id => {
                    let prev_alive = reports.iter().any(|x| x.source_id == prev);
                    if prev_alive {
                        a.swaps += 1;
                    } else {
                        fragmentations += 1;
                    }
                    a.identity = Some(r.source_id);
                }
                None => a.identity = Some(r.source_id),
                _ => {}
            }
        }
    }

    let mut sources = Vec::new();
    let (mut tot_active, mut tot_detected, mut tot_az, mut tot_el) = (0, 0, 0.0, 0.0);
    for (&id, a) in &acc {
        let d = a.detected.max(1) as f64;
        sources.push(SourceMetrics {
            source_id: id,
            active_updates: a.active,
            detected_updates: a.detected,
            detection_rate: if a.active > 0 {
                a.detected as f64 / a.active as f64
            } else {
                0.0
            },
            azimuth_rms_deg: (a.az_sq / d).sqrt(),
            elevation_rms_deg: (a.el_sq / d).sqrt(),
            mean_error_deg: a.err / d,
            mean_azimuth_error_deg: a.az_signed / d,
            id_swaps: a.swaps,
            dominant_track_fraction: if a.active > 0 {
                a.per_track.values().copied().max().unwrap_or(0) as f64 / a.active as f64
            } else {
                0.0
            },
        });
        tot_active += a.active;
        tot_detected += a.detected;
        tot_az += a.az_sq;
        tot_el += a.el_sq;
    }
    let false_tracks = track_stats
        .values()
        .filter(|(n, m)| *n > 0 && (*m as f64) < options.false_track_fraction * *n as f64)
        .count();
    let td = tot_detected.max(1) as f64;
    EvalReport {
        status: ReportStatus::Ok,
        updates: gt_updates.len(),
        id_swaps: sources.iter().map(|s| s.id_swaps).sum(),
        sources,
        detection_rate: if tot_active > 0 {
            tot_detected as f64 / tot_active as f64
        } else {
            0.0
        },
        azimuth_rms_deg: (tot_az / td).sqrt(),
        elevation_rms_deg: (tot_el / td).sqrt(),
        tracks: track_stats.values().filter(|(n, _)| *n > 0).count(),
        false_tracks,
        fragmentations,
    }
}
