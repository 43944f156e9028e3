//! Steered beamformer: exhaustive direction search over the geodesic grid,
//! successive extraction of several peaks per update, optional local
//! refinement with near-field delays, and peak confidence values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::CrossCorrelationSet;
use crate::geometry::{
    ArrayGeometry, RefinedGrid, SphericalGrid, TdoaLookup, DEFAULT_CELL_RADIUS_DEG,
    DEFAULT_GRID_LEVEL,
};
use crate::vec3::Vec3;

/// Confidence of ranks 1, 2 and 3.
pub const SECONDARY_CONFIDENCE: [f64; 3] = [0.3, 0.16, 0.03];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformerConfig {
    /// Energy at which the first peak reaches confidence 0.5. Scales with
    /// the number of microphone pairs, the frame size and the window.
    pub energy_threshold: f64,
    pub num_sources: usize,
    pub grid_level: u32,
    pub refine: bool,
    /// Ranks `0..refine_ranks` are refined when refinement is on.
    pub refine_ranks: usize,
    pub refine_radius_deg: f64,
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 150.0,
            num_sources: 4,
            grid_level: DEFAULT_GRID_LEVEL,
            refine: false,
            refine_ranks: 2,
            refine_radius_deg: DEFAULT_CELL_RADIUS_DEG,
        }
    }
}

impl BeamformerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_threshold > 0.0 && self.energy_threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "energy_threshold must be positive, got {}",
                self.energy_threshold
            )));
        }
        if !(1..=4).contains(&self.num_sources) {
            return Err(Error::InvalidConfig(format!(
                "num_sources must be between 1 and 4, got {}",
                self.num_sources
            )));
        }
        if !(self.refine_radius_deg > 0.0 && self.refine_radius_deg < 45.0) {
            return Err(Error::InvalidConfig(format!(
                "refine_radius_deg must lie in (0, 45), got {}",
                self.refine_radius_deg
            )));
        }
        Ok(())
    }
}

/// One beamformer peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialSource {
    pub direction: Vec3,
    /// Beamformer energy at extraction time.
    pub energy: f64,
    pub rank: usize,
    pub confidence: f64,
    /// Grid vertex the peak was found at.
    pub vertex: usize,
    /// Distance of the best refined point, when refinement ran.
    pub distance: Option<f64>,
}

/// Peaks extracted from one cross-correlation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub timestamp: f64,
    pub sources: Vec<PotentialSource>,
}

/// Confidence that a peak of the given rank is a true source.
///
/// Rank 0 maps `nu = energy / threshold` through `nu^2 / 2` below one and
/// `1 - nu^-2 / 2` above; later ranks use fixed values because their false
/// alarms do not depend on energy.
pub fn confidence(energy: f64, rank: usize, threshold: f64) -> f64 {
    match rank {
        0 => {
            let nu = energy.max(0.0) / threshold;
            if nu <= 1.0 {
                nu * nu / 2.0
            } else {
                1.0 - 0.5 / (nu * nu)
            }
        }
        q => SECONDARY_CONFIDENCE.get(q - 1).copied().unwrap_or(0.0),
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: usize,
    pub energies: Vec<f64>,
    /// Correlation values accumulated during the search.
    pub additions: u64,
}

/// Energy of every grid direction; argmax ties go to the lowest index.
pub fn direction_search(correlations: &CrossCorrelationSet, lookup: &TdoaLookup) -> SearchResult {
    let pairs = lookup.num_pairs();
    debug_assert_eq!(pairs, correlations.num_pairs());
    let l = correlations.frame_length();
    let mask = l as i32 - 1;
    let lags: Vec<&[f64]> = (0..pairs).map(|p| correlations.pair(p)).collect();
    let mut energies = Vec::with_capacity(lookup.num_directions());
    let mut additions = 0u64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for d in 0..lookup.num_directions() {
        let mut e = 0.0;
        for (p, &tau) in lookup.row(d).iter().enumerate() {
            // Frame length is a power of two, so masking is lag mod L.
            e += lags[p][(tau & mask) as usize];
            additions += 1;
        }
        if e > best.0 {
            best = (e, d);
        }
        energies.push(e);
    }
    SearchResult {
        best: best.1,
        energies,
        additions,
    }
}

/// Sum of pair correlations at the given per-pair delays.
pub fn steered_energy(correlations: &CrossCorrelationSet, delays: &[i32]) -> f64 {
    delays
        .iter()
        .enumerate()
        .map(|(p, &tau)| correlations.get(p, tau))
        .sum()
}

/// Grid, delay table and configuration for one array.
#[derive(Clone, Debug)]
pub struct SteeredBeamformer {
    geometry: ArrayGeometry,
    grid: SphericalGrid,
    lookup: TdoaLookup,
    config: BeamformerConfig,
}

/// Output of [`SteeredBeamformer::localize`].
#[derive(Clone, Debug)]
pub struct Localization {
    pub observation: Observation,
    /// Energy map of the first search (before any peak removal).
    pub energy_map: Vec<f64>,
}

impl SteeredBeamformer {
    pub fn new(geometry: ArrayGeometry, config: BeamformerConfig) -> Result<Self> {
        config.validate()?;
        let grid = SphericalGrid::icosahedral(config.grid_level)?;
        let lookup = TdoaLookup::far_field(&geometry, &grid);
        Ok(Self {
            geometry,
            grid,
            lookup,
            config,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &SphericalGrid {
        &self.grid
    }

    pub fn lookup(&self) -> &TdoaLookup {
        &self.lookup
    }

    pub fn config(&self) -> &BeamformerConfig {
        &self.config
    }

    fn check(&self, correlations: &CrossCorrelationSet) -> Result<()> {
        if correlations.num_pairs() != self.lookup.num_pairs() {
            return Err(Error::ConfigMismatch(format!(
                "correlations have {} pairs, geometry has {}",
                correlations.num_pairs(),
                self.lookup.num_pairs()
            )));
        }
        let l = correlations.frame_length();
        if !l.is_power_of_two() || (self.geometry.max_delay() as usize) >= l / 2 {
            return Err(Error::ConfigMismatch(format!(
                "lag range of {l} samples does not cover the array's maximum delay of {}",
                self.geometry.max_delay()
            )));
        }
        Ok(())
    }

    pub fn search(&self, correlations: &CrossCorrelationSet) -> Result<SearchResult> {
        self.check(correlations)?;
        Ok(direction_search(correlations, &self.lookup))
    }

    /// Extracts `num_sources` peaks, removing each found direction's lags
    /// from a private copy of the correlations before the next search.
    pub fn localize(&self, correlations: &CrossCorrelationSet) -> Result<Localization> {
        self.check(correlations)?;
        let mut work = correlations.clone();
        let mut sources = Vec::with_capacity(self.config.num_sources);
        let mut energy_map = Vec::new();
        let mut e0 = 0.0;
        for rank in 0..self.config.num_sources {
            let result = direction_search(&work, &self.lookup);
            let vertex = result.best;
            let energy = result.energies[vertex];
            if rank == 0 {
                e0 = energy;
                energy_map = result.energies;
            }
            let coarse = self.grid.vertices()[vertex];
            let (direction, distance) = if self.config.refine && rank < self.config.refine_ranks {
                let (d, dist) = self.refine_direction(&work, coarse)?;
                (d, Some(dist))
            } else {
                (coarse, None)
            };
            let conf_energy = if rank == 0 { energy } else { e0 };
            sources.push(PotentialSource {
                direction,
                energy,
                rank,
                confidence: confidence(conf_energy, rank, self.config.energy_threshold),
                vertex,
                distance,
            });
            for (p, &tau) in self.lookup.row(vertex).iter().enumerate() {
                work.set(p, tau, 0.0);
            }
        }
        Ok(Localization {
            observation: Observation {
                timestamp: correlations.timestamp,
                sources,
            },
            energy_map,
        })
    }

    /// Best direction and distance on the 125-point lattice around `coarse`,
    /// using near-field delays. The lattice center wins ties.
    pub fn refine_direction(
        &self,
        correlations: &CrossCorrelationSet,
        coarse: Vec3,
    ) -> Result<(Vec3, f64)> {
        let refined = RefinedGrid::new(coarse, self.config.refine_radius_deg)?;
        let delays = refined.delays(&self.geometry);
        let pairs = self.geometry.num_pairs();
        let points = refined.points();
        let center_index = points.len() / 2;
        let energy_at = |k: usize| steered_energy(correlations, &delays[k * pairs..(k + 1) * pairs]);
        let mut best = (energy_at(center_index), center_index);
        for k in 0..points.len() {
            let e = energy_at(k);
            if e > best.0 {
                best = (e, k);
            }
        }
        let p = points[best.1];
        Ok((p.direction, p.distance))
    }
}
