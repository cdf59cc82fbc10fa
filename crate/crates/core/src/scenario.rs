//! Synthetic V2I scenario: a roadside base station with an `N`-element array
//! watches vehicles drive along a straight road segment.
//!
//! Each sample carries two sensing modalities:
//!
//! * `position`: a GPS fix with isotropic Gaussian error, expressed in
//!   road-local coordinates (see [`POSITION_FRAME`]).
//! * `visual`: a `G x G` grid with a Gaussian bump at the vehicle's bearing
//!   (columns, uniform in sine of the angle) and range (rows). Night samples
//!   attenuate the bump and add more noise.
//!
//! The beam label is the exhaustive-search optimum over the DFT codebook for
//! the channel realized at the vehicle's true position.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_channel::{
    build_dft_codebook, geometric_channel, optimal_beam_index, ArrayGeometry, ChannelState,
    Codebook, MultipathConfig,
};
use crate::dataset::{Dataset, DatasetHeader, Sample, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::seed::{self, streams};

/// Description of the road-local frame used for the position modality.
pub const POSITION_FRAME: &str = "road_local_v1: u = 2*s/L - 1 with s the projection onto \
start->end and L the segment length; v = 2*lateral/L with lateral the signed offset to the \
left of the direction of travel";

pub const MODALITY_NAMES: [&str; 2] = ["position", "visual"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Day,
    Night,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Day => "day",
            Regime::Night => "night",
        }
    }

    pub const ALL: [Regime; 2] = [Regime::Day, Regime::Night];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_antennas: usize,
    /// In wavelengths.
    pub element_spacing: f64,
    pub num_beams: usize,
    /// Base-station position in meters.
    pub bs_position: [f64; 2],
    /// Direction the array broadside points at; need not be normalized.
    pub array_facing: [f64; 2],
    pub road_start: [f64; 2],
    pub road_end: [f64; 2],
    pub num_samples: usize,
    /// Vehicle speed range in m/s.
    pub speed_range: [f64; 2],
    /// Jitter on along-road progress as a fraction of the nominal spacing.
    pub progress_jitter: f64,
    /// Fraction of night samples.
    pub regime_mix: f64,
    /// GPS error standard deviation in meters.
    pub gps_noise_sigma: f64,
    pub visual_grid_size: usize,
    /// Bump standard deviation in grid cells.
    pub visual_bump_width: f64,
    /// Daytime bump peak value.
    pub visual_amplitude: f64,
    pub visual_noise_day: f64,
    pub visual_noise_night: f64,
    /// Bump amplitude multiplier at night.
    pub night_attenuation: f64,
    pub multipath: MultipathConfig,
    /// Train / validation / test fractions.
    pub split_ratios: [f64; 3],
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_antennas: 16,
            element_spacing: 0.5,
            num_beams: 64,
            bs_position: [0.0, 0.0],
            array_facing: [0.0, 1.0],
            road_start: [-30.0, 12.0],
            road_end: [30.0, 12.0],
            num_samples: 4000,
            speed_range: [5.0, 15.0],
            progress_jitter: 0.5,
            regime_mix: 0.5,
            gps_noise_sigma: 1.0,
            visual_grid_size: 8,
            visual_bump_width: 0.6,
            visual_amplitude: 3.0,
            visual_noise_day: 0.15,
            visual_noise_night: 3.0,
            night_attenuation: 0.3,
            multipath: MultipathConfig::default(),
            split_ratios: [0.7, 0.15, 0.15],
            rng_seed: 0,
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    dot(a, a).sqrt()
}

impl ScenarioConfig {
    /// Checks every field. Returns non-fatal warnings on success.
    pub fn validate(&self) -> Result<Vec<String>> {
        let finite = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, "must be finite"))
            }
        };
        let non_negative = |name: &str, v: f64| -> Result<()> {
            finite(name, v)?;
            if v < 0.0 {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
            Ok(())
        };
        if self.num_antennas == 0 {
            return Err(Error::config("num_antennas", "must be >= 1"));
        }
        if !(self.element_spacing.is_finite() && self.element_spacing > 0.0) {
            return Err(Error::config("element_spacing", "must be > 0"));
        }
        if self.num_beams == 0 {
            return Err(Error::config("num_beams", "must be >= 1"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples", "must be >= 1"));
        }
        for (name, p) in [
            ("bs_position", self.bs_position),
            ("array_facing", self.array_facing),
            ("road_start", self.road_start),
            ("road_end", self.road_end),
        ] {
            finite(name, p[0])?;
            finite(name, p[1])?;
        }
        if norm(self.array_facing) == 0.0 {
            return Err(Error::config("array_facing", "must be a nonzero direction"));
        }
        if norm(sub(self.road_end, self.road_start)) == 0.0 {
            return Err(Error::config("road_end", "road segment has zero length"));
        }
        for (name, p) in [("road_start", self.road_start), ("road_end", self.road_end)] {
            if dot(sub(p, self.bs_position), self.array_facing) <= 0.0 {
                return Err(Error::config(
                    name,
                    "road endpoints must lie strictly in front of the array",
                ));
            }
        }
        non_negative("speed_range", self.speed_range[0])?;
        non_negative("speed_range", self.speed_range[1])?;
        if self.speed_range[0] > self.speed_range[1] {
            return Err(Error::config("speed_range", "min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.progress_jitter) {
            return Err(Error::config("progress_jitter", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.regime_mix) {
            return Err(Error::config("regime_mix", "must be in [0, 1]"));
        }
        non_negative("gps_noise_sigma", self.gps_noise_sigma)?;
        if self.visual_grid_size < 2 {
            return Err(Error::config("visual_grid_size", "must be >= 2"));
        }
        if !(self.visual_bump_width.is_finite() && self.visual_bump_width > 0.0) {
            return Err(Error::config("visual_bump_width", "must be > 0"));
        }
        non_negative("visual_noise_day", self.visual_noise_day)?;
        non_negative("visual_noise_night", self.visual_noise_night)?;
        non_negative("night_attenuation", self.night_attenuation)?;
        if !(self.visual_amplitude.is_finite() && self.visual_amplitude > 0.0) {
            return Err(Error::config("visual_amplitude", "must be > 0"));
        }
        non_negative("multipath.relative_power", self.multipath.relative_power)?;
        let mut total = 0.0;
        for r in self.split_ratios {
            non_negative("split_ratios", r)?;
            total += r;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_ratios", format!("must sum to 1, got {total}")));
        }

        let mut warnings = Vec::new();
        if self.visual_noise_night < self.visual_noise_day {
            warnings.push(format!(
                "visual_noise_night ({}) is below visual_noise_day ({})",
                self.visual_noise_night, self.visual_noise_day
            ));
        }
        if self.num_beams < self.num_antennas {
            warnings.push("num_beams < num_antennas: codebook is undersampled".to_owned());
        }
        Ok(warnings)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.num_antennas, self.element_spacing)
    }

    pub fn codebook(&self) -> Result<Codebook> {
        build_dft_codebook(&self.geometry()?, self.num_beams)
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_grid_size * self.visual_grid_size
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        vec![2, self.visual_dim()]
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn facing_unit(&self) -> [f64; 2] {
        let n = norm(self.array_facing);
        [self.array_facing[0] / n, self.array_facing[1] / n]
    }

    /// Angle of `position` from the array broadside, positive towards the
    /// array axis (broadside rotated clockwise by 90 degrees).
    pub fn bearing(&self, position: [f64; 2]) -> f64 {
        let facing = self.facing_unit();
        let axis = [facing[1], -facing[0]];
        let d = sub(position, self.bs_position);
        dot(d, axis).atan2(dot(d, facing))
    }

    pub fn range(&self, position: [f64; 2]) -> f64 {
        norm(sub(position, self.bs_position))
    }

    fn road_length(&self) -> f64 {
        norm(sub(self.road_end, self.road_start))
    }

    /// Maps a world position into the road-local frame of [`POSITION_FRAME`].
    pub fn to_road_local(&self, position: [f64; 2]) -> [f64; 2] {
        let len = self.road_length();
        let dir = sub(self.road_end, self.road_start);
        let along = [dir[0] / len, dir[1] / len];
        let left = [-along[1], along[0]];
        let rel = sub(position, self.road_start);
        [2.0 * dot(rel, along) / len - 1.0, 2.0 * dot(rel, left) / len]
    }

    /// Inverse of [`ScenarioConfig::to_road_local`].
    pub fn from_road_local(&self, local: [f64; 2]) -> [f64; 2] {
        let len = self.road_length();
        let dir = sub(self.road_end, self.road_start);
        let along = [dir[0] / len, dir[1] / len];
        let left = [-along[1], along[0]];
        let s = (local[0] + 1.0) * len / 2.0;
        let l = local[1] * len / 2.0;
        [
            self.road_start[0] + s * along[0] + l * left[0],
            self.road_start[1] + s * along[1] + l * left[1],
        ]
    }

    /// Range interval spanned by the road segment, used for the visual rows.
    fn range_bounds(&self) -> (f64, f64) {
        let dir = sub(self.road_end, self.road_start);
        let rel = sub(self.bs_position, self.road_start);
        let s = (dot(rel, dir) / dot(dir, dir)).clamp(0.0, 1.0);
        let closest = [self.road_start[0] + s * dir[0], self.road_start[1] + s * dir[1]];
        let r_min = self.range(closest);
        let r_max = self.range(self.road_start).max(self.range(self.road_end));
        (r_min, r_max)
    }

    /// Continuous (row, column) of the bump centre for a vehicle position.
    pub fn visual_center(&self, position: [f64; 2]) -> (f64, f64) {
        let g = self.visual_grid_size as f64;
        let col = (self.bearing(position).sin() + 1.0) / 2.0 * g - 0.5;
        let (r_min, r_max) = self.range_bounds();
        let row = if r_max > r_min {
            (self.range(position) - r_min) / (r_max - r_min) * (g - 1.0)
        } else {
            (g - 1.0) / 2.0
        };
        (row, col)
    }

    fn bump_amplitude(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Day => self.visual_amplitude,
            Regime::Night => self.visual_amplitude * self.night_attenuation,
        }
    }

    fn visual_noise(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Day => self.visual_noise_day,
            Regime::Night => self.visual_noise_night,
        }
    }

    /// Noise-free visual grid, row-major.
    pub fn visual_bump(&self, position: [f64; 2], regime: Regime) -> Vec<f64> {
        let g = self.visual_grid_size;
        let (row, col) = self.visual_center(position);
        let amp = self.bump_amplitude(regime);
        let denom = 2.0 * self.visual_bump_width * self.visual_bump_width;
        let mut out = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let dr = i as f64 - row;
                let dc = j as f64 - col;
                out.push(amp * (-(dr * dr + dc * dc) / denom).exp());
            }
        }
        out
    }

    /// Ratio of mean per-cell bump power to the noise variance, for a vehicle
    /// at `position`. Infinite when the regime is noise-free.
    pub fn visual_snr(&self, position: [f64; 2], regime: Regime) -> f64 {
        let bump = self.visual_bump(position, regime);
        let power = bump.iter().map(|b| b * b).sum::<f64>() / bump.len() as f64;
        let sigma = self.visual_noise(regime);
        if sigma == 0.0 {
            return f64::INFINITY;
        }
        power / (sigma * sigma)
    }

    /// Beam whose sine-space bin contains the bearing of `position`. Under a
    /// pure line-of-sight channel this is the exhaustive-search optimum.
    pub fn nearest_grid_beam(&self, position: [f64; 2]) -> usize {
        let s = self.bearing(position).sin();
        let m = ((s + 1.0) / 2.0 * self.num_beams as f64).floor();
        (m.max(0.0) as usize).min(self.num_beams - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub time_index: u64,
    pub position: [f64; 2],
    pub speed: f64,
}

/// Positions spread along the road with uniform progress plus jitter.
pub fn generate_trajectory(config: &ScenarioConfig, seed: u64) -> Result<Vec<TrajectoryPoint>> {
    if norm(sub(config.road_end, config.road_start)) == 0.0 {
        return Err(Error::domain("road segment has zero length"));
    }
    if config.num_samples == 0 {
        return Err(Error::domain("trajectory needs at least one sample"));
    }
    let t_total = config.num_samples as f64;
    let dir = sub(config.road_end, config.road_start);
    (0..config.num_samples as u64)
        .map(|t| {
            let mut rng = seed::rng(seed, t, streams::TRAJECTORY);
            let jitter = config.progress_jitter * rng.random_range(-0.5..=0.5);
            let progress = ((t as f64 + 0.5 + jitter) / t_total).clamp(0.0, 1.0);
            let [lo, hi] = config.speed_range;
            let speed = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Ok(TrajectoryPoint {
                time_index: t,
                position: [
                    config.road_start[0] + progress * dir[0],
                    config.road_start[1] + progress * dir[1],
                ],
                speed,
            })
        })
        .collect()
}

/// GPS fix in road-local coordinates.
pub fn synthesize_position_modality<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    true_position: [f64; 2],
    gps_noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(gps_noise_sigma.is_finite() && gps_noise_sigma >= 0.0) {
        return Err(Error::domain("gps noise sigma must be >= 0"));
    }
    let measured = if gps_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, gps_noise_sigma).map_err(|e| Error::domain(e.to_string()))?;
        [
            true_position[0] + normal.sample(rng),
            true_position[1] + normal.sample(rng),
        ]
    } else {
        true_position
    };
    Ok(config.to_road_local(measured).to_vec())
}

/// Bearing/range grid feature with regime-dependent amplitude and noise.
pub fn synthesize_visual_modality<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    true_position: [f64; 2],
    regime: Regime,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if config.visual_grid_size < 2 {
        return Err(Error::domain("visual grid must be at least 2x2"));
    }
    let mut grid = config.visual_bump(true_position, regime);
    let sigma = config.visual_noise(regime);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
        for v in &mut grid {
            *v += normal.sample(rng);
        }
    }
    Ok(grid)
}

/// Channel realization for a sample. Path amplitude falls off as 1/range and
/// the line-of-sight phase is uniform; both come from the sample's own stream.
pub fn sample_channel(
    config: &ScenarioConfig,
    sample_id: u64,
    time_index: u64,
    position: [f64; 2],
) -> Result<ChannelState> {
    let geometry = config.geometry()?;
    let mut rng = seed::rng(config.rng_seed, sample_id, streams::CHANNEL);
    let phase = rng.random_range(0.0..2.0 * PI);
    let range = config.range(position);
    if range == 0.0 {
        return Err(Error::domain("vehicle coincides with the base station"));
    }
    let gain = Complex64::from_polar(1.0 / range, phase);
    geometric_channel(
        &geometry,
        config.bearing(position),
        gain,
        time_index,
        &config.multipath,
        &mut rng,
    )
}

/// Channel and optimal beam for a vehicle at `position`.
pub fn label_sample(
    config: &ScenarioConfig,
    codebook: &Codebook,
    sample_id: u64,
    time_index: u64,
    position: [f64; 2],
) -> Result<(ChannelState, usize)> {
    let h = sample_channel(config, sample_id, time_index, position)?;
    let label = optimal_beam_index(&h, codebook)?;
    Ok((h, label))
}

pub fn generate_dataset(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let codebook = config.codebook()?;
    let trajectory = generate_trajectory(config, config.rng_seed)?;
    let mut samples = Vec::with_capacity(trajectory.len());
    for point in &trajectory {
        let id = point.time_index;
        let night = seed::rng(config.rng_seed, id, streams::REGIME).random_bool(config.regime_mix);
        let regime = if night { Regime::Night } else { Regime::Day };
        let x_pos = synthesize_position_modality(
            config,
            point.position,
            config.gps_noise_sigma,
            &mut seed::rng(config.rng_seed, id, streams::GPS),
        )?;
        let x_vis = synthesize_visual_modality(
            config,
            point.position,
            regime,
            &mut seed::rng(config.rng_seed, id, streams::VISUAL),
        )?;
        let (_, label) = label_sample(config, &codebook, id, point.time_index, point.position)?;
        samples.push(Sample {
            sample_id: id,
            t: point.time_index,
            regime,
            label,
            modalities: vec![x_pos, x_vis],
            true_position: point.position,
        });
    }
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        num_modalities: 2,
        modality_names: MODALITY_NAMES.iter().map(|s| s.to_string()).collect(),
        modality_dims: config.modality_dims(),
        num_beams: config.num_beams,
        num_antennas: config.num_antennas,
        config_hash: config.hash(),
        split_ratios: config.split_ratios,
        position_frame: POSITION_FRAME.to_owned(),
        scenario: Some(config.clone()),
    };
    Dataset::new(header, samples)
}
