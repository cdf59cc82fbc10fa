//! Uniform linear array signal model: steering vectors, the oversampled DFT
//! codebook, geometric channels and exhaustive beam selection.
//!
//! Angles are measured from array broadside, in radians, and must lie in
//! `[-pi/2, pi/2]`. Element `n` of a steering vector carries phase
//! `2*pi*spacing*n*sin(angle)`.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    num_antennas: usize,
    /// Inter-element spacing in wavelengths.
    element_spacing: f64,
}

impl ArrayGeometry {
    pub fn new(num_antennas: usize, element_spacing: f64) -> Result<Self> {
        if num_antennas == 0 {
            return Err(Error::domain("array needs at least one antenna"));
        }
        if !(element_spacing.is_finite() && element_spacing > 0.0) {
            return Err(Error::domain(format!(
                "element spacing must be positive, got {element_spacing}"
            )));
        }
        Ok(Self {
            num_antennas,
            element_spacing,
        })
    }

    /// Half-wavelength array.
    pub fn half_wavelength(num_antennas: usize) -> Result<Self> {
        Self::new(num_antennas, 0.5)
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn element_spacing(&self) -> f64 {
        self.element_spacing
    }
}

fn check_angle(angle: f64) -> Result<()> {
    if !angle.is_finite() || !(-FRAC_PI_2..=FRAC_PI_2).contains(&angle) {
        return Err(Error::domain(format!(
            "angle {angle} outside [-pi/2, pi/2]"
        )));
    }
    Ok(())
}

/// Unnormalized array response `a(angle)`; its norm is `sqrt(N)`.
pub fn steering_vector(geometry: &ArrayGeometry, angle: f64) -> Result<Vec<Complex64>> {
    check_angle(angle)?;
    let step = 2.0 * PI * geometry.element_spacing * angle.sin();
    Ok((0..geometry.num_antennas)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect())
}

/// Finite set of unit-norm beamforming vectors together with the angle each
/// beam points at.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    geometry: ArrayGeometry,
    beams: Vec<Vec<Complex64>>,
    steering_angles: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from explicit beams. Each beam must have length `N`
    /// and unit norm.
    pub fn from_beams(
        geometry: ArrayGeometry,
        beams: Vec<Vec<Complex64>>,
        steering_angles: Vec<f64>,
    ) -> Result<Self> {
        if beams.is_empty() {
            return Err(Error::domain("codebook must contain at least one beam"));
        }
        if beams.len() != steering_angles.len() {
            return Err(Error::shape(format!(
                "{} beams but {} steering angles",
                beams.len(),
                steering_angles.len()
            )));
        }
        for (m, beam) in beams.iter().enumerate() {
            if beam.len() != geometry.num_antennas {
                return Err(Error::shape(format!(
                    "beam {m} has length {}, array has {} antennas",
                    beam.len(),
                    geometry.num_antennas
                )));
            }
            let norm = beam.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::domain(format!("beam {m} has norm {norm}")));
            }
        }
        Ok(Self {
            geometry,
            beams,
            steering_angles,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn beam(&self, m: usize) -> Option<&[Complex64]> {
        self.beams.get(m).map(Vec::as_slice)
    }

    pub fn beams(&self) -> &[Vec<Complex64>] {
        &self.beams
    }

    pub fn steering_angles(&self) -> &[f64] {
        &self.steering_angles
    }
}

/// Sine of the angle targeted by beam `m` of an `num_beams`-point grid:
/// `-1 + (2m + 1) / M`, the midpoints of `M` equal bins covering `[-1, 1)`.
pub fn grid_sine(m: usize, num_beams: usize) -> f64 {
    -1.0 + (2 * m + 1) as f64 / num_beams as f64
}

/// Oversampled DFT codebook: `M` beams uniformly spaced in sine space.
pub fn build_dft_codebook(geometry: &ArrayGeometry, num_beams: usize) -> Result<Codebook> {
    if num_beams == 0 {
        return Err(Error::domain("codebook size must be at least 1"));
    }
    let scale = 1.0 / (geometry.num_antennas as f64).sqrt();
    let mut beams = Vec::with_capacity(num_beams);
    let mut angles = Vec::with_capacity(num_beams);
    for m in 0..num_beams {
        let angle = grid_sine(m, num_beams).asin();
        let beam = steering_vector(geometry, angle)?
            .into_iter()
            .map(|c| c * scale)
            .collect();
        beams.push(beam);
        angles.push(angle);
    }
    Codebook::from_beams(*geometry, beams, angles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    /// Angle of the dominant (line-of-sight) path.
    pub angle: f64,
    pub path_gain: Complex64,
    pub time_index: u64,
}

/// One narrowband channel realization `h(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    h: Vec<Complex64>,
    pub meta: ChannelMeta,
}

impl ChannelState {
    pub fn new(h: Vec<Complex64>, meta: ChannelMeta) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::domain("channel vector is empty"));
        }
        if h.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::domain("channel vector has non-finite entries"));
        }
        Ok(Self { h, meta })
    }

    /// Wraps a raw vector with neutral metadata.
    pub fn from_vector(h: Vec<Complex64>) -> Result<Self> {
        Self::new(
            h,
            ChannelMeta {
                angle: 0.0,
                path_gain: Complex64::new(1.0, 0.0),
                time_index: 0,
            },
        )
    }

    pub fn h(&self) -> &[Complex64] {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Returns the channel multiplied by a complex scalar.
    pub fn scaled(&self, c: Complex64) -> ChannelState {
        ChannelState {
            h: self.h.iter().map(|x| x * c).collect(),
            meta: self.meta,
        }
    }
}

/// Additional scattered paths on top of the line-of-sight component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultipathConfig {
    /// Number of extra paths.
    pub num_paths: usize,
    /// Power of each extra path relative to the line-of-sight path (linear).
    pub relative_power: f64,
}

impl Default for MultipathConfig {
    fn default() -> Self {
        Self {
            num_paths: 0,
            relative_power: 0.1,
        }
    }
}

/// Line-of-sight channel `h = g * a(angle)`, plus optional scattered paths at
/// uniformly random angles with circularly-symmetric Gaussian gains.
pub fn geometric_channel<R: Rng + ?Sized>(
    geometry: &ArrayGeometry,
    angle: f64,
    path_gain: Complex64,
    time_index: u64,
    multipath: &MultipathConfig,
    rng: &mut R,
) -> Result<ChannelState> {
    let mut h: Vec<Complex64> = steering_vector(geometry, angle)?
        .into_iter()
        .map(|a| a * path_gain)
        .collect();
    if multipath.num_paths > 0 {
        if !(multipath.relative_power.is_finite() && multipath.relative_power >= 0.0) {
            return Err(Error::domain("multipath relative power must be >= 0"));
        }
        let amp = path_gain.norm() * (multipath.relative_power / 2.0).sqrt();
        for _ in 0..multipath.num_paths {
            let path_angle = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let g = Complex64::new(re, im) * amp;
            for (hn, an) in h.iter_mut().zip(steering_vector(geometry, path_angle)?) {
                *hn += an * g;
            }
        }
    }
    ChannelState::new(
        h,
        ChannelMeta {
            angle,
            path_gain,
            time_index,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    noise_variance: f64,
}

impl SignalModel {
    /// Transmit symbols have unit average power.
    pub const SYMBOL_POWER: f64 = 1.0;

    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::domain(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self { noise_variance })
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

/// `h^H f`.
fn inner(h: &[Complex64], f: &[Complex64]) -> Result<Complex64> {
    if h.len() != f.len() {
        return Err(Error::shape(format!(
            "channel length {} vs beam length {}",
            h.len(),
            f.len()
        )));
    }
    Ok(h.iter().zip(f).map(|(a, b)| a.conj() * b).sum())
}

/// Noisy received sample `y = h^H f s + z` for a given symbol and noise draw.
pub fn received_signal(
    h: &ChannelState,
    f: &[Complex64],
    symbol: Complex64,
    noise: Complex64,
) -> Result<Complex64> {
    Ok(inner(&h.h, f)? * symbol + noise)
}

/// Effective received power `|h^H f|^2`.
pub fn beamforming_gain(h: &ChannelState, f: &[Complex64]) -> Result<f64> {
    Ok(inner(&h.h, f)?.norm_sqr())
}

fn codebook_gains(h: &ChannelState, codebook: &Codebook) -> Result<Vec<f64>> {
    codebook
        .beams
        .iter()
        .map(|f| beamforming_gain(h, f))
        .collect()
}

/// Exhaustive search over the codebook; ties go to the lowest index.
pub fn optimal_beam_index(h: &ChannelState, codebook: &Codebook) -> Result<usize> {
    if codebook.is_empty() {
        return Err(Error::domain("empty codebook"));
    }
    let gains = codebook_gains(h, codebook)?;
    let mut best = 0;
    for (m, &g) in gains.iter().enumerate().skip(1) {
        if g > gains[best] {
            best = m;
        }
    }
    Ok(best)
}

/// Link SNR in dB. A zero gain yields `f64::NEG_INFINITY`.
pub fn snr_db(h: &ChannelState, f: &[Complex64], signal: &SignalModel) -> Result<f64> {
    let gain = beamforming_gain(h, f)?;
    if gain == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (gain * SignalModel::SYMBOL_POWER / signal.noise_variance).log10())
}

/// Gain of the predicted beam relative to the best beam in the codebook.
///
/// An all-zero channel gives every beam zero gain; the ratio is then defined
/// as 1.
pub fn gain_ratio(h: &ChannelState, predicted: usize, codebook: &Codebook) -> Result<f64> {
    if predicted >= codebook.len() {
        return Err(Error::domain(format!(
            "predicted beam {predicted} outside codebook of size {}",
            codebook.len()
        )));
    }
    let gains = codebook_gains(h, codebook)?;
    let best = gains.iter().copied().fold(0.0, f64::max);
    if best == 0.0 {
        return Ok(1.0);
    }
    Ok((gains[predicted] / best).clamp(0.0, 1.0))
}
