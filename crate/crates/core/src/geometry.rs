//! CST airfoil geometry.
//!
//! Each surface is `y(ψ) = C(ψ)·S(ψ)` with class function
//! `C(ψ) = ψ^0.5 (1-ψ)` and a degree-7 Bernstein shape function over eight
//! coefficients. The trailing edge is closed (zero thickness), so both
//! surfaces vanish at `ψ = 0` and `ψ = 1`.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal_vec};
use crate::stats::NormStats;

pub const COEFFS_PER_SURFACE: usize = 8;
pub const DESIGN_DIM: usize = 2 * COEFFS_PER_SURFACE;
const DEGREE: usize = COEFFS_PER_SURFACE - 1;
const BINOM7: [f64; 8] = [1.0, 7.0, 21.0, 35.0, 35.0, 21.0, 7.0, 1.0];
const BINOM6: [f64; 7] = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];

pub const CHECK_STATIONS: usize = 128;
pub const MIN_THICKNESS: f64 = 0.02;
pub const MAX_THICKNESS: f64 = 0.30;
pub const MAX_COEFFICIENT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignVector {
    pub upper: [f64; COEFFS_PER_SURFACE],
    pub lower: [f64; COEFFS_PER_SURFACE],
}

impl DesignVector {
    pub fn new(upper: [f64; COEFFS_PER_SURFACE], lower: [f64; COEFFS_PER_SURFACE]) -> Self {
        DesignVector { upper, lower }
    }

    pub fn zeros() -> Self {
        DesignVector { upper: [0.0; 8], lower: [0.0; 8] }
    }

    /// Upper surface `c`, lower surface `-c`: a symmetric section.
    pub fn symmetric(upper: [f64; COEFFS_PER_SURFACE]) -> Self {
        DesignVector { upper, lower: upper.map(|c| -c) }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != DESIGN_DIM {
            return Err(Error::Shape(format!("design vector needs {DESIGN_DIM} values, got {}", values.len())));
        }
        let mut d = DesignVector::zeros();
        d.upper.copy_from_slice(&values[..COEFFS_PER_SURFACE]);
        d.lower.copy_from_slice(&values[COEFFS_PER_SURFACE..]);
        Ok(d)
    }

    pub fn to_array(&self) -> [f64; DESIGN_DIM] {
        let mut out = [0.0; DESIGN_DIM];
        out[..COEFFS_PER_SURFACE].copy_from_slice(&self.upper);
        out[COEFFS_PER_SURFACE..].copy_from_slice(&self.lower);
        out
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.to_array().to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.upper.iter().chain(&self.lower).all(|c| c.is_finite())
    }

    /// Camber-line coefficients `(upper + lower) / 2`.
    fn camber_coefficients(&self) -> [f64; COEFFS_PER_SURFACE] {
        std::array::from_fn(|i| 0.5 * (self.upper[i] + self.lower[i]))
    }
}

#[inline]
fn bernstein7(i: usize, psi: f64) -> f64 {
    BINOM7[i] * psi.powi(i as i32) * (1.0 - psi).powi((DEGREE - i) as i32)
}

#[inline]
fn bernstein6(i: usize, psi: f64) -> f64 {
    BINOM6[i] * psi.powi(i as i32) * (1.0 - psi).powi((DEGREE - 1 - i) as i32)
}

#[inline]
pub fn class_function(psi: f64) -> f64 {
    psi.sqrt() * (1.0 - psi)
}

pub fn shape_function(coeffs: &[f64; COEFFS_PER_SURFACE], psi: f64) -> f64 {
    coeffs.iter().enumerate().map(|(i, a)| a * bernstein7(i, psi)).sum()
}

/// `d/dψ [C(ψ) S(ψ)]` on the open interval.
fn surface_slope(coeffs: &[f64; COEFFS_PER_SURFACE], psi: f64) -> f64 {
    let root = psi.sqrt();
    let class = root * (1.0 - psi);
    let class_slope = 0.5 * (1.0 - psi) / root - root;
    let shape = shape_function(coeffs, psi);
    let shape_slope: f64 = (0..DEGREE).map(|i| DEGREE as f64 * (coeffs[i + 1] - coeffs[i]) * bernstein6(i, psi)).sum();
    class_slope * shape + class * shape_slope
}

/// Derivative of the `i`-th CST basis function `C(ψ)·B_i(ψ)`; used for the lift gradient.
pub(crate) fn basis_slope(i: usize, psi: f64) -> f64 {
    let mut unit = [0.0; COEFFS_PER_SURFACE];
    unit[i] = 1.0;
    surface_slope(&unit, psi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirfoilSurface {
    pub stations: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl AirfoilSurface {
    pub fn thickness(&self) -> impl Iterator<Item = f64> + '_ {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l)
    }

    pub fn max_thickness(&self) -> f64 {
        self.thickness().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn uniform_stations(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// Cosine-spaced stations clustered at both ends of the chord.
pub fn cosine_stations(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| 0.5 * (1.0 - (PI * k as f64 / (n - 1) as f64).cos())).collect(),
    }
}

pub fn cst_evaluate(design: &DesignVector, stations: &[f64]) -> Result<AirfoilSurface> {
    if let Some(bad) = stations.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("chord station {bad} outside [0, 1]")));
    }
    if stations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("chord stations must be strictly increasing".into()));
    }
    let eval = |coeffs: &[f64; 8]| -> Vec<f64> {
        stations.iter().map(|&psi| class_function(psi) * shape_function(coeffs, psi)).collect()
    };
    Ok(AirfoilSurface { stations: stations.to_vec(), upper: eval(&design.upper), lower: eval(&design.lower) })
}

/// Camber-line slope `dz_c/dx` at the Glauert abscissae `x = (1 - cos θ)/2`.
pub fn camber_slope(design: &DesignVector, theta_nodes: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = theta_nodes.iter().find(|t| !(**t > 0.0 && **t < PI)) {
        return Err(Error::Domain(format!("Glauert angle {bad} outside the open interval (0, π)")));
    }
    let camber = design.camber_coefficients();
    Ok(theta_nodes.iter().map(|&theta| surface_slope(&camber, 0.5 * (1.0 - theta.cos()))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum InvalidReason {
    NonFinite,
    SurfacesCross { station: f64 },
    Thickness { max: f64 },
    Coefficient { index: usize, value: f64 },
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvalidReason::NonFinite => write!(f, "non-finite coefficient"),
            InvalidReason::SurfacesCross { station } => write!(f, "upper surface below lower at x={station:.4}"),
            InvalidReason::Thickness { max } => {
                write!(f, "max thickness {max:.4} outside [{MIN_THICKNESS}, {MAX_THICKNESS}]")
            }
            InvalidReason::Coefficient { index, value } => {
                write!(f, "coefficient {index} = {value:.4} exceeds ±{MAX_COEFFICIENT}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub valid: bool,
    pub max_thickness: f64,
    pub reasons: Vec<InvalidReason>,
}

impl ValidityReport {
    pub fn coefficient_bound_violated(&self) -> bool {
        self.reasons.iter().any(|r| matches!(r, InvalidReason::Coefficient { .. } | InvalidReason::NonFinite))
    }
}

pub fn validate_airfoil(design: &DesignVector) -> ValidityReport {
    if !design.is_finite() {
        return ValidityReport { valid: false, max_thickness: f64::NAN, reasons: vec![InvalidReason::NonFinite] };
    }
    let mut reasons = Vec::new();
    let surface = cst_evaluate(design, &uniform_stations(CHECK_STATIONS)).expect("uniform stations are in range");
    if let Some((k, _)) = surface.thickness().enumerate().find(|(_, t)| *t < 0.0) {
        reasons.push(InvalidReason::SurfacesCross { station: surface.stations[k] });
    }
    let max_thickness = surface.max_thickness();
    if !(MIN_THICKNESS..=MAX_THICKNESS).contains(&max_thickness) {
        reasons.push(InvalidReason::Thickness { max: max_thickness });
    }
    for (index, &value) in design.to_array().iter().enumerate() {
        if value.abs() > MAX_COEFFICIENT {
            reasons.push(InvalidReason::Coefficient { index, value });
        }
    }
    ValidityReport { valid: reasons.is_empty(), max_thickness, reasons }
}

/// Base sections for the synthetic corpus: (thickness scale, camber offset).
/// Upper coefficients are `t·profile + c`, lower are `-t·profile + c`.
const BASE_SECTIONS: [(f64, f64); 5] = [(0.10, 0.00), (0.15, 0.06), (0.12, 0.14), (0.18, 0.20), (0.14, 0.30)];
const THICKNESS_PROFILE: [f64; 8] = [1.0, 0.9, 0.95, 0.9, 0.9, 0.85, 0.85, 0.8];

pub fn base_designs() -> Vec<DesignVector> {
    BASE_SECTIONS
        .iter()
        .map(|&(t, c)| DesignVector {
            upper: THICKNESS_PROFILE.map(|p| t * p + c),
            lower: THICKNESS_PROFILE.map(|p| -t * p + c),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DesignDataset {
    designs: Vec<DesignVector>,
    stats: NormStats,
    labels: Option<Vec<f64>>,
}

impl DesignDataset {
    /// Every design must pass [`validate_airfoil`].
    pub fn new(designs: Vec<DesignVector>) -> Result<Self> {
        if let Some((i, report)) = designs.iter().map(validate_airfoil).enumerate().find(|(_, r)| !r.valid) {
            let why: Vec<String> = report.reasons.iter().map(|r| r.to_string()).collect();
            return Err(Error::Config(format!("design {i} is not a valid airfoil: {}", why.join("; "))));
        }
        let rows: Vec<[f64; DESIGN_DIM]> = designs.iter().map(DesignVector::to_array).collect();
        let stats = NormStats::from_rows(&rows)?;
        Ok(DesignDataset { designs, stats, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.designs.len() {
            return Err(Error::Config(format!("{} labels for {} designs", labels.len(), self.designs.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn designs(&self) -> &[DesignVector] {
        &self.designs
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.designs.iter().map(DesignVector::to_vec).collect()
    }

    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        self.designs.iter().map(|d| self.stats.normalize(&d.to_array())).collect()
    }

    /// Writes the design table and its `<file>.stats.csv` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> =
            (0..8).map(|i| format!("upper{i}")).chain((0..8).map(|i| format!("lower{i}"))).collect();
        if self.labels.is_some() {
            header.push("cl".into());
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (i, d) in self.designs.iter().enumerate() {
            let mut row: Vec<String> = d.to_array().iter().map(|v| v.to_string()).collect();
            if let Some(labels) = &self.labels {
                row.push(labels[i].to_string());
            }
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let sidecar = stats_path(path);
        let mut s = csv::Writer::from_path(&sidecar).map_err(|e| csv_error(&sidecar, e))?;
        s.write_record(["column", "mean", "std"]).map_err(|e| csv_error(&sidecar, e))?;
        for (i, name) in header.iter().take(DESIGN_DIM).enumerate() {
            s.write_record([name.clone(), self.stats.mean[i].to_string(), self.stats.std[i].to_string()])
                .map_err(|e| csv_error(&sidecar, e))?;
        }
        s.flush().map_err(|e| Error::io(&sidecar, e))
    }

    /// Reads a design table (16 coefficient columns, optional `cl` label column).
    /// Statistics are recomputed from the rows; the sidecar is informational.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let width = r.headers().map_err(|e| csv_error(path, e))?.len();
        if width != DESIGN_DIM && width != DESIGN_DIM + 1 {
            return Err(Error::parse(
                path,
                format!("expected {DESIGN_DIM} or {} columns, found {width}", DESIGN_DIM + 1),
            ));
        }
        let mut designs = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let values = record
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?;
            designs.push(DesignVector::from_slice(&values[..DESIGN_DIM])?);
            if width > DESIGN_DIM {
                labels.push(values[DESIGN_DIM]);
            }
        }
        let ds = DesignDataset::new(designs)?;
        if width > DESIGN_DIM {
            ds.with_labels(labels)
        } else {
            Ok(ds)
        }
    }
}

pub fn stats_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".stats.csv");
    path.with_file_name(name)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        }
    } else {
        Error::parse(path, e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of each smooth shape mode around the chosen base.
    pub mode_sigma: f64,
    /// Independent per-coefficient jitter on top of the modes.
    pub jitter: f64,
}

impl SynthesisConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        SynthesisConfig { n, seed, mode_sigma: 0.05, jitter: 0.002 }
    }
}

/// Smooth perturbation modes over the 16 coefficients: thickness, camber, and a
/// chordwise ramp shared by both surfaces. Keeping the family low-rank leaves most
/// of the coefficient space off the data manifold.
fn shape_modes() -> [[f64; DESIGN_DIM]; 3] {
    let mut modes = [[0.0; DESIGN_DIM]; 3];
    for i in 0..COEFFS_PER_SURFACE {
        let s = i as f64 / (COEFFS_PER_SURFACE - 1) as f64 - 0.5;
        let l = COEFFS_PER_SURFACE + i;
        modes[0][i] = THICKNESS_PROFILE[i];
        modes[0][l] = -THICKNESS_PROFILE[i];
        modes[1][i] = 1.0;
        modes[1][l] = 1.0;
        modes[2][i] = s;
        modes[2][l] = s;
    }
    modes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisStats {
    pub attempts: usize,
    pub accepted: usize,
}

impl SynthesisStats {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.attempts.max(1) as f64
    }
}

pub fn synthesize_dataset(n: usize, seed: u64) -> Result<DesignDataset> {
    synthesize_dataset_with(&SynthesisConfig::new(n, seed)).map(|(d, _)| d)
}

pub fn synthesize_dataset_with(config: &SynthesisConfig) -> Result<(DesignDataset, SynthesisStats)> {
    if config.n < 16 {
        return Err(Error::Config(format!("dataset needs at least 16 designs, asked for {}", config.n)));
    }
    for (name, v) in [("mode sigma", config.mode_sigma), ("jitter", config.jitter)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    let bases = base_designs();
    let modes = shape_modes();
    let mut rng = seeded(config.seed);
    let max_attempts = config.n * 100;
    let mut designs = Vec::with_capacity(config.n);
    let mut attempts = 0;
    while designs.len() < config.n {
        if attempts >= max_attempts {
            return Err(Error::Config(format!(
                "rejection rate above 99% ({} of {attempts} draws valid); check the base sections",
                designs.len()
            )));
        }
        attempts += 1;
        let base = bases[rng.random_range(0..bases.len())].to_array();
        let weights = standard_normal_vec(&mut rng, modes.len());
        let jitter = standard_normal_vec(&mut rng, DESIGN_DIM);
        let values: Vec<f64> = (0..DESIGN_DIM)
            .map(|j| {
                let smooth: f64 = modes.iter().zip(&weights).map(|(m, w)| m[j] * w).sum();
                base[j] + config.mode_sigma * smooth + config.jitter * jitter[j]
            })
            .collect();
        let candidate = DesignVector::from_slice(&values)?;
        if validate_airfoil(&candidate).valid {
            designs.push(candidate);
        }
    }
    let stats = SynthesisStats { attempts, accepted: designs.len() };
    log::info!("synthesized {} designs, acceptance rate {:.3}", designs.len(), stats.acceptance_rate());
    Ok((DesignDataset::new(designs)?, stats))
}
