//! Analysis instruments: gradient alignment, uncertainty along trajectories
//! and the gap between achieved and desired physical loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{Trajectory, VelocityModel};
use crate::geometry::DesignVector;
use crate::linalg::{dot, norm};
use crate::loss::DesignLoss;
use crate::physics::SurrogateModel;
use crate::rng::split_seed;
use crate::stats::NormStats;

/// Scores below this norm are undefined.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

/// Sign applied to `∇L` to obtain the physics direction `g^p`. Guidance
/// subtracts `λ∇E`, so the applied direction is `−∇L` and a negative score
/// means the flow drift opposes the physics update.
pub const GUIDANCE_SIGN: f64 = -1.0;

/// Cosine of the angle between `a` and `b`; `None` when either is (nearly) zero.
pub fn alignment_score(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "alignment needs equal dimensions");
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_GRADIENT_NORM || nb < MIN_GRADIENT_NORM {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub step: usize,
    pub t: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub points: Vec<AlignmentPoint>,
}

impl AlignmentSeries {
    pub fn defined(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().filter_map(|p| p.score.map(|s| (p.t, s)))
    }

    /// Negative share of the defined scores with `t > t_min`; `None` if there are none.
    pub fn negative_fraction_after(&self, t_min: f64) -> Option<f64> {
        let (neg, total) = self
            .defined()
            .filter(|(t, _)| *t > t_min)
            .fold((0usize, 0usize), |(n, c), (_, s)| (n + usize::from(s < 0.0), c + 1));
        (total > 0).then(|| neg as f64 / total as f64)
    }
}

/// Alignment of the drift `u(x_i, t_i)` with `GUIDANCE_SIGN·∇L(x_i)` along a
/// trajectory, both in normalized coordinates. With a cutoff only steps at
/// `t_i ≥ t_c` are reported.
pub fn trajectory_alignment(
    model: &VelocityModel,
    loss: &dyn DesignLoss,
    trajectory: &Trajectory,
    cutoff: Option<f64>,
) -> Result<AlignmentSeries> {
    let mut points = Vec::new();
    for i in 0..trajectory.steps {
        let t = trajectory.time(i);
        if cutoff.is_some_and(|tc| t < tc) {
            continue;
        }
        let x = &trajectory.states[i];
        let u = model.velocity(x, t, None)?;
        let (_, g_raw) = loss.loss_and_gradient(&model.stats.denormalize(x))?;
        let gp: Vec<f64> = model.stats.gradient_to_normalized(&g_raw).iter().map(|g| GUIDANCE_SIGN * g).collect();
        points.push(AlignmentPoint { step: i, t, score: alignment_score(&u, &gp) });
    }
    Ok(AlignmentSeries { points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UqSettings {
    pub n_passes: usize,
    pub rate: f64,
    /// Number of evenly spaced grid points profiled per trajectory.
    pub points: usize,
}

impl Default for UqSettings {
    fn default() -> Self {
        UqSettings { n_passes: 20, rate: 0.01, points: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqStep {
    pub step: usize,
    pub t: f64,
    /// One σ per trajectory.
    pub sigmas: Vec<f64>,
}

impl UqStep {
    pub fn mean(&self) -> f64 {
        self.sigmas.iter().sum::<f64>() / self.sigmas.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqProfile {
    pub steps: Vec<UqStep>,
    /// Mean σ over the reference designs.
    pub reference: f64,
    pub batch: usize,
}

/// `points` grid indices spread evenly over `0..=steps`, endpoints included.
pub fn profile_steps(steps: usize, points: usize) -> Vec<usize> {
    if points <= 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> =
        (0..points).map(|j| ((j * steps) as f64 / (points - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// Per-design σ over `designs`; design `j` uses seed `split_seed(seed, j)`.
pub fn design_sigmas(
    surrogate: &SurrogateModel,
    designs: &[DesignVector],
    settings: &UqSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    designs
        .iter()
        .enumerate()
        .map(|(j, d)| Ok(surrogate.uq(d, settings.n_passes, settings.rate, split_seed(seed, j as u64))?.sigma))
        .collect()
}

/// Mean σ over `designs` (the reference line).
pub fn uq_reference(
    surrogate: &SurrogateModel,
    designs: &[DesignVector],
    settings: &UqSettings,
    seed: u64,
) -> Result<f64> {
    if designs.is_empty() {
        return Err(Error::Config("UQ reference needs at least one design".into()));
    }
    let s = design_sigmas(surrogate, designs, settings, seed)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// σ of the surrogate at evenly spaced grid points of each trajectory, with the
/// intermediates de-normalized through `stats` before evaluation.
pub fn trajectory_uq_profile(
    surrogate: &SurrogateModel,
    stats: &NormStats,
    trajectories: &[Trajectory],
    settings: &UqSettings,
    seed: u64,
    reference: f64,
) -> Result<UqProfile> {
    let first = trajectories.first().ok_or_else(|| Error::Config("UQ profile needs at least one trajectory".into()))?;
    if trajectories.iter().any(|t| t.steps != first.steps) {
        return Err(Error::Config("trajectories do not share a time grid".into()));
    }
    let grid = profile_steps(first.steps, settings.points);
    let mut steps = Vec::with_capacity(grid.len());
    for &i in &grid {
        let sigmas = trajectories
            .iter()
            .enumerate()
            .map(|(k, tr)| {
                let design = DesignVector::from_slice(&stats.denormalize(&tr.states[i]))?;
                let s = split_seed(split_seed(seed, k as u64), i as u64);
                Ok(surrogate.uq(&design, settings.n_passes, settings.rate, s)?.sigma)
            })
            .collect::<Result<Vec<f64>>>()?;
        steps.push(UqStep { step: i, t: first.time(i), sigmas });
    }
    Ok(UqProfile { steps, reference, batch: trajectories.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsyncGapReport {
    pub l_uncon: f64,
    pub l_achieved: f64,
    pub l_desired: f64,
    pub gap: f64,
    pub synchronized: bool,
    /// Set when either run set had no successful member; the loss fields are then NaN.
    pub failed: bool,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median final losses of guided and unconditional runs against a desired level.
/// `None` entries are failed runs.
pub fn async_gap(guided: &[Option<f64>], unconditional: &[Option<f64>], desired: f64) -> Result<AsyncGapReport> {
    if guided.is_empty() || unconditional.is_empty() {
        return Err(Error::Config("gap analysis needs non-empty run sets".into()));
    }
    let ok = |runs: &[Option<f64>]| median(&runs.iter().flatten().copied().collect::<Vec<_>>());
    match (ok(guided), ok(unconditional)) {
        (Some(l_achieved), Some(l_uncon)) => {
            let gap = l_achieved - desired;
            Ok(AsyncGapReport { l_uncon, l_achieved, l_desired: desired, gap, synchronized: gap <= 0.0, failed: false })
        }
        _ => Ok(AsyncGapReport {
            l_uncon: f64::NAN,
            l_achieved: f64::NAN,
            l_desired: desired,
            gap: f64::NAN,
            synchronized: false,
            failed: true,
        }),
    }
}

/// Six significant digits, shortest form; exponent notation outside `[1e-4, 1e15)`.
pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    if (1e-4..1e15).contains(&rounded.abs()) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| crate::geometry::csv_error(path, e))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tidy table: `run_id,step,t,score,defined`.
pub fn write_alignment_csv(path: &Path, runs: &[(usize, AlignmentSeries)]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| crate::geometry::csv_error(path, e);
    w.write_record(["run_id", "step", "t", "score", "defined"]).map_err(err)?;
    for (id, series) in runs {
        for p in &series.points {
            w.write_record([
                id.to_string(),
                p.step.to_string(),
                format_number(p.t),
                p.score.map(format_number).unwrap_or_default(),
                p.score.is_some().to_string(),
            ])
            .map_err(err)?;
        }
    }
    finish(path, w)
}

/// Tidy table: `step,t,sample_id,sigma`.
pub fn write_uq_csv(path: &Path, profile: &UqProfile) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| crate::geometry::csv_error(path, e);
    w.write_record(["step", "t", "sample_id", "sigma"]).map_err(err)?;
    for s in &profile.steps {
        for (k, sigma) in s.sigmas.iter().enumerate() {
            w.write_record([s.step.to_string(), format_number(s.t), k.to_string(), format_number(*sigma)])
                .map_err(err)?;
        }
    }
    finish(path, w)
}

/// Tidy table: `strategy,L_uncon,L_achieved,L_desired,synchronized`.
pub fn write_gap_csv(path: &Path, rows: &[(String, AsyncGapReport)]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| crate::geometry::csv_error(path, e);
    w.write_record(["strategy", "L_uncon", "L_achieved", "L_desired", "synchronized"]).map_err(err)?;
    for (name, g) in rows {
        w.write_record([
            name.clone(),
            format_number(g.l_uncon),
            format_number(g.l_achieved),
            format_number(g.l_desired),
            if g.failed { "Fail".to_string() } else { g.synchronized.to_string() },
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::sample_unconditional;
    use crate::loss::QuadraticLoss;
    use crate::nn::{Activation, NetworkParams};
    use crate::rng::gaussian_noise;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let v = [0.3, -1.2, 2.0];
        let twice: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((alignment_score(&v, &twice).unwrap() - 1.0).abs() < 1e-15);
        assert!((alignment_score(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(alignment_score(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(alignment_score(&[0.0, 0.0], &[0.0, 1.0]), None);
        assert_eq!(alignment_score(&[1.0, 0.0], &[1e-13, 0.0]), None);
    }

    proptest! {
        #[test]
        fn score_bounds_and_symmetry(a in prop::collection::vec(-10.0f64..10.0, 4), b in prop::collection::vec(-10.0f64..10.0, 4), c in -5.0f64..5.0) {
            let s = alignment_score(&a, &b);
            prop_assert_eq!(s, alignment_score(&b, &a));
            if let Some(s) = s {
                prop_assert!((-1.0..=1.0).contains(&s));
                if c.abs() > 1e-3 {
                    let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
                    let sc = alignment_score(&ca, &b).unwrap();
                    prop_assert!((sc - c.signum() * s).abs() < 1e-12);
                }
            }
        }
    }

    /// Linear field `u(x) = k·x` in identity coordinates; `∇‖x‖² = 2x`.
    fn scaled_identity_field(d: usize, k: f64) -> VelocityModel {
        let mut w = vec![0.0; d * (d + 1)];
        for r in 0..d {
            w[r * (d + 1) + r] = k;
        }
        let net = NetworkParams::from_parts(vec![d + 1, d], Activation::Identity, vec![w], vec![vec![0.0; d]]).unwrap();
        VelocityModel::new(net, NormStats::identity(d), None).unwrap()
    }

    #[test]
    fn rigged_fields_give_extreme_scores() {
        let loss = QuadraticLoss::new(vec![0.0; 3]);
        let x0 = gaussian_noise(3, 4);
        // u = −∇L points along the applied guidance direction.
        let along = scaled_identity_field(3, -2.0);
        let tr = sample_unconditional(&along, 20, &x0, None).unwrap();
        let s = trajectory_alignment(&along, &loss, &tr, None).unwrap();
        assert_eq!(s.points.len(), 20);
        assert!(s.defined().all(|(_, v)| (v - 1.0).abs() < 1e-12));
        let against = scaled_identity_field(3, 2.0);
        let tr = sample_unconditional(&against, 20, &x0, None).unwrap();
        let s = trajectory_alignment(&against, &loss, &tr, None).unwrap();
        assert!(s.defined().all(|(_, v)| (v + 1.0).abs() < 1e-12));
        assert_eq!(s.negative_fraction_after(0.0), Some(1.0));
    }

    #[test]
    fn zero_gradient_gives_missing_scores() {
        let m = scaled_identity_field(2, 1.0);
        let loss = QuadraticLoss::new(vec![0.0, 0.0]);
        // State stays at the optimum: u(0) = 0 and ∇L(0) = 0.
        let tr = sample_unconditional(&m, 10, &[0.0, 0.0], None).unwrap();
        let s = trajectory_alignment(&m, &loss, &tr, None).unwrap();
        assert!(s.points.iter().all(|p| p.score.is_none()));
        assert_eq!(s.negative_fraction_after(0.0), None);
    }

    #[test]
    fn cutoff_restricts_series() {
        let m = scaled_identity_field(2, 1.0);
        let loss = QuadraticLoss::new(vec![1.0, 1.0]);
        let tr = sample_unconditional(&m, 10, &[0.5, 0.2], None).unwrap();
        let s = trajectory_alignment(&m, &loss, &tr, Some(0.6)).unwrap();
        assert_eq!(s.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![6, 7, 8, 9]);
    }

    #[test]
    fn profile_grid() {
        assert_eq!(profile_steps(1000, 12).len(), 12);
        assert_eq!(profile_steps(1000, 12)[0], 0);
        assert_eq!(*profile_steps(1000, 12).last().unwrap(), 1000);
        assert_eq!(profile_steps(5, 12), vec![0, 1, 2, 3, 4, 5]);
    }

    fn small_surrogate() -> SurrogateModel {
        let net = NetworkParams::init(&[16, 32, 1], Activation::Tanh, 3).unwrap();
        SurrogateModel::new(net, NormStats::identity(16), 0.01).unwrap()
    }

    #[test]
    fn uq_profile_contract() {
        let sur = small_surrogate();
        let field = VelocityModel::zero(NormStats::identity(16), &[4]).unwrap();
        let trs: Vec<Trajectory> =
            (0..3).map(|i| sample_unconditional(&field, 30, &gaussian_noise(16, i), None).unwrap()).collect();
        let zero = UqSettings { rate: 0.0, ..Default::default() };
        let p = trajectory_uq_profile(&sur, &field.stats, &trs, &zero, 1, 0.0).unwrap();
        assert_eq!(p.steps.len(), 12);
        assert_eq!(p.batch, 3);
        assert!(p.steps.iter().all(|s| s.sigmas.iter().all(|&v| v == 0.0)));

        let settings = UqSettings { rate: 0.2, ..Default::default() };
        let a = trajectory_uq_profile(&sur, &field.stats, &trs, &settings, 9, 0.0).unwrap();
        let b = trajectory_uq_profile(&sur, &field.stats, &trs, &settings, 9, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(a.steps.iter().flat_map(|s| &s.sigmas).all(|&v| v >= 0.0));

        let other = sample_unconditional(&field, 31, &gaussian_noise(16, 0), None).unwrap();
        let mixed = vec![trs[0].clone(), other];
        assert!(matches!(trajectory_uq_profile(&sur, &field.stats, &mixed, &settings, 1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn reference_is_self_consistent() {
        let sur = small_surrogate();
        let designs: Vec<DesignVector> =
            (0..10).map(|i| DesignVector::from_slice(&gaussian_noise(16, 50 + i)).unwrap()).collect();
        let settings = UqSettings { rate: 0.1, ..Default::default() };
        let sig = design_sigmas(&sur, &designs, &settings, 4).unwrap();
        let r = uq_reference(&sur, &designs, &settings, 4).unwrap();
        assert_eq!(r, sig.iter().sum::<f64>() / sig.len() as f64);
    }

    #[test]
    fn gap_examples() {
        let runs = [Some(0.3), Some(0.1), None, Some(0.2)];
        let g = async_gap(&runs, &runs, 0.05).unwrap();
        assert_eq!(g.l_achieved, g.l_uncon);
        assert_eq!(g.l_achieved, 0.2);
        assert!(!g.synchronized);
        assert!(async_gap(&runs, &runs, f64::INFINITY).unwrap().synchronized);
        let failed = async_gap(&[None, None], &runs, 0.1).unwrap();
        assert!(failed.failed && failed.l_achieved.is_nan());
        assert!(async_gap(&[], &runs, 0.1).is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(0.0716), "0.0716");
        assert_eq!(format_number(4.8e-8), "4.8e-8");
        assert_eq!(format_number(0.69912345678), "0.699123");
        assert_eq!(format_number(-123456789.0), "-123457000");
        assert_eq!(format_number(0.0), "0");
        assert_eq!(format_number(f64::NAN), "NaN");
        assert_eq!(format_number(1.0), "1");
    }

    #[test]
    fn tables_are_written_with_headers() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("align.csv");
        write_alignment_csv(&a, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&a).unwrap(), "run_id,step,t,score,defined\n");
        let series = AlignmentSeries {
            points: vec![
                AlignmentPoint { step: 0, t: 0.0, score: None },
                AlignmentPoint { step: 1, t: 0.5, score: Some(-0.25) },
            ],
        };
        write_alignment_csv(&a, &[(3, series)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&a).unwrap(),
            "run_id,step,t,score,defined\n3,0,0,,false\n3,1,0.5,-0.25,true\n"
        );
        let g = dir.path().join("gap.csv");
        write_gap_csv(&g, &[("energy".into(), async_gap(&[Some(0.5)], &[Some(1.0)], 0.1).unwrap())]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&g).unwrap(),
            "strategy,L_uncon,L_achieved,L_desired,synchronized\nenergy,1,0.5,0.1,false\n"
        );
        let u = dir.path().join("uq.csv");
        write_uq_csv(&u, &UqProfile { steps: vec![], reference: 0.0, batch: 0 }).unwrap();
        assert_eq!(std::fs::read_to_string(&u).unwrap(), "step,t,sample_id,sigma\n");
        assert!(matches!(
            write_uq_csv(&dir.path().join("missing/uq.csv"), &UqProfile { steps: vec![], reference: 0.0, batch: 0 }),
            Err(Error::Io { .. })
        ));
    }
}
