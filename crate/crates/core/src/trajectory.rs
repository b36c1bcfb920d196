//! Trajectory length of a circle pushed through a network.
//!
//! A circle of `n_points` samples on a random 2-plane of input space is fed
//! through the network; each output (pre-softmax logits) is projected onto a
//! fixed orthonormal pair of output directions, and the length of the closed
//! polyline through the projected points is the trajectory length.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::nn::{forward, NetworkSpec, NnError, Parameters};
use crate::pruning::MaskSet;
use crate::rng::RngState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("probe input dimension must be at least 2, got {0}")]
    InputDimTooSmall(usize),
    #[error("probe needs at least 3 points and a positive radius (got {n_points}, {radius})")]
    InvalidProbe { n_points: usize, radius: f64 },
    #[error("basis vectors are not orthonormal")]
    NotOrthonormal,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

const ORTHO_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_orthonormal(u: &[f64], v: &[f64]) -> Result<(), TrajectoryError> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(TrajectoryError::NotOrthonormal);
    }
    let ok = dot(u, v).abs() < ORTHO_TOL && (dot(u, u) - 1.0).abs() < ORTHO_TOL && (dot(v, v) - 1.0).abs() < ORTHO_TOL;
    if ok {
        Ok(())
    } else {
        Err(TrajectoryError::NotOrthonormal)
    }
}

/// Orthonormal pair from two standard-normal vectors by Gram-Schmidt.
/// A second pass of orthogonalisation keeps `<u, v>` at rounding level.
fn random_orthonormal_pair(dim: usize, rng: &mut RngState) -> (Vec<f64>, Vec<f64>) {
    loop {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let nu = dot(&u, &u).sqrt();
        if nu < 1e-8 {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        for _ in 0..2 {
            let c = dot(&u, &v);
            v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= c * ui);
        }
        let nv = dot(&v, &v).sqrt();
        if nv < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        return (u, v);
    }
}

/// Circle `radius * (u cos t + v sin t)` sampled at `t_i = 2 pi i / n_points`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleProbe {
    n_points: usize,
    radius: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl CircleProbe {
    pub fn new(u: Vec<f64>, v: Vec<f64>, n_points: usize, radius: f64) -> Result<Self, TrajectoryError> {
        if n_points < 3 || !(radius > 0.0 && radius.is_finite()) {
            return Err(TrajectoryError::InvalidProbe { n_points, radius });
        }
        check_orthonormal(&u, &v)?;
        Ok(Self { n_points, radius, u, v })
    }

    pub fn input_dim(&self) -> usize {
        self.u.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn basis(&self) -> (&[f64], &[f64]) {
        (&self.u, &self.v)
    }

    pub fn angles(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|i| 2.0 * std::f64::consts::PI * i as f64 / self.n_points as f64)
    }

    /// All sample points, row-major `[n_points, input_dim]`.
    pub fn points(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_points * self.input_dim());
        for t in self.angles() {
            let (s, c) = t.sin_cos();
            out.extend(self.u.iter().zip(&self.v).map(|(a, b)| self.radius * (a * c + b * s)));
        }
        out
    }
}

/// Random circle probe in an `input_dim`-dimensional input space.
pub fn make_probe(input_dim: usize, n_points: usize, radius: f64, rng: &mut RngState) -> Result<CircleProbe, TrajectoryError> {
    if input_dim < 2 {
        return Err(TrajectoryError::InputDimTooSmall(input_dim));
    }
    let (u, v) = random_orthonormal_pair(input_dim, rng);
    CircleProbe::new(u, v, n_points, radius)
}

/// Orthonormal pair of output-space directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    e1: Vec<f64>,
    e2: Vec<f64>,
}

impl Projection2D {
    pub fn new(e1: Vec<f64>, e2: Vec<f64>) -> Result<Self, TrajectoryError> {
        check_orthonormal(&e1, &e2)?;
        Ok(Self { e1, e2 })
    }

    pub fn random(output_dim: usize, rng: &mut RngState) -> Result<Self, TrajectoryError> {
        if output_dim < 2 {
            return Err(TrajectoryError::DimensionMismatch(format!("output dimension {output_dim} < 2")));
        }
        let (e1, e2) = random_orthonormal_pair(output_dim, rng);
        Ok(Self { e1, e2 })
    }

    /// The first two coordinate axes.
    pub fn axes(output_dim: usize) -> Result<Self, TrajectoryError> {
        if output_dim < 2 {
            return Err(TrajectoryError::DimensionMismatch(format!("output dimension {output_dim} < 2")));
        }
        let mut e1 = vec![0.0; output_dim];
        let mut e2 = vec![0.0; output_dim];
        e1[0] = 1.0;
        e2[1] = 1.0;
        Ok(Self { e1, e2 })
    }

    pub fn dim(&self) -> usize {
        self.e1.len()
    }

    pub fn project(&self, y: &[f64]) -> [f64; 2] {
        [dot(&self.e1, y), dot(&self.e2, y)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub length: f64,
    pub points: Vec<[f64; 2]>,
}

impl TrajectoryResult {
    /// Write `t,p1,p2` rows with a header line.
    pub fn write_csv<W: Write>(&self, probe: &CircleProbe, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,p1,p2")?;
        for (t, p) in probe.angles().zip(&self.points) {
            writeln!(out, "{t},{},{}", p[0], p[1])?;
        }
        Ok(())
    }
}

/// Sum of segment lengths, including the closing segment when `closed`.
pub fn polyline_length(points: &[[f64; 2]], closed: bool) -> f64 {
    let seg = |a: &[f64; 2], b: &[f64; 2]| (b[0] - a[0]).hypot(b[1] - a[1]);
    let open: f64 = points.windows(2).map(|w| seg(&w[0], &w[1])).sum();
    match (closed, points.first(), points.last()) {
        (true, Some(first), Some(last)) if points.len() > 1 => open + seg(last, first),
        _ => open,
    }
}

/// Trajectory length of `probe` through the masked network, measured on the
/// logits projected by `proj`.
pub fn measure(
    spec: &NetworkSpec,
    params: &Parameters,
    mask: &MaskSet,
    probe: &CircleProbe,
    proj: &Projection2D,
) -> Result<TrajectoryResult, TrajectoryError> {
    if probe.input_dim() != spec.input_len() {
        return Err(TrajectoryError::DimensionMismatch(format!(
            "probe lives in {} dimensions, network input has {}",
            probe.input_dim(),
            spec.input_len()
        )));
    }
    if proj.dim() != spec.num_classes() {
        return Err(TrajectoryError::DimensionMismatch(format!(
            "projection is {}-dimensional, network has {} outputs",
            proj.dim(),
            spec.num_classes()
        )));
    }
    let logits = forward(spec, params, mask, &probe.points())?;
    let points: Vec<[f64; 2]> = logits.chunks(spec.num_classes()).map(|y| proj.project(y)).collect();
    let length = polyline_length(&points, true);
    Ok(TrajectoryResult { length, points })
}
