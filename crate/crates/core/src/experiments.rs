//! Benchmark problems, fine-mesh reference solutions, error norms and the
//! spatial, resonance and temporal convergence studies built on them.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fem::{mini_evaluate, mini_evaluate_in, mini_gradient, ElementGeometry, FemError, MiniLayout, TriangleRule};
use crate::mesh::{build_rect_mesh, BoundaryTag, Mesh, MeshError, Point2, Rect, Region, SideTags};
use crate::msfem::{build_ms_space, MsfemError};
use crate::solver::{
    CoupledProblem, CoupledSolver, DarcySpace, DarcySpaceKind, DarcyStepper, PhysParams, RunOutput, SchemeConfig,
    SolverError, StateVector,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown example {0}; expected 1, 2 or 3")]
    UnknownExample(u32),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("solutions at different times: {numerical} vs {reference}")]
    TimeMismatch { numerical: f64, reference: f64 },
    #[error("{what} needs {requested} unknowns, over the budget of {budget}")]
    BudgetExceeded { what: String, requested: usize, budget: usize },
    #[error("a study needs at least {needed} levels, got {got}")]
    TooFewLevels { needed: usize, got: usize },
    #[error("time steps must halve: {0} is followed by {1}")]
    NotHalving(f64, f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Msfem(#[from] MsfemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Scalar permeability families used by the examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum PermeabilityField {
    /// `1 / ((2 + P sin 2πx/ε)(2 + P cos 2πy/ε))`.
    Separable {
        eps: f64,
        amplitude: f64,
    },
    /// `1 / (4 + P (sin 2πx/ε + sin 2πy/ε))`.
    Inseparable {
        eps: f64,
        amplitude: f64,
    },
    /// `(2 + P sin 2πx/ε)/(2 + P cos 2πy/ε) + (2 + P sin 2πy/ε)/(2 + P cos 2πx/ε)`.
    CavitySum {
        eps: f64,
        amplitude: f64,
    },
    Constant {
        value: f64,
    },
}

impl PermeabilityField {
    pub fn eval(&self, p: Point2<f64>) -> f64 {
        let waves = |eps: f64| (2.0 * PI * p.x / eps, 2.0 * PI * p.y / eps);
        match *self {
            PermeabilityField::Separable { eps, amplitude: a } => {
                let (x, y) = waves(eps);
                1.0 / ((2.0 + a * x.sin()) * (2.0 + a * y.cos()))
            }
            PermeabilityField::Inseparable { eps, amplitude: a } => {
                let (x, y) = waves(eps);
                1.0 / (4.0 + a * (x.sin() + y.sin()))
            }
            PermeabilityField::CavitySum { eps, amplitude: a } => {
                let (x, y) = waves(eps);
                (2.0 + a * x.sin()) / (2.0 + a * y.cos()) + (2.0 + a * y.sin()) / (2.0 + a * x.cos())
            }
            PermeabilityField::Constant { value } => value,
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match *self {
            PermeabilityField::Separable { eps, .. }
            | PermeabilityField::Inseparable { eps, .. }
            | PermeabilityField::CavitySum { eps, .. } => Some(eps),
            PermeabilityField::Constant { .. } => None,
        }
    }

    /// Smallest and largest value on a `(n+1)²` sample lattice of `rect`.
    pub fn sample_range(&self, rect: &Rect<f64>, n: usize) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let p = Point2::new(
                    rect.x0 + rect.width() * i as f64 / n as f64,
                    rect.y0 + rect.height() * j as f64 / n as f64,
                );
                let k = self.eval(p);
                lo = lo.min(k);
                hi = hi.max(k);
            }
        }
        (lo, hi)
    }

    pub fn check_positive(&self, rect: &Rect<f64>) -> Result<()> {
        let (lo, hi) = self.sample_range(rect, 400);
        if !(lo > 0.0 && hi.is_finite()) {
            return Err(ExperimentError::InvalidParameter(format!(
                "permeability not positive and bounded: range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// A fully specified coupled problem on two stacked rectangles.
#[derive(Clone)]
pub struct ExampleDef {
    pub id: u32,
    pub fluid: Rect<f64>,
    pub porous: Rect<f64>,
    pub permeability: PermeabilityField,
    pub problem: CoupledProblem<f64>,
    pub t_final: f64,
}

/// Adjustments applied on top of an example's published data.
#[derive(Clone, Debug, Default)]
pub struct ExampleOverrides {
    pub amplitude: Option<f64>,
    pub permeability: Option<PermeabilityField>,
    pub t_final: Option<f64>,
    pub params: Option<PhysParams<f64>>,
    /// Zero wall data for `t > 0` (lid withdrawal in the cavity example).
    pub homogeneous_walls: bool,
    /// Drop both source terms.
    pub zero_forcing: bool,
}

/// Builds example 1, 2 or 3 with period `eps`.
pub fn define_example(id: u32, eps: f64, overrides: &ExampleOverrides) -> Result<ExampleDef> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ExperimentError::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let amplitude = |default: f64| overrides.amplitude.unwrap_or(default);
    let (fluid, porous, field) = match id {
        1 => (
            Rect::new(0.0, 1.0, 1.0, 2.0)?,
            Rect::new(0.0, 1.0, 0.0, 1.0)?,
            PermeabilityField::Separable { eps, amplitude: amplitude(1.5) },
        ),
        2 => (
            Rect::new(0.0, 1.0, 1.0, 2.0)?,
            Rect::new(0.0, 1.0, 0.0, 1.0)?,
            PermeabilityField::Inseparable { eps, amplitude: amplitude(1.8) },
        ),
        3 => (
            Rect::new(0.0, 1.0, 1.0, 1.25)?,
            Rect::new(0.0, 1.0, 0.25, 1.0)?,
            PermeabilityField::CavitySum { eps, amplitude: amplitude(1.5) },
        ),
        _ => return Err(ExperimentError::UnknownExample(id)),
    };
    let field = overrides.permeability.unwrap_or(field);
    field.check_positive(&porous)?;
    let mut problem = CoupledProblem::zero();
    problem.params = overrides.params.unwrap_or_else(PhysParams::unit);
    problem.params.validate()?;
    problem.permeability = Arc::new(move |p| field.eval(p));
    match id {
        1 | 2 => {
            let u0 = |p: Point2<f64>| [(1.0 - 2.0 * p.x) * (p.y - 1.0), p.x * (p.x - 1.0) + (p.y - 1.0).powi(2)];
            problem.u0 = Arc::new(u0);
            problem.u_wall = Arc::new(move |p, t| u0(p).map(|v| v * t.cos()));
            problem.f_fluid = Arc::new(|p, t| {
                let (x, y) = (p.x, p.y);
                [
                    (1.0 - 2.0 * x) * (y - 1.0) * (t.cos() - t.sin()),
                    -(x * (x - 1.0) + (y - 1.0).powi(2)) * t.sin() + (x * (1.0 - x) + (y + 1.0) * (y - 3.0)) * t.cos(),
                ]
            });
            problem.f_porous = Arc::new(|_, t| t);
            problem.f_porous_separable = Some((Arc::new(|t| t), Arc::new(|_| 1.0)));
        }
        _ => {
            problem.u0 = Arc::new(|p| [(PI * p.x).sin(), 0.0]);
            let top = fluid.y1;
            problem.u_wall =
                Arc::new(move |p, _| if (p.y - top).abs() < 1e-12 { [(PI * p.x).sin(), 0.0] } else { [0.0, 0.0] });
        }
    }
    if overrides.homogeneous_walls {
        problem.u_wall = Arc::new(|_, _| [0.0, 0.0]);
        problem.phi_wall = Arc::new(|_, _| 0.0);
    }
    if overrides.zero_forcing {
        problem.f_fluid = Arc::new(|_, _| [0.0, 0.0]);
        problem.f_porous = Arc::new(|_, _| 0.0);
        problem.f_porous_separable = None;
    }
    let t_final = overrides.t_final.unwrap_or(1.0);
    Ok(ExampleDef { id, fluid, porous, permeability: field, problem, t_final })
}

fn cells(len: f64, h: f64) -> Result<usize> {
    let n = (len / h).round();
    if !(h > 0.0) || n < 1.0 || (n * h - len).abs() > 1e-9 * len {
        return Err(ExperimentError::InvalidParameter(format!("mesh size {h} does not divide length {len}")));
    }
    Ok(n as usize)
}

impl ExampleDef {
    pub fn fluid_mesh(&self, h: f64) -> Result<Mesh<f64>> {
        let r = self.fluid;
        Ok(build_rect_mesh(
            r,
            cells(r.width(), h)?,
            cells(r.height(), h)?,
            Region::Fluid,
            SideTags::fluid_above_interface(),
        )?)
    }

    pub fn porous_mesh(&self, h: f64) -> Result<Mesh<f64>> {
        let r = self.porous;
        Ok(build_rect_mesh(
            r,
            cells(r.width(), h)?,
            cells(r.height(), h)?,
            Region::Porous,
            SideTags::porous_below_interface(),
        )?)
    }

    pub fn eps(&self) -> Option<f64> {
        self.permeability.eps()
    }

    /// Coarse Darcy space of the requested kind on a porous mesh.
    pub fn darcy_space(&self, porous: &Mesh<f64>, kind: DarcySpaceKind, nsplit: usize) -> Result<DarcySpace<f64>> {
        let field = self.permeability;
        let k = move |p: Point2<f64>| field.eval(p);
        Ok(match kind {
            DarcySpaceKind::MsFem => DarcySpace::MsFem(Arc::new(build_ms_space(porous, &k, nsplit)?)),
            DarcySpaceKind::P1 => DarcySpace::p1(porous, k)?,
        })
    }
}

/// Hex SHA-256 of vertex coordinates and connectivity.
pub fn mesh_hash(mesh: &Mesh<f64>) -> String {
    let mut h = Sha256::new();
    for v in &mesh.vertices {
        h.update(v.x.to_le_bytes());
        h.update(v.y.to_le_bytes());
    }
    for t in &mesh.triangles {
        for &i in t {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Norms of a velocity/head pair: L2, H1 seminorm and full H1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Norms {
    pub u_l2: f64,
    pub u_h1_semi: f64,
    pub u_h1: f64,
    pub phi_l2: f64,
    pub phi_h1_semi: f64,
    pub phi_h1: f64,
}

impl Norms {
    fn from_squares(u0: f64, u1: f64, p0: f64, p1: f64) -> Self {
        Self {
            u_l2: u0.sqrt(),
            u_h1_semi: u1.sqrt(),
            u_h1: (u0 + u1).sqrt(),
            phi_l2: p0.sqrt(),
            phi_h1_semi: p1.sqrt(),
            phi_h1: (p0 + p1).sqrt(),
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [self.u_l2, self.u_h1_semi, self.u_h1, self.phi_l2, self.phi_h1_semi, self.phi_h1]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self { u_l2: a[0], u_h1_semi: a[1], u_h1: a[2], phi_l2: a[3], phi_h1_semi: a[4], phi_h1: a[5] }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let (a, b) = (self.as_array(), other.as_array());
        Self::from_array(std::array::from_fn(|i| f(a[i], b[i])))
    }
}

/// A discrete solution together with the spaces that interpret it.
#[derive(Clone, Copy)]
pub struct DiscreteSolution<'a> {
    pub fluid: &'a Mesh<f64>,
    pub darcy: &'a DarcySpace<f64>,
    pub state: &'a StateVector<f64>,
}

/// Error norms of `numerical` against `reference` by quadrature on the
/// reference meshes: at every quadrature point the reference field is
/// evaluated in its own element and the numerical one by point location.
pub fn compute_errors(numerical: DiscreteSolution<'_>, reference: DiscreteSolution<'_>) -> Result<Norms> {
    let (tn, tr) = (numerical.state.t, reference.state.t);
    if (tn - tr).abs() > 1e-9 * tr.abs().max(1.0) {
        return Err(ExperimentError::TimeMismatch { numerical: tn, reference: tr });
    }
    let rule = TriangleRule::<f64>::seven_point();
    let nl = MiniLayout::for_mesh(numerical.fluid);
    let rl = MiniLayout::for_mesh(reference.fluid);
    let rf = reference.fluid;
    let vel: Vec<[f64; 2]> = (0..rf.num_triangles())
        .into_par_iter()
        .map(|t| -> Result<[f64; 2]> {
            let g = ElementGeometry::new(rf.triangle_points(t));
            let mut acc = [0.0; 2];
            for (lam, w) in rule.iter() {
                let (ur, gr) = mini_evaluate_in(rf, &rl, &reference.state.u, t, lam);
                let (un, gn) = mini_evaluate(numerical.fluid, &nl, &numerical.state.u, g.map(lam))?;
                let wj = w * g.jacobian();
                acc[0] += wj * ((ur[0] - un[0]).powi(2) + (ur[1] - un[1]).powi(2));
                acc[1] += wj
                    * (0..2)
                        .flat_map(|c| (0..2).map(move |d| (c, d)))
                        .map(|(c, d)| (gr[c][d] - gn[c][d]).powi(2))
                        .sum::<f64>();
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let rp = reference.darcy.mesh();
    let head: Vec<[f64; 2]> = (0..rp.num_triangles())
        .into_par_iter()
        .map(|t| -> Result<[f64; 2]> {
            let g = ElementGeometry::new(rp.triangle_points(t));
            let mut acc = [0.0; 2];
            for (lam, w) in rule.iter() {
                let x = g.map(lam);
                let (pr, gr) = reference.darcy.evaluate(&reference.state.phi, x)?;
                let (pn, gn) = numerical.darcy.evaluate(&numerical.state.phi, x)?;
                let wj = w * g.jacobian();
                acc[0] += wj * (pr - pn).powi(2);
                acc[1] += wj * ((gr[0] - gn[0]).powi(2) + (gr[1] - gn[1]).powi(2));
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let sum = |v: &[[f64; 2]], i: usize| v.iter().map(|a| a[i]).sum::<f64>();
    Ok(Norms::from_squares(sum(&vel, 0), sum(&vel, 1), sum(&head, 0), sum(&head, 1)))
}

/// Resolution and resource limits of a reference solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceConfig {
    pub h_stokes: f64,
    pub h_darcy: f64,
    pub dt: f64,
    /// Upper bound on Stokes plus Darcy unknowns.
    pub max_dofs: usize,
}

pub const DEFAULT_MAX_DOFS: usize = 2_000_000;

impl ReferenceConfig {
    /// `h_S = 1/256` and `h_D = min(1/512, 2^-k ≤ ε/8)`.
    pub fn for_eps(eps: Option<f64>, dt: f64) -> Self {
        let mut h_darcy = 1.0 / 512.0;
        if let Some(e) = eps {
            while h_darcy > e / 8.0 {
                h_darcy /= 2.0;
            }
        }
        Self { h_stokes: 1.0 / 256.0, h_darcy, dt, max_dofs: DEFAULT_MAX_DOFS }
    }

    pub fn coarsened(&self) -> Self {
        Self { h_stokes: 2.0 * self.h_stokes, h_darcy: 2.0 * self.h_darcy, ..*self }
    }
}

/// Terminal state of a fine-mesh MINI/P1 solve and the meshes needed to
/// evaluate it.
pub struct ReferenceSolution {
    pub config: ReferenceConfig,
    pub fluid: Mesh<f64>,
    pub darcy: DarcySpace<f64>,
    pub state: StateVector<f64>,
    pub max_divergence: f64,
}

impl ReferenceSolution {
    pub fn as_discrete(&self) -> DiscreteSolution<'_> {
        DiscreteSolution { fluid: &self.fluid, darcy: &self.darcy, state: &self.state }
    }
}

fn stokes_unknowns(mesh: &Mesh<f64>) -> usize {
    3 * mesh.num_vertices() + 2 * mesh.num_triangles()
}

/// Linear-element reference solve on fine meshes. The Darcy mesh must
/// resolve the permeability period (`h_D ≤ ε/8`).
pub fn reference_solve(example: &ExampleDef, cfg: &ReferenceConfig) -> Result<ReferenceSolution> {
    if let Some(eps) = example.eps() {
        if cfg.h_darcy > eps / 8.0 * (1.0 + 1e-12) {
            return Err(ExperimentError::InvalidParameter(format!(
                "reference h_D = {} does not resolve eps = {eps} (needs h_D <= eps/8)",
                cfg.h_darcy
            )));
        }
    }
    let fluid = example.fluid_mesh(cfg.h_stokes)?;
    let porous = example.porous_mesh(cfg.h_darcy)?;
    let requested = stokes_unknowns(&fluid) + porous.num_vertices();
    if requested > cfg.max_dofs {
        return Err(ExperimentError::BudgetExceeded {
            what: "reference solve".into(),
            requested,
            budget: cfg.max_dofs,
        });
    }
    solve_on(example, fluid, porous, cfg)
}

fn solve_on(
    example: &ExampleDef,
    fluid: Mesh<f64>,
    porous: Mesh<f64>,
    cfg: &ReferenceConfig,
) -> Result<ReferenceSolution> {
    let darcy = example.darcy_space(&porous, DarcySpaceKind::P1, 1)?;
    let config = SchemeConfig {
        dt: cfg.dt,
        t_final: example.t_final,
        darcy_space: DarcySpaceKind::P1,
        h: cfg.h_darcy,
        nsplit: 1,
        stability_monitor: false,
    };
    let solver = CoupledSolver::new(example.problem.clone(), fluid, darcy, config)?;
    let out = solver.run(None)?;
    let max_divergence = out.divergence.iter().copied().fold(0.0, f64::max);
    let (fluid, darcy) = solver.into_parts();
    Ok(ReferenceSolution { config: *cfg, fluid, darcy, state: out.final_state, max_divergence })
}

/// Differences between the reference and a solve on meshes twice as
/// coarse. Since the error of the coarser solve dominates, this
/// overestimates the reference's own error.
pub fn reference_self_difference(example: &ExampleDef, reference: &ReferenceSolution) -> Result<Norms> {
    let cfg = reference.config.coarsened();
    let coarse = solve_on(example, example.fluid_mesh(cfg.h_stokes)?, example.porous_mesh(cfg.h_darcy)?, &cfg)?;
    compute_errors(coarse.as_discrete(), reference.as_discrete())
}

/// How the multiscale fine resolution follows the coarse mesh size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum NsplitPolicy {
    /// Fixed global fine spacing: `nsplit = h / h_fine`.
    FixedFine { h_fine: f64 },
    /// Same number of fine intervals per coarse edge at every `h`.
    Fixed { nsplit: usize },
}

impl NsplitPolicy {
    pub fn nsplit(&self, h: f64) -> Result<usize> {
        match *self {
            NsplitPolicy::FixedFine { h_fine } => cells(h, h_fine),
            NsplitPolicy::Fixed { nsplit } if nsplit >= 1 => Ok(nsplit),
            NsplitPolicy::Fixed { .. } => Err(ExperimentError::InvalidParameter("nsplit must be at least 1".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMeta {
    pub h: f64,
    pub nsplit: usize,
    pub eps: Option<f64>,
    pub dt: f64,
    pub scheme: DarcySpaceKind,
    pub fluid_mesh_hash: String,
    pub porous_mesh_hash: String,
}

/// Coarse run of the decoupled scheme on an example.
pub fn run_scheme(
    example: &ExampleDef,
    h: f64,
    scheme: DarcySpaceKind,
    nsplit: usize,
    dt: f64,
    monitor: bool,
) -> Result<(CoupledSolver<f64>, RunOutput<f64>, RunMeta)> {
    let fluid = example.fluid_mesh(h)?;
    let porous = example.porous_mesh(h)?;
    let meta = RunMeta {
        h,
        nsplit,
        eps: example.eps(),
        dt,
        scheme,
        fluid_mesh_hash: mesh_hash(&fluid),
        porous_mesh_hash: mesh_hash(&porous),
    };
    let darcy = example.darcy_space(&porous, scheme, nsplit)?;
    let config =
        SchemeConfig { dt, t_final: example.t_final, darcy_space: scheme, h, nsplit, stability_monitor: monitor };
    let solver = CoupledSolver::new(example.problem.clone(), fluid, darcy, config)?;
    let out = solver.run(None)?;
    Ok((solver, out, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub meta: RunMeta,
    pub errors: Norms,
    /// Largest `‖B u‖/‖u‖` over all steps.
    pub max_divergence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub report: ErrorReport,
    /// `log(e_prev / e) / log(h_prev / h)`; absent on the first row.
    pub rates: Option<Norms>,
    pub reference_h_darcy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub title: String,
    pub rows: Vec<ConvergenceRow>,
    /// Result of the reference self-refinement check, when it was run.
    pub reference_adequate: Option<bool>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

fn with_rates(reports: Vec<(ErrorReport, f64)>) -> Vec<ConvergenceRow> {
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(reports.len());
    for (report, reference_h_darcy) in reports {
        let rates = rows.last().map(|prev| {
            let lh = (prev.report.meta.h / report.meta.h).ln();
            prev.report.errors.zip(&report.errors, |a, b| (a / b).ln() / lh)
        });
        rows.push(ConvergenceRow { report, rates, reference_h_darcy });
    }
    rows
}

/// Errors at the final time for a chain of coarse mesh sizes against one
/// reference. Runs are dispatched in parallel and merged in input order.
pub fn spatial_study(
    example: &ExampleDef,
    hs: &[f64],
    policy: NsplitPolicy,
    dt: f64,
    scheme: DarcySpaceKind,
    reference: &ReferenceSolution,
) -> Result<ConvergenceTable> {
    if hs.len() < 2 {
        return Err(ExperimentError::TooFewLevels { needed: 2, got: hs.len() });
    }
    let finest = hs.iter().copied().fold(f64::INFINITY, f64::min);
    if reference.config.h_darcy > finest / 4.0 * (1.0 + 1e-12) {
        return Err(ExperimentError::InvalidParameter(format!(
            "reference h_D = {} is not 4x finer than h = {finest}",
            reference.config.h_darcy
        )));
    }
    let start = Instant::now();
    let reports: Vec<(ErrorReport, f64)> = hs
        .par_iter()
        .map(|&h| {
            let nsplit = policy.nsplit(h)?;
            let (solver, out, meta) = run_scheme(example, h, scheme, nsplit, dt, false)?;
            let errors = compute_errors(
                DiscreteSolution { fluid: solver.fluid_mesh(), darcy: solver.darcy_space(), state: &out.final_state },
                reference.as_discrete(),
            )?;
            let max_divergence = out.divergence.iter().copied().fold(0.0, f64::max);
            Ok((ErrorReport { meta, errors, max_divergence }, reference.config.h_darcy))
        })
        .collect::<Result<_>>()?;
    let title = format!("spatial convergence, example {}, {:?}", example.id, scheme);
    Ok(ConvergenceTable {
        title,
        rows: with_rates(reports),
        reference_adequate: None,
        timings: vec![("runs".into(), start.elapsed().as_secs_f64())],
    })
}

impl ConvergenceTable {
    /// Marks the reference adequate when its self-refinement difference is
    /// at least 4x below the coarsest row's head error.
    pub fn assess_reference(&mut self, self_difference: &Norms) {
        let coarsest = self.rows.first().map_or(0.0, |r| r.report.errors.phi_l2);
        self.reference_adequate = Some(self_difference.phi_l2 * 4.0 <= coarsest);
    }

    /// One row per mesh size; H1 columns hold the seminorm.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "h",
            "nsplit",
            "eps",
            "eps_over_h",
            "dt",
            "scheme",
            "e_u_0",
            "rate_u_0",
            "e_u_1",
            "rate_u_1",
            "e_phi_0",
            "rate_phi_0",
            "e_phi_1",
            "rate_phi_1",
            "max_div",
            "reference_adequate",
        ])?;
        for row in &self.rows {
            let m = &row.report.meta;
            let e = &row.report.errors;
            let rate = |f: fn(&Norms) -> f64| row.rates.as_ref().map_or(String::new(), |r| format!("{:.2}", f(r)));
            out.write_record([
                format_h(m.h),
                m.nsplit.to_string(),
                m.eps.map_or(String::new(), |v| format!("{v}")),
                m.eps.map_or(String::new(), |v| format!("{:.4}", v / m.h)),
                format!("{}", m.dt),
                format!("{:?}", m.scheme),
                sci(e.u_l2),
                rate(|n| n.u_l2),
                sci(e.u_h1_semi),
                rate(|n| n.u_h1_semi),
                sci(e.phi_l2),
                rate(|n| n.phi_l2),
                sci(e.phi_h1_semi),
                rate(|n| n.phi_h1_semi),
                sci(row.report.max_divergence),
                self.reference_adequate.map_or(String::new(), |a| a.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

/// `1/8` for dyadic sizes, decimal otherwise.
pub fn format_h(h: f64) -> String {
    let inv = 1.0 / h;
    if (inv - inv.round()).abs() < 1e-9 && inv >= 1.0 {
        format!("1/{}", inv.round() as u64)
    } else {
        format!("{h}")
    }
}

/// Rows of fixed `ε/h`: each row uses `ε = ratio · h`, its own example
/// instance and its own reference.
pub fn resonance_study(
    id: u32,
    ratio: f64,
    hs: &[f64],
    nsplit: usize,
    dt: f64,
    overrides: &ExampleOverrides,
    reference_for: impl Fn(f64) -> ReferenceConfig,
) -> Result<ConvergenceTable> {
    if hs.len() < 2 {
        return Err(ExperimentError::TooFewLevels { needed: 2, got: hs.len() });
    }
    let mut reports = Vec::with_capacity(hs.len());
    let mut timings = Vec::new();
    for &h in hs {
        let start = Instant::now();
        let eps = ratio * h;
        let example = define_example(id, eps, overrides)?;
        let cfg = reference_for(eps);
        let reference = reference_solve(&example, &cfg)?;
        let (solver, out, meta) = run_scheme(&example, h, DarcySpaceKind::MsFem, nsplit, dt, false)?;
        let errors = compute_errors(
            DiscreteSolution { fluid: solver.fluid_mesh(), darcy: solver.darcy_space(), state: &out.final_state },
            reference.as_discrete(),
        )?;
        let max_divergence = out.divergence.iter().copied().fold(0.0, f64::max);
        reports.push((ErrorReport { meta, errors, max_divergence }, cfg.h_darcy));
        timings.push((format_h(h), start.elapsed().as_secs_f64()));
    }
    Ok(ConvergenceTable {
        title: format!("resonance, example {id}, eps/h = {ratio}"),
        rows: with_rates(reports),
        reference_adequate: None,
        timings,
    })
}

/// Differences between solutions at consecutive time steps of a halving
/// chain and their successive ratios.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhoRow {
    pub dt: f64,
    /// `‖v_{Δt} − v_{Δt/2}‖` in each norm.
    pub difference: Norms,
    /// Ratio of this row's difference to the next one.
    pub rho: Option<Norms>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhoReport {
    pub h: f64,
    pub nsplit: usize,
    pub eps: Option<f64>,
    pub scheme: DarcySpaceKind,
    pub rows: Vec<RhoRow>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

pub fn check_halving(dts: &[f64]) -> Result<()> {
    if dts.len() < 3 {
        return Err(ExperimentError::TooFewLevels { needed: 3, got: dts.len() });
    }
    for w in dts.windows(2) {
        if ((w[0] / w[1]) - 2.0).abs() > 1e-9 {
            return Err(ExperimentError::NotHalving(w[0], w[1]));
        }
    }
    Ok(())
}

/// `d_k / d_{k+1}` for consecutive differences.
pub fn rho_ratios(diffs: &[f64]) -> Vec<f64> {
    diffs.windows(2).map(|w| w[0] / w[1]).collect()
}

impl RhoReport {
    /// Builds rows from the differences between consecutive solutions;
    /// `differences[k]` compares `dts[k]` with `dts[k+1]`.
    pub fn from_differences(
        h: f64,
        nsplit: usize,
        eps: Option<f64>,
        scheme: DarcySpaceKind,
        dts: &[f64],
        differences: &[Norms],
    ) -> Result<Self> {
        check_halving(dts)?;
        if differences.len() + 1 != dts.len() {
            return Err(ExperimentError::InvalidParameter(format!(
                "{} differences for {} time steps",
                differences.len(),
                dts.len()
            )));
        }
        let rows = differences
            .iter()
            .enumerate()
            .map(|(k, d)| RhoRow {
                dt: dts[k],
                difference: *d,
                rho: differences.get(k + 1).map(|n| d.zip(n, |a, b| a / b)),
            })
            .collect();
        Ok(Self { h, nsplit, eps, scheme, rows, timings: Vec::new() })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "dt",
            "d_u_0",
            "rho_u_0",
            "d_u_1",
            "rho_u_1",
            "d_phi_0",
            "rho_phi_0",
            "d_phi_1",
            "rho_phi_1",
        ])?;
        for row in &self.rows {
            let d = &row.difference;
            let rho = |f: fn(&Norms) -> f64| row.rho.as_ref().map_or(String::new(), |r| format!("{:.2}", f(r)));
            out.write_record([
                format!("{}", row.dt),
                sci(d.u_l2),
                rho(|n| n.u_l2),
                sci(d.u_h1_semi),
                rho(|n| n.u_h1_semi),
                sci(d.phi_l2),
                rho(|n| n.phi_l2),
                sci(d.phi_h1_semi),
                rho(|n| n.phi_h1_semi),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// All ρ values of the four tabulated norms.
    pub fn all_rhos(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.rho).flat_map(|n| [n.u_l2, n.u_h1_semi, n.phi_l2, n.phi_h1_semi]).collect()
    }
}

/// Solves on one mesh for every time step of a halving chain and compares
/// consecutive terminal states in the coarse spaces.
pub fn temporal_study(
    example: &ExampleDef,
    h: f64,
    nsplit: usize,
    dts: &[f64],
    scheme: DarcySpaceKind,
) -> Result<RhoReport> {
    check_halving(dts)?;
    let start = Instant::now();
    let fluid = example.fluid_mesh(h)?;
    let porous = example.porous_mesh(h)?;
    let darcy = example.darcy_space(&porous, scheme, nsplit)?;
    let states: Vec<StateVector<f64>> = dts
        .par_iter()
        .map(|&dt| {
            let config =
                SchemeConfig { dt, t_final: example.t_final, darcy_space: scheme, h, nsplit, stability_monitor: false };
            let solver = CoupledSolver::new(example.problem.clone(), fluid.clone(), darcy.clone(), config)?;
            Ok(solver.run(None)?.final_state)
        })
        .collect::<Result<_>>()?;
    let blocks = crate::fem::stokes_blocks(&fluid, 1.0);
    let vgrad = mini_gradient(&fluid);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let differences: Vec<Norms> = states
        .windows(2)
        .map(|w| {
            let du = diff(&w[0].u, &w[1].u);
            let dp = diff(&w[0].phi, &w[1].phi);
            Norms::from_squares(
                blocks.m_vel.bilinear(&du, &du),
                vgrad.bilinear(&du, &du),
                darcy.a2().bilinear(&dp, &dp),
                darcy.grad().bilinear(&dp, &dp),
            )
        })
        .collect();
    let mut report = RhoReport::from_differences(h, nsplit, example.eps(), scheme, dts, &differences)?;
    report.timings.push(("runs".into(), start.elapsed().as_secs_f64()));
    Ok(report)
}

/// Terminal errors of the manufactured heat problem
/// `φ = e^{-t} sin πx sin πy` on the unit square with `K = 1`, `S₀ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ManufacturedRow {
    pub h: f64,
    pub l2: f64,
    pub h1_semi: f64,
}

pub fn manufactured_exact(p: Point2<f64>, t: f64) -> (f64, [f64; 2]) {
    let (sx, sy) = ((PI * p.x).sin(), (PI * p.y).sin());
    let e = (-t).exp();
    (e * sx * sy, [e * PI * (PI * p.x).cos() * sy, e * PI * sx * (PI * p.y).cos()])
}

pub fn manufactured_darcy(
    h: f64,
    dt: f64,
    t_final: f64,
    scheme: DarcySpaceKind,
    nsplit: usize,
) -> Result<ManufacturedRow> {
    let rect = Rect::new(0.0, 1.0, 0.0, 1.0)?;
    let n = cells(1.0, h)?;
    let mesh = build_rect_mesh(rect, n, n, Region::Porous, SideTags::uniform(BoundaryTag::GammaP))?;
    let space = match scheme {
        DarcySpaceKind::MsFem => DarcySpace::MsFem(Arc::new(build_ms_space(&mesh, &|_| 1.0, nsplit)?)),
        DarcySpaceKind::P1 => DarcySpace::p1(&mesh, |_| 1.0)?,
    };
    let steps = SchemeConfig { dt, t_final, darcy_space: scheme, h, nsplit, stability_monitor: false }.num_steps()?;
    let stepper = DarcyStepper::new(&space, 1.0, dt)?;
    let wall = vec![0.0; stepper.wall_nodes().len()];
    let mut phi: Vec<f64> = mesh.vertices.iter().map(|&p| manufactured_exact(p, 0.0).0).collect();
    let source = |p: Point2<f64>, t: f64| (2.0 * PI * PI - 1.0) * manufactured_exact(p, t).0;
    for k in 1..=steps {
        let t = k as f64 * dt;
        let load = space.load(|p| source(p, t));
        phi = stepper.step(&phi, &load, None, &wall)?;
    }
    let t = steps as f64 * dt;
    let rule = TriangleRule::<f64>::seven_point();
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for tri in 0..mesh.num_triangles() {
        let g = ElementGeometry::new(mesh.triangle_points(tri));
        for (lam, w) in rule.iter() {
            let x = g.map(lam);
            let (v, gv) = space.evaluate(&phi, x)?;
            let (e, ge) = manufactured_exact(x, t);
            l2 += w * g.jacobian() * (v - e).powi(2);
            h1 += w * g.jacobian() * ((gv[0] - ge[0]).powi(2) + (gv[1] - ge[1]).powi(2));
        }
    }
    Ok(ManufacturedRow { h, l2: l2.sqrt(), h1_semi: h1.sqrt() })
}

/// Observed orders between consecutive rows.
pub fn manufactured_rates(rows: &[ManufacturedRow]) -> Vec<(f64, f64)> {
    rows.windows(2)
        .map(|w| {
            let lh = (w[0].h / w[1].h).ln();
            ((w[0].l2 / w[1].l2).ln() / lh, (w[0].h1_semi / w[1].h1_semi).ln() / lh)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_formulas() {
        let e1 = define_example(1, 0.02, &ExampleOverrides::default()).unwrap();
        let f = (e1.problem.f_fluid)(Point2::new(0.0, 2.0), 0.0);
        assert!((f[0] - 1.0).abs() < 1e-15);
        let u0 = (e1.problem.u0)(Point2::new(0.5, 1.5));
        assert!(u0[0].abs() < 1e-15 && (u0[1] - 0.0).abs() < 1e-15);
        let k = PermeabilityField::Separable { eps: 0.02, amplitude: 1.5 }.eval(Point2::new(0.005, 0.005));
        assert!((k - 1.0 / 7.0).abs() < 1e-12);
        let e3 = define_example(3, 0.02, &ExampleOverrides::default()).unwrap();
        assert_eq!((e3.problem.f_fluid)(Point2::new(0.3, 1.1), 0.4), [0.0, 0.0]);
        let lid = (e3.problem.u_wall)(Point2::new(0.5, 1.25), 0.7);
        assert!((lid[0] - 1.0).abs() < 1e-15 && lid[1] == 0.0);
        assert_eq!((e3.problem.u_wall)(Point2::new(0.0, 1.1), 0.7), [0.0, 0.0]);
        assert!(matches!(
            define_example(4, 0.02, &ExampleOverrides::default()),
            Err(ExperimentError::UnknownExample(4))
        ));
        let (lo, hi) = e1.permeability.sample_range(&e1.porous, 200);
        assert!(lo >= 1.0 / 12.25 - 1e-12 && hi <= 4.0 + 1e-12);
    }

    #[test]
    fn example1_forcing_matches_its_exact_stokes_pair() {
        // u = u0 cos t, p = (x(1-x)(y-1) + (y-1)³/3) cos t solves the
        // momentum equation with ν = 1 and the stated forcing.
        let e1 = define_example(1, 0.02, &ExampleOverrides::default()).unwrap();
        for &(x, y, t) in &[(0.3, 1.2, 0.1), (0.9, 1.7, 0.8)] {
            let f = (e1.problem.f_fluid)(Point2::new(x, y), t);
            let dt_u = [-(1.0 - 2.0 * x) * (y - 1.0) * t.sin(), -(x * (x - 1.0) + (y - 1.0) * (y - 1.0)) * t.sin()];
            let lap_u = [0.0, 4.0 * t.cos()];
            let grad_p = [(1.0 - 2.0 * x) * (y - 1.0) * t.cos(), (x * (1.0 - x) + (y - 1.0) * (y - 1.0)) * t.cos()];
            for c in 0..2 {
                assert!((f[c] - (dt_u[c] - lap_u[c] + grad_p[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mesh_sizes_must_divide() {
        let e3 = define_example(3, 0.02, &ExampleOverrides::default()).unwrap();
        assert!(e3.fluid_mesh(0.125).is_ok());
        assert!(e3.fluid_mesh(0.5).is_err());
        assert_eq!(format_h(0.125), "1/8");
        assert_eq!(format_h(0.3), "0.3");
    }

    #[test]
    fn reference_config_resolves_eps() {
        assert_eq!(ReferenceConfig::for_eps(Some(0.02), 0.01).h_darcy, 1.0 / 512.0);
        assert_eq!(ReferenceConfig::for_eps(Some(0.01), 0.01).h_darcy, 1.0 / 1024.0);
        assert_eq!(ReferenceConfig::for_eps(None, 0.01).h_darcy, 1.0 / 512.0);
    }

    #[test]
    fn rho_formula_on_synthetic_sequences() {
        // v_Δt = v* + c Δt^γ: differences scale by 2^γ
        for gamma in [1.0f64, 2.0] {
            let dts = [0.125, 0.0625, 0.03125, 0.015625];
            let v: Vec<f64> = dts.iter().map(|d: &f64| 3.0 + 0.75 * d.powf(gamma)).collect();
            let diffs: Vec<f64> = v.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
            for r in rho_ratios(&diffs) {
                assert!((r - 2f64.powf(gamma)).abs() < 1e-12);
            }
        }
        assert!(matches!(check_halving(&[0.1, 0.05]), Err(ExperimentError::TooFewLevels { .. })));
        assert!(matches!(check_halving(&[0.1, 0.05, 0.02]), Err(ExperimentError::NotHalving(..))));
    }

    #[test]
    fn self_error_is_zero_and_constant_shift_is_area() {
        let ex = define_example(1, 0.25, &ExampleOverrides { t_final: Some(0.1), ..Default::default() }).unwrap();
        let (solver, out, _) = run_scheme(&ex, 0.25, DarcySpaceKind::P1, 1, 0.05, false).unwrap();
        let me = DiscreteSolution { fluid: solver.fluid_mesh(), darcy: solver.darcy_space(), state: &out.final_state };
        let e = compute_errors(me, me).unwrap();
        assert!(e.as_array().iter().all(|&v| v <= 1e-12));
        let mut shifted = out.final_state.clone();
        shifted.phi.iter_mut().for_each(|v| *v += 1.0);
        let other = DiscreteSolution { state: &shifted, ..me };
        let e = compute_errors(other, me).unwrap();
        assert!((e.phi_l2 - 1.0).abs() < 1e-12);
        assert!(e.phi_h1_semi < 1e-12 && e.u_l2 < 1e-12);
        let mut late = out.final_state.clone();
        late.t += 0.5;
        assert!(matches!(
            compute_errors(DiscreteSolution { state: &late, ..me }, me),
            Err(ExperimentError::TimeMismatch { .. })
        ));
    }

    #[test]
    fn interpolation_error_of_a_quadratic() {
        // P1 interpolant of x² on a uniform 1D-like grid: error x(h - x)
        // per cell has L2 norm h²/√30 over the unit square.
        let h = 0.25;
        let ex = define_example(1, 0.5, &ExampleOverrides::default()).unwrap();
        let coarse = ex.porous_mesh(h).unwrap();
        let fine = ex.porous_mesh(h / 16.0).unwrap();
        let cs = DarcySpace::p1(&coarse, |_| 1.0).unwrap();
        let fs = DarcySpace::p1(&fine, |_| 1.0).unwrap();
        let fluid = ex.fluid_mesh(0.5).unwrap();
        let nvel = MiniLayout::for_mesh(&fluid).num_velocity();
        let mk = |m: &Mesh<f64>| StateVector {
            u: vec![0.0; nvel],
            p: None,
            phi: m.vertices.iter().map(|v| v.x * v.x).collect(),
            t: 0.0,
            step: 0,
        };
        let (sc, sf) = (mk(&coarse), mk(&fine));
        let e = compute_errors(
            DiscreteSolution { fluid: &fluid, darcy: &cs, state: &sc },
            DiscreteSolution { fluid: &fluid, darcy: &fs, state: &sf },
        )
        .unwrap();
        let exact = h * h / 30f64.sqrt();
        assert!((e.phi_l2 / exact - 1.0).abs() < 0.02, "{} vs {}", e.phi_l2, exact);
    }

    #[test]
    fn nsplit_policies() {
        assert_eq!(NsplitPolicy::FixedFine { h_fine: 1.0 / 512.0 }.nsplit(0.125).unwrap(), 64);
        assert_eq!(NsplitPolicy::Fixed { nsplit: 32 }.nsplit(0.125).unwrap(), 32);
        assert!(NsplitPolicy::FixedFine { h_fine: 0.3 }.nsplit(0.125).is_err());
    }

    #[test]
    fn mesh_hash_is_stable_and_sensitive() {
        let ex = define_example(1, 0.5, &ExampleOverrides::default()).unwrap();
        let a = mesh_hash(&ex.porous_mesh(0.25).unwrap());
        assert_eq!(a, mesh_hash(&ex.porous_mesh(0.25).unwrap()));
        assert_ne!(a, mesh_hash(&ex.porous_mesh(0.125).unwrap()));
        assert_eq!(a.len(), 64);
    }
}
