//! Online stage: decoupled implicit-explicit time stepping of the coupled
//! Stokes-Darcy system. Each step solves a Stokes saddle problem and a
//! Darcy problem, each using only the other side's data from the previous
//! step across the interface. Both system matrices are factored once.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::fem::{
    apply_dirichlet, bjs_boundary, mini_gradient, mini_load, p1_evaluate, p1_load, p1_mass, p1_stiffness,
    stokes_blocks, DirichletLift, FemError, InterfaceCoupling, MiniLayout, StokesBlocks, TriangleRule,
};
use crate::linalg::ordering::{nested_dissection, Graph};
use crate::linalg::{factor_spd, factor_symmetric_indefinite, FactorHandle, LinalgError, SparseMatrix};
use crate::mesh::{BoundaryTag, Mesh, MeshError, Point2, Region};
use crate::msfem::{MsSpace, MsfemError};
use crate::scalar::{norm2, Real};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("T / dt = {ratio} is not a whole number of steps")]
    NonIntegralSteps { ratio: f64 },
    #[error("expected a {expected:?} mesh")]
    WrongRegion { expected: Region },
    #[error("state does not match the discretization: {0}")]
    StateMismatch(String),
    #[error("non-finite values at step {step} (t = {t}); reduce the time step")]
    NonFinite { step: usize, t: f64 },
    #[error("energy blow-up at step {step} (t = {t}, energy {energy:e}); reduce the time step")]
    BlowUp { step: usize, t: f64, energy: f64 },
    #[error("{system} factorization failed: {source}")]
    Factorization { system: &'static str, source: LinalgError },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Msfem(#[from] MsfemError),
}

/// Physical constants: storativity `s0`, viscosity `nu`, slip constant
/// `alpha` and gravity `g`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhysParams<T> {
    pub s0: T,
    pub nu: T,
    pub alpha: T,
    pub g: T,
}

impl<T: Real> PhysParams<T> {
    pub fn unit() -> Self {
        Self { s0: T::one(), nu: T::one(), alpha: T::one(), g: T::one() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let pos = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(SolverError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        pos("S0", self.s0)?;
        pos("nu", self.nu)?;
        pos("g", self.g)?;
        if !(self.alpha >= T::zero() && self.alpha.is_finite()) {
            return Err(SolverError::InvalidParameter(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DarcySpaceKind {
    MsFem,
    P1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SchemeConfig<T> {
    pub dt: T,
    pub t_final: T,
    pub darcy_space: DarcySpaceKind,
    /// Coarse mesh size, recorded for reports.
    pub h: T,
    pub nsplit: usize,
    /// Fill the energy log every step.
    pub stability_monitor: bool,
}

impl<T: Real> SchemeConfig<T> {
    /// `N = round(T / dt)`; the ratio must be integral to 1e-10.
    pub fn num_steps(&self) -> Result<usize, SolverError> {
        if !(self.dt > T::zero() && self.dt.is_finite()) {
            return Err(SolverError::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(SolverError::InvalidParameter(format!(
                "T = {} is shorter than dt = {}",
                self.t_final, self.dt
            )));
        }
        let ratio = self.t_final.as_f64() / self.dt.as_f64();
        let n = ratio.round();
        if (ratio - n).abs() > 1e-10 * n.max(1.0) {
            return Err(SolverError::NonIntegralSteps { ratio });
        }
        Ok(n as usize)
    }
}

pub type ScalarField<T> = Arc<dyn Fn(Point2<T>) -> T + Send + Sync>;
pub type VectorField<T> = Arc<dyn Fn(Point2<T>) -> [T; 2] + Send + Sync>;
pub type ScalarSource<T> = Arc<dyn Fn(Point2<T>, T) -> T + Send + Sync>;
pub type VectorSource<T> = Arc<dyn Fn(Point2<T>, T) -> [T; 2] + Send + Sync>;
pub type TimeFunction<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// Data of a coupled problem, independent of any mesh.
#[derive(Clone)]
pub struct CoupledProblem<T> {
    pub params: PhysParams<T>,
    /// Scalar permeability `K(x)`.
    pub permeability: ScalarField<T>,
    pub f_fluid: VectorSource<T>,
    pub f_porous: ScalarSource<T>,
    /// Optional factorization `f_p(x, t) = σ(t) ρ(x)`; when present the
    /// multiscale load moments of `ρ` are computed once.
    pub f_porous_separable: Option<(TimeFunction<T>, ScalarField<T>)>,
    pub u0: VectorField<T>,
    pub phi0: ScalarField<T>,
    /// Velocity on the fluid walls.
    pub u_wall: VectorSource<T>,
    /// Hydraulic head on the porous walls.
    pub phi_wall: ScalarSource<T>,
}

impl<T: Real> CoupledProblem<T> {
    /// Unit parameters, `K = 1` and zero data everywhere.
    pub fn zero() -> Self {
        Self {
            params: PhysParams::unit(),
            permeability: Arc::new(|_| T::one()),
            f_fluid: Arc::new(|_, _| [T::zero(); 2]),
            f_porous: Arc::new(|_, _| T::zero()),
            f_porous_separable: None,
            u0: Arc::new(|_| [T::zero(); 2]),
            phi0: Arc::new(|_| T::zero()),
            u_wall: Arc::new(|_, _| [T::zero(); 2]),
            phi_wall: Arc::new(|_, _| T::zero()),
        }
    }
}

/// Coarse Darcy discretization: the multiscale space or plain linear
/// elements with pointwise permeability quadrature.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // one per run
pub enum DarcySpace<T> {
    MsFem(Arc<MsSpace<T>>),
    P1 { mesh: Mesh<T>, a1: SparseMatrix<T>, a2: SparseMatrix<T>, grad: SparseMatrix<T> },
}

impl<T: Real> DarcySpace<T> {
    pub fn p1<F>(mesh: &Mesh<T>, kfield: F) -> Result<Self, SolverError>
    where
        F: Fn(Point2<T>) -> T + Sync,
    {
        if mesh.region != Region::Porous {
            return Err(SolverError::WrongRegion { expected: Region::Porous });
        }
        let rule = TriangleRule::three_point();
        Ok(DarcySpace::P1 {
            mesh: mesh.clone(),
            a1: p1_stiffness(mesh, kfield, &rule),
            a2: p1_mass(mesh),
            grad: p1_stiffness(mesh, |_| T::one(), &rule),
        })
    }

    pub fn kind(&self) -> DarcySpaceKind {
        match self {
            DarcySpace::MsFem(_) => DarcySpaceKind::MsFem,
            DarcySpace::P1 { .. } => DarcySpaceKind::P1,
        }
    }

    pub fn mesh(&self) -> &Mesh<T> {
        match self {
            DarcySpace::MsFem(s) => &s.coarse,
            DarcySpace::P1 { mesh, .. } => mesh,
        }
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh().num_vertices()
    }

    /// `(K ∇φ, ∇ψ)`.
    pub fn a1(&self) -> &SparseMatrix<T> {
        match self {
            DarcySpace::MsFem(s) => &s.a1,
            DarcySpace::P1 { a1, .. } => a1,
        }
    }

    /// `(φ, ψ)`.
    pub fn a2(&self) -> &SparseMatrix<T> {
        match self {
            DarcySpace::MsFem(s) => &s.a2,
            DarcySpace::P1 { a2, .. } => a2,
        }
    }

    /// `(∇φ, ∇ψ)`.
    pub fn grad(&self) -> &SparseMatrix<T> {
        match self {
            DarcySpace::MsFem(s) => &s.grad,
            DarcySpace::P1 { grad, .. } => grad,
        }
    }

    /// `(f, ψ_j)` for every coarse dof.
    pub fn load<F>(&self, f: F) -> Vec<T>
    where
        F: Fn(Point2<T>) -> T + Sync,
    {
        match self {
            DarcySpace::MsFem(s) => s.load(f),
            DarcySpace::P1 { mesh, .. } => p1_load(mesh, f, &TriangleRule::three_point()),
        }
    }

    /// Value and gradient of the discrete field at `p`.
    pub fn evaluate(&self, coeffs: &[T], p: Point2<T>) -> Result<(T, [T; 2]), SolverError> {
        if coeffs.len() != self.num_dofs() {
            return Err(SolverError::StateMismatch(format!(
                "{} coefficients for {} dofs",
                coeffs.len(),
                self.num_dofs()
            )));
        }
        match self {
            DarcySpace::MsFem(s) => Ok(s.evaluate(coeffs, p)?),
            DarcySpace::P1 { mesh, .. } => Ok(p1_evaluate(mesh, coeffs, p)?),
        }
    }
}

/// Coefficients at time level `n`. The pressure is only defined after the
/// first step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateVector<T> {
    pub u: Vec<T>,
    pub p: Option<Vec<T>>,
    pub phi: Vec<T>,
    pub t: T,
    pub step: usize,
}

impl<T: Real> StateVector<T> {
    pub fn is_finite(&self) -> bool {
        let fin = |v: &[T]| v.iter().all(|x| x.is_finite());
        fin(&self.u) && fin(&self.phi) && self.p.as_deref().is_none_or(fin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyRecord<T> {
    pub step: usize,
    pub t: T,
    pub u_l2_sq: T,
    pub phi_l2_sq: T,
    /// `‖u^{n} - u^{n-1}‖₀²`, zero at step 0.
    pub du_l2_sq: T,
    pub dphi_l2_sq: T,
    pub u_h1_semi_sq: T,
    pub phi_h1_semi_sq: T,
}

impl<T: Real> EnergyRecord<T> {
    /// `‖u‖₀² + ‖φ‖₀²`.
    pub fn composite(&self) -> T {
        self.u_l2_sq + self.phi_l2_sq
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyLog<T> {
    pub records: Vec<EnergyRecord<T>>,
}

/// Outcome of [`check_stability`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub finite: bool,
    pub bounded: bool,
    pub initial: f64,
    pub maximum: f64,
    pub terminal: f64,
    /// `max_n E_n / E_0`, the run constant in `E_n ≤ C E_0`.
    pub fitted_constant: f64,
    /// Smallest `c` with `E_n ≤ E_0 exp(c t_n)` for all `n`.
    pub growth_rate: f64,
    /// First step from which the composite energy never increases.
    pub non_increasing_from: Option<usize>,
}

impl StabilityReport {
    pub fn non_increasing_after(&self, step: usize) -> bool {
        self.non_increasing_from.is_some_and(|k| k <= step)
    }
}

/// Energies above this multiple of the early-time level count as blow-up.
const BLOWUP_FACTOR: f64 = 1e12;
const EARLY_STEPS: usize = 5;

fn blowup_threshold(early_max: f64) -> f64 {
    BLOWUP_FACTOR * early_max.max(1.0)
}

/// Summarizes a monitored run: finiteness, boundedness and monotonicity of
/// the composite energy `‖u‖₀² + ‖φ‖₀²`. Increases below a relative
/// 1e-12 are treated as roundoff.
pub fn check_stability<T: Real>(log: &EnergyLog<T>) -> StabilityReport {
    let e: Vec<f64> = log.records.iter().map(|r| r.composite().as_f64()).collect();
    let finite = e.iter().all(|v| v.is_finite());
    let initial = e.first().copied().unwrap_or(0.0);
    let maximum = e.iter().copied().fold(0.0, f64::max);
    let terminal = e.last().copied().unwrap_or(0.0);
    let early = e.iter().take(EARLY_STEPS + 1).copied().fold(0.0, f64::max);
    let fitted_constant = if initial > 0.0 {
        maximum / initial
    } else if maximum == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    let mut growth_rate: f64 = 0.0;
    if initial > 0.0 {
        for r in log.records.iter().skip(1) {
            let t = r.t.as_f64();
            let v = r.composite().as_f64();
            if t > 0.0 && v > 0.0 {
                growth_rate = growth_rate.max((v / initial).ln() / t);
            }
        }
    }
    let mut non_increasing_from = if finite { Some(0) } else { None };
    if finite {
        for (k, w) in e.windows(2).enumerate() {
            if w[1] > w[0] * (1.0 + 1e-12) + f64::MIN_POSITIVE {
                non_increasing_from = Some(k + 1);
            }
        }
    }
    StabilityReport {
        finite,
        bounded: finite && maximum <= blowup_threshold(early),
        initial,
        maximum,
        terminal,
        fitted_constant,
        growth_rate,
        non_increasing_from,
    }
}

/// Implicit Darcy step `(A2/Δt + A1/S₀) φ^{n+1} = A2 φ^n/Δt + b/S₀ + flux`
/// with the porous-wall head imposed.
pub struct DarcyStepper<T> {
    a2: SparseMatrix<T>,
    factor: FactorHandle<T>,
    lift: DirichletLift<T>,
    wall_points: Vec<Point2<T>>,
    dt: T,
    s0: T,
}

impl<T: Real> DarcyStepper<T> {
    pub fn new(space: &DarcySpace<T>, s0: T, dt: T) -> Result<Self, SolverError> {
        let mesh = space.mesh();
        let sys = SparseMatrix::linear_combination(&[(T::one() / dt, space.a2()), (T::one() / s0, space.a1())])?;
        let walls = mesh.tagged_vertices(BoundaryTag::GammaP);
        let mut scratch = vec![T::zero(); sys.nrows()];
        let (reduced, lift) = apply_dirichlet(&sys, &mut scratch, &walls, &vec![T::zero(); walls.len()])?;
        let factor = factor_spd(&reduced).map_err(|source| SolverError::Factorization { system: "Darcy", source })?;
        let wall_points = lift.nodes().iter().map(|&v| mesh.vertices[v]).collect();
        Ok(Self { a2: space.a2().clone(), factor, lift, wall_points, dt, s0 })
    }

    /// Coarse vertices carrying wall data, in the order expected by
    /// [`Self::step`].
    pub fn wall_nodes(&self) -> &[usize] {
        self.lift.nodes()
    }

    pub fn wall_values<F: Fn(Point2<T>) -> T>(&self, f: F) -> Vec<T> {
        self.wall_points.iter().map(|&p| f(p)).collect()
    }

    /// `load` is `(f_p^{n+1}, ψ)` without the `1/S₀` factor; `flux`, if
    /// present, is already scaled.
    pub fn step(&self, phi: &[T], load: &[T], flux: Option<&[T]>, wall: &[T]) -> Result<Vec<T>, SolverError> {
        let n = self.a2.nrows();
        if phi.len() != n || load.len() != n || flux.is_some_and(|f| f.len() != n) {
            return Err(SolverError::StateMismatch("Darcy vector length".into()));
        }
        let mut rhs = self.a2.spmv(phi)?;
        let inv_dt = T::one() / self.dt;
        let inv_s0 = T::one() / self.s0;
        for (i, r) in rhs.iter_mut().enumerate() {
            *r = *r * inv_dt + load[i] * inv_s0 + flux.map_or(T::zero(), |f| f[i]);
        }
        self.lift.apply_rhs(&mut rhs, wall)?;
        Ok(self.factor.solve(&rhs)?)
    }
}

/// Implicit Stokes step on the MINI/P1 pair: the saddle system
/// `[M/Δt + A + BJS, Bᵀ; B, 0]` with wall velocities eliminated.
pub struct StokesStepper<T> {
    blocks: StokesBlocks<T>,
    factor: FactorHandle<T>,
    lift: DirichletLift<T>,
    wall: Vec<(usize, Point2<T>)>,
    dt: T,
    /// A mean-zero pressure constraint was appended (closed cavity).
    pressure_gauge: bool,
}

impl<T: Real> StokesStepper<T> {
    pub fn new(mesh: &Mesh<T>, blocks: StokesBlocks<T>, bjs: &SparseMatrix<T>, dt: T) -> Result<Self, SolverError> {
        let layout = blocks.layout;
        let nvel = layout.num_velocity();
        let np = mesh.num_vertices();
        let top = SparseMatrix::linear_combination(&[
            (T::one() / dt, &blocks.m_vel),
            (T::one(), &blocks.a_visc),
            (T::one(), bjs),
        ])?;
        let saddle = saddle_matrix(&top, &blocks.b_div, None)?;

        let mut nodes = Vec::new();
        for v in mesh.tagged_vertices(BoundaryTag::GammaF) {
            nodes.push(layout.vertex(0, v));
            nodes.push(layout.vertex(1, v));
        }
        let mut scratch = vec![T::zero(); saddle.nrows()];
        let (reduced, lift) = apply_dirichlet(&saddle, &mut scratch, &nodes, &vec![T::zero(); nodes.len()])?;
        let wall = lift
            .nodes()
            .iter()
            .map(|&d| {
                let (comp, v) = if d < layout.per_component() { (0, d) } else { (1, d - layout.per_component()) };
                (comp, mesh.vertices[v])
            })
            .collect();

        // Constant pressures are invisible to the system iff `Bᵀ 1` (the
        // boundary flux functional) vanishes on every free velocity dof.
        let ones = vec![T::one(); np];
        let flux = blocks.b_div.transpose().spmv(&ones)?;
        let scale = blocks.b_div.max_abs() * T::lit(1e-10);
        let pressure_gauge = (0..nvel).all(|i| lift.is_constrained(i) || flux[i].abs() <= scale);
        let mut dual = vec![true; nvel + np + usize::from(pressure_gauge)];
        dual[..nvel].iter_mut().for_each(|d| *d = false);
        let system = if pressure_gauge {
            log::info!("Stokes system has a free pressure constant; adding a mean-value constraint");
            saddle_matrix(&reduced_top(&reduced, nvel), &reduced_b(&reduced, nvel), Some(&pressure_weights(mesh)))?
        } else {
            reduced
        };
        let perm = saddle_ordering(mesh, &layout, pressure_gauge);
        let factor = factor_symmetric_indefinite(&system, Some(&perm), &dual)
            .map_err(|source| SolverError::Factorization { system: "Stokes", source })?;
        Ok(Self { blocks, factor, lift, wall, dt, pressure_gauge })
    }

    pub fn blocks(&self) -> &StokesBlocks<T> {
        &self.blocks
    }

    pub fn has_pressure_gauge(&self) -> bool {
        self.pressure_gauge
    }

    pub fn wall_values<F: Fn(Point2<T>) -> [T; 2]>(&self, f: F) -> Vec<T> {
        self.wall.iter().map(|&(c, p)| f(p)[c]).collect()
    }

    /// `load` holds `(f^{n+1}, v)` plus any explicit interface term.
    pub fn step(&self, u: &[T], load: &[T], wall: &[T]) -> Result<(Vec<T>, Vec<T>), SolverError> {
        let nvel = self.blocks.layout.num_velocity();
        let np = self.blocks.b_div.nrows();
        if u.len() != nvel || load.len() != nvel {
            return Err(SolverError::StateMismatch("Stokes vector length".into()));
        }
        let mut rhs = vec![T::zero(); nvel + np];
        self.blocks.m_vel.spmv_into(u, &mut rhs[..nvel]);
        let inv_dt = T::one() / self.dt;
        for (r, &l) in rhs[..nvel].iter_mut().zip(load) {
            *r = *r * inv_dt + l;
        }
        self.lift.apply_rhs(&mut rhs, wall)?;
        if self.pressure_gauge {
            rhs.push(T::zero());
        }
        let x = self.factor.solve(&rhs)?;
        Ok((x[..nvel].to_vec(), x[nvel..nvel + np].to_vec()))
    }

    /// `‖B u‖₂ / ‖u‖₂`, zero for the zero field.
    pub fn divergence_ratio(&self, u: &[T]) -> T {
        let nu = norm2(u);
        if nu == T::zero() {
            return T::zero();
        }
        let bu = self.blocks.b_div.spmv(u).expect("velocity length checked by caller");
        norm2(&bu) / nu
    }
}

/// Assembles `[top, Bᵀ (, 0); B, 0 (, w); (0, wᵀ, 0)]`.
fn saddle_matrix<T: Real>(
    top: &SparseMatrix<T>,
    b: &SparseMatrix<T>,
    gauge: Option<&[T]>,
) -> Result<SparseMatrix<T>, SolverError> {
    let nvel = top.nrows();
    let np = b.nrows();
    let n = nvel + np + usize::from(gauge.is_some());
    let bt = b.transpose();
    let mut offsets = Vec::with_capacity(n + 1);
    let cap = top.nnz() + 2 * b.nnz() + 2 * np;
    let mut cols = Vec::with_capacity(cap);
    let mut vals = Vec::with_capacity(cap);
    offsets.push(0);
    for i in 0..nvel {
        let (c, v) = top.row(i);
        cols.extend_from_slice(c);
        vals.extend_from_slice(v);
        let (c, v) = bt.row(i);
        cols.extend(c.iter().map(|&j| j + nvel));
        vals.extend_from_slice(v);
        offsets.push(cols.len());
    }
    for i in 0..np {
        let (c, v) = b.row(i);
        cols.extend_from_slice(c);
        vals.extend_from_slice(v);
        if let Some(w) = gauge {
            cols.push(nvel + np);
            vals.push(w[i]);
        }
        offsets.push(cols.len());
    }
    if let Some(w) = gauge {
        for (i, &wi) in w.iter().enumerate() {
            cols.push(nvel + i);
            vals.push(wi);
        }
        offsets.push(cols.len());
    }
    Ok(SparseMatrix::try_from_csr(n, n, offsets, cols, vals)?)
}

fn reduced_top<T: Real>(a: &SparseMatrix<T>, nvel: usize) -> SparseMatrix<T> {
    let idx: Vec<usize> = (0..nvel).collect();
    a.select(&idx, &idx)
}

fn reduced_b<T: Real>(a: &SparseMatrix<T>, nvel: usize) -> SparseMatrix<T> {
    let rows: Vec<usize> = (nvel..a.nrows()).collect();
    let cols: Vec<usize> = (0..nvel).collect();
    a.select(&rows, &cols)
}

/// `∫ λ_i` for every vertex.
fn pressure_weights<T: Real>(mesh: &Mesh<T>) -> Vec<T> {
    let mut w = vec![T::zero(); mesh.num_vertices()];
    let third = T::one() / T::lit(3.0);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let a = mesh.signed_area(t) * third;
        for &v in tri {
            w[v] += a;
        }
    }
    w
}

/// Elimination order for the saddle system: all bubbles first (they only
/// couple inside their triangle), then vertices in nested dissection order
/// with the two velocity components ahead of the pressure at each vertex.
/// Every pressure pivot then sees the negative Schur contribution of its
/// neighboring bubbles.
fn saddle_ordering<T: Real>(mesh: &Mesh<T>, layout: &MiniLayout, gauge: bool) -> Vec<usize> {
    let nvel = layout.num_velocity();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_vertices()];
    for tri in &mesh.triangles {
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    adj[tri[a]].push(tri[b]);
                }
            }
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    let order = nested_dissection(&Graph::from_adjacency(&adj));
    let mut perm = Vec::with_capacity(nvel + mesh.num_vertices() + 1);
    for c in 0..2 {
        perm.extend((0..layout.nt).map(|t| layout.bubble(c, t)));
    }
    for v in order {
        perm.push(layout.vertex(0, v));
        perm.push(layout.vertex(1, v));
        perm.push(nvel + v);
    }
    if gauge {
        perm.push(nvel + mesh.num_vertices());
    }
    perm
}

/// Sub-step order inside one time step. Both orders give identical results
/// because neither sub-step reads the other's new values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOrder {
    StokesFirst,
    DarcyFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub steps: usize,
    pub stokes_solves: usize,
    pub darcy_solves: usize,
    pub factorizations: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub final_state: StateVector<T>,
    pub energy: Option<EnergyLog<T>>,
    /// `‖B u^{n+1}‖₂ / ‖u^{n+1}‖₂` per step.
    pub divergence: Vec<T>,
    pub stats: RunStats,
}

/// Per-step observer: `(n, t^n, state)`.
pub type Observer<'a, T> = dyn FnMut(usize, T, &StateVector<T>) + 'a;

/// A fully set-up decoupled scheme: meshes, coarse Darcy space and both
/// factorizations.
pub struct CoupledSolver<T> {
    problem: CoupledProblem<T>,
    fluid: Mesh<T>,
    darcy: DarcySpace<T>,
    config: SchemeConfig<T>,
    steps: usize,
    coupling: InterfaceCoupling<T>,
    stokes: StokesStepper<T>,
    darcy_step: DarcyStepper<T>,
    vel_grad: Option<SparseMatrix<T>>,
    separable_moments: Option<Vec<T>>,
}

impl<T: Real> CoupledSolver<T> {
    pub fn new(
        problem: CoupledProblem<T>,
        fluid: Mesh<T>,
        darcy: DarcySpace<T>,
        config: SchemeConfig<T>,
    ) -> Result<Self, SolverError> {
        problem.params.validate()?;
        let steps = config.num_steps()?;
        if fluid.region != Region::Fluid {
            return Err(SolverError::WrongRegion { expected: Region::Fluid });
        }
        if darcy.mesh().region != Region::Porous {
            return Err(SolverError::WrongRegion { expected: Region::Porous });
        }
        if darcy.kind() != config.darcy_space {
            return Err(SolverError::InvalidParameter(format!(
                "configured for {:?} but given a {:?} space",
                config.darcy_space,
                darcy.kind()
            )));
        }
        let pp = problem.params;
        let coupling = InterfaceCoupling::new(&fluid, darcy.mesh())?;
        let blocks = stokes_blocks(&fluid, pp.nu);
        let k = problem.permeability.clone();
        let bjs = bjs_boundary(&fluid, &blocks.layout, pp.nu, pp.alpha, pp.g, |x| k(x))?;
        let stokes = StokesStepper::new(&fluid, blocks, &bjs, config.dt)?;
        let darcy_step = DarcyStepper::new(&darcy, pp.s0, config.dt)?;
        let vel_grad = config.stability_monitor.then(|| mini_gradient(&fluid));
        let separable_moments = match (&problem.f_porous_separable, &darcy) {
            (Some((_, rho)), DarcySpace::MsFem(_)) => Some(darcy.load(|x| rho(x))),
            _ => None,
        };
        Ok(Self { problem, fluid, darcy, config, steps, coupling, stokes, darcy_step, vel_grad, separable_moments })
    }

    pub fn num_steps(&self) -> usize {
        self.steps
    }

    /// Releases the meshes and Darcy space, dropping both factorizations.
    pub fn into_parts(self) -> (Mesh<T>, DarcySpace<T>) {
        (self.fluid, self.darcy)
    }

    pub fn fluid_mesh(&self) -> &Mesh<T> {
        &self.fluid
    }

    pub fn darcy_space(&self) -> &DarcySpace<T> {
        &self.darcy
    }

    pub fn config(&self) -> &SchemeConfig<T> {
        &self.config
    }

    pub fn layout(&self) -> MiniLayout {
        self.stokes.blocks.layout
    }

    pub fn stokes(&self) -> &StokesStepper<T> {
        &self.stokes
    }

    pub fn coupling(&self) -> &InterfaceCoupling<T> {
        &self.coupling
    }

    /// Nodal interpolation of the initial data; bubbles start at zero.
    pub fn init_state(&self) -> StateVector<T> {
        let layout = self.layout();
        let mut u = vec![T::zero(); layout.num_velocity()];
        for (v, &x) in self.fluid.vertices.iter().enumerate() {
            let val = (self.problem.u0)(x);
            u[layout.vertex(0, v)] = val[0];
            u[layout.vertex(1, v)] = val[1];
        }
        let phi = self.darcy.mesh().vertices.iter().map(|&x| (self.problem.phi0)(x)).collect();
        StateVector { u, p: None, phi, t: T::zero(), step: 0 }
    }

    fn time(&self, step: usize) -> T {
        T::from_count(step) * self.config.dt
    }

    fn stokes_part(&self, state: &StateVector<T>, t: T) -> Result<(Vec<T>, Vec<T>), SolverError> {
        let f = self.problem.f_fluid.clone();
        let mut load = mini_load(&self.fluid, &self.layout(), |x| f(x, t));
        self.coupling.add_stokes_vector(&self.layout(), &state.phi, self.problem.params.g, &mut load)?;
        let wall = self.stokes.wall_values(|x| (self.problem.u_wall)(x, t));
        self.stokes.step(&state.u, &load, &wall)
    }

    /// `(f_p(t), ψ)` for the configured space.
    pub fn darcy_load(&self, t: T) -> Vec<T> {
        if let (Some(m), Some((sigma, _))) = (&self.separable_moments, &self.problem.f_porous_separable) {
            let s = sigma(t);
            return m.iter().map(|&v| s * v).collect();
        }
        let f = self.problem.f_porous.clone();
        self.darcy.load(|x| f(x, t))
    }

    fn darcy_part(&self, state: &StateVector<T>, t: T) -> Result<Vec<T>, SolverError> {
        let load = self.darcy_load(t);
        let flux = self.coupling.darcy_vector(&self.layout(), &state.u, self.problem.params.s0)?;
        let wall = self.darcy_step.wall_values(|x| (self.problem.phi_wall)(x, t));
        self.darcy_step.step(&state.phi, &load, Some(&flux), &wall)
    }

    /// Advances one step from `state`.
    pub fn step(&self, state: &StateVector<T>, order: StepOrder) -> Result<StateVector<T>, SolverError> {
        if state.u.len() != self.layout().num_velocity() || state.phi.len() != self.darcy.num_dofs() {
            return Err(SolverError::StateMismatch("state sizes differ from the solver's spaces".into()));
        }
        let t = self.time(state.step + 1);
        let ((u, p), phi) = match order {
            StepOrder::StokesFirst => {
                let s = self.stokes_part(state, t)?;
                (s, self.darcy_part(state, t)?)
            }
            StepOrder::DarcyFirst => {
                let d = self.darcy_part(state, t)?;
                (self.stokes_part(state, t)?, d)
            }
        };
        Ok(StateVector { u, p: Some(p), phi, t, step: state.step + 1 })
    }

    fn energy_record(&self, state: &StateVector<T>, prev: Option<&StateVector<T>>) -> EnergyRecord<T> {
        let m = &self.stokes.blocks.m_vel;
        let a2 = self.darcy.a2();
        let diff = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x - y).collect::<Vec<T>>();
        let (du, dphi) = match prev {
            Some(p) => {
                let du = diff(&state.u, &p.u);
                let dp = diff(&state.phi, &p.phi);
                (m.bilinear(&du, &du), a2.bilinear(&dp, &dp))
            }
            None => (T::zero(), T::zero()),
        };
        EnergyRecord {
            step: state.step,
            t: state.t,
            u_l2_sq: m.bilinear(&state.u, &state.u),
            phi_l2_sq: a2.bilinear(&state.phi, &state.phi),
            du_l2_sq: du,
            dphi_l2_sq: dphi,
            u_h1_semi_sq: self.vel_grad.as_ref().map_or(T::zero(), |g| g.bilinear(&state.u, &state.u)),
            phi_h1_semi_sq: self.darcy.grad().bilinear(&state.phi, &state.phi),
        }
    }

    /// Runs all `N` steps from the initial data.
    pub fn run(&self, observer: Option<&mut Observer<'_, T>>) -> Result<RunOutput<T>, SolverError> {
        self.run_from(self.init_state(), observer)
    }

    pub fn run_from(
        &self,
        mut state: StateVector<T>,
        mut observer: Option<&mut Observer<'_, T>>,
    ) -> Result<RunOutput<T>, SolverError> {
        let mut stats = RunStats { factorizations: 2, ..RunStats::default() };
        let mut log = self.config.stability_monitor.then(EnergyLog::default);
        let m = &self.stokes.blocks.m_vel;
        let a2 = self.darcy.a2();
        let composite = |s: &StateVector<T>| (m.bilinear(&s.u, &s.u) + a2.bilinear(&s.phi, &s.phi)).as_f64();
        let mut early = composite(&state);
        if let Some(l) = log.as_mut() {
            l.records.push(self.energy_record(&state, None));
        }
        if let Some(obs) = observer.as_mut() {
            obs(state.step, state.t, &state);
        }
        let mut divergence = Vec::with_capacity(self.steps);
        for n in 0..self.steps {
            let next = self.step(&state, StepOrder::StokesFirst)?;
            stats.steps += 1;
            stats.stokes_solves += 1;
            stats.darcy_solves += 1;
            if !next.is_finite() {
                return Err(SolverError::NonFinite { step: n + 1, t: next.t.as_f64() });
            }
            let e = composite(&next);
            if n < EARLY_STEPS {
                early = early.max(e);
            } else if !(e <= blowup_threshold(early)) {
                return Err(SolverError::BlowUp { step: n + 1, t: next.t.as_f64(), energy: e });
            }
            divergence.push(self.stokes.divergence_ratio(&next.u));
            if let Some(l) = log.as_mut() {
                l.records.push(self.energy_record(&next, Some(&state)));
            }
            if let Some(obs) = observer.as_mut() {
                obs(next.step, next.t, &next);
            }
            state = next;
        }
        Ok(RunOutput { final_state: state, energy: log, divergence, stats })
    }
}
