//! Offline multiscale basis: per coarse cell, three discrete harmonic
//! functions of `-∇·(K∇η) = 0` with linear boundary data, plus the coarse
//! matrices and loads they induce.

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{apply_dirichlet, assemble_square, p1_mass, p1_stiffness, ElementGeometry, FemError, TriangleRule};
use crate::linalg::{factor_spd, LinalgError, SparseMatrix};
use crate::mesh::{build_submesh, Mesh, MeshError, Point2, Region, SubMesh};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsfemError {
    #[error("multiscale space needs a porous mesh")]
    NotPorous,
    #[error("cell {cell}: local solve failed: {source}")]
    LocalSolve { cell: usize, source: LinalgError },
    #[error("cell {cell}: stored basis has {got} values per function, submesh has {expected}")]
    BasisSize { cell: usize, expected: usize, got: usize },
    #[error("expected {expected} coarse values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Fine quadrature point with the three weighted basis values
/// `w |J| η_i(x)`.
#[derive(Clone, Copy, Debug)]
struct QuadPoint<T> {
    x: Point2<T>,
    w_eta: [T; 3],
}

/// The three multiscale basis functions of one coarse cell.
#[derive(Clone, Debug)]
pub struct MsBasis<T> {
    pub cell: usize,
    pub sub: SubMesh<T>,
    /// Fine nodal values of `η_i`, `i = 0, 1, 2` matching the coarse
    /// triangle's vertex order.
    pub eta: [Vec<T>; 3],
    /// `∫_K K ∇η_i·∇η_j`.
    pub local_a1: [[T; 3]; 3],
    /// `∫_K η_i η_j`.
    pub local_a2: [[T; 3]; 3],
    /// `∫_K ∇η_i·∇η_j`.
    pub local_grad: [[T; 3]; 3],
    /// `∫_K η_i`.
    pub moment: [T; 3],
    quad: Vec<QuadPoint<T>>,
}

impl<T: Real> MsBasis<T> {
    /// Rebuilds a basis from stored nodal values (e.g. a loaded archive).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mesh: &Mesh<T>,
        cell: usize,
        nsplit: usize,
        eta: [Vec<T>; 3],
        local_a1: [[T; 3]; 3],
        local_a2: [[T; 3]; 3],
        local_grad: [[T; 3]; 3],
        moment: [T; 3],
    ) -> Result<Self, MsfemError> {
        let sub = build_submesh(mesh, cell, nsplit)?;
        let nf = sub.fine.num_vertices();
        for e in &eta {
            if e.len() != nf {
                return Err(MsfemError::BasisSize { cell, expected: nf, got: e.len() });
            }
        }
        let quad = quadrature_cache(&sub, &eta);
        Ok(Self { cell, sub, eta, local_a1, local_a2, local_grad, moment, quad })
    }

    /// Value and gradient of `Σ_i c_i η_i` at parent barycentrics `lam`.
    pub fn evaluate(&self, coeffs: &[T; 3], lam: [T; 3]) -> (T, [T; 2]) {
        let (t, fl) = self.sub.locate_barycentric(lam);
        let tri = self.sub.fine.triangles[t];
        let g = ElementGeometry::new(self.sub.fine.triangle_points(t));
        let mut val = T::zero();
        let mut grad = [T::zero(); 2];
        for a in 0..3 {
            let mut nodal = T::zero();
            for i in 0..3 {
                nodal += coeffs[i] * self.eta[i][tri[a]];
            }
            val += nodal * fl[a];
            grad[0] += nodal * g.grad_lambda[a][0];
            grad[1] += nodal * g.grad_lambda[a][1];
        }
        (val, grad)
    }

    /// `∫_K f η_i` on the cached fine quadrature.
    pub fn load<F: Fn(Point2<T>) -> T>(&self, f: F) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for q in &self.quad {
            let v = f(q.x);
            for i in 0..3 {
                out[i] += v * q.w_eta[i];
            }
        }
        out
    }
}

fn quadrature_cache<T: Real>(sub: &SubMesh<T>, eta: &[Vec<T>; 3]) -> Vec<QuadPoint<T>> {
    let rule = TriangleRule::<T>::three_point();
    let fine = &sub.fine;
    let mut quad = Vec::with_capacity(fine.num_triangles() * rule.len());
    for t in 0..fine.num_triangles() {
        let g = ElementGeometry::new(fine.triangle_points(t));
        let tri = fine.triangles[t];
        for (lam, w) in rule.iter() {
            let wj = w * g.jacobian();
            let mut w_eta = [T::zero(); 3];
            for (i, we) in w_eta.iter_mut().enumerate() {
                let e = &eta[i];
                *we = wj * (e[tri[0]] * lam[0] + e[tri[1]] * lam[1] + e[tri[2]] * lam[2]);
            }
            quad.push(QuadPoint { x: g.map(lam), w_eta });
        }
    }
    quad
}

/// Solves the three local cell problems on an `nsplit`-refined submesh.
pub fn compute_cell_basis<T, F>(
    mesh: &Mesh<T>,
    cell: usize,
    kfield: &F,
    nsplit: usize,
) -> Result<MsBasis<T>, MsfemError>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Sync,
{
    let sub = build_submesh(mesh, cell, nsplit)?;
    let fine = &sub.fine;
    let nf = fine.num_vertices();
    let rule = TriangleRule::<T>::three_point();
    let stiff = p1_stiffness(fine, kfield, &rule);
    let nodes: Vec<usize> = sub.boundary_map.iter().map(|b| b.0).collect();
    let zeros = vec![T::zero(); nodes.len()];
    let mut scratch = vec![T::zero(); nf];
    let (reduced, lift) = apply_dirichlet(&stiff, &mut scratch, &nodes, &zeros)?;
    let factor = factor_spd(&reduced).map_err(|source| MsfemError::LocalSolve { cell, source })?;

    let mut eta: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    // lift.nodes() is sorted; map boundary values accordingly
    let mut by_node = vec![[T::zero(); 3]; nf];
    for &(v, lam) in &sub.boundary_map {
        by_node[v] = lam;
    }
    for (i, e) in eta.iter_mut().enumerate() {
        let vals: Vec<T> = lift.nodes().iter().map(|&v| by_node[v][i]).collect();
        let mut rhs = vec![T::zero(); nf];
        lift.apply_rhs(&mut rhs, &vals)?;
        *e = factor.solve(&rhs).map_err(|source| MsfemError::LocalSolve { cell, source })?;
    }

    let mass = p1_mass(fine);
    let grad = p1_stiffness(fine, |_| T::one(), &TriangleRule::centroid());
    let mut local_a1 = [[T::zero(); 3]; 3];
    let mut local_a2 = [[T::zero(); 3]; 3];
    let mut local_grad = [[T::zero(); 3]; 3];
    let mut moment = [T::zero(); 3];
    let ones = vec![T::one(); nf];
    for i in 0..3 {
        for j in 0..3 {
            local_a1[i][j] = stiff.bilinear(&eta[i], &eta[j]);
            local_a2[i][j] = mass.bilinear(&eta[i], &eta[j]);
            local_grad[i][j] = grad.bilinear(&eta[i], &eta[j]);
        }
        moment[i] = mass.bilinear(&ones, &eta[i]);
    }
    // enforce exact symmetry of the stored local matrices
    for m in [&mut local_a1, &mut local_a2, &mut local_grad] {
        for i in 0..3 {
            for j in i + 1..3 {
                let avg = (m[i][j] + m[j][i]) * T::lit(0.5);
                m[i][j] = avg;
                m[j][i] = avg;
            }
        }
    }
    let quad = quadrature_cache(&sub, &eta);
    Ok(MsBasis { cell, sub, eta, local_a1, local_a2, local_grad, moment, quad })
}

/// Multiscale coarse space over a porous mesh.
#[derive(Clone, Debug)]
pub struct MsSpace<T> {
    pub coarse: Mesh<T>,
    pub nsplit: usize,
    pub bases: Vec<MsBasis<T>>,
    /// `∫ K ∇η_i·∇η_j` over coarse vertex dofs.
    pub a1: SparseMatrix<T>,
    /// `∫ η_i η_j`.
    pub a2: SparseMatrix<T>,
    /// `∫ ∇η_i·∇η_j`.
    pub grad: SparseMatrix<T>,
}

/// Builds every cell basis in parallel on the current rayon pool and
/// assembles the coarse matrices in cell order.
pub fn build_ms_space<T, F>(mesh: &Mesh<T>, kfield: &F, nsplit: usize) -> Result<MsSpace<T>, MsfemError>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Sync,
{
    if mesh.region != Region::Porous {
        return Err(MsfemError::NotPorous);
    }
    if nsplit < 2 {
        log::warn!("nsplit = {nsplit}: the multiscale basis reduces to linear hats");
    }
    let bases: Vec<MsBasis<T>> = (0..mesh.num_triangles())
        .into_par_iter()
        .map(|c| compute_cell_basis(mesh, c, kfield, nsplit))
        .collect::<Result<_, _>>()?;
    MsSpace::from_bases(mesh, nsplit, bases)
}

impl<T: Real> MsSpace<T> {
    pub fn from_bases(mesh: &Mesh<T>, nsplit: usize, bases: Vec<MsBasis<T>>) -> Result<Self, MsfemError> {
        if bases.len() != mesh.num_triangles() {
            return Err(MsfemError::LengthMismatch { expected: mesh.num_triangles(), got: bases.len() });
        }
        let n = mesh.num_vertices();
        let a1 = assemble_square(n, &mesh.triangles, |t| bases[t].local_a1);
        let a2 = assemble_square(n, &mesh.triangles, |t| bases[t].local_a2);
        let grad = assemble_square(n, &mesh.triangles, |t| bases[t].local_grad);
        Ok(Self { coarse: mesh.clone(), nsplit, bases, a1, a2, grad })
    }

    pub fn num_dofs(&self) -> usize {
        self.coarse.num_vertices()
    }

    /// `B_j = Σ_K ∫_K f η_j` on the cached fine quadrature.
    pub fn load<F>(&self, f: F) -> Vec<T>
    where
        F: Fn(Point2<T>) -> T + Sync,
    {
        let locals: Vec<[T; 3]> = self.bases.par_iter().map(|b| b.load(&f)).collect();
        let mut out = vec![T::zero(); self.num_dofs()];
        for (tri, l) in self.coarse.triangles.iter().zip(&locals) {
            for a in 0..3 {
                out[tri[a]] += l[a];
            }
        }
        out
    }

    /// Value and gradient of the multiscale field with coarse nodal
    /// coefficients `coeffs` at `p`.
    pub fn evaluate(&self, coeffs: &[T], p: Point2<T>) -> Result<(T, [T; 2]), MsfemError> {
        if coeffs.len() != self.num_dofs() {
            return Err(MsfemError::LengthMismatch { expected: self.num_dofs(), got: coeffs.len() });
        }
        let (cell, lam) = self.coarse.locate_point(p)?;
        Ok(self.evaluate_in(coeffs, cell, lam))
    }

    pub fn evaluate_in(&self, coeffs: &[T], cell: usize, lam: [T; 3]) -> (T, [T; 2]) {
        let tri = self.coarse.triangles[cell];
        let c = [coeffs[tri[0]], coeffs[tri[1]], coeffs[tri[2]]];
        self.bases[cell].evaluate(&c, lam)
    }
}

/// `ms_load` for a time-dependent source: `B(t)_j = Σ_K ∫_K f(·, t) η_j`.
pub fn ms_load<T, F>(space: &MsSpace<T>, f: F, t: T) -> Vec<T>
where
    T: Real,
    F: Fn(Point2<T>, T) -> T + Sync,
{
    space.load(|x| f(x, t))
}

/// Cached load for separable sources `f(x, t) = σ(t) ρ(x)`.
#[derive(Clone, Debug)]
pub struct SeparableLoad<T> {
    rho_moments: Vec<T>,
}

impl<T: Real> SeparableLoad<T> {
    pub fn new<F: Fn(Point2<T>) -> T + Sync>(space: &MsSpace<T>, rho: F) -> Self {
        Self { rho_moments: space.load(rho) }
    }

    pub fn at(&self, sigma: T) -> Vec<T> {
        self.rho_moments.iter().map(|&m| sigma * m).collect()
    }
}

/// Value and gradient of a multiscale field at `p`.
pub fn ms_evaluate<T: Real>(space: &MsSpace<T>, coeffs: &[T], p: Point2<T>) -> Result<(T, [T; 2]), MsfemError> {
    space.evaluate(coeffs, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, BoundaryTag, Rect, SideTags};

    fn coarse(n: usize) -> Mesh<f64> {
        build_rect_mesh(
            Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            n,
            n,
            Region::Porous,
            SideTags::porous_below_interface(),
        )
        .unwrap()
    }

    fn k1(eps: f64) -> impl Fn(Point2<f64>) -> f64 + Sync {
        move |p| {
            let w = 2.0 * std::f64::consts::PI / eps;
            1.0 / ((2.0 + 1.5 * (w * p.x).sin()) * (2.0 + 1.5 * (w * p.y).cos()))
        }
    }

    #[test]
    fn constant_coefficient_gives_hats() {
        let m = coarse(2);
        let b = compute_cell_basis(&m, 3, &|_| 2.5, 8).unwrap();
        let parent = m.triangle_points(3);
        for (v, p) in b.sub.fine.vertices.iter().enumerate() {
            let lam = crate::mesh::barycentric(&parent, *p);
            for i in 0..3 {
                assert!((b.eta[i][v] - lam[i]).abs() < 1e-10);
            }
        }
        let g = ElementGeometry::new(parent);
        for i in 0..3 {
            for j in 0..3 {
                let p1 = 2.5
                    * g.area
                    * (g.grad_lambda[i][0] * g.grad_lambda[j][0] + g.grad_lambda[i][1] * g.grad_lambda[j][1]);
                assert!((b.local_a1[i][j] - p1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oscillatory_basis_invariants() {
        let m = coarse(2);
        let b = compute_cell_basis(&m, 1, &k1(0.1), 16).unwrap();
        for v in 0..b.sub.fine.num_vertices() {
            let s: f64 = (0..3).map(|i| b.eta[i][v]).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        for i in 0..3 {
            assert!((b.eta[i][b.sub.parent_vertex(i)] - 1.0).abs() < 1e-14);
            let row: f64 = b.local_a1[i].iter().sum();
            assert!(row.abs() < 1e-10);
            // linear on the boundary
            for &(v, lam) in &b.sub.boundary_map {
                assert!((b.eta[i][v] - lam[i]).abs() < 1e-12);
            }
        }
        let area = m.signed_area(1);
        assert!((b.moment.iter().sum::<f64>() - area).abs() < 1e-12);
    }

    #[test]
    fn space_invariants_and_evaluation() {
        let m = coarse(2);
        let space = build_ms_space(&m, &k1(0.2), 8).unwrap();
        assert!(space.a1.is_symmetric(1e-12));
        assert!(space.a2.is_symmetric(1e-12));
        let one = vec![1.0; space.num_dofs()];
        assert!((space.a2.bilinear(&one, &one) - 1.0).abs() < 1e-8);
        let f = space.load(|_| 1.0);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (v, g) = space.evaluate(&one, Point2::new(0.3, 0.7)).unwrap();
        assert!((v - 1.0).abs() < 1e-12 && g[0].abs() < 1e-10 && g[1].abs() < 1e-10);
        // Kronecker at coarse vertices
        let mut c = vec![0.0; space.num_dofs()];
        c[4] = 3.0;
        let (v, _) = space.evaluate(&c, m.vertices[4]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(space.evaluate(&c, Point2::new(1.5, 0.5)).is_err());
    }

    #[test]
    fn time_dependent_load_paths_agree() {
        let m = coarse(2);
        let space = build_ms_space(&m, &k1(0.25), 4).unwrap();
        let sep = SeparableLoad::new(&space, |_| 1.0);
        for t in [0.0, 0.3, 1.0] {
            let direct = ms_load(&space, |_, t| t, t);
            let cached = sep.at(t);
            for (a, b) in direct.iter().zip(&cached) {
                assert!((a - b).abs() < 1e-13);
            }
        }
        let b1 = ms_load(&space, |_, t| t, 1.0);
        let b07 = ms_load(&space, |_, t| t, 0.7);
        for (a, b) in b1.iter().zip(&b07) {
            assert!((0.7 * a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn rejects_fluid_mesh() {
        let m = build_rect_mesh(
            Rect::new(0.0, 1.0, 1.0, 2.0).unwrap(),
            2,
            2,
            Region::Fluid,
            SideTags::uniform(BoundaryTag::GammaF),
        )
        .unwrap();
        assert_eq!(build_ms_space(&m, &|_| 1.0, 4).unwrap_err(), MsfemError::NotPorous);
    }
}
