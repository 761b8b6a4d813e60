use super::quadrature::EdgeRule;
use super::{FemError, MiniLayout};
use crate::linalg::{SparseMatrix, TripletBuilder};
use crate::mesh::{interface_trace, Mesh, Point2, TraceEdge};
use crate::scalar::Real;

/// Coupling of fluid and porous P1 traces along a straight interface.
///
/// Stores `C_ij = ∫_Γ λ^f_i λ^p_j ds` (fluid vertex `i`, porous vertex `j`)
/// integrated exactly on the common refinement of both edge partitions, so
/// the two meshes need not match along `Γ`. Bubbles vanish on edges and do
/// not appear.
#[derive(Clone, Debug)]
pub struct InterfaceCoupling<T> {
    c: SparseMatrix<T>,
    normal: [T; 2],
    length: T,
}

impl<T: Real> InterfaceCoupling<T> {
    pub fn new(fluid: &Mesh<T>, porous: &Mesh<T>) -> Result<Self, FemError> {
        let fe = interface_trace(fluid);
        let pe = interface_trace(porous);
        if fe.is_empty() || pe.is_empty() {
            return Err(FemError::Interface("a mesh has no interface edges".into()));
        }
        let origin = fe[0].points[0];
        let end = fe[fe.len() - 1].points[1];
        let total = origin.dist(&end);
        let dir = [(end.x - origin.x) / total, (end.y - origin.y) / total];
        let normal = fe[0].outward_normal;
        let tol = T::lit(1e-10) * total.max(T::one());
        let param = |p: Point2<T>| (p.x - origin.x) * dir[0] + (p.y - origin.y) * dir[1];
        let offset = |p: Point2<T>| ((p.x - origin.x) * dir[1] - (p.y - origin.y) * dir[0]).abs();
        for e in fe.iter().chain(&pe) {
            if e.points.iter().any(|&p| offset(p) > tol) {
                return Err(FemError::Interface("interface is not a single straight segment".into()));
            }
        }
        let span = |edges: &[TraceEdge<T>]| (param(edges[0].points[0]), param(edges[edges.len() - 1].points[1]));
        let (f0, f1) = span(&fe);
        let (p0, p1) = span(&pe);
        if (f0 - p0).abs() > tol || (f1 - p1).abs() > tol {
            return Err(FemError::Interface("fluid and porous traces cover different segments".into()));
        }
        let mut breaks: Vec<T> = fe.iter().chain(&pe).flat_map(|e| [param(e.points[0]), param(e.points[1])]).collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() <= tol);

        let rule = EdgeRule::<T>::gauss(2)?;
        let mut b = TripletBuilder::new(fluid.num_vertices(), porous.num_vertices());
        let (mut fi, mut pi) = (0, 0);
        let half = T::lit(0.5);
        for w in breaks.windows(2) {
            let (sa, sb) = (w[0], w[1]);
            let mid = (sa + sb) * half;
            while fi + 1 < fe.len() && param(fe[fi].points[1]) <= mid {
                fi += 1;
            }
            while pi + 1 < pe.len() && param(pe[pi].points[1]) <= mid {
                pi += 1;
            }
            let (ef, ep) = (&fe[fi], &pe[pi]);
            let local = |e: &TraceEdge<T>, s: T| {
                let (a, z) = (param(e.points[0]), param(e.points[1]));
                let mu = (s - a) / (z - a);
                [T::one() - mu, mu]
            };
            for (&q, &wq) in rule.points.iter().zip(&rule.weights) {
                let s = sa + q * (sb - sa);
                let (lf, lp) = (local(ef, s), local(ep, s));
                let wl = wq * (sb - sa);
                for a in 0..2 {
                    for c in 0..2 {
                        b.push(ef.vertices[a], ep.vertices[c], wl * lf[a] * lp[c]);
                    }
                }
            }
        }
        Ok(Self { c: b.build(), normal, length: f1 - f0 })
    }

    pub fn matrix(&self) -> &SparseMatrix<T> {
        &self.c
    }

    /// Unit normal pointing out of the fluid domain.
    pub fn normal(&self) -> [T; 2] {
        self.normal
    }

    pub fn length(&self) -> T {
        self.length
    }

    /// Adds `v ↦ -g ∫_Γ φ v·n_f` to a MINI velocity right-hand side, `φ`
    /// given by porous vertex values.
    pub fn add_stokes_vector(&self, layout: &MiniLayout, phi: &[T], g: T, out: &mut [T]) -> Result<(), FemError> {
        if phi.len() != self.c.ncols() {
            return Err(FemError::LengthMismatch { expected: self.c.ncols(), got: phi.len() });
        }
        if out.len() != layout.num_velocity() || layout.nv != self.c.nrows() {
            return Err(FemError::LengthMismatch { expected: layout.num_velocity(), got: out.len() });
        }
        for i in 0..self.c.nrows() {
            let (cols, vals) = self.c.row(i);
            if cols.is_empty() {
                continue;
            }
            let mut s = T::zero();
            for (&j, &v) in cols.iter().zip(vals) {
                s += v * phi[j];
            }
            for c in 0..2 {
                out[layout.vertex(c, i)] -= g * self.normal[c] * s;
            }
        }
        Ok(())
    }

    pub fn stokes_vector(&self, layout: &MiniLayout, phi: &[T], g: T) -> Result<Vec<T>, FemError> {
        let mut out = vec![T::zero(); layout.num_velocity()];
        self.add_stokes_vector(layout, phi, g, &mut out)?;
        Ok(out)
    }

    /// Adds `ψ ↦ (1/S₀) ∫_Γ u·n_f ψ` to a porous right-hand side.
    pub fn add_darcy_vector(&self, layout: &MiniLayout, u: &[T], s0: T, out: &mut [T]) -> Result<(), FemError> {
        if u.len() != layout.num_velocity() || layout.nv != self.c.nrows() {
            return Err(FemError::LengthMismatch { expected: layout.num_velocity(), got: u.len() });
        }
        if out.len() != self.c.ncols() {
            return Err(FemError::LengthMismatch { expected: self.c.ncols(), got: out.len() });
        }
        let inv = T::one() / s0;
        for i in 0..self.c.nrows() {
            let (cols, vals) = self.c.row(i);
            if cols.is_empty() {
                continue;
            }
            let un = u[layout.vertex(0, i)] * self.normal[0] + u[layout.vertex(1, i)] * self.normal[1];
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += inv * v * un;
            }
        }
        Ok(())
    }

    pub fn darcy_vector(&self, layout: &MiniLayout, u: &[T], s0: T) -> Result<Vec<T>, FemError> {
        let mut out = vec![T::zero(); self.c.ncols()];
        self.add_darcy_vector(layout, u, s0, &mut out)?;
        Ok(out)
    }
}
