use rayon::prelude::*;

use super::quadrature::{EdgeRule, TriangleRule};
use super::shape::{ElementGeometry, ShapeSet};
use super::{FemError, MiniLayout};
use crate::linalg::SparseMatrix;
use crate::mesh::{interface_trace, Mesh, MeshError, Point2};
use crate::scalar::Real;

/// Elements per parallel batch. Local contributions are computed in
/// parallel and scattered in element order, so results never depend on the
/// thread count.
const BATCH: usize = 1 << 14;

/// Global square matrix from per-element dense blocks.
pub fn assemble_square<T, const N: usize, F>(n: usize, dofs: &[[usize; N]], local: F) -> SparseMatrix<T>
where
    T: Real,
    F: Fn(usize) -> [[T; N]; N] + Sync,
{
    let mut m = SparseMatrix::pattern_from_elements(n, dofs.iter().map(|d| &d[..]));
    scatter(&mut m, dofs, dofs, local);
    m
}

fn assemble_rect<T, const R: usize, const C: usize, F>(
    nrows: usize,
    ncols: usize,
    rdofs: &[[usize; R]],
    cdofs: &[[usize; C]],
    local: F,
) -> SparseMatrix<T>
where
    T: Real,
    F: Fn(usize) -> [[T; C]; R] + Sync,
{
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); nrows];
    for (r, c) in rdofs.iter().zip(cdofs) {
        for &i in r {
            rows[i].extend_from_slice(c);
        }
    }
    let mut m = SparseMatrix::from_pattern(ncols, rows);
    scatter(&mut m, rdofs, cdofs, local);
    m
}

fn scatter<T, const R: usize, const C: usize, F>(
    m: &mut SparseMatrix<T>,
    rdofs: &[[usize; R]],
    cdofs: &[[usize; C]],
    local: F,
) where
    T: Real,
    F: Fn(usize) -> [[T; C]; R] + Sync,
{
    let ne = rdofs.len();
    let mut start = 0;
    while start < ne {
        let end = (start + BATCH).min(ne);
        let blocks: Vec<[[T; C]; R]> = (start..end).into_par_iter().map(&local).collect();
        for (e, block) in (start..end).zip(&blocks) {
            m.add_block(&rdofs[e], &cdofs[e], block).expect("pattern built from the same element dofs");
        }
        start = end;
    }
}

fn assemble_vector<T, const N: usize, F>(n: usize, dofs: &[[usize; N]], local: F) -> Vec<T>
where
    T: Real,
    F: Fn(usize) -> [T; N] + Sync,
{
    let mut out = vec![T::zero(); n];
    let ne = dofs.len();
    let mut start = 0;
    while start < ne {
        let end = (start + BATCH).min(ne);
        let blocks: Vec<[T; N]> = (start..end).into_par_iter().map(&local).collect();
        for (e, block) in (start..end).zip(&blocks) {
            for (&i, &v) in dofs[e].iter().zip(block) {
                out[i] += v;
            }
        }
        start = end;
    }
    out
}

/// `∫ c ∇φ_i·∇φ_j` over P1 hats, with `c` sampled at the points of `rule`.
pub fn p1_stiffness<T, F>(mesh: &Mesh<T>, coeff: F, rule: &TriangleRule<T>) -> SparseMatrix<T>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Sync,
{
    assemble_square(mesh.num_vertices(), &mesh.triangles, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut cbar = T::zero();
        for (lam, w) in rule.iter() {
            cbar += w * coeff(g.map(lam));
        }
        cbar *= g.jacobian();
        let mut k = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (g.grad_lambda[i], g.grad_lambda[j]);
                k[i][j] = cbar * (a[0] * b[0] + a[1] * b[1]);
            }
        }
        k
    })
}

/// Exact P1 mass matrix.
pub fn p1_mass<T: Real>(mesh: &Mesh<T>) -> SparseMatrix<T> {
    assemble_square(mesh.num_vertices(), &mesh.triangles, |t| p1_local_mass(mesh.signed_area(t)))
}

pub(crate) fn p1_local_mass<T: Real>(area: T) -> [[T; 3]; 3] {
    let off = area / T::lit(12.0);
    let diag = off + off;
    [[diag, off, off], [off, diag, off], [off, off, diag]]
}

/// `∫ f φ_i` over P1 hats.
pub fn p1_load<T, F>(mesh: &Mesh<T>, f: F, rule: &TriangleRule<T>) -> Vec<T>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Sync,
{
    assemble_vector(mesh.num_vertices(), &mesh.triangles, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut v = [T::zero(); 3];
        for (lam, w) in rule.iter() {
            let fw = w * f(g.map(lam)) * g.jacobian();
            for i in 0..3 {
                v[i] += fw * lam[i];
            }
        }
        v
    })
}

/// Value and gradient of a P1 field at `p`.
pub fn p1_evaluate<T: Real>(mesh: &Mesh<T>, values: &[T], p: Point2<T>) -> Result<(T, [T; 2]), MeshError> {
    let (t, lam) = mesh.locate_point(p)?;
    let tri = mesh.triangles[t];
    let g = ElementGeometry::new(mesh.triangle_points(t));
    let mut val = T::zero();
    let mut grad = [T::zero(); 2];
    for a in 0..3 {
        let c = values[tri[a]];
        val += c * lam[a];
        grad[0] += c * g.grad_lambda[a][0];
        grad[1] += c * g.grad_lambda[a][1];
    }
    Ok((val, grad))
}

/// The three Stokes operators on the MINI/P1 pair.
#[derive(Clone, Debug)]
pub struct StokesBlocks<T> {
    pub layout: MiniLayout,
    /// `2ν (D(u), D(v))`.
    pub a_visc: SparseMatrix<T>,
    /// `-(q, ∇·v)`: rows are pressure dofs, columns velocity dofs.
    pub b_div: SparseMatrix<T>,
    /// `(u, v)`.
    pub m_vel: SparseMatrix<T>,
}

/// Viscous, divergence and mass blocks on the MINI velocity space. All
/// element integrals use the 7-point rule except the mass, which is
/// integrated in closed form.
pub fn stokes_blocks<T: Real>(mesh: &Mesh<T>, nu: T) -> StokesBlocks<T> {
    let layout = MiniLayout::for_mesh(mesh);
    let rule = TriangleRule::<T>::seven_point();
    let vel_dofs: Vec<[usize; 8]> =
        mesh.triangles.iter().enumerate().map(|(t, tri)| layout.element_dofs(t, tri)).collect();
    let nvel = layout.num_velocity();

    let a_visc = assemble_square(nvel, &vel_dofs, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut k = [[T::zero(); 8]; 8];
        for (lam, w) in rule.iter() {
            let gr = ShapeSet::Mini.gradients(lam, &g.grad_lambda);
            let wj = w * g.jacobian() * nu;
            for a in 0..4 {
                for b in 0..4 {
                    let dot = gr[a][0] * gr[b][0] + gr[a][1] * gr[b][1];
                    for c in 0..2 {
                        for d in 0..2 {
                            let mut v = gr[a][d] * gr[b][c];
                            if c == d {
                                v += dot;
                            }
                            k[4 * c + a][4 * d + b] += wj * v;
                        }
                    }
                }
            }
        }
        k
    });

    let pres_dofs: Vec<[usize; 3]> = mesh.triangles.clone();
    let b_div = assemble_rect(mesh.num_vertices(), nvel, &pres_dofs, &vel_dofs, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut k = [[T::zero(); 8]; 3];
        for (lam, w) in rule.iter() {
            let gr = ShapeSet::Mini.gradients(lam, &g.grad_lambda);
            let wj = w * g.jacobian();
            for i in 0..3 {
                for a in 0..4 {
                    for c in 0..2 {
                        k[i][4 * c + a] -= wj * lam[i] * gr[a][c];
                    }
                }
            }
        }
        k
    });

    let m_vel = assemble_square(nvel, &vel_dofs, |t| {
        let area = mesh.signed_area(t);
        let p1 = p1_local_mass(area);
        // ∫ λ_i b = 3|K|/20, ∫ b² = 81|K|/280
        let pb = area * T::lit(3.0) / T::lit(20.0);
        let bb = area * T::lit(81.0) / T::lit(280.0);
        let mut k = [[T::zero(); 8]; 8];
        for c in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    k[4 * c + a][4 * c + b] = p1[a][b];
                }
                k[4 * c + a][4 * c + 3] = pb;
                k[4 * c + 3][4 * c + a] = pb;
            }
            k[4 * c + 3][4 * c + 3] = bb;
        }
        k
    });

    StokesBlocks { layout, a_visc, b_div, m_vel }
}

/// `Σ_c (∇u_c, ∇v_c)` on the MINI velocity space, for H1 seminorms.
pub fn mini_gradient<T: Real>(mesh: &Mesh<T>) -> SparseMatrix<T> {
    let layout = MiniLayout::for_mesh(mesh);
    let rule = TriangleRule::<T>::seven_point();
    let dofs: Vec<[usize; 8]> = mesh.triangles.iter().enumerate().map(|(t, tri)| layout.element_dofs(t, tri)).collect();
    assemble_square(layout.num_velocity(), &dofs, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut k = [[T::zero(); 8]; 8];
        for (lam, w) in rule.iter() {
            let gr = ShapeSet::Mini.gradients(lam, &g.grad_lambda);
            let wj = w * g.jacobian();
            for a in 0..4 {
                for b in 0..4 {
                    let v = wj * (gr[a][0] * gr[b][0] + gr[a][1] * gr[b][1]);
                    k[a][b] += v;
                    k[4 + a][4 + b] += v;
                }
            }
        }
        k
    })
}

/// `∫ f·v` over MINI velocities (7-point rule).
pub fn mini_load<T, F>(mesh: &Mesh<T>, layout: &MiniLayout, f: F) -> Vec<T>
where
    T: Real,
    F: Fn(Point2<T>) -> [T; 2] + Sync,
{
    let rule = TriangleRule::<T>::seven_point();
    let dofs: Vec<[usize; 8]> = mesh.triangles.iter().enumerate().map(|(t, tri)| layout.element_dofs(t, tri)).collect();
    assemble_vector(layout.num_velocity(), &dofs, |t| {
        let g = ElementGeometry::new(mesh.triangle_points(t));
        let mut v = [T::zero(); 8];
        for (lam, w) in rule.iter() {
            let fx = f(g.map(lam));
            let phi = ShapeSet::Mini.values(lam);
            let wj = w * g.jacobian();
            for a in 0..4 {
                v[a] += wj * fx[0] * phi[a];
                v[4 + a] += wj * fx[1] * phi[a];
            }
        }
        v
    })
}

/// Velocity and velocity gradient `[[∂x ux, ∂y ux], [∂x uy, ∂y uy]]` of a
/// MINI field at `p`.
pub fn mini_evaluate<T: Real>(
    mesh: &Mesh<T>,
    layout: &MiniLayout,
    u: &[T],
    p: Point2<T>,
) -> Result<([T; 2], [[T; 2]; 2]), MeshError> {
    let (t, lam) = mesh.locate_point(p)?;
    Ok(mini_evaluate_in(mesh, layout, u, t, &lam))
}

pub(crate) fn mini_evaluate_in<T: Real>(
    mesh: &Mesh<T>,
    layout: &MiniLayout,
    u: &[T],
    t: usize,
    lam: &[T; 3],
) -> ([T; 2], [[T; 2]; 2]) {
    let g = ElementGeometry::new(mesh.triangle_points(t));
    let dofs = layout.element_dofs(t, &mesh.triangles[t]);
    let phi = ShapeSet::Mini.values(lam);
    let gr = ShapeSet::Mini.gradients(lam, &g.grad_lambda);
    let mut val = [T::zero(); 2];
    let mut grad = [[T::zero(); 2]; 2];
    for c in 0..2 {
        for a in 0..4 {
            let coef = u[dofs[4 * c + a]];
            val[c] += coef * phi[a];
            grad[c][0] += coef * gr[a][0];
            grad[c][1] += coef * gr[a][1];
        }
    }
    (val, grad)
}

/// Beavers-Joseph-Saffman slip term `∫_Γ γ (u·τ)(v·τ)` on the fluid
/// interface, `γ = ν α √2 / √(trace Π)` with `trace Π = 2 K ν / g`.
/// Bubbles vanish on edges, so only vertex dofs couple.
pub fn bjs_boundary<T, F>(
    mesh: &Mesh<T>,
    layout: &MiniLayout,
    nu: T,
    alpha: T,
    g: T,
    kfield: F,
) -> Result<SparseMatrix<T>, FemError>
where
    T: Real,
    F: Fn(Point2<T>) -> T,
{
    let rule = EdgeRule::<T>::gauss(2)?;
    let two = T::lit(2.0);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); layout.num_velocity()];
    let edges = interface_trace(mesh);
    let mut locals = Vec::with_capacity(edges.len());
    for e in &edges {
        let tau = [-e.outward_normal[1], e.outward_normal[0]];
        let dofs = [
            layout.vertex(0, e.vertices[0]),
            layout.vertex(0, e.vertices[1]),
            layout.vertex(1, e.vertices[0]),
            layout.vertex(1, e.vertices[1]),
        ];
        let mut k = [[T::zero(); 4]; 4];
        for (&s, &w) in rule.points.iter().zip(&rule.weights) {
            let x = Point2::new(
                e.points[0].x + s * (e.points[1].x - e.points[0].x),
                e.points[0].y + s * (e.points[1].y - e.points[0].y),
            );
            let kval = kfield(x);
            if !(kval > T::zero()) {
                return Err(FemError::NonPositivePermeability {
                    x: x.x.as_f64(),
                    y: x.y.as_f64(),
                    value: kval.as_f64(),
                });
            }
            let gamma = nu * alpha * two.sqrt() / (two * kval * nu / g).sqrt();
            let lam = [T::one() - s, s];
            let wl = w * e.length * gamma;
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        for d in 0..2 {
                            k[2 * c + a][2 * d + b] += wl * lam[a] * lam[b] * tau[c] * tau[d];
                        }
                    }
                }
            }
        }
        for &i in &dofs {
            rows[i].extend_from_slice(&dofs);
        }
        locals.push((dofs, k));
    }
    let mut m = SparseMatrix::from_pattern(layout.num_velocity(), rows);
    for (dofs, k) in &locals {
        m.add_block(dofs, dofs, k)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, BoundaryTag, Rect, Region, SideTags};

    fn unit_triangle() -> Mesh<f64> {
        Mesh::from_parts(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
            vec![],
            Region::Porous,
        )
    }

    fn square(n: usize) -> Mesh<f64> {
        build_rect_mesh(
            Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            n,
            n,
            Region::Porous,
            SideTags::uniform(BoundaryTag::GammaP),
        )
        .unwrap()
    }

    #[test]
    fn unit_triangle_stiffness_and_mass() {
        let m = unit_triangle();
        let k = p1_stiffness(&m, |_| 1.0, &TriangleRule::three_point());
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - expect[i][j]).abs() < 1e-13);
            }
        }
        let mm = p1_mass(&m);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 2.0 } else { 1.0 } * 0.5 / 12.0;
                assert!((mm.get(i, j) - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn p1_load_partition_of_unity() {
        let m = square(4);
        let f = p1_load(&m, |_| 1.0, &TriangleRule::three_point());
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(p1_load(&m, |_| 0.0, &TriangleRule::three_point()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stokes_blocks_single_triangle_bubble_entry() {
        let m = Mesh::from_parts(
            vec![Point2::new(0.2, 0.1), Point2::new(1.0, 0.3), Point2::new(0.4, 0.9)],
            vec![[0, 1, 2]],
            vec![],
            Region::Fluid,
        );
        let s = stokes_blocks(&m, 0.7);
        let bx = s.layout.bubble(0, 0);
        // ν(∫|∇b|² + ∫(∂x b)²)
        let g = ElementGeometry::new(m.triangle_points(0));
        let rule = TriangleRule::<f64>::seven_point();
        let mut oracle = 0.0;
        for (lam, w) in rule.iter() {
            let gb = super::super::shape::bubble_gradient(lam, &g.grad_lambda);
            oracle += w * g.jacobian() * 0.7 * (gb[0] * gb[0] + gb[1] * gb[1] + gb[0] * gb[0]);
        }
        assert!((s.a_visc.get(bx, bx) - oracle).abs() < 1e-13 * oracle);
        assert!(s.a_visc.is_symmetric(1e-12));
        assert!(s.m_vel.is_symmetric(1e-12));
    }
}
