//! Structured triangulations of rectangles, per-cell lattice submeshes,
//! interface extraction and point location.
//!
//! Every square of an `nx × ny` grid is split along its `/` diagonal
//! (lower-left to upper-right corner). Uniform lattice refinement of either
//! half produces triangles that again belong to a `/`-split grid, so a
//! submesh of a coarse cell with `nsplit` divisions is nested in the global
//! grid of spacing `h / nsplit`.

use thiserror::Error;

use crate::scalar::Real;

/// Diagonal used to split every grid square, as recorded in run metadata.
pub const DIAGONAL: &str = "lower-left to upper-right";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid rectangle: require x0 < x1 and y0 < y1")]
    InvalidRect,
    #[error("number of subdivisions must be at least 1 (got nx={nx}, ny={ny})")]
    ZeroSubdivisions { nx: usize, ny: usize },
    #[error("refinement factor must be at least 1")]
    ZeroSplit,
    #[error("cell index {0} out of range")]
    InvalidCell(usize),
    #[error("point ({x}, {y}) lies outside the mesh")]
    PointOutside { x: f64, y: f64 },
    #[error("interface traces do not match: {0}")]
    InterfaceMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Convex combination `Σ λ_i p_i`.
    pub fn from_barycentric(p: &[Point2<T>; 3], lambda: &[T; 3]) -> Self {
        Self {
            x: lambda[0] * p[0].x + lambda[1] * p[1].x + lambda[2] * p[2].x,
            y: lambda[0] * p[0].y + lambda[1] * p[1].y + lambda[2] * p[2].y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
}

impl<T: Real> Rect<T> {
    pub fn new(x0: T, x1: T, y0: T, y1: T) -> Result<Self, MeshError> {
        let finite = x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite();
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(MeshError::InvalidRect);
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point2<T>, tol: T) -> bool {
        p.x >= self.x0 - tol && p.x <= self.x1 + tol && p.y >= self.y0 - tol && p.y <= self.y1 + tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Fluid,
    Porous,
}

/// Boundary part an edge belongs to: the fluid wall `Γ_f`, the porous
/// wall `Γ_p`, or the fluid/porous interface `Γ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    GammaF,
    GammaP,
    Interface,
}

/// Tag assignment for the four sides of a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideTags {
    pub bottom: BoundaryTag,
    pub right: BoundaryTag,
    pub top: BoundaryTag,
    pub left: BoundaryTag,
}

impl SideTags {
    pub fn uniform(tag: BoundaryTag) -> Self {
        Self { bottom: tag, right: tag, top: tag, left: tag }
    }

    /// Fluid layer sitting on top of the interface.
    pub fn fluid_above_interface() -> Self {
        Self { bottom: BoundaryTag::Interface, ..Self::uniform(BoundaryTag::GammaF) }
    }

    /// Porous layer below the interface.
    pub fn porous_below_interface() -> Self {
        Self { top: BoundaryTag::Interface, ..Self::uniform(BoundaryTag::GammaP) }
    }
}

/// Boundary edge, oriented counter-clockwise with respect to the triangle
/// that owns it (so the outward normal is the edge direction rotated by -90°).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Grid<T> {
    rect: Rect<T>,
    nx: usize,
    ny: usize,
}

#[derive(Clone, Debug)]
pub struct Mesh<T> {
    pub vertices: Vec<Point2<T>>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub region: Region,
    grid: Option<Grid<T>>,
}

/// Tolerance used for barycentric containment tests.
pub(crate) fn geom_tol<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
}

/// Builds an `nx × ny` structured grid over `rect`, each square split along
/// its `/` diagonal into two counter-clockwise triangles.
///
/// Vertex `(i, j)` has index `j * (nx + 1) + i`; the two triangles of square
/// `(i, j)` have indices `2 (j nx + i)` (below the diagonal) and
/// `2 (j nx + i) + 1` (above it).
pub fn build_rect_mesh<T: Real>(
    rect: Rect<T>,
    nx: usize,
    ny: usize,
    region: Region,
    tags: SideTags,
) -> Result<Mesh<T>, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::ZeroSubdivisions { nx, ny });
    }
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // interpolate from both ends so the far side is hit exactly
        let sy = T::from_count(j) / T::from_count(ny);
        let y = if j == ny { rect.y1 } else { rect.y0 + sy * rect.height() };
        for i in 0..=nx {
            let sx = T::from_count(i) / T::from_count(nx);
            let x = if i == nx { rect.x1 } else { rect.x0 + sx * rect.width() };
            vertices.push(Point2::new(x, y));
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary_edges.push(BoundaryEdge { vertices: [vid(i, 0), vid(i + 1, 0)], tag: tags.bottom });
    }
    for j in 0..ny {
        boundary_edges.push(BoundaryEdge { vertices: [vid(nx, j), vid(nx, j + 1)], tag: tags.right });
    }
    for i in (0..nx).rev() {
        boundary_edges.push(BoundaryEdge { vertices: [vid(i + 1, ny), vid(i, ny)], tag: tags.top });
    }
    for j in (0..ny).rev() {
        boundary_edges.push(BoundaryEdge { vertices: [vid(0, j + 1), vid(0, j)], tag: tags.left });
    }
    Ok(Mesh { vertices, triangles, boundary_edges, region, grid: Some(Grid { rect, nx, ny }) })
}

impl<T: Real> Mesh<T> {
    /// Assembles a mesh from raw parts. Point location falls back to a
    /// linear scan for meshes built this way.
    pub fn from_parts(
        vertices: Vec<Point2<T>>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
        region: Region,
    ) -> Self {
        Self { vertices, triangles, boundary_edges, region, grid: None }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Grid resolution `(nx, ny)` for structured meshes.
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid.map(|g| (g.nx, g.ny))
    }

    pub fn bounding_rect(&self) -> Option<Rect<T>> {
        if let Some(g) = self.grid {
            return Some(g.rect);
        }
        let mut it = self.vertices.iter();
        let first = it.next()?;
        let (mut x0, mut x1, mut y0, mut y1) = (first.x, first.x, first.y, first.y);
        for p in it {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        Rect::new(x0, x1, y0, y1).ok()
    }

    /// Largest leg length of the grid squares (`max(dx, dy)`), or the longest
    /// edge for unstructured input.
    pub fn mesh_size(&self) -> T {
        if let Some(g) = self.grid {
            return (g.rect.width() / T::from_count(g.nx)).max(g.rect.height() / T::from_count(g.ny));
        }
        let mut h = T::zero();
        for t in &self.triangles {
            for k in 0..3 {
                h = h.max(self.vertices[t[k]].dist(&self.vertices[t[(k + 1) % 3]]));
            }
        }
        h
    }

    pub fn triangle_points(&self, t: usize) -> [Point2<T>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Signed area of triangle `t` (positive for counter-clockwise).
    pub fn signed_area(&self, t: usize) -> T {
        signed_area(&self.triangle_points(t))
    }

    pub fn total_area(&self) -> T {
        (0..self.num_triangles()).map(|t| self.signed_area(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> Point2<T> {
        let third = T::one() / T::lit(3.0);
        Point2::from_barycentric(&self.triangle_points(t), &[third, third, third])
    }

    /// Sorted, deduplicated vertices lying on edges carrying `tag`.
    pub fn tagged_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut v: Vec<usize> = self.boundary_edges.iter().filter(|e| e.tag == tag).flat_map(|e| e.vertices).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn edges_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryEdge> {
        self.boundary_edges.iter().filter(move |e| e.tag == tag)
    }

    /// Number of triangles sharing each undirected edge, keyed by sorted
    /// vertex pair. Interior edges of a conforming mesh appear twice.
    pub fn edge_multiplicity(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        let mut map = std::collections::BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *map.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        map
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: Point2<T>) -> [T; 3] {
        barycentric(&self.triangle_points(t), p)
    }

    /// Finds a triangle containing `p`. Ties on shared edges and vertices go
    /// to the lowest triangle index.
    pub fn locate_point(&self, p: Point2<T>) -> Result<(usize, [T; 3]), MeshError> {
        let tol = geom_tol::<T>();
        let outside = || MeshError::PointOutside { x: p.x.as_f64(), y: p.y.as_f64() };
        if !p.is_finite() {
            return Err(outside());
        }
        if let Some(g) = self.grid {
            if !g.rect.contains(p, tol) {
                return Err(outside());
            }
            let dx = g.rect.width() / T::from_count(g.nx);
            let dy = g.rect.height() / T::from_count(g.ny);
            let fi = ((p.x - g.rect.x0) / dx).floor().to_isize().unwrap_or(0);
            let fj = ((p.y - g.rect.y0) / dy).floor().to_isize().unwrap_or(0);
            let mut best: Option<(usize, [T; 3])> = None;
            for j in (fj - 1)..=(fj + 1) {
                if j < 0 || j >= g.ny as isize {
                    continue;
                }
                for i in (fi - 1)..=(fi + 1) {
                    if i < 0 || i >= g.nx as isize {
                        continue;
                    }
                    let base = 2 * (j as usize * g.nx + i as usize);
                    for t in [base, base + 1] {
                        if best.is_some_and(|(b, _)| b <= t) {
                            continue;
                        }
                        let lam = self.barycentric(t, p);
                        if lam.iter().all(|&l| l >= -tol) {
                            best = Some((t, lam));
                        }
                    }
                }
            }
            if let Some(found) = best {
                return Ok(found);
            }
        }
        self.locate_point_scan(p).ok_or_else(outside)
    }

    /// Brute-force point location over all triangles.
    pub fn locate_point_scan(&self, p: Point2<T>) -> Option<(usize, [T; 3])> {
        let tol = geom_tol::<T>();
        (0..self.num_triangles()).find_map(|t| {
            let lam = self.barycentric(t, p);
            lam.iter().all(|&l| l >= -tol).then_some((t, lam))
        })
    }
}

pub fn signed_area<T: Real>(p: &[Point2<T>; 3]) -> T {
    let half = T::lit(0.5);
    half * ((p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y))
}

pub fn barycentric<T: Real>(p: &[Point2<T>; 3], q: Point2<T>) -> [T; 3] {
    let det = (p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y);
    let l1 = ((q.x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (q.y - p[0].y)) / det;
    let l2 = ((p[1].x - p[0].x) * (q.y - p[0].y) - (q.x - p[0].x) * (p[1].y - p[0].y)) / det;
    [T::one() - l1 - l2, l1, l2]
}

/// Uniform lattice refinement of one coarse triangle.
#[derive(Clone, Debug)]
pub struct SubMesh<T> {
    pub parent_cell: usize,
    pub parent: [Point2<T>; 3],
    pub nsplit: usize,
    pub fine: Mesh<T>,
    /// Fine vertices on the parent boundary with their barycentric
    /// coordinates in the parent triangle.
    pub boundary_map: Vec<(usize, [T; 3])>,
}

/// Refines triangle `cell` of `mesh` into `nsplit²` similar triangles.
///
/// Lattice vertex `(a, b)` (`a + b ≤ nsplit`) sits at
/// `p0 + a/n (p1 - p0) + b/n (p2 - p0)`.
pub fn build_submesh<T: Real>(mesh: &Mesh<T>, cell: usize, nsplit: usize) -> Result<SubMesh<T>, MeshError> {
    if nsplit == 0 {
        return Err(MeshError::ZeroSplit);
    }
    if cell >= mesh.num_triangles() {
        return Err(MeshError::InvalidCell(cell));
    }
    let parent = mesh.triangle_points(cell);
    let n = nsplit;
    let nf = T::from_count(n);
    let mut vertices = Vec::with_capacity((n + 1) * (n + 2) / 2);
    let mut boundary_map = Vec::with_capacity(3 * n);
    for b in 0..=n {
        for a in 0..=(n - b) {
            let l1 = T::from_count(a) / nf;
            let l2 = T::from_count(b) / nf;
            let l0 = T::from_count(n - a - b) / nf;
            let lam = [l0, l1, l2];
            let idx = vertices.len();
            vertices.push(Point2::from_barycentric(&parent, &lam));
            if a == 0 || b == 0 || a + b == n {
                boundary_map.push((idx, lam));
            }
        }
    }
    let lattice = Lattice { n };
    let mut triangles = Vec::with_capacity(n * n);
    for b in 0..n {
        for a in 0..(n - b) {
            triangles.push([lattice.vertex(a, b), lattice.vertex(a + 1, b), lattice.vertex(a, b + 1)]);
            if a + b + 2 <= n {
                triangles.push([lattice.vertex(a + 1, b), lattice.vertex(a + 1, b + 1), lattice.vertex(a, b + 1)]);
            }
        }
    }
    let mut boundary_edges = Vec::with_capacity(3 * n);
    for a in 0..n {
        boundary_edges.push(BoundaryEdge {
            vertices: [lattice.vertex(a, 0), lattice.vertex(a + 1, 0)],
            tag: BoundaryTag::GammaP,
        });
    }
    for k in 0..n {
        let (a, b) = (n - k, k);
        boundary_edges.push(BoundaryEdge {
            vertices: [lattice.vertex(a, b), lattice.vertex(a - 1, b + 1)],
            tag: BoundaryTag::GammaP,
        });
    }
    for b in (0..n).rev() {
        boundary_edges.push(BoundaryEdge {
            vertices: [lattice.vertex(0, b + 1), lattice.vertex(0, b)],
            tag: BoundaryTag::GammaP,
        });
    }
    let fine = Mesh::from_parts(vertices, triangles, boundary_edges, mesh.region);
    Ok(SubMesh { parent_cell: cell, parent, nsplit, fine, boundary_map })
}

#[derive(Clone, Copy)]
struct Lattice {
    n: usize,
}

impl Lattice {
    fn vertex(&self, a: usize, b: usize) -> usize {
        // rows b' < b hold n + 1 - b' vertices each
        b * (self.n + 1) - b * b.saturating_sub(1) / 2 + a
    }

    fn upright(&self, a: usize, b: usize) -> usize {
        b * (2 * self.n - b) + 2 * a
    }
}

impl<T: Real> SubMesh<T> {
    /// Fine vertex index of parent vertex `i ∈ {0, 1, 2}`.
    pub fn parent_vertex(&self, i: usize) -> usize {
        let l = Lattice { n: self.nsplit };
        match i {
            0 => l.vertex(0, 0),
            1 => l.vertex(self.nsplit, 0),
            _ => l.vertex(0, self.nsplit),
        }
    }

    /// Fine triangle containing `p` and the barycentric coordinates of `p`
    /// in it. Computed directly from the lattice structure.
    pub fn locate(&self, p: Point2<T>) -> Result<(usize, [T; 3]), MeshError> {
        let lam = barycentric(&self.parent, p);
        let tol = geom_tol::<T>();
        if lam.iter().any(|&l| l < -tol) {
            return Err(MeshError::PointOutside { x: p.x.as_f64(), y: p.y.as_f64() });
        }
        Ok(self.locate_barycentric(lam))
    }

    /// Same as [`SubMesh::locate`] for a point given by parent barycentrics.
    pub fn locate_barycentric(&self, lam: [T; 3]) -> (usize, [T; 3]) {
        let n = self.nsplit;
        let nf = T::from_count(n);
        let s = (lam[1] * nf).max(T::zero());
        let r = (lam[2] * nf).max(T::zero());
        let clamp = |v: T, hi: usize| v.floor().to_usize().unwrap_or(0).min(hi);
        let b = clamp(r, n - 1);
        let a = clamp(s, n - 1 - b);
        let (fa, fb) = (s - T::from_count(a), r - T::from_count(b));
        let lattice = Lattice { n };
        let t = if fa + fb > T::one() && a + b + 2 <= n { lattice.upright(a, b) + 1 } else { lattice.upright(a, b) };
        let fine_lam = self.fine.barycentric(t, Point2::from_barycentric(&self.parent, &lam));
        (t, fine_lam)
    }
}

/// Matched pair of fluid-side and porous-side interface edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterfaceEdge<T> {
    /// Fluid mesh vertices, ordered by increasing position along `Γ`.
    pub fluid_edge: [usize; 2],
    /// Porous mesh vertices matching `fluid_edge` pairwise.
    pub porous_edge: [usize; 2],
    pub length: T,
    /// Unit normal pointing out of the fluid domain.
    pub unit_normal_nf: [T; 2],
    pub unit_tangent: [T; 2],
}

/// One-sided interface edge data: vertex pair sorted along the interface,
/// endpoints, and the outward normal of `mesh`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEdge<T> {
    pub vertices: [usize; 2],
    pub points: [Point2<T>; 2],
    pub length: T,
    pub outward_normal: [T; 2],
}

/// Interface edges of a single mesh, sorted by position along the interface
/// (lexicographically by midpoint `(x, y)`), endpoints ordered the same way.
pub fn interface_trace<T: Real>(mesh: &Mesh<T>) -> Vec<TraceEdge<T>> {
    let mut edges: Vec<TraceEdge<T>> = mesh
        .edges_with_tag(BoundaryTag::Interface)
        .map(|e| {
            let [a, b] = e.vertices;
            let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
            let len = pa.dist(&pb);
            // CCW orientation: outward normal is the direction rotated by -90°
            let normal = [(pb.y - pa.y) / len, -(pb.x - pa.x) / len];
            let swap = (pb.x, pb.y) < (pa.x, pa.y);
            let (vertices, points) = if swap { ([b, a], [pb, pa]) } else { ([a, b], [pa, pb]) };
            TraceEdge { vertices, points, length: len, outward_normal: normal }
        })
        .collect();
    let two = T::lit(2.0);
    edges.sort_by(|e, f| {
        let me = ((e.points[0].x + e.points[1].x) / two, (e.points[0].y + e.points[1].y) / two);
        let mf = ((f.points[0].x + f.points[1].x) / two, (f.points[0].y + f.points[1].y) / two);
        me.partial_cmp(&mf).unwrap_or(std::cmp::Ordering::Equal)
    });
    edges
}

/// Pairs the interface edges of the fluid and porous meshes. Both sides must
/// carry identical trace vertices (within `1e-10`).
pub fn extract_interface<T: Real>(fluid: &Mesh<T>, porous: &Mesh<T>) -> Result<Vec<InterfaceEdge<T>>, MeshError> {
    let fe = interface_trace(fluid);
    let pe = interface_trace(porous);
    if fe.len() != pe.len() {
        return Err(MeshError::InterfaceMismatch(format!("{} fluid edges vs {} porous edges", fe.len(), pe.len())));
    }
    let tol = T::lit(1e-10);
    fe.iter()
        .zip(&pe)
        .map(|(f, p)| {
            for k in 0..2 {
                if f.points[k].dist(&p.points[k]) > tol {
                    return Err(MeshError::InterfaceMismatch(format!(
                        "vertex ({}, {}) has no porous counterpart",
                        f.points[k].x, f.points[k].y
                    )));
                }
            }
            let n = f.outward_normal;
            Ok(InterfaceEdge {
                fluid_edge: f.vertices,
                porous_edge: p.vertices,
                length: f.length,
                unit_normal_nf: n,
                unit_tangent: [-n[1], n[0]],
            })
        })
        .collect()
}
