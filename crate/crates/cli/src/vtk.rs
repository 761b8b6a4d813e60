//! Legacy ASCII VTK unstructured grids.

use std::fmt::Write as _;

use sdmsfem::fem::MiniLayout;
use sdmsfem::mesh::{Mesh, Point2};
use sdmsfem::solver::{DarcySpace, StateVector};

/// Triangles with named point data.
pub struct VtkGrid {
    pub title: String,
    pub points: Vec<Point2<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub scalars: Vec<(String, Vec<f64>)>,
    pub vectors: Vec<(String, Vec<[f64; 2]>)>,
}

impl VtkGrid {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let n = self.points.len();
        let m = self.triangles.len();
        let _ = writeln!(s, "# vtk DataFile Version 3.0\n{}\nASCII\nDATASET UNSTRUCTURED_GRID", self.title);
        let _ = writeln!(s, "POINTS {n} double");
        for p in &self.points {
            let _ = writeln!(s, "{:e} {:e} 0", p.x, p.y);
        }
        let _ = writeln!(s, "CELLS {m} {}", 4 * m);
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "CELL_TYPES {m}");
        for _ in 0..m {
            s.push_str("5\n");
        }
        if !self.scalars.is_empty() || !self.vectors.is_empty() {
            let _ = writeln!(s, "POINT_DATA {n}");
        }
        for (name, values) in &self.vectors {
            let _ = writeln!(s, "VECTORS {name} double");
            for v in values {
                let _ = writeln!(s, "{:e} {:e} 0", v[0], v[1]);
            }
        }
        for (name, values) in &self.scalars {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in values {
                let _ = writeln!(s, "{v:e}");
            }
        }
        s
    }
}

/// Velocity and pressure at the fluid mesh vertices (bubbles vanish there).
pub fn fluid_grid(mesh: &Mesh<f64>, layout: &MiniLayout, state: &StateVector<f64>) -> VtkGrid {
    let nv = mesh.num_vertices();
    let u = (0..nv).map(|v| [state.u[layout.vertex(0, v)], state.u[layout.vertex(1, v)]]).collect();
    let mut scalars = Vec::new();
    if let Some(p) = &state.p {
        scalars.push(("p".to_string(), p[..nv].to_vec()));
    }
    VtkGrid {
        title: format!("fluid t={}", state.t),
        points: mesh.vertices.clone(),
        triangles: mesh.triangles.clone(),
        scalars,
        vectors: vec![("u".to_string(), u)],
    }
}

/// Hydraulic head on the coarse mesh (linear elements) or on the union of
/// the fine submeshes (multiscale elements).
pub fn porous_grid(space: &DarcySpace<f64>, state: &StateVector<f64>) -> VtkGrid {
    let title = format!("porous t={}", state.t);
    match space {
        DarcySpace::P1 { mesh, .. } => VtkGrid {
            title,
            points: mesh.vertices.clone(),
            triangles: mesh.triangles.clone(),
            scalars: vec![("phi".to_string(), state.phi.clone())],
            vectors: Vec::new(),
        },
        DarcySpace::MsFem(ms) => {
            let mut points = Vec::new();
            let mut triangles = Vec::new();
            let mut phi = Vec::new();
            for b in &ms.bases {
                let offset = points.len();
                let coarse = ms.coarse.triangles[b.cell];
                let c = [0, 1, 2].map(|i| state.phi[coarse[i]]);
                for (v, p) in b.sub.fine.vertices.iter().enumerate() {
                    points.push(*p);
                    phi.push(c[0] * b.eta[0][v] + c[1] * b.eta[1][v] + c[2] * b.eta[2][v]);
                }
                triangles.extend(b.sub.fine.triangles.iter().map(|t| t.map(|i| i + offset)));
            }
            VtkGrid { title, points, triangles, scalars: vec![("phi".to_string(), phi)], vectors: Vec::new() }
        }
    }
}
