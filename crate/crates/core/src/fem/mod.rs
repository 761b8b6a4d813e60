//! Element shape functions, quadrature and global assembly of the Darcy and
//! Stokes forms.

mod assembly;
mod dirichlet;
mod interface;
pub mod quadrature;
pub mod shape;

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::mesh::MeshError;

pub(crate) use assembly::mini_evaluate_in;
pub use assembly::{
    assemble_square, bjs_boundary, mini_evaluate, mini_gradient, mini_load, p1_evaluate, p1_load, p1_mass,
    p1_stiffness, stokes_blocks, StokesBlocks,
};
pub use dirichlet::{apply_dirichlet, DirichletLift};
pub use interface::InterfaceCoupling;
pub use quadrature::{EdgeRule, TriangleRule};
pub use shape::{ElementGeometry, ShapeSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("no built-in quadrature rule of degree {0}")]
    UnsupportedDegree(usize),
    #[error("permeability must be positive, got {value:e} at ({x}, {y})")]
    NonPositivePermeability { x: f64, y: f64, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dof {node} constrained to conflicting values")]
    ConflictingDirichlet { node: usize },
    #[error("dof {node} out of range")]
    DofOutOfRange { node: usize },
    #[error("interface traces do not overlap: {0}")]
    Interface(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Degree-of-freedom layout of the MINI velocity space on a mesh with `nv`
/// vertices and `nt` triangles: per component, the vertex values followed by
/// one bubble per triangle; the `x` component block precedes the `y` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiniLayout {
    pub nv: usize,
    pub nt: usize,
}

impl MiniLayout {
    pub fn new(nv: usize, nt: usize) -> Self {
        Self { nv, nt }
    }

    pub fn for_mesh<T>(mesh: &crate::mesh::Mesh<T>) -> Self {
        Self { nv: mesh.vertices.len(), nt: mesh.triangles.len() }
    }

    /// Dofs per velocity component.
    #[inline]
    pub fn per_component(&self) -> usize {
        self.nv + self.nt
    }

    #[inline]
    pub fn num_velocity(&self) -> usize {
        2 * self.per_component()
    }

    #[inline]
    pub fn vertex(&self, comp: usize, v: usize) -> usize {
        comp * self.per_component() + v
    }

    #[inline]
    pub fn bubble(&self, comp: usize, t: usize) -> usize {
        comp * self.per_component() + self.nv + t
    }

    /// `[ux λ0, ux λ1, ux λ2, ux b, uy λ0, uy λ1, uy λ2, uy b]`.
    pub fn element_dofs(&self, t: usize, tri: &[usize; 3]) -> [usize; 8] {
        let mut d = [0; 8];
        for c in 0..2 {
            for a in 0..3 {
                d[4 * c + a] = self.vertex(c, tri[a]);
            }
            d[4 * c + 3] = self.bubble(c, t);
        }
        d
    }

    pub fn is_bubble(&self, dof: usize) -> bool {
        dof % self.per_component() >= self.nv
    }
}
