use crate::mesh::{signed_area, Point2};
use crate::scalar::Real;

/// Affine triangle data: vertices, area and the constant gradients of the
/// barycentric coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry<T> {
    pub points: [Point2<T>; 3],
    pub area: T,
    pub grad_lambda: [[T; 2]; 3],
}

impl<T: Real> ElementGeometry<T> {
    pub fn new(points: [Point2<T>; 3]) -> Self {
        let area = signed_area(&points);
        let two_a = area + area;
        let mut grad_lambda = [[T::zero(); 2]; 3];
        for (i, g) in grad_lambda.iter_mut().enumerate() {
            let pj = points[(i + 1) % 3];
            let pk = points[(i + 2) % 3];
            *g = [(pj.y - pk.y) / two_a, (pk.x - pj.x) / two_a];
        }
        Self { points, area, grad_lambda }
    }

    #[inline]
    pub fn map(&self, lam: &[T; 3]) -> Point2<T> {
        Point2::from_barycentric(&self.points, lam)
    }

    /// Jacobian factor turning reference weights into physical ones.
    #[inline]
    pub fn jacobian(&self) -> T {
        self.area + self.area
    }
}

/// Local shape function families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeSet {
    /// The three barycentric hats.
    P1,
    /// The cubic bubble `27 λ0 λ1 λ2`.
    Bubble,
    /// Hats followed by the bubble.
    Mini,
}

impl ShapeSet {
    pub fn len(self) -> usize {
        match self {
            ShapeSet::P1 => 3,
            ShapeSet::Bubble => 1,
            ShapeSet::Mini => 4,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Values at `lam`; unused trailing slots are zero.
    pub fn values<T: Real>(self, lam: &[T; 3]) -> [T; 4] {
        let b = bubble(lam);
        match self {
            ShapeSet::P1 => [lam[0], lam[1], lam[2], T::zero()],
            ShapeSet::Bubble => [b, T::zero(), T::zero(), T::zero()],
            ShapeSet::Mini => [lam[0], lam[1], lam[2], b],
        }
    }

    pub fn gradients<T: Real>(self, lam: &[T; 3], grad_lambda: &[[T; 2]; 3]) -> [[T; 2]; 4] {
        let gb = bubble_gradient(lam, grad_lambda);
        let z = [T::zero(); 2];
        match self {
            ShapeSet::P1 => [grad_lambda[0], grad_lambda[1], grad_lambda[2], z],
            ShapeSet::Bubble => [gb, z, z, z],
            ShapeSet::Mini => [grad_lambda[0], grad_lambda[1], grad_lambda[2], gb],
        }
    }
}

#[inline]
pub fn bubble<T: Real>(lam: &[T; 3]) -> T {
    T::lit(27.0) * lam[0] * lam[1] * lam[2]
}

#[inline]
pub fn bubble_gradient<T: Real>(lam: &[T; 3], g: &[[T; 2]; 3]) -> [T; 2] {
    let c = T::lit(27.0);
    let (a, b, d) = (lam[1] * lam[2], lam[0] * lam[2], lam[0] * lam[1]);
    [c * (a * g[0][0] + b * g[1][0] + d * g[2][0]), c * (a * g[0][1] + b * g[1][1] + d * g[2][1])]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> ElementGeometry<f64> {
        ElementGeometry::new([Point2::new(0.1, 0.2), Point2::new(1.3, 0.4), Point2::new(0.5, 1.1)])
    }

    #[test]
    fn p1_kronecker_and_partition() {
        let g = geom();
        for j in 0..3 {
            let mut lam = [0.0; 3];
            lam[j] = 1.0;
            let v = ShapeSet::P1.values(&lam);
            for i in 0..3 {
                assert_eq!(v[i], if i == j { 1.0 } else { 0.0 });
            }
        }
        let s: [f64; 2] = [0, 1].map(|c| g.grad_lambda.iter().map(|gl| gl[c]).sum());
        assert!(s[0].abs() < 1e-14 && s[1].abs() < 1e-14);
        // ∇λ_i · (p_j - p_k) consistent with λ_i(p_j) = δ_ij
        for i in 0..3 {
            for j in 0..3 {
                let d = [g.points[j].x - g.points[0].x, g.points[j].y - g.points[0].y];
                let change = g.grad_lambda[i][0] * d[0] + g.grad_lambda[i][1] * d[1];
                let expect = (i == j) as u8 as f64 - (i == 0) as u8 as f64;
                assert!((change - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bubble_properties() {
        let third: f64 = 1.0 / 3.0;
        assert!((bubble(&[third; 3]) - 1.0).abs() < 1e-15);
        assert_eq!(bubble(&[0.0, 0.3, 0.7]), 0.0);
        let g = geom();
        let gb = bubble_gradient(&[third; 3], &g.grad_lambda);
        assert!(gb[0].abs() < 1e-14 && gb[1].abs() < 1e-14);
        // finite-difference check of the gradient
        let lam = [0.2, 0.5, 0.3];
        let x = g.map(&lam);
        let h = 1e-6;
        let bary = |p: Point2<f64>| crate::mesh::barycentric(&g.points, p);
        let fx = (bubble(&bary(Point2::new(x.x + h, x.y))) - bubble(&bary(Point2::new(x.x - h, x.y)))) / (2.0 * h);
        let fy = (bubble(&bary(Point2::new(x.x, x.y + h))) - bubble(&bary(Point2::new(x.x, x.y - h)))) / (2.0 * h);
        let gb = bubble_gradient(&lam, &g.grad_lambda);
        assert!((gb[0] - fx).abs() < 1e-7 && (gb[1] - fy).abs() < 1e-7);
    }
}
