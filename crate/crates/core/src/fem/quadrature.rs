use super::FemError;
use crate::scalar::Real;

/// Quadrature on the reference triangle. Points are barycentric triples and
/// the weights sum to the reference area 1/2, so a physical integral is
/// `2 |K| Σ w_q f(x_q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleRule<T> {
    pub points: Vec<[T; 3]>,
    pub weights: Vec<T>,
    pub degree: usize,
}

impl<T: Real> TriangleRule<T> {
    /// Cheapest built-in rule exact for polynomials of total degree
    /// `degree` (at most 5).
    pub fn with_degree(degree: usize) -> Result<Self, FemError> {
        match degree {
            0 | 1 => Ok(Self::centroid()),
            2 => Ok(Self::three_point()),
            3..=5 => Ok(Self::seven_point()),
            d => Err(FemError::UnsupportedDegree(d)),
        }
    }

    pub fn centroid() -> Self {
        let third = T::one() / T::lit(3.0);
        Self { points: vec![[third; 3]], weights: vec![T::lit(0.5)], degree: 1 }
    }

    pub fn three_point() -> Self {
        let a = T::one() / T::lit(6.0);
        let b = T::lit(2.0) / T::lit(3.0);
        Self { points: vec![[b, a, a], [a, b, a], [a, a, b]], weights: vec![a; 3], degree: 2 }
    }

    /// Radon's 7-point degree-5 rule.
    pub fn seven_point() -> Self {
        let s15 = T::lit(15.0).sqrt();
        let third = T::one() / T::lit(3.0);
        let a1 = (T::lit(6.0) - s15) / T::lit(21.0);
        let a2 = (T::lit(6.0) + s15) / T::lit(21.0);
        let b1 = T::one() - T::lit(2.0) * a1;
        let b2 = T::one() - T::lit(2.0) * a2;
        let w0 = T::lit(9.0) / T::lit(80.0);
        let w1 = (T::lit(155.0) - s15) / T::lit(2400.0);
        let w2 = (T::lit(155.0) + s15) / T::lit(2400.0);
        Self {
            points: vec![
                [third; 3],
                [b1, a1, a1],
                [a1, b1, a1],
                [a1, a1, b1],
                [b2, a2, a2],
                [a2, b2, a2],
                [a2, a2, b2],
            ],
            weights: vec![w0, w1, w1, w1, w2, w2, w2],
            degree: 5,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `(λ, w)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[T; 3], T)> {
        self.points.iter().zip(self.weights.iter().copied())
    }
}

/// Gauss-Legendre rule on the unit interval `[0, 1]`; weights sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRule<T> {
    pub points: Vec<T>,
    pub weights: Vec<T>,
    pub degree: usize,
}

impl<T: Real> EdgeRule<T> {
    pub fn gauss(n: usize) -> Result<Self, FemError> {
        let half = T::lit(0.5);
        match n {
            1 => Ok(Self { points: vec![half], weights: vec![T::one()], degree: 1 }),
            2 => {
                let d = half / T::lit(3.0).sqrt();
                Ok(Self { points: vec![half - d, half + d], weights: vec![half, half], degree: 3 })
            }
            3 => {
                let d = half * T::lit(0.6).sqrt();
                let w = T::lit(5.0) / T::lit(18.0);
                Ok(Self {
                    points: vec![half - d, half, half + d],
                    weights: vec![w, T::lit(4.0) / T::lit(9.0), w],
                    degree: 5,
                })
            }
            _ => Err(FemError::UnsupportedDegree(2 * n - 1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// ∫ ξ^a η^b over the reference triangle = a! b! / (a + b + 2)!.
    fn monomial(a: u32, b: u32) -> f64 {
        factorial(a) * factorial(b) / factorial(a + b + 2)
    }

    #[test]
    fn triangle_rules_exact_to_declared_degree() {
        for rule in [TriangleRule::<f64>::centroid(), TriangleRule::three_point(), TriangleRule::seven_point()] {
            let wsum: f64 = rule.weights.iter().sum();
            assert!((wsum - 0.5).abs() < 1e-15);
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            for a in 0..=rule.degree as u32 {
                for b in 0..=(rule.degree as u32 - a) {
                    let q: f64 = rule.iter().map(|(l, w)| w * l[1].powi(a as i32) * l[2].powi(b as i32)).sum();
                    assert!((q - monomial(a, b)).abs() < 1e-14, "degree {} monomial ({a},{b})", rule.degree);
                }
            }
        }
    }

    #[test]
    fn seven_point_not_exact_at_degree_six() {
        let rule = TriangleRule::<f64>::seven_point();
        let q: f64 = rule.iter().map(|(l, w)| w * l[1].powi(6)).sum();
        assert!((q - monomial(6, 0)).abs() > 1e-8);
    }

    #[test]
    fn edge_rules_exact() {
        for n in 1..=3 {
            let r = EdgeRule::<f64>::gauss(n).unwrap();
            for k in 0..=r.degree as i32 {
                let q: f64 = r.points.iter().zip(&r.weights).map(|(s, w)| w * s.powi(k)).sum();
                assert!((q - 1.0 / (k as f64 + 1.0)).abs() < 1e-15);
            }
        }
        assert!(EdgeRule::<f64>::gauss(4).is_err());
        assert!(TriangleRule::<f64>::with_degree(6).is_err());
    }
}
