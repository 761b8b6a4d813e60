use approx::assert_relative_eq;
use sdmsfem::fem::{
    bjs_boundary, mini_load, p1_load, p1_mass, p1_stiffness, stokes_blocks, ElementGeometry, MiniLayout, TriangleRule,
};
use sdmsfem::linalg::{cg, factor_spd, SparseMatrix};
use sdmsfem::mesh::{build_rect_mesh, BoundaryTag, Mesh, Point2, Rect, Region, SideTags};

fn unit_square(n: usize) -> Mesh<f64> {
    build_rect_mesh(
        Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(),
        n,
        n,
        Region::Porous,
        SideTags::uniform(BoundaryTag::GammaP),
    )
    .unwrap()
}

fn fluid(n: usize) -> Mesh<f64> {
    build_rect_mesh(Rect::new(0.0, 1.0, 1.0, 2.0).unwrap(), n, n, Region::Fluid, SideTags::fluid_above_interface())
        .unwrap()
}

fn k_example1(eps: f64) -> impl Fn(Point2<f64>) -> f64 + Sync {
    move |p: Point2<f64>| {
        let tp = 2.0 * std::f64::consts::PI / eps;
        1.0 / ((2.0 + 1.5 * (tp * p.x).sin()) * (2.0 + 1.5 * (tp * p.y).cos()))
    }
}

fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        m.swap(k, p);
        x.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k][k];
    }
    x
}

#[test]
fn stiffness_kernel_and_symmetry() {
    let m = unit_square(2);
    let k = p1_stiffness(&m, |_| 1.0, &TriangleRule::three_point());
    let y = k.spmv(&vec![1.0; m.num_vertices()]).unwrap();
    assert!(y.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn oscillatory_stiffness_matches_elementwise_oracle() {
    let m = unit_square(8);
    let kf = k_example1(0.5);
    let rule = TriangleRule::three_point();
    let k = p1_stiffness(&m, &kf, &rule);
    assert!(k.is_symmetric(1e-12));
    let n = m.num_vertices();
    let mut dense = vec![vec![0.0; n]; n];
    for t in 0..m.num_triangles() {
        let g = ElementGeometry::new(m.triangle_points(t));
        for (lam, w) in rule.iter() {
            let c = kf(g.map(lam)) * w * 2.0 * g.area;
            for a in 0..3 {
                for b in 0..3 {
                    let ga = g.grad_lambda[a];
                    let gb = g.grad_lambda[b];
                    dense[m.triangles[t][a]][m.triangles[t][b]] += c * (ga[0] * gb[0] + ga[1] * gb[1]);
                }
            }
        }
    }
    let scale = k.max_abs();
    for i in 0..n {
        for j in 0..n {
            assert!((k.get(i, j) - dense[i][j]).abs() <= 1e-13 * scale);
        }
    }
    // positive semidefinite: xᵀKx ≥ 0 on a few vectors
    for s in 0..5 {
        let x: Vec<f64> = (0..n).map(|i| ((i * 31 + s * 17) % 13) as f64 - 6.0).collect();
        assert!(k.bilinear(&x, &x) >= -1e-12);
    }
}

#[test]
fn mass_sums_to_area_and_is_spd() {
    let m = unit_square(5);
    let mm = p1_mass(&m);
    let one = vec![1.0; m.num_vertices()];
    assert_relative_eq!(mm.bilinear(&one, &one), 1.0, epsilon = 1e-12);
    assert!(factor_spd(&mm).is_ok());
}

#[test]
fn stiffness_plus_mass_matches_dense_solve() {
    let m = unit_square(4);
    let k = p1_stiffness(&m, |_| 1.0, &TriangleRule::three_point());
    let mm = p1_mass(&m);
    let a = SparseMatrix::linear_combination(&[(1.0, &k), (1.0, &mm)]).unwrap();
    let n = a.nrows();
    let b: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let x = factor_spd(&a).unwrap().solve(&b).unwrap();
    let xd = dense_solve(&a.to_dense(), &b);
    for (u, v) in x.iter().zip(&xd) {
        assert!((u - v).abs() < 1e-10);
    }
}

fn vertex_field(m: &Mesh<f64>, layout: &MiniLayout, f: impl Fn(Point2<f64>) -> [f64; 2]) -> Vec<f64> {
    let mut u = vec![0.0; layout.num_velocity()];
    for (v, p) in m.vertices.iter().enumerate() {
        let val = f(*p);
        u[layout.vertex(0, v)] = val[0];
        u[layout.vertex(1, v)] = val[1];
    }
    u
}

#[test]
fn stokes_blocks_annihilate_rigid_motions() {
    let m = fluid(4);
    let s = stokes_blocks(&m, 1.3);
    assert!(s.a_visc.is_symmetric(1e-12));
    for f in [|_: Point2<f64>| [1.0, 0.0], |_: Point2<f64>| [0.0, 1.0], |p: Point2<f64>| [-p.y, p.x]] {
        let u = vertex_field(&m, &s.layout, f);
        let au = s.a_visc.spmv(&u).unwrap();
        assert!(au.iter().all(|v| v.abs() < 1e-12), "viscous block");
        let bu = s.b_div.spmv(&u).unwrap();
        assert!(bu.iter().all(|v| v.abs() < 1e-12), "divergence block");
    }
}

#[test]
fn divergence_free_linear_field() {
    let m = fluid(3);
    let nu = 0.8;
    let s = stokes_blocks(&m, nu);
    let u = vertex_field(&m, &s.layout, |p| [p.x, -p.y]);
    let bu = s.b_div.spmv(&u).unwrap();
    assert!(bu.iter().all(|v| v.abs() < 1e-12));
    let energy = s.a_visc.bilinear(&u, &u);
    assert_relative_eq!(energy, 4.0 * nu * 1.0, epsilon = 1e-12);
    // mass of the constant field equals the area
    let one = vertex_field(&m, &s.layout, |_| [1.0, 0.0]);
    assert_relative_eq!(s.m_vel.bilinear(&one, &one), 1.0, epsilon = 1e-12);
}

#[test]
fn bjs_closed_form() {
    let m = fluid(1);
    let layout = MiniLayout::for_mesh(&m);
    let zero = bjs_boundary(&m, &layout, 1.0, 0.0, 1.0, |_| 1.0).unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
    let b = bjs_boundary(&m, &layout, 1.0, 1.0, 1.0, |_| 1.0).unwrap();
    assert!(b.is_symmetric(1e-12));
    for sign in [1.0, -1.0] {
        let u = vertex_field(&m, &layout, |_| [sign, 0.0]);
        assert_relative_eq!(b.bilinear(&u, &u), 1.0, epsilon = 1e-12);
    }
    // coefficient √2 ν α / √(2 K ν / g) with K = 4: factor 1/2
    let b4 = bjs_boundary(&m, &layout, 1.0, 1.0, 1.0, |_| 4.0).unwrap();
    let u = vertex_field(&m, &layout, |_| [1.0, 0.0]);
    assert_relative_eq!(b4.bilinear(&u, &u), 0.5, epsilon = 1e-12);
    assert!(bjs_boundary(&m, &layout, 1.0, 1.0, 1.0, |_| -1.0).is_err());
}

#[test]
fn loads_match_oracles() {
    let m = unit_square(4);
    let f = p1_load(&m, |_| 1.0, &TriangleRule::three_point());
    assert_relative_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-13);

    let fl = fluid(3);
    let layout = MiniLayout::for_mesh(&fl);
    let ff = |p: Point2<f64>| [(1.0 - 2.0 * p.x) * (p.y - 1.0), 0.0];
    let v = mini_load(&fl, &layout, ff);
    let rule = TriangleRule::<f64>::seven_point();
    let mut oracle = vec![0.0; layout.num_velocity()];
    for t in 0..fl.num_triangles() {
        let g = ElementGeometry::new(fl.triangle_points(t));
        let dofs = layout.element_dofs(t, &fl.triangles[t]);
        for (lam, w) in rule.iter() {
            let fx = ff(g.map(lam))[0] * w * 2.0 * g.area;
            for a in 0..3 {
                oracle[dofs[a]] += fx * lam[a];
            }
            oracle[dofs[3]] += fx * 27.0 * lam[0] * lam[1] * lam[2];
        }
    }
    for (a, b) in v.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-13);
    }
    assert!(mini_load(&fl, &layout, |_| [0.0, 0.0]).iter().all(|&x| x == 0.0));
}

#[test]
fn cg_matches_direct_on_tridiagonal() {
    let n = 100;
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        rows[i][i] = 2.0;
        if i + 1 < n {
            rows[i][i + 1] = -1.0;
            rows[i + 1][i] = -1.0;
        }
    }
    let a = SparseMatrix::from_dense(&rows);
    let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let it = cg(&a, &b, None, 1e-10, 1000).unwrap();
    let direct = factor_spd(&a).unwrap().solve(&b).unwrap();
    for (x, y) in it.solution.iter().zip(&direct) {
        assert!((x - y).abs() < 1e-8);
    }
}
