use sdmsfem::fem::MiniLayout;
use sdmsfem::mesh::{build_rect_mesh, Rect, Region, SideTags};
use sdmsfem::msfem::build_ms_space;
use sdmsfem::solver::{DarcySpace, StateVector};
use sdmsfem_cli::vtk::{fluid_grid, porous_grid};
use std::sync::Arc;

fn data_values(text: &str) -> Vec<f64> {
    let start = text.find("POINT_DATA").expect("point data");
    text[start..]
        .lines()
        .filter(|l| !l.starts_with(char::is_alphabetic))
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_solution_gives_zero_arrays() {
    let fluid =
        build_rect_mesh(Rect::new(0.0, 1.0, 1.0, 2.0).unwrap(), 3, 3, Region::Fluid, SideTags::fluid_above_interface())
            .unwrap();
    let porous = build_rect_mesh(
        Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(),
        3,
        3,
        Region::Porous,
        SideTags::porous_below_interface(),
    )
    .unwrap();
    let layout = MiniLayout::for_mesh(&fluid);
    let state = StateVector {
        u: vec![0.0; layout.num_velocity()],
        p: Some(vec![0.0; fluid.num_vertices()]),
        phi: vec![0.0; porous.num_vertices()],
        t: 0.5,
        step: 5,
    };

    let text = fluid_grid(&fluid, &layout, &state).render();
    assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
    assert!(text.contains(&format!("POINTS {} double", fluid.num_vertices())));
    assert!(text.contains(&format!("CELLS {} {}", fluid.num_triangles(), 4 * fluid.num_triangles())));
    assert!(text.contains("VECTORS u double") && text.contains("SCALARS p double 1"));
    let values = data_values(&text);
    assert_eq!(values.len(), 3 * fluid.num_vertices() + fluid.num_vertices());
    assert!(values.iter().all(|&v| v == 0.0));

    let p1 = DarcySpace::p1(&porous, |_| 1.0).unwrap();
    let text = porous_grid(&p1, &state).render();
    assert!(text.contains(&format!("POINTS {} double", porous.num_vertices())));
    assert!(data_values(&text).iter().all(|&v| v == 0.0));

    let ms = DarcySpace::MsFem(Arc::new(build_ms_space(&porous, &|_| 2.0, 2).unwrap()));
    let text = porous_grid(&ms, &state).render();
    assert!(text.contains(&format!("POINTS {} double", 6 * porous.num_triangles())));
    assert!(data_values(&text).iter().all(|&v| v == 0.0));
}

#[test]
fn multiscale_head_matches_nodal_combination() {
    let porous = build_rect_mesh(
        Rect::new(0.0, 1.0, 0.0, 1.0).unwrap(),
        2,
        2,
        Region::Porous,
        SideTags::porous_below_interface(),
    )
    .unwrap();
    let space = DarcySpace::MsFem(Arc::new(build_ms_space(&porous, &|_| 1.0, 2).unwrap()));
    // linear head is reproduced exactly by hat-like bases
    let phi: Vec<f64> = porous.vertices.iter().map(|p| 1.0 + 2.0 * p.x - p.y).collect();
    let state = StateVector { u: vec![], p: None, phi, t: 0.0, step: 0 };
    let grid = porous_grid(&space, &state);
    let (_, values) = &grid.scalars[0];
    for (p, v) in grid.points.iter().zip(values) {
        assert!((v - (1.0 + 2.0 * p.x - p.y)).abs() < 1e-12);
    }
}
