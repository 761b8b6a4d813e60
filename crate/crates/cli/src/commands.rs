use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use sdmsfem::experiments::{
    define_example, format_h, mesh_hash, reference_self_difference, reference_solve, resonance_study, spatial_study,
    temporal_study, ExampleDef, ExampleOverrides, Norms, NsplitPolicy, PermeabilityField,
};
use sdmsfem::mesh::{barycentric, Mesh};
use sdmsfem::msfem::{compute_cell_basis, MsSpace};
use sdmsfem::solver::{check_stability, CoupledSolver, DarcySpace, SchemeConfig, StabilityReport, StateVector};

use crate::archive::{archive_key, read_archive, write_archive, ArchiveMeta};
use crate::config::{Mode, RunConfig, Scheme, SplitPolicy};
use crate::error::CliError;
use crate::vtk::{fluid_grid, porous_grid};

/// Files written by one command.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

pub fn run(cfg: &RunConfig) -> Result<Outputs, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(cfg.out.display().to_string(), e))?;
    let work = || match cfg.mode {
        Mode::Offline => cmd_offline(cfg),
        Mode::Solve => cmd_solve(cfg),
        Mode::TableSpatial => cmd_table_spatial(cfg),
        Mode::TableResonance => cmd_table_resonance(cfg),
        Mode::TableTemporal => cmd_table_temporal(cfg),
        Mode::Snapshot => cmd_snapshot(cfg),
    };
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    }
}

pub fn build_example(cfg: &RunConfig, eps: f64) -> Result<ExampleDef, CliError> {
    let overrides = ExampleOverrides {
        amplitude: cfg.amplitude,
        permeability: cfg.k_const.map(|value| PermeabilityField::Constant { value }),
        t_final: Some(cfg.t_final),
        ..Default::default()
    };
    Ok(define_example(cfg.example, eps, &overrides)?)
}

fn kfield_text(example: &ExampleDef) -> Result<String, CliError> {
    serde_json::to_string(&example.permeability).map_err(|e| CliError::Output(e.to_string()))
}

fn write_json<S: Serialize>(path: &Path, value: &S, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path.display().to_string(), e))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn write_text(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path.display().to_string(), e))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn h_label(h: f64) -> String {
    format_h(h).replace('/', "-")
}

/// Largest distance between the basis and the linear hats over all fine nodes.
pub fn hat_deviation(space: &MsSpace<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for b in &space.bases {
        for (v, p) in b.sub.fine.vertices.iter().enumerate() {
            let lam = barycentric(&b.sub.parent, *p);
            for i in 0..3 {
                worst = worst.max((b.eta[i][v] - lam[i]).abs());
            }
        }
    }
    worst
}

fn verify_hats(cfg: &RunConfig, space: &MsSpace<f64>) -> Result<(), CliError> {
    if !cfg.verify_hats {
        return Ok(());
    }
    if cfg.k_const.is_none() {
        return Err(CliError::Config("--verify-hats needs a constant permeability (--k-const)".into()));
    }
    let gap = hat_deviation(space);
    if gap > 1e-10 {
        return Err(CliError::Numerical(format!("basis deviates from linear hats by {gap:e}")));
    }
    log::info!("basis equals linear hats to {gap:.1e}");
    Ok(())
}

#[derive(Serialize)]
struct CellTimings {
    cells: usize,
    cell_seconds_total: f64,
    cell_seconds_max: f64,
    wall_seconds: f64,
    parallel_speedup: f64,
    workers: usize,
}

/// Builds every cell basis, timing each local solve.
fn timed_ms_space(
    porous: &Mesh<f64>,
    example: &ExampleDef,
    nsplit: usize,
) -> Result<(MsSpace<f64>, CellTimings), CliError> {
    let field = example.permeability;
    let k = move |p| field.eval(p);
    let start = Instant::now();
    let built: Vec<_> = (0..porous.num_triangles())
        .into_par_iter()
        .map(|c| {
            let t = Instant::now();
            compute_cell_basis(porous, c, &k, nsplit).map(|b| (b, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, _>>()?;
    let wall = start.elapsed().as_secs_f64();
    let total: f64 = built.iter().map(|(_, s)| s).sum();
    let max = built.iter().map(|(_, s)| *s).fold(0.0, f64::max);
    let bases = built.into_iter().map(|(b, _)| b).collect();
    let space = MsSpace::from_bases(porous, nsplit, bases)?;
    let timings = CellTimings {
        cells: porous.num_triangles(),
        cell_seconds_total: total,
        cell_seconds_max: max,
        wall_seconds: wall,
        parallel_speedup: if wall > 0.0 { total / wall } else { 1.0 },
        workers: rayon::current_num_threads(),
    };
    Ok((space, timings))
}

fn default_archive_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(format!("basis_ex{}_h{}_n{}.msb", cfg.example, h_label(cfg.h), cfg.nsplit))
}

pub fn cmd_offline(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let mut files = Vec::new();
    let example = build_example(cfg, cfg.eps)?;
    let porous = example.porous_mesh(cfg.h)?;
    let (space, timings) = timed_ms_space(&porous, &example, cfg.nsplit)?;
    verify_hats(cfg, &space)?;
    let path = cfg.basis.clone().unwrap_or_else(|| default_archive_path(cfg));
    let hash = mesh_hash(&porous);
    let kfield = kfield_text(&example)?;
    let meta = ArchiveMeta { mesh_hash: &hash, eps: example.eps(), amplitude: cfg.amplitude, kfield: &kfield };
    write_archive(&path, &space, &meta)?;
    files.push(path.clone());
    log::info!(
        "{} cells in {:.3}s wall, {:.3}s summed, speedup {:.2} on {} workers",
        timings.cells,
        timings.wall_seconds,
        timings.cell_seconds_total,
        timings.parallel_speedup,
        timings.workers
    );
    write_json(&cfg.out.join(format!("timings_offline_ex{}.json", cfg.example)), &timings, &mut files)?;
    Ok(Outputs { files })
}

/// Coarse Darcy space for a solve: linear elements, a stored basis, or a
/// freshly built one when that is allowed.
fn darcy_space(cfg: &RunConfig, example: &ExampleDef, porous: &Mesh<f64>) -> Result<DarcySpace<f64>, CliError> {
    match cfg.scheme {
        Scheme::Fem => Ok(example.darcy_space(porous, cfg.scheme.kind(), cfg.nsplit)?),
        Scheme::Msfem => {
            let space = match &cfg.basis {
                Some(path) => {
                    let key = archive_key(&mesh_hash(porous), &kfield_text(example)?, cfg.nsplit);
                    let (header, space) = read_archive(path, porous, &key)?;
                    log::info!("reusing {} cell bases from {}", header.cells, path.display());
                    space
                }
                None if cfg.allow_offline => timed_ms_space(porous, example, cfg.nsplit)?.0,
                None => {
                    return Err(CliError::Config("the msfem scheme needs --basis <archive> or --allow-offline".into()))
                }
            };
            verify_hats(cfg, &space)?;
            Ok(DarcySpace::MsFem(Arc::new(space)))
        }
    }
}

fn build_solver(cfg: &RunConfig) -> Result<(CoupledSolver<f64>, String, String), CliError> {
    let example = build_example(cfg, cfg.eps)?;
    let fluid = example.fluid_mesh(cfg.h)?;
    let porous = example.porous_mesh(cfg.h)?;
    let hashes = (mesh_hash(&fluid), mesh_hash(&porous));
    let darcy = darcy_space(cfg, &example, &porous)?;
    let scheme = SchemeConfig {
        dt: cfg.dt,
        t_final: cfg.t_final,
        darcy_space: cfg.scheme.kind(),
        h: cfg.h,
        nsplit: cfg.nsplit,
        stability_monitor: cfg.monitor,
    };
    let solver = CoupledSolver::new(example.problem.clone(), fluid, darcy, scheme)?;
    Ok((solver, hashes.0, hashes.1))
}

#[derive(Serialize)]
struct SolveRecord<'a> {
    config: &'a RunConfig,
    fluid_mesh_hash: String,
    porous_mesh_hash: String,
    steps: usize,
    max_divergence: f64,
    stability: Option<StabilityReport>,
    energy: Option<&'a sdmsfem::solver::EnergyLog<f64>>,
    final_state: &'a StateVector<f64>,
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let mut files = Vec::new();
    let start = Instant::now();
    let (solver, fluid_hash, porous_hash) = build_solver(cfg)?;
    let setup = start.elapsed().as_secs_f64();
    let out = solver.run(None)?;
    let stability = out.energy.as_ref().map(check_stability);
    if let Some(s) = &stability {
        if !s.bounded {
            log::warn!("energy is not bounded along the run");
        }
    }
    let record = SolveRecord {
        config: cfg,
        fluid_mesh_hash: fluid_hash,
        porous_mesh_hash: porous_hash,
        steps: out.stats.steps,
        max_divergence: out.divergence.iter().copied().fold(0.0, f64::max),
        stability,
        energy: out.energy.as_ref(),
        final_state: &out.final_state,
    };
    let tag = format!("{}_h{}", cfg.tag(), h_label(cfg.h));
    write_json(&cfg.out.join(format!("run_solve_{tag}.json")), &record, &mut files)?;
    let timings = serde_json::json!({ "setup_seconds": setup, "total_seconds": start.elapsed().as_secs_f64() });
    write_json(&cfg.out.join(format!("timings_solve_{tag}.json")), &timings, &mut files)?;
    Ok(Outputs { files })
}

#[derive(Serialize)]
struct ReferenceRecord {
    h_stokes: f64,
    h_darcy: f64,
    dt: f64,
    fluid_mesh_hash: String,
    porous_mesh_hash: String,
    max_divergence: f64,
    self_difference: Norms,
}

pub fn cmd_table_spatial(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let mut files = Vec::new();
    let example = build_example(cfg, cfg.eps)?;
    let start = Instant::now();
    let reference = reference_solve(&example, &cfg.reference_for(cfg.eps))?;
    let reference_seconds = start.elapsed().as_secs_f64();
    let policy = match cfg.split_policy {
        SplitPolicy::FixedFine { h_fine } => NsplitPolicy::FixedFine { h_fine },
        SplitPolicy::Fixed { nsplit } => NsplitPolicy::Fixed { nsplit },
    };
    let mut table = spatial_study(&example, &cfg.hs, policy, cfg.dt, cfg.scheme.kind(), &reference)?;
    let self_difference = reference_self_difference(&example, &reference)?;
    table.assess_reference(&self_difference);
    if table.reference_adequate == Some(false) {
        log::warn!("reference failed its self-refinement check; see the reference_adequate column");
    }
    let tag = cfg.tag();
    let csv_path = cfg.out.join(format!("table_spatial_{tag}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(csv_path.display().to_string(), e))?;
    table.write_csv(file)?;
    files.push(csv_path);
    let reference_record = ReferenceRecord {
        h_stokes: reference.config.h_stokes,
        h_darcy: reference.config.h_darcy,
        dt: reference.config.dt,
        fluid_mesh_hash: mesh_hash(&reference.fluid),
        porous_mesh_hash: mesh_hash(reference.darcy.mesh()),
        max_divergence: reference.max_divergence,
        self_difference,
    };
    let meta = serde_json::json!({ "config": cfg, "reference": reference_record, "table": table });
    write_json(&cfg.out.join(format!("run_table_spatial_{tag}.json")), &meta, &mut files)?;
    let timings = serde_json::json!({ "reference_seconds": reference_seconds, "rows": table.timings, "total_seconds": start.elapsed().as_secs_f64() });
    write_json(&cfg.out.join(format!("timings_table_spatial_{tag}.json")), &timings, &mut files)?;
    Ok(Outputs { files })
}

pub fn cmd_table_resonance(cfg: &RunConfig) -> Result<Outputs, CliError> {
    if cfg.scheme != Scheme::Msfem {
        return Err(CliError::Config("the resonance table compares multiscale runs; use --scheme msfem".into()));
    }
    let mut files = Vec::new();
    let start = Instant::now();
    let overrides = ExampleOverrides {
        amplitude: cfg.amplitude,
        permeability: cfg.k_const.map(|value| PermeabilityField::Constant { value }),
        t_final: Some(cfg.t_final),
        ..Default::default()
    };
    let table =
        resonance_study(cfg.example, cfg.ratio, &cfg.hs, cfg.nsplit, cfg.dt, &overrides, |eps| cfg.reference_for(eps))?;
    let tag = cfg.tag();
    let csv_path = cfg.out.join(format!("table_resonance_{tag}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(csv_path.display().to_string(), e))?;
    table.write_csv(file)?;
    files.push(csv_path);
    let meta = serde_json::json!({ "config": cfg, "table": table });
    write_json(&cfg.out.join(format!("run_table_resonance_{tag}.json")), &meta, &mut files)?;
    let timings = serde_json::json!({ "rows": table.timings, "total_seconds": start.elapsed().as_secs_f64() });
    write_json(&cfg.out.join(format!("timings_table_resonance_{tag}.json")), &timings, &mut files)?;
    Ok(Outputs { files })
}

pub fn cmd_table_temporal(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let mut files = Vec::new();
    let start = Instant::now();
    let example = build_example(cfg, cfg.eps)?;
    let report = temporal_study(&example, cfg.h, cfg.nsplit, &cfg.dts, cfg.scheme.kind())?;
    let tag = cfg.tag();
    let csv_path = cfg.out.join(format!("table_temporal_{tag}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(csv_path.display().to_string(), e))?;
    report.write_csv(file)?;
    files.push(csv_path);
    let meta = serde_json::json!({
        "config": cfg,
        "fluid_mesh_hash": mesh_hash(&example.fluid_mesh(cfg.h)?),
        "porous_mesh_hash": mesh_hash(&example.porous_mesh(cfg.h)?),
        "report": report,
    });
    write_json(&cfg.out.join(format!("run_table_temporal_{tag}.json")), &meta, &mut files)?;
    let timings = serde_json::json!({ "runs": report.timings, "total_seconds": start.elapsed().as_secs_f64() });
    write_json(&cfg.out.join(format!("timings_table_temporal_{tag}.json")), &timings, &mut files)?;
    Ok(Outputs { files })
}

pub fn cmd_snapshot(cfg: &RunConfig) -> Result<Outputs, CliError> {
    let mut files = Vec::new();
    let (solver, _, _) = build_solver(cfg)?;
    let wanted: BTreeSet<usize> = cfg.snapshot_times.iter().map(|s| (s / cfg.dt).round() as usize).collect();
    let layout = solver.layout();
    let tag = cfg.tag();
    let mut failure: Option<CliError> = None;
    {
        let mut observer = |n: usize, t: f64, state: &StateVector<f64>| {
            if failure.is_some() || !wanted.contains(&n) {
                return;
            }
            let stamp = format!("{t:.4}");
            let fluid = fluid_grid(solver.fluid_mesh(), &layout, state).render();
            let porous = porous_grid(solver.darcy_space(), state).render();
            for (name, text) in [("fluid", fluid), ("porous", porous)] {
                let path = cfg.out.join(format!("snap_{name}_{tag}_t{stamp}.vtk"));
                if let Err(e) = write_text(&path, &text, &mut files) {
                    failure = Some(e);
                    return;
                }
            }
        };
        solver.run(Some(&mut observer))?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(Outputs { files }),
    }
}
