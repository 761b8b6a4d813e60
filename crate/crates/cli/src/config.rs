use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use sdmsfem::experiments::{ReferenceConfig, DEFAULT_MAX_DOFS};
use sdmsfem::solver::DarcySpaceKind;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Build the multiscale basis and write it to an archive.
    Offline,
    /// Run one coupled simulation and write its summary.
    Solve,
    /// Spatial convergence table against a fine reference.
    TableSpatial,
    /// Errors at a fixed ε/h ratio, one reference per row.
    TableResonance,
    /// ρ ratios over a halving chain of time steps.
    TableTemporal,
    /// VTK fields at selected times.
    Snapshot,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Solve => "solve",
            Mode::TableSpatial => "table-spatial",
            Mode::TableResonance => "table-resonance",
            Mode::TableTemporal => "table-temporal",
            Mode::Snapshot => "snapshot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Msfem,
    Fem,
}

impl Scheme {
    pub fn kind(self) -> DarcySpaceKind {
        match self {
            Scheme::Msfem => DarcySpaceKind::MsFem,
            Scheme::Fem => DarcySpaceKind::P1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Msfem => "msfem",
            Scheme::Fem => "fem",
        }
    }
}

/// Parses `0.125`, `1/8` or `1e-3`.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if den == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            num / den
        }
        None => s.parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("not finite: {s:?}"))
    }
}

/// Command line. Every flag may also be given in the TOML file passed with
/// `--config`; flags win over the file.
#[derive(Debug, Parser)]
#[command(name = "sdmsfem", version, about = "Multiscale Stokes-Darcy solver and convergence tables")]
pub struct Cli {
    #[arg(value_enum)]
    pub mode: Mode,
    /// TOML file with the same keys as the long flags (snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Example number: 1 separable K, 2 inseparable K, 3 lid-driven cavity [default: 1].
    #[arg(long)]
    pub example: Option<u32>,
    /// Period of the permeability oscillation [default: 0.02, 0.0085 with --full].
    #[arg(long)]
    pub eps: Option<f64>,
    /// Amplitude P of the permeability oscillation [default: per example].
    #[arg(long = "P")]
    pub amplitude: Option<f64>,
    /// Replace the oscillatory field by a constant permeability.
    #[arg(long)]
    pub k_const: Option<f64>,
    /// Coarse mesh size, e.g. 1/8 [default: 1/8].
    #[arg(long, value_parser = parse_fraction)]
    pub h: Option<f64>,
    /// Local refinement of each coarse cell [default: 8; 32 for table-resonance].
    #[arg(long)]
    pub nsplit: Option<usize>,
    /// Spatial tables: keep nsplit·h fixed at this fine size instead of a fixed nsplit [default: 1/512].
    #[arg(long, value_parser = parse_fraction)]
    pub h_fine: Option<f64>,
    /// Time step [default: 0.01].
    #[arg(long, value_parser = parse_fraction)]
    pub dt: Option<f64>,
    /// Final time [default: 1].
    #[arg(long = "T", value_parser = parse_fraction)]
    pub t_final: Option<f64>,
    /// Darcy discretization [default: msfem].
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    /// Coarse mesh sizes of a table, comma separated [default: 1/2,...,1/32; 1/8,1/16,1/32 for table-resonance].
    #[arg(long, value_parser = parse_fraction, value_delimiter = ',')]
    pub hs: Option<Vec<f64>>,
    /// Halving chain of time steps [default: 0.1,...,0.003125].
    #[arg(long, value_parser = parse_fraction, value_delimiter = ',')]
    pub dts: Option<Vec<f64>>,
    /// Fixed ε/h of the resonance table [default: 0.32].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Stokes mesh size of the reference [default: 1/256].
    #[arg(long, value_parser = parse_fraction)]
    pub ref_h_stokes: Option<f64>,
    /// Darcy mesh size of the reference [default: min(1/512, ε/8 rounded down to a power of two)].
    #[arg(long, value_parser = parse_fraction)]
    pub ref_h_darcy: Option<f64>,
    /// Largest reference system allowed [default: 2000000].
    #[arg(long)]
    pub max_dofs: Option<usize>,
    /// Paper-scale setting: ε = 0.0085 and a 1/2048 Darcy reference.
    #[arg(long)]
    pub full: bool,
    /// Output directory [default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Multiscale basis archive to reuse.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Let solve and snapshot build the multiscale basis when no archive is given.
    #[arg(long)]
    pub allow_offline: bool,
    /// Check that the basis equals linear hats (constant permeability only).
    #[arg(long)]
    pub verify_hats: bool,
    /// Snapshot times, comma separated [default: T].
    #[arg(long, value_parser = parse_fraction, value_delimiter = ',')]
    pub snapshot_times: Option<Vec<f64>>,
    /// Record the energy log and stability report.
    #[arg(long)]
    pub monitor: bool,
}

/// A number written either as a TOML float/integer or as a string like "1/8".
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum Num {
    Float(f64),
    Int(i64),
    Text(String),
}

impl Num {
    fn value(&self) -> Result<f64, String> {
        match self {
            Num::Float(v) => Ok(*v),
            Num::Int(v) => Ok(*v as f64),
            Num::Text(s) => parse_fraction(s),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    example: Option<u32>,
    eps: Option<f64>,
    amplitude: Option<f64>,
    k_const: Option<f64>,
    h: Option<Num>,
    nsplit: Option<usize>,
    h_fine: Option<Num>,
    dt: Option<Num>,
    t_final: Option<Num>,
    scheme: Option<Scheme>,
    hs: Option<Vec<Num>>,
    dts: Option<Vec<Num>>,
    ratio: Option<f64>,
    ref_h_stokes: Option<Num>,
    ref_h_darcy: Option<Num>,
    max_dofs: Option<usize>,
    full: Option<bool>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    basis: Option<PathBuf>,
    allow_offline: Option<bool>,
    verify_hats: Option<bool>,
    snapshot_times: Option<Vec<Num>>,
    monitor: Option<bool>,
}

/// Spatial tables keep either the fine size or the split count fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum SplitPolicy {
    FixedFine { h_fine: f64 },
    Fixed { nsplit: usize },
}

/// Fully resolved and validated settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub example: u32,
    pub eps: f64,
    pub amplitude: Option<f64>,
    pub k_const: Option<f64>,
    pub h: f64,
    pub nsplit: usize,
    pub split_policy: SplitPolicy,
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    pub hs: Vec<f64>,
    pub dts: Vec<f64>,
    pub ratio: f64,
    pub reference: ReferenceSettings,
    pub full: bool,
    pub snapshot_times: Vec<f64>,
    pub monitor: bool,
    pub verify_hats: bool,
    pub allow_offline: bool,
    pub diagonal: &'static str,
    /// Paths and thread counts do not influence results and stay out of
    /// the metadata files.
    #[serde(skip)]
    pub basis: Option<PathBuf>,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceSettings {
    pub h_stokes: Option<f64>,
    pub h_darcy: Option<f64>,
    pub max_dofs: usize,
}

impl RunConfig {
    pub fn reference_for(&self, eps: f64) -> ReferenceConfig {
        let mut cfg = ReferenceConfig::for_eps(Some(eps), self.dt);
        if self.full {
            cfg.h_darcy = 1.0 / 2048.0;
        }
        if let Some(h) = self.reference.h_stokes {
            cfg.h_stokes = h;
        }
        if let Some(h) = self.reference.h_darcy {
            cfg.h_darcy = h;
        }
        cfg.max_dofs = self.reference.max_dofs;
        cfg
    }

    /// Short label used in output file names.
    pub fn tag(&self) -> String {
        format!("ex{}_{}", self.example, self.scheme.name())
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn opt_num(n: &Option<Num>, key: &str) -> Result<Option<f64>, CliError> {
    n.as_ref().map(|v| v.value().map_err(|e| config_err(format!("{key}: {e}")))).transpose()
}

fn opt_list(n: &Option<Vec<Num>>, key: &str) -> Result<Option<Vec<f64>>, CliError> {
    n.as_ref()
        .map(|v| {
            v.iter().map(|x| x.value()).collect::<Result<Vec<_>, _>>().map_err(|e| config_err(format!("{key}: {e}")))
        })
        .transpose()
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn is_power_of_two_fraction(h: f64) -> bool {
    let k = (1.0 / h).log2().round();
    k >= 0.0 && ((1.0 / h) - 2f64.powf(k)).abs() < 1e-9 * (1.0 / h)
}

fn check_positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive, got {v}")))
    }
}

fn check_steps(t_final: f64, dt: f64) -> Result<(), CliError> {
    let ratio = t_final / dt;
    if (ratio - ratio.round()).abs() > 1e-10 * ratio.max(1.0) || ratio.round() < 1.0 {
        return Err(config_err(format!("T / dt = {ratio} is not a whole number of steps")));
    }
    Ok(())
}

/// Merges flags over the optional TOML file and validates the result.
pub fn parse_config(cli: Cli) -> Result<RunConfig, CliError> {
    let file = match &cli.config {
        Some(path) => read_file(path)?,
        None => FileConfig::default(),
    };
    let full = cli.full || file.full.unwrap_or(false);
    let mode = cli.mode;
    let example = cli.example.or(file.example).unwrap_or(1);
    if !(1..=3).contains(&example) {
        return Err(config_err(format!("unknown example {example}; expected 1, 2 or 3")));
    }
    let eps = cli.eps.or(file.eps).unwrap_or(if full { 0.0085 } else { 0.02 });
    check_positive("eps", eps)?;
    let amplitude = cli.amplitude.or(file.amplitude);
    let k_const = cli.k_const.or(file.k_const);
    if let Some(k) = k_const {
        check_positive("k_const", k)?;
    }
    let h = cli.h.or(opt_num(&file.h, "h")?).unwrap_or(0.125);
    check_positive("h", h)?;
    if !is_power_of_two_fraction(h) {
        return Err(config_err(format!("h must be 1/2^k, got {h}")));
    }
    let nsplit_given = cli.nsplit.or(file.nsplit);
    let default_nsplit = if mode == Mode::TableResonance { 32 } else { 8 };
    let nsplit = nsplit_given.unwrap_or(default_nsplit);
    if nsplit < 2 {
        return Err(config_err(format!("nsplit must be at least 2, got {nsplit}")));
    }
    if !nsplit.is_power_of_two() {
        log::warn!("nsplit = {nsplit} is not a power of two");
    }
    let h_fine = cli.h_fine.or(opt_num(&file.h_fine, "h_fine")?);
    let split_policy = match (h_fine, nsplit_given) {
        (Some(_), Some(_)) => return Err(config_err("give either h_fine or nsplit for a spatial table, not both")),
        (Some(f), None) => SplitPolicy::FixedFine { h_fine: f },
        (None, Some(n)) => SplitPolicy::Fixed { nsplit: n },
        (None, None) => SplitPolicy::FixedFine { h_fine: 1.0 / 512.0 },
    };
    if let SplitPolicy::FixedFine { h_fine } = split_policy {
        check_positive("h_fine", h_fine)?;
    }
    let dt = cli.dt.or(opt_num(&file.dt, "dt")?).unwrap_or(0.01);
    check_positive("dt", dt)?;
    let t_final = cli.t_final.or(opt_num(&file.t_final, "t_final")?).unwrap_or(1.0);
    check_positive("T", t_final)?;
    check_steps(t_final, dt)?;
    let scheme = cli.scheme.or(file.scheme).unwrap_or(Scheme::Msfem);
    let default_hs = if mode == Mode::TableResonance {
        vec![0.125, 0.0625, 0.03125]
    } else {
        vec![0.5, 0.25, 0.125, 0.0625, 0.03125]
    };
    let hs = cli.hs.or(opt_list(&file.hs, "hs")?).unwrap_or(default_hs);
    if matches!(mode, Mode::TableSpatial | Mode::TableResonance) {
        for &x in &hs {
            check_positive("hs entry", x)?;
            if !is_power_of_two_fraction(x) {
                return Err(config_err(format!("table mesh sizes must be 1/2^k, got {x}")));
            }
        }
    }
    let dts =
        cli.dts.or(opt_list(&file.dts, "dts")?).unwrap_or_else(|| vec![0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125]);
    if mode == Mode::TableTemporal {
        for &x in &dts {
            check_positive("dts entry", x)?;
            check_steps(t_final, x)?;
        }
    }
    let ratio = cli.ratio.or(file.ratio).unwrap_or(0.32);
    check_positive("ratio", ratio)?;
    let reference = ReferenceSettings {
        h_stokes: cli.ref_h_stokes.or(opt_num(&file.ref_h_stokes, "ref_h_stokes")?),
        h_darcy: cli.ref_h_darcy.or(opt_num(&file.ref_h_darcy, "ref_h_darcy")?),
        max_dofs: cli.max_dofs.or(file.max_dofs).unwrap_or(DEFAULT_MAX_DOFS),
    };
    let snapshot_times =
        cli.snapshot_times.or(opt_list(&file.snapshot_times, "snapshot_times")?).unwrap_or_else(|| vec![t_final]);
    for &s in &snapshot_times {
        let n = s / dt;
        if !(0.0..=t_final + 1e-12).contains(&s) || (n - n.round()).abs() > 1e-8 * n.max(1.0) {
            return Err(config_err(format!("snapshot time {s} is not a time level in [0, T]")));
        }
    }
    let basis = cli.basis.or(file.basis);
    let allow_offline = cli.allow_offline || file.allow_offline.unwrap_or(false);
    if matches!(mode, Mode::Solve | Mode::Snapshot) && scheme == Scheme::Msfem && basis.is_none() && !allow_offline {
        return Err(config_err("the msfem scheme needs --basis <archive> or --allow-offline"));
    }
    let workers = cli.workers.or(file.workers);
    if workers == Some(0) {
        return Err(config_err("workers must be at least 1"));
    }
    Ok(RunConfig {
        mode,
        example,
        eps,
        amplitude,
        k_const,
        h,
        nsplit,
        split_policy,
        dt,
        t_final,
        scheme,
        hs,
        dts,
        ratio,
        reference,
        full,
        snapshot_times,
        monitor: cli.monitor || file.monitor.unwrap_or(false),
        verify_hats: cli.verify_hats || file.verify_hats.unwrap_or(false),
        allow_offline,
        diagonal: sdmsfem::mesh::DIAGONAL,
        basis,
        out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        workers,
    })
}
