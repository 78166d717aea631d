//! CLI wiring: argument parsing and the train / eval / export / bench /
//! decompose entry points. Every run is described by one TOML config; the
//! command line only chooses what to do with it and where results go.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::geometry::Decomposition;
use crate::metrics::{bench_line, weak_efficiency, write_report, ScalingRecord, BENCH_HEADER};
use crate::network::NetworkParams;
use crate::pde::{make_problem, NetRole, Problem};
use crate::real::{Precision, Real};
use crate::solver::{
    sample_decomposition, train_in_process, train_socket, Predictor, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ddpinn",
    version,
    about = "Domain-decomposed physics-informed network training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every subdomain in-process, or one rank over TCP.
    Train {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Directory for loss logs, trained networks, and the echoed config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train only this rank and exchange over TCP (needs --rendezvous).
        #[arg(long)]
        rank: Option<u32>,
        /// Expected worker count; must match the partition's subdomains.
        #[arg(long)]
        world_size: Option<u32>,
        /// host:port all ranks meet at; rank 0 listens there.
        #[arg(long)]
        rendezvous: Option<String>,
        /// Adversarial delivery delay in microseconds (in-process only).
        #[arg(long)]
        fuzz_us: Option<u64>,
    },
    /// Report relative L2 errors and interface gaps for a trained run.
    Eval {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Directory holding the run's trained networks.
        #[arg(long)]
        run: PathBuf,
        /// Evaluation grid resolution per axis.
        #[arg(long, default_value_t = 128)]
        grid: usize,
    },
    /// Write one stitched field on a grid of cell centers as CSV.
    Export {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Directory holding the run's trained networks.
        #[arg(long)]
        run: PathBuf,
        /// Field to export.
        #[arg(long)]
        field: String,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 128)]
        grid: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weak-scaling sweep: the configured per-worker load on 1, 2, and 4
    /// workers, with a CSV report.
    Bench {
        /// Run configuration (TOML); its partition is replaced per sweep point.
        config: PathBuf,
        /// Report file (CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the partition (subdomains, edges, neighbors) as JSON.
    Decompose {
        /// Run configuration (TOML).
        config: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, rank, world_size, rendezvous, fuzz_us } => {
            let (cfg, base) = load(&config)?;
            match cfg.precision {
                Precision::F64 => train::<f64>(
                    &cfg,
                    &base,
                    out.as_deref(),
                    rank,
                    world_size,
                    rendezvous.as_deref(),
                    fuzz_us,
                ),
                Precision::F32 => train::<f32>(
                    &cfg,
                    &base,
                    out.as_deref(),
                    rank,
                    world_size,
                    rendezvous.as_deref(),
                    fuzz_us,
                ),
            }
        }
        Command::Eval { config, run, grid } => {
            let (cfg, base) = load(&config)?;
            match cfg.precision {
                Precision::F64 => eval::<f64>(&cfg, &base, &run, grid),
                Precision::F32 => eval::<f32>(&cfg, &base, &run, grid),
            }
        }
        Command::Export { config, run, field, grid, out } => {
            let (cfg, base) = load(&config)?;
            match cfg.precision {
                Precision::F64 => export::<f64>(&cfg, &base, &run, &field, grid, out.as_deref()),
                Precision::F32 => export::<f32>(&cfg, &base, &run, &field, grid, out.as_deref()),
            }
        }
        Command::Bench { config, out } => {
            let (cfg, base) = load(&config)?;
            match cfg.precision {
                Precision::F64 => bench::<f64>(&cfg, &base, out.as_deref()),
                Precision::F32 => bench::<f32>(&cfg, &base, out.as_deref()),
            }
        }
        Command::Decompose { config } => {
            let (cfg, base) = load(&config)?;
            let d = cfg.decompose(&base)?;
            let json = serde_json::to_string_pretty(&d)
                .map_err(|e| Error::validation("decomposition", e.to_string()))?;
            println!("{json}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn prepared<F: Real>(cfg: &RunConfig, base: &Path) -> Result<Decomposition> {
    let mut d = cfg.decompose(base)?;
    sample_decomposition::<F>(
        &mut d,
        &cfg.problem,
        &cfg.sampling.counts(),
        cfg.sampling.strategy,
        cfg.seed,
    )?;
    Ok(d)
}

fn train<F: Real + Send + Sync>(
    cfg: &RunConfig,
    base: &Path,
    out: Option<&Path>,
    rank: Option<u32>,
    world_size: Option<u32>,
    rendezvous: Option<&str>,
    fuzz_us: Option<u64>,
) -> Result<()> {
    let d = prepared::<F>(cfg, base)?;
    if let Some(w) = world_size {
        if w as usize != d.n_subdomains() {
            return Err(Error::Startup(format!(
                "partition has {} subdomains but --world-size says {w}; one worker per subdomain",
                d.n_subdomains()
            )));
        }
    }
    let problem = make_problem::<F>(&cfg.problem, &d.domain)?;
    let hyper = cfg.hyper();
    match (rank, rendezvous) {
        (Some(r), Some(addr)) => {
            if fuzz_us.is_some() {
                return Err(Error::Startup("--fuzz-us only applies to in-process runs".into()));
            }
            let outcome =
                train_socket::<F>(&d, &cfg.problem, &cfg.method, &hyper, r, addr, out)?;
            if let Some(dir) = out {
                save_nets(dir, r, problem.nets(), &outcome.nets)?;
                if r == 0 {
                    std::fs::write(dir.join("config.toml"), cfg.echo()?)?;
                }
            }
            print_outcome(&outcome);
            Ok(())
        }
        (None, None) => {
            let report =
                train_in_process::<F>(&d, &cfg.problem, &cfg.method, &hyper, fuzz_us, out)?;
            if let Some(dir) = out {
                for outcome in &report.outcomes {
                    save_nets(dir, outcome.rank, problem.nets(), &outcome.nets)?;
                }
                std::fs::write(dir.join("config.toml"), cfg.echo()?)?;
            }
            for outcome in &report.outcomes {
                print_outcome(outcome);
            }
            Ok(())
        }
        (Some(_), None) => Err(Error::Startup("--rank needs --rendezvous".into())),
        (None, Some(_)) => Err(Error::Startup("--rendezvous needs --rank".into())),
    }
}

fn print_outcome<F: Real>(outcome: &TrainOutcome<F>) {
    let t = outcome.totals;
    println!(
        "rank {}: total {:.6e} (data {:.3e}, residual {:.3e}, avg {:.3e}, jump {:.3e}) \
         wall {:.2}s = compute {:.2}s + comm {:.2}s + barrier {:.2}s",
        outcome.rank,
        outcome.final_loss.total,
        outcome.final_loss.data,
        outcome.final_loss.residual,
        outcome.final_loss.interface_avg,
        outcome.final_loss.interface_jump,
        t.wall_s,
        t.compute_s,
        t.comm_s,
        t.barrier_s
    );
}

fn net_path(dir: &Path, rank: u32, role: &str) -> PathBuf {
    dir.join(format!("net_rank{rank}_{role}.bin"))
}

fn save_nets<F: Real>(
    dir: &Path,
    rank: u32,
    roles: &'static [NetRole],
    nets: &[NetworkParams<F>],
) -> Result<()> {
    for (role, net) in roles.iter().zip(nets) {
        net.save(&net_path(dir, rank, role.name))?;
    }
    Ok(())
}

fn load_nets<F: Real>(
    run: &Path,
    d: &Decomposition,
    problem: &dyn Problem<F>,
) -> Result<Vec<Vec<NetworkParams<F>>>> {
    (0..d.n_subdomains() as u32)
        .map(|r| {
            problem
                .nets()
                .iter()
                .map(|role| {
                    let path = net_path(run, r, role.name);
                    NetworkParams::load(&path).map_err(|e| {
                        Error::Startup(format!("cannot load {}: {e}", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

fn eval<F: Real>(cfg: &RunConfig, base: &Path, run: &Path, grid: usize) -> Result<()> {
    let d = prepared::<F>(cfg, base)?;
    let problem = make_problem::<F>(&cfg.problem, &d.domain)?;
    let nets = load_nets(run, &d, problem.as_ref())?;
    let predictor = Predictor::new(&d, problem.as_ref(), &nets)?;
    for role in problem.nets() {
        for field in role.fields {
            let err = predictor.relative_l2(problem.as_ref(), field, grid, grid)?;
            println!("field {field}: relative L2 error {err:.6e} on a {grid}x{grid} grid");
        }
    }
    if d.interior_edges().next().is_some() {
        for field in problem.continuity_fields() {
            let gap = predictor.interface_gap(field)?;
            println!("field {field}: mean interface gap {gap:.6e}");
        }
    }
    Ok(())
}

fn export<F: Real>(
    cfg: &RunConfig,
    base: &Path,
    run: &Path,
    field: &str,
    grid: usize,
    out: Option<&Path>,
) -> Result<()> {
    if grid == 0 {
        return Err(Error::rejected("export grid must be at least 1"));
    }
    let d = prepared::<F>(cfg, base)?;
    let problem = make_problem::<F>(&cfg.problem, &d.domain)?;
    let nets = load_nets(run, &d, problem.as_ref())?;
    let predictor = Predictor::new(&d, problem.as_ref(), &nets)?;
    let mut w: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(w, "x,y,{field}")?;
    let (lo, hi) = (d.domain.lo, d.domain.hi);
    for i in 0..grid {
        for j in 0..grid {
            let p = [
                lo[0] + (i as f64 + 0.5) * (hi[0] - lo[0]) / grid as f64,
                lo[1] + (j as f64 + 0.5) * (hi[1] - lo[1]) / grid as f64,
            ];
            writeln!(w, "{:.9e},{:.9e},{:.9e}", p[0], p[1], predictor.eval(field, p)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bench<F: Real + Send + Sync>(cfg: &RunConfig, base: &Path, out: Option<&Path>) -> Result<()> {
    let mut records = Vec::new();
    let mut baseline = None;
    println!("{BENCH_HEADER}");
    for (n_x, n_y) in [(1u32, 1u32), (2, 1), (2, 2)] {
        let workers = n_x * n_y;
        let mut c = cfg.clone();
        c.partition.grid = Some([n_x, n_y]);
        c.partition.partition_file = None;
        c.overrides.clear();
        let d = prepared::<F>(&c, base)?;
        let report = train_in_process::<F>(&d, &c.problem, &c.method, &c.hyper(), None, None)?;
        let mut wall: f64 = 0.0;
        let mut compute: f64 = 0.0;
        let mut comm: f64 = 0.0;
        let mut barrier: f64 = 0.0;
        for o in &report.outcomes {
            wall = wall.max(o.totals.wall_s);
            compute = compute.max(o.totals.compute_s);
            comm = comm.max(o.totals.comm_s);
            barrier = barrier.max(o.totals.barrier_s);
        }
        let base_wall = *baseline.get_or_insert(wall);
        let rec = ScalingRecord {
            workers,
            points: (cfg.sampling.residual * workers as usize) as u64,
            wall_s: wall,
            compute_s: compute,
            comm_s: comm,
            barrier_s: barrier,
            weak_efficiency: weak_efficiency(base_wall, wall)?,
        };
        println!("{}", bench_line(&rec));
        records.push(rec);
    }
    if let Some(path) = out {
        write_report(path, &records)?;
    }
    Ok(())
}
