use clap::{Args, Parser, Subcommand, ValueEnum};
use gcfdm::error::Error;
use gcfdm::graph::{build_physical_graph, to_computational_graph};
use gcfdm::mesh::{
    generate_cavity, generate_channel, generate_curved_block, generate_cylinder_channel,
    load_mesh, save_mesh, validate_topology, BcKind, BcValue, MeshResolution, MultiBlockMesh,
};
use gcfdm::metrics::compute_metrics;
use gcfdm::post::{
    convergence_orders, drag_coefficient, export_field, import_csv_field,
    manufactured_solution_study, relative_mae, ExportFormat, Quantity,
};
use gcfdm::residual::{assemble_residuals_gc, assemble_residuals_loop, FlowField};
use gcfdm::solver::{direct_solve, pseudo_time_solve, DirectSolveConfig};
use gcfdm::training::{infer, run_training, Case, TrainConfig};
use gcfdm::gnmodel::{load_checkpoint, GNConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;
use std::rc::Rc;

#[derive(Parser)]
#[command(name = "gcfdm", about = "Finite-difference flow residuals as graph convolutions", version)]
struct Cli {
    /// Emit a machine-readable JSON report to stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for all randomized operations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on worker parallelism (falls back to GCFDM_THREADS, then to the
    /// available cores). Current operations run on one worker.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh generation and inspection.
    Mesh {
        #[command(subcommand)]
        cmd: MeshCmd,
    },
    /// Metric-term verification.
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
    /// Residual-operator verification.
    Residual {
        #[command(subcommand)]
        cmd: ResidualCmd,
    },
    /// Reference steady solvers.
    Solve {
        #[command(subcommand)]
        cmd: SolveCmd,
    },
    /// Train the graph network against the residual loss.
    Train(TrainArgs),
    /// Autoregressive rollout of a trained network.
    Infer(InferArgs),
    /// Error metrics and drag coefficient.
    Eval(EvalArgs),
    /// Convert a stored field to VTK or CSV.
    Export(ExportArgs),
}

#[derive(Subcommand)]
enum MeshCmd {
    /// Generate a mesh and write it to disk.
    Gen(MeshGenArgs),
    /// Print block, interface, and boundary statistics.
    Info { mesh: PathBuf },
    /// Check every topology invariant; nonzero exit on violations.
    Validate { mesh: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum MeshKind {
    Cavity,
    Channel,
    Cylinder,
    Curved,
}

#[derive(Args)]
struct MeshGenArgs {
    #[arg(value_enum)]
    kind: MeshKind,
    /// Nodes per side (cavity, curved) or along x (channel).
    #[arg(long, default_value_t = 17)]
    n: usize,
    /// Nodes along y (channel only).
    #[arg(long, default_value_t = 9)]
    ny: usize,
    /// Number of interface cuts (channel only).
    #[arg(long, default_value_t = 1)]
    splits: usize,
    /// Lid speed (cavity only).
    #[arg(long, default_value_t = 1.0)]
    lid: f64,
    /// Perturbation amplitude (curved only).
    #[arg(long, default_value_t = 0.05)]
    amplitude: f64,
    /// O-ring resolution (cylinder only).
    #[arg(long, default_value = "coarse")]
    resolution: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Manufactured-solution convergence study on curved meshes.
    Check {
        /// Comma-separated resolutions, coarse to fine.
        #[arg(long, default_value = "17,33,65", value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 40.0)]
        re: f64,
        #[arg(long, default_value_t = 0.05)]
        amplitude: f64,
        /// Acceptable deviation of the observed order from 2.
        #[arg(long, default_value_t = 0.3)]
        band: f64,
    },
}

#[derive(Subcommand)]
enum ResidualCmd {
    /// Compare the graph-convolution assembly against the per-block loop
    /// assembly on random fields.
    Verify {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 100.0)]
        re: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
}

#[derive(Subcommand)]
enum SolveCmd {
    /// Minimize the residual loss over nodal unknowns.
    Direct {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        re: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 20000)]
        max_iters: usize,
        /// Write the solution as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explicit pseudo-time marching.
    Pseudo {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        re: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        steps: usize,
        /// Initial strength of the annealed index-space smoothing.
        #[arg(long, default_value_t = 1.0)]
        dissipation: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Reynolds numbers of the training pool.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    re: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25000)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batches_per_epoch: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10000)]
    decay_epoch: usize,
    #[arg(long, default_value_t = 300)]
    t_max: usize,
    #[arg(long, default_value_t = 64)]
    latent: usize,
    #[arg(long, default_value_t = 12)]
    blocks: usize,
    #[arg(long, default_value_t = 1)]
    replication: usize,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    /// Weight of the roughness regularizer in the training objective.
    #[arg(long, default_value_t = 1e-3)]
    smoothing: f64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Predicted field (CSV written by this tool).
    #[arg(long)]
    pred: PathBuf,
    /// Reference field; omit to skip the error metrics.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Compute the drag coefficient over the body wall patches
    /// (wall patches not on the channel walls).
    #[arg(long)]
    cd: bool,
    #[arg(long, default_value_t = 20.0)]
    re: f64,
    #[arg(long, default_value_t = 0.2)]
    u_mean: f64,
    #[arg(long, default_value_t = 0.1)]
    diameter: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Vtk,
    Csv,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long, value_enum)]
    format: OutFormat,
    #[arg(long)]
    out: PathBuf,
}

/// Exit codes: 1 usage, 2 validation failure, 3 numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArg(_) => 1,
        Error::Numerical(_) | Error::Degenerate { .. } => 3,
        _ => 2,
    }
}

fn emit(json: bool, report: serde_json::Value, human: String) {
    if json {
        println!("{report}");
    } else {
        println!("{human}");
    }
}

fn write_field_csv(
    field: &FlowField,
    mesh: &MultiBlockMesh,
    path: &PathBuf,
) -> gcfdm::error::Result<()> {
    let pg = build_physical_graph(mesh);
    export_field(field, mesh, &pg, ExportFormat::Csv, path)?;
    Ok(())
}

fn run(cli: Cli) -> gcfdm::error::Result<bool> {
    let _threads = cli
        .threads
        .or_else(|| std::env::var("GCFDM_THREADS").ok().and_then(|s| s.parse().ok()));
    match cli.command {
        Command::Mesh { cmd } => match cmd {
            MeshCmd::Gen(a) => {
                let mesh = match a.kind {
                    MeshKind::Cavity => {
                        let mut m = generate_cavity(a.n, 1.0)?;
                        for p in &mut m.boundaries {
                            if p.kind == BcKind::MovingLid {
                                p.value = BcValue::Constant { u: a.lid, v: 0.0 };
                            }
                        }
                        m
                    }
                    MeshKind::Channel => generate_channel(a.n, a.ny, a.splits)?,
                    MeshKind::Cylinder => generate_cylinder_channel(
                        (0.5, 0.2),
                        0.1,
                        a.resolution.parse::<MeshResolution>()?,
                    )?,
                    MeshKind::Curved => generate_curved_block(a.n, a.amplitude)?,
                };
                save_mesh(&mesh, &a.out)?;
                emit(
                    cli.json,
                    json!({"written": a.out, "blocks": mesh.blocks.len(),
                           "nodes": mesh.n_physical_nodes()}),
                    format!(
                        "wrote {} ({} blocks, {} nodes)",
                        a.out.display(),
                        mesh.blocks.len(),
                        mesh.n_physical_nodes()
                    ),
                );
                Ok(true)
            }
            MeshCmd::Info { mesh } => {
                let m = load_mesh(&mesh)?;
                let blocks: Vec<_> = m
                    .blocks
                    .iter()
                    .map(|b| json!({"ni": b.ni, "nj": b.nj}))
                    .collect();
                let report = json!({
                    "blocks": blocks,
                    "interfaces": m.interfaces.len(),
                    "boundary_patches": m.boundaries.len(),
                    "physical_nodes": m.n_physical_nodes(),
                    "computational_nodes": m.n_computational_nodes(),
                });
                emit(cli.json, report.clone(), serde_json::to_string_pretty(&report)?);
                Ok(true)
            }
            MeshCmd::Validate { mesh } => {
                let m = load_mesh(&mesh)?;
                let issues = validate_topology(&m);
                let ok = issues.is_empty();
                let listed: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
                emit(
                    cli.json,
                    json!({"valid": ok, "issues": listed}),
                    if ok {
                        "mesh is valid".into()
                    } else {
                        format!("{} issue(s):\n{}", listed.len(), listed.join("\n"))
                    },
                );
                Ok(ok)
            }
        },
        Command::Metrics { cmd } => match cmd {
            MetricsCmd::Check { resolutions, re, amplitude, band } => {
                if resolutions.len() < 2 {
                    return Err(Error::InvalidArg("need at least two resolutions".into()));
                }
                let pts = manufactured_solution_study(&resolutions, re, amplitude)?;
                let orders = convergence_orders(&pts);
                let ok = orders.iter().all(|o| (o - 2.0).abs() <= band);
                let mut human = String::new();
                for p in &pts {
                    human += &format!(
                        "n = {:4}  max scaled residual = {:.6e}\n",
                        p.n, p.max_scaled_residual
                    );
                }
                human += &format!("observed orders: {orders:.3?}\n");
                human += if ok { "PASS" } else { "FAIL" };
                emit(
                    cli.json,
                    json!({"points": pts, "orders": orders, "pass": ok}),
                    human,
                );
                Ok(ok)
            }
        },
        Command::Residual { cmd } => match cmd {
            ResidualCmd::Verify { mesh, trials, re, tol } => {
                let m = load_mesh(&mesh)?;
                let pg = build_physical_graph(&m);
                let cg = to_computational_graph(&pg, &m);
                let metrics = compute_metrics(&m, &cg)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
                let mut worst = 0.0f64;
                for _ in 0..trials {
                    let mut f = FlowField::zeros(pg.n_nodes);
                    for g in 0..pg.n_nodes {
                        f.u[g] = rng.gen_range(-1.0..1.0);
                        f.v[g] = rng.gen_range(-1.0..1.0);
                        f.p[g] = rng.gen_range(-1.0..1.0);
                    }
                    let a = assemble_residuals_loop(&f, &metrics, &cg, &pg, re)?;
                    let b = assemble_residuals_gc(&f, &metrics, &cg, &pg, re)?;
                    for g in 0..pg.n_nodes {
                        worst = worst
                            .max((a.r_cont[g] - b.r_cont[g]).abs())
                            .max((a.r_mom_x[g] - b.r_mom_x[g]).abs())
                            .max((a.r_mom_y[g] - b.r_mom_y[g]).abs());
                    }
                    for (x, y) in a.r_p.iter().zip(&b.r_p) {
                        worst = worst.max((x[0] - y[0]).abs()).max((x[1] - y[1]).abs());
                    }
                }
                let ok = worst <= tol;
                emit(
                    cli.json,
                    json!({"trials": trials, "max_abs_difference": worst, "tol": tol, "pass": ok}),
                    format!(
                        "{trials} trials: max |loop - graph| = {worst:.3e} ({})",
                        if ok { "PASS" } else { "FAIL" }
                    ),
                );
                Ok(ok)
            }
        },
        Command::Solve { cmd } => match cmd {
            SolveCmd::Direct { mesh, re, tol, max_iters, out } => {
                let m = load_mesh(&mesh)?;
                let cfg = DirectSolveConfig { tol, max_iters, ..DirectSolveConfig::default() };
                let (field, rep) = direct_solve(&m, re, &cfg)?;
                if let Some(out) = &out {
                    write_field_csv(&field, &m, out)?;
                }
                emit(
                    cli.json,
                    json!({"iterations": rep.iterations, "loss": rep.final_loss,
                           "converged": rep.converged, "diverged": rep.diverged,
                           "mse": rep.mse, "out": out}),
                    format!(
                        "loss {:.6e} after {} iterations (converged: {}, diverged: {})",
                        rep.final_loss, rep.iterations, rep.converged, rep.diverged
                    ),
                );
                Ok(!rep.diverged)
            }
            SolveCmd::Pseudo { mesh, re, dt, steps, dissipation, out } => {
                let m = load_mesh(&mesh)?;
                let field = pseudo_time_solve(&m, re, dt, steps, dissipation, None)?;
                if let Some(out) = &out {
                    write_field_csv(&field, &m, out)?;
                }
                emit(
                    cli.json,
                    json!({"steps": steps, "dt": dt, "out": out}),
                    format!("marched {steps} steps at dt = {dt}"),
                );
                Ok(true)
            }
        },
        Command::Train(a) => {
            let m = load_mesh(&a.mesh)?;
            let case = Rc::new(Case::build(&m, a.mesh.display().to_string())?);
            let cfg = TrainConfig {
                gn: GNConfig { latent: a.latent, k_blocks: a.blocks },
                batch_size: a.batch_size,
                batches_per_epoch: a.batches_per_epoch,
                t_max: a.t_max,
                lr: a.lr,
                decay_epoch: a.decay_epoch,
                epochs: a.epochs,
                seed: cli.seed,
                replication: a.replication,
                checkpoint_every: a.checkpoint_every,
                smoothing: a.smoothing,
                ..TrainConfig::default()
            };
            let report = run_training(&[(case, a.re.clone())], &cfg, &a.out)?;
            emit(
                cli.json,
                json!({"steps": report.steps, "final_loss": report.final_loss,
                       "checkpoint": report.checkpoint, "history": report.history}),
                format!(
                    "trained {} steps, final loss {:.6e}, model at {}",
                    report.steps,
                    report.final_loss,
                    report.checkpoint.display()
                ),
            );
            Ok(true)
        }
        Command::Infer(a) => {
            let m = load_mesh(&a.mesh)?;
            let params = load_checkpoint(&a.checkpoint)?;
            let case = Case::build(&m, a.mesh.display().to_string())?;
            let field = infer(&params, &case, a.steps)?;
            write_field_csv(&field, &m, &a.out)?;
            emit(
                cli.json,
                json!({"steps": a.steps, "out": a.out}),
                format!("rolled out {} steps, field at {}", a.steps, a.out.display()),
            );
            Ok(true)
        }
        Command::Eval(a) => {
            let m = load_mesh(&a.mesh)?;
            let pg = build_physical_graph(&m);
            let pred = import_csv_field(&a.pred, &m, &pg)?;
            let mut report = serde_json::Map::new();
            let mut human = Vec::new();
            if let Some(refpath) = &a.reference {
                let reference = import_csv_field(refpath, &m, &pg)?;
                let ev = relative_mae(&pred, &reference, Quantity::VelocityMagnitude)?;
                let ep = relative_mae(&pred, &reference, Quantity::Pressure)?;
                report.insert("relative_mae_velocity".into(), json!(ev));
                report.insert("relative_mae_pressure".into(), json!(ep));
                human.push(format!("relative MAE: velocity {ev:.6e}, pressure {ep:.6e}"));
            }
            if a.cd {
                let body: Vec<_> = m
                    .boundaries
                    .iter()
                    .filter(|p| {
                        p.kind == BcKind::Wall
                            && m.interfaces
                                .iter()
                                .all(|i| i.block_a != p.block || i.side_a != p.side)
                            && p.block >= 8
                    })
                    .collect();
                let cd = drag_coefficient(&pred, &m, &pg, a.re, &body, a.u_mean, a.diameter)?;
                report.insert("drag_coefficient".into(), json!(cd));
                human.push(format!("C_d = {cd:.4}"));
            }
            emit(cli.json, serde_json::Value::Object(report), human.join("\n"));
            Ok(true)
        }
        Command::Export(a) => {
            let m = load_mesh(&a.mesh)?;
            let pg = build_physical_graph(&m);
            let field = import_csv_field(&a.field, &m, &pg)?;
            let format = match a.format {
                OutFormat::Vtk => ExportFormat::VtkLegacyStructured,
                OutFormat::Csv => ExportFormat::Csv,
            };
            let files = export_field(&field, &m, &pg, format, &a.out)?;
            emit(
                cli.json,
                json!({"files": files}),
                format!("wrote {} file(s)", files.len()),
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            if json {
                println!("{}", json!({"error": e.to_string()}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
