//! Thin command-line front end over the library: executes the study
//! selected by a JSON config and leaves CSV/JSON/SVG artifacts in the
//! output directory. Errors leave a machine-readable JSON object on stderr
//! and a nonzero exit code.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xdcont::config::{load_config, save_config, RunConfig, Study};
use xdcont::continuation::{Branch, Continuer};
use xdcont::experiments::{fit_order, full_diagram, stable_windows, sweep_epsilon};
use xdcont::mesh::write_mesh_snapshot;
use xdcont::models::{fd_jacobian_check, homogeneous_state, ContinuationParam};
use xdcont::output::{
    branch_csv_name, read_events_json, read_state_snapshot, render_curve_svg, write_branch_csv,
    write_diagram_svg, write_fit_json, write_point_data_csv, write_run_events, write_sweep_csv,
    fmt_g17, SvgOptions,
};
use xdcont::turing::{critical_d, critical_d_fast, laplacian_spectrum, predict_bifurcations};

#[derive(Parser)]
#[command(
    name = "xdcont",
    about = "Bifurcation diagrams of a cross-diffusion competition system and its fast-reaction relaxation"
)]
struct Cli {
    /// Output directory override (default: the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep ladders (results are thread-count
    /// independent).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the random directions used by the Jacobian self-check;
    /// continuation itself is deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the study selected by the config.
    Run(ConfigArg),
    /// Closed-form linearized tables and threshold curve only.
    Turing(ConfigArg),
    /// Relaxation-rate convergence ladder (regardless of the config's study).
    SweepEps(ConfigArg),
    /// Switch onto a bifurcating branch at an event recorded by `run`.
    Switch(SwitchArgs),
    /// Mesh inspection.
    #[command(subcommand)]
    Mesh(MeshCommand),
    /// Convert a state snapshot into a nodal CSV table for plotting.
    PlotData(PlotDataArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration.
    config: PathBuf,
}

#[derive(Args)]
struct SwitchArgs {
    /// JSON run configuration of the original run.
    config: PathBuf,
    /// Run directory holding events.json (default: the output directory).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Run-wide event id from events.json.
    #[arg(long)]
    event: usize,
    /// Kernel direction: +1 or -1.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    side: f64,
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Write the mesh snapshot of the configured domain.
    Dump(ConfigArg),
}

#[derive(Args)]
struct PlotDataArgs {
    /// State snapshot written by `run` (under events/) or by hand.
    state: PathBuf,
    /// Config describing the mesh the state lives on.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = prepared_config(&args.config, cli)?;
            match cfg.study {
                Study::Turing => run_turing(&cfg),
                Study::SweepEps => run_sweep(&cfg),
                Study::SingleBranch | Study::FullDiagram => run_continuation(&cfg, cli.seed),
            }
        }
        Command::Turing(args) => {
            let mut cfg = prepared_config(&args.config, cli)?;
            cfg.study = Study::Turing;
            run_turing(&cfg)
        }
        Command::SweepEps(args) => {
            let mut cfg = prepared_config(&args.config, cli)?;
            cfg.study = Study::SweepEps;
            cfg.validate().map_err(|e| anyhow!(e))?;
            run_sweep(&cfg)
        }
        Command::Switch(args) => run_switch(args, cli),
        Command::Mesh(MeshCommand::Dump(args)) => {
            let cfg = prepared_config(&args.config, cli)?;
            let (mesh, _) = cfg.build_mesh().map_err(|e| anyhow!(e))?;
            let path = cfg.output_dir.join("mesh.txt");
            let mut w = BufWriter::new(File::create(&path)?);
            write_mesh_snapshot(&mesh, &mut w).map_err(|e| anyhow!(e))?;
            w.flush()?;
            println!(
                "wrote {} ({} nodes, {} elements)",
                path.display(),
                mesh.node_count(),
                mesh.element_count()
            );
            Ok(())
        }
        Command::PlotData(args) => {
            let cfg = load_config(&args.config).map_err(|e| anyhow!(e))?;
            let (mesh, _) = cfg.build_mesh().map_err(|e| anyhow!(e))?;
            let state = read_state_snapshot(&args.state).map_err(|e| anyhow!(e))?;
            let out = match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    dir.join(args.state.with_extension("csv").file_name().unwrap())
                }
                None => args.state.with_extension("csv"),
            };
            write_point_data_csv(&out, &mesh, &state).map_err(|e| anyhow!(e))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Loads the config, applies command-line overrides, and creates the output
/// directory with the resolved config inside.
fn prepared_config(path: &Path, cli: &Cli) -> Result<RunConfig> {
    let mut cfg =
        load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.sweep.threads = threads;
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    save_config(&cfg.output_dir.join("config_resolved.json"), &cfg).map_err(|e| anyhow!(e))?;
    Ok(cfg)
}

fn write_log(cfg: &RunConfig, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(cfg.output_dir.join("run.log"), text)?;
    Ok(())
}

fn mesh_log_line(cfg: &RunConfig) -> String {
    match cfg.resolved_ny() {
        Some(ny) if cfg.mesh.ny.is_none() => format!(
            "mesh: rectangle {} x {ny} nodes (ny defaulted to match the x spacing)",
            cfg.mesh.nx
        ),
        Some(ny) => format!("mesh: rectangle {} x {ny} nodes", cfg.mesh.nx),
        None => format!("mesh: interval, {} nodes", cfg.mesh.nx),
    }
}

fn run_continuation(cfg: &RunConfig, seed: u64) -> Result<()> {
    let (mesh, ws) = cfg.build_mesh().map_err(|e| anyhow!(e))?;
    let mut log = vec![mesh_log_line(cfg)];

    let start = homogeneous_state(&ws, &cfg.params, cfg.model).map_err(|e| anyhow!(e))?;
    let check =
        fd_jacobian_check(&mesh, &ws, &cfg.params, &start, 5, seed).map_err(|e| anyhow!(e))?;
    log.push(format!("jacobian self-check: relative error {check:.3e} (seed {seed})"));
    if check > 1e-6 {
        bail!("jacobian self-check failed: relative error {check:.3e} > 1e-6");
    }

    let branches: Vec<Branch> = match cfg.study {
        Study::SingleBranch => {
            let cont = Continuer::new(&mesh, &ws, cfg.params, cfg.model, cfg.continuation)
                .map_err(|e| anyhow!(e))?;
            let seed_pt = cont.init_from_homogeneous().map_err(|e| anyhow!(e))?;
            vec![cont.continue_branch(&seed_pt, "homogeneous").map_err(|e| anyhow!(e))?]
        }
        Study::FullDiagram => {
            let diagram =
                full_diagram(&mesh, &ws, cfg.params, cfg.model, cfg.continuation, &cfg.diagram)
                    .map_err(|e| anyhow!(e))?;
            for note in &diagram.notes {
                log.push(format!("note: {note}"));
            }
            let mut all = vec![diagram.trunk];
            all.extend(diagram.offshoots);
            all
        }
        _ => unreachable!("continuation studies only"),
    };

    let refs: Vec<&Branch> = branches.iter().collect();
    for branch in &refs {
        let path = cfg.output_dir.join(branch_csv_name(&branch.label));
        write_branch_csv(&path, branch).map_err(|e| anyhow!(e))?;
        log.push(format!(
            "branch {}: {} points, {} events, ended {:?}",
            branch.label,
            branch.points.len(),
            branch.events.len(),
            branch.status
        ));
    }
    let events = write_run_events(&cfg.output_dir, &refs).map_err(|e| anyhow!(e))?;
    log.push(format!("events recorded: {}", events.len()));

    let title = format!(
        "{} model, {} study in {}",
        cfg.model.tag(),
        match cfg.study {
            Study::SingleBranch => "single-branch",
            _ => "full-diagram",
        },
        cfg.params.active.name()
    );
    let opts = SvgOptions { title, ..SvgOptions::default() };
    write_diagram_svg(&cfg.output_dir.join("diagram.svg"), &refs, &opts)
        .map_err(|e| anyhow!(e))?;

    if cfg.study == Study::FullDiagram {
        let windows = stable_windows(&refs, 2);
        let text = serde_json::to_string_pretty(&windows)?;
        std::fs::write(cfg.output_dir.join("stable_windows.json"), text + "\n")?;
        log.push(format!("stable coexistence windows (depth >= 2): {}", windows.len()));
    }

    write_log(cfg, &log)?;
    for line in &log {
        println!("{line}");
    }
    Ok(())
}

fn run_turing(cfg: &RunConfig) -> Result<()> {
    let preds = predict_bifurcations(&cfg.params, cfg.model, &cfg.domain, 14)
        .map_err(|e| anyhow!(e))?;

    let mode_label = |members: &[(usize, usize)]| -> String {
        members
            .iter()
            .map(|&(m, n)| match cfg.domain {
                xdcont::mesh::DomainSpec::Interval { .. } => format!("{m}"),
                _ => format!("{m}-{n}"),
            })
            .collect::<Vec<_>>()
            .join("+")
    };

    let mut rows = Vec::new();
    for p in &preds {
        for (ri, v) in p.values.iter().enumerate() {
            rows.push(vec![
                mode_label(&p.members),
                fmt_g17(p.lambda),
                p.multiplicity.to_string(),
                ri.to_string(),
                fmt_g17(*v),
            ]);
        }
    }
    let table = cfg.output_dir.join("turing_table.csv");
    xdcont::output::write_csv(&table, &["mode", "lambda", "multiplicity", "root_index", "value"], &rows)
        .map_err(|e| anyhow!(e))?;

    // dense threshold curve over lambda, plus the discrete modes as markers
    let lam_max = preds.iter().map(|p| p.lambda).fold(0.0f64, f64::max) * 1.15;
    let n_samples = 400;
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let push_sample = |curves: &mut Vec<(String, Vec<(f64, f64)>)>, ci: usize, lam: f64, v: f64| {
        if curves.len() <= ci {
            curves.push((if ci == 0 { "lower".into() } else { "upper".into() }, Vec::new()));
        }
        curves[ci].1.push((lam, v));
    };
    let mut curve_rows = Vec::new();
    if cfg.params.active == ContinuationParam::D {
        for i in 1..=n_samples {
            let lam = lam_max * i as f64 / n_samples as f64;
            let root = match cfg.model {
                xdcont::models::ModelKind::Cross => critical_d(&cfg.params, lam),
                xdcont::models::ModelKind::Fast => critical_d_fast(&cfg.params, lam),
            }
            .map_err(|e| anyhow!(e))?;
            if let Some(d) = root {
                push_sample(&mut curves, 0, lam, d);
                curve_rows.push(vec![fmt_g17(lam), fmt_g17(d)]);
            }
        }
    } else {
        // growth-rate studies have up to two thresholds per mode; emit the
        // discrete windows instead of a dense curve
        for p in &preds {
            for v in &p.values {
                curve_rows.push(vec![fmt_g17(p.lambda), fmt_g17(*v)]);
            }
        }
    }
    xdcont::output::write_csv(
        &cfg.output_dir.join("turing_curve.csv"),
        &["lambda", "value"],
        &curve_rows,
    )
    .map_err(|e| anyhow!(e))?;

    let markers: Vec<(f64, f64)> =
        preds.iter().flat_map(|p| p.values.iter().map(|&v| (p.lambda, v))).collect();
    let svg = render_curve_svg(
        &curves,
        &markers,
        "lambda",
        cfg.params.active.name(),
        "critical threshold per Laplace mode",
        820,
        540,
    );
    std::fs::write(cfg.output_dir.join("turing_curve.svg"), svg)?;

    let n_modes = laplacian_spectrum(&cfg.domain, 14).map_err(|e| anyhow!(e))?.len();
    println!(
        "wrote {} ({} modes, {} threshold rows)",
        table.display(),
        n_modes,
        rows.len()
    );
    Ok(())
}

fn run_sweep(cfg: &RunConfig) -> Result<()> {
    let sweep_cfg = cfg.to_sweep_config();
    let result = sweep_epsilon(&sweep_cfg).map_err(|e| anyhow!(e))?;
    write_sweep_csv(&cfg.output_dir.join("sweep.csv"), &result).map_err(|e| anyhow!(e))?;
    // a short ladder still produces a useful table, just no order fit
    match fit_order(&result) {
        Ok(fits) => {
            write_fit_json(&cfg.output_dir.join("fit.json"), &fits).map_err(|e| anyhow!(e))?;
            for (slot, fit) in &fits {
                println!(
                    "{slot}: slope {:.3}, intercept {:.3}, r^2 {:.4} over {} members",
                    fit.slope, fit.intercept, fit.r_squared, fit.n_rows
                );
            }
        }
        Err(xdcont::error::Error::InsufficientData(msg)) => {
            println!("order fit skipped: {msg}");
        }
        Err(e) => return Err(anyhow!(e)),
    }
    for (slot, coarse, fine) in &result.monotone_flags {
        println!("warning: {slot} error grew from eps={coarse} to eps={fine}");
    }
    Ok(())
}

fn run_switch(args: &SwitchArgs, cli: &Cli) -> Result<()> {
    let cfg = load_config(&args.config).map_err(|e| anyhow!(e))?;
    let run_dir = args.dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let events = read_events_json(&run_dir.join("events.json")).map_err(|e| anyhow!(e))?;
    let entry = events
        .iter()
        .find(|e| e.event_id == args.event)
        .ok_or_else(|| anyhow!("no event with id {} in {}", args.event, run_dir.display()))?;
    if args.side != 1.0 && args.side != -1.0 {
        bail!("--side must be +1 or -1, got {}", args.side);
    }

    let (mesh, ws) = cfg.build_mesh().map_err(|e| anyhow!(e))?;
    let state = read_state_snapshot(&run_dir.join(&entry.state_file)).map_err(|e| anyhow!(e))?;
    let record = entry.to_record(state);
    let params = cfg.params.with_active(entry.param);
    let cont = Continuer::new(&mesh, &ws, params, cfg.model, cfg.continuation)
        .map_err(|e| anyhow!(e))?;
    let seed = cont.switch_branch(&record, args.side).map_err(|e| anyhow!(e))?;
    let tag = if args.side > 0.0 { "p" } else { "m" };
    let label = format!("switch_ev{}_{tag}", args.event);
    let branch = cont.continue_branch(&seed, &label).map_err(|e| anyhow!(e))?;

    let out_dir = match &cli.out {
        Some(dir) => dir.clone(),
        None => run_dir.join(&label),
    };
    std::fs::create_dir_all(&out_dir)?;
    write_branch_csv(&out_dir.join(branch_csv_name(&branch.label)), &branch)
        .map_err(|e| anyhow!(e))?;
    write_run_events(&out_dir, &[&branch]).map_err(|e| anyhow!(e))?;
    let opts = SvgOptions {
        title: format!("branch switched at event {} (side {tag})", args.event),
        ..SvgOptions::default()
    };
    write_diagram_svg(&out_dir.join("diagram.svg"), &[&branch], &opts).map_err(|e| anyhow!(e))?;
    println!(
        "switched branch {}: {} points, {} events, ended {:?}",
        branch.label,
        branch.points.len(),
        branch.events.len(),
        branch.status
    );
    Ok(())
}
