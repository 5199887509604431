//! Command-line entry point: launch runs, validate gradients, compute the
//! pseudo-inverse baseline, and embed latent dumps for plotting.

use clap::{Args, Parser, Subcommand};
use physctl::control::{
    self, pearson2d, run_control_loop, sigma_distance, LoopStatus, Targets,
};
use physctl::error::{Error, Result};
use physctl::gradcheck::standard_suite;
use physctl::io::{
    self, pca2d_embed, read_container, write_container, Entry, MetricsCsvWriter, RunConfig,
};
use physctl::models::TaskKind;
use physctl::rng::{self, Role};
use physctl::systems::{
    phases_of, pseudo_inverse_control, MeasurementMode, OpticalSystem, System,
};
use physctl::tensor::Tensor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "physctl", about = "Model/Actor control of partially measured systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the full control loop and write run artifacts.
    Run(RunArgs),
    /// Validate every graph op and both task losses against finite differences.
    Gradcheck(GradcheckArgs),
    /// Pseudo-inverse control baseline on the fully measured optical system.
    Baseline(BaselineArgs),
    /// Project per-iteration latent dumps to 2D for plotting.
    EmbedLatents(EmbedArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Negative control: break one gradient on purpose (must then fail).
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::EmbedLatents(a) => cmd_embed_latents(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    let manifest = out.join("run_manifest.toml");
    if manifest.exists() && !force {
        return Err(Error::Invalid(format!(
            "{} already holds a run (use --force to overwrite)",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_manifest(out: &Path, cfg: &RunConfig) -> Result<()> {
    let snapshot = cfg.to_toml_string()?;
    let text = format!(
        "# config snapshot (CLI overrides applied), seed = {}\n{snapshot}",
        cfg.seed
    );
    std::fs::write(out.join("run_manifest.toml"), text)?;
    Ok(())
}

fn params_entries(prefix: &str, params: Vec<&Tensor>) -> Vec<Entry> {
    params
        .into_iter()
        .enumerate()
        .map(|(i, t)| Entry::f64(format!("{prefix}_{i}"), t.clone()))
        .collect()
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.max_outer_iters {
        cfg.run_loop.max_outer_iters = iters;
    }
    cfg.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    write_manifest(&args.out, &cfg)?;

    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let mut system = cfg.build_system()?;
    let targets = cfg.build_targets(base_dir)?;
    let model = cfg.build_model()?;
    let actor = cfg.build_actor()?;
    let loop_cfg = cfg.loop_config();

    let mut metrics = MetricsCsvWriter::create(&args.out.join("metrics.csv"))?;
    let out_dir = args.out.clone();
    let latent_dump = cfg.run_loop.latent_dump;
    let mut latent_rng = rng::stream(cfg.seed, Role::LatentExport);
    let mut observer = |state: &control::ControlLoopState,
                        record: &control::MetricsRecord|
     -> Result<()> {
        metrics.append(record)?;
        let mut entries = params_entries("model", state.model.params());
        entries.extend(params_entries("actor", state.actor.params()));
        write_container(
            &out_dir.join(format!("checkpoint_iter{}.pct", record.iter)),
            &entries,
        )?;
        if latent_dump > 0 {
            let z = control::export_latent_samples(
                &state.model,
                &state.buffer,
                latent_dump,
                &mut latent_rng,
            )?;
            write_container(
                &out_dir.join(format!("latents_iter{}.pct", record.iter)),
                &[Entry::f64("latents", z)],
            )?;
        }
        Ok(())
    };

    let outcome = run_control_loop(
        system.as_mut(),
        &targets,
        &loop_cfg,
        model,
        actor,
        cfg.seed,
        &mut observer,
    )?;
    for w in &outcome.state.warnings {
        eprintln!("warning: {w}");
    }

    let mut final_entries = Vec::new();
    for (i, (x, y)) in outcome
        .final_inputs
        .iter()
        .zip(&outcome.achieved_outputs)
        .enumerate()
    {
        final_entries.push(Entry::f64(format!("input_{i}"), x.clone()));
        final_entries.push(Entry::f64(format!("achieved_{i}"), y.clone()));
        final_entries.push(Entry::f64(format!("target_{i}"), targets.desired(i).clone()));
    }
    write_container(&args.out.join("final.pct"), &final_entries)?;

    let last = outcome.state.history.last();
    match outcome.status {
        LoopStatus::ThresholdReached => {
            if let Some(r) = last {
                println!(
                    "threshold reached at iter {}: pearson {:.4}, sigma {:.6}",
                    r.iter, r.pearson, r.sigma_metric
                );
            }
            Ok(ExitCode::from(0))
        }
        LoopStatus::BudgetExhausted => {
            if let Some(r) = last {
                println!(
                    "budget exhausted after {} iters: best-state pearson restored",
                    r.iter + 1
                );
            }
            Ok(ExitCode::from(2))
        }
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let reports = standard_suite(args.seed, args.sabotage)?;
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.line());
        all_pass &= r.pass;
    }
    println!(
        "{} checks, {} failed",
        reports.len(),
        reports.iter().filter(|r| !r.pass).count()
    );
    Ok(ExitCode::from(if all_pass { 0 } else { 1 }))
}

fn cmd_baseline(args: &BaselineArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&args.config)?;
    if cfg.task != TaskKind::Optical {
        return Err(Error::Invalid(
            "baseline defined for optical task only".into(),
        ));
    }
    prepare_out_dir(&args.out, true)?;
    write_manifest(&args.out, &cfg)?;
    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let targets = match cfg.build_targets(base_dir)? {
        Targets::Optical(v) => v,
        _ => unreachable!(),
    };
    let s = &cfg.system;
    // the baseline gets full measurement access: the matrix itself
    let mut system = OpticalSystem::new(
        s.n,
        s.m,
        s.mode,
        s.drift_rate,
        s.noise_sigma,
        s.intensity_scale,
        cfg.seed,
    );
    let f_re = system.f_re.clone();
    let f_im = system.f_im.clone();
    let mut rows = Vec::new();
    let mut pearson_sum = 0.0;
    for (i, target) in targets.iter().enumerate() {
        // interleaved complex target; intensity targets are lifted to a
        // zero-phase field of matching amplitude
        let field_target = match s.mode {
            MeasurementMode::FullComplex => target.clone(),
            MeasurementMode::Intensity => {
                let mut data = Vec::with_capacity(2 * s.m);
                for &v in target.data() {
                    data.push((v.max(0.0) / s.intensity_scale).sqrt());
                    data.push(0.0);
                }
                Tensor::from_vec(data)
            }
        };
        let sol = pseudo_inverse_control(&f_re, &f_im, &field_target)?;
        if sol.condition_warning {
            eprintln!("warning: target {i}: ill-conditioned pseudo-inverse");
        }
        let phases = phases_of(&sol.x);
        let achieved = system.query(&phases)?;
        let sigma = sigma_distance(TaskKind::Optical, &achieved, target)?;
        let pearson = pearson2d(&achieved, target)?;
        pearson_sum += pearson;
        rows.push(vec![i as f64, sigma, pearson]);
    }
    io::write_numeric_csv(
        &args.out.join("baseline.csv"),
        "target,sigma,pearson",
        &rows,
    )?;
    println!(
        "baseline mean pearson over {} targets: {:.4}",
        targets.len(),
        pearson_sum / targets.len() as f64
    );
    Ok(ExitCode::from(0))
}

fn cmd_embed_latents(args: &EmbedArgs) -> Result<ExitCode> {
    let mut found = 0;
    for iter in 0.. {
        let path = args.run.join(format!("latents_iter{iter}.pct"));
        if !path.exists() {
            break;
        }
        let entries = read_container(&path)?;
        let latents = io::find(&entries, "latents")?;
        let emb = pca2d_embed(latents)?;
        if let Some(w) = &emb.warning {
            eprintln!("warning: iter {iter}: {w}");
        }
        let rows: Vec<Vec<f64>> = (0..emb.points.shape()[0])
            .map(|i| vec![emb.points.data()[i * 2], emb.points.data()[i * 2 + 1]])
            .collect();
        io::write_numeric_csv(
            &args.run.join(format!("latents_2d_iter{iter}.csv")),
            "pc1,pc2",
            &rows,
        )?;
        found += 1;
    }
    if found == 0 {
        return Err(Error::Invalid(format!(
            "no latent dumps found in {}",
            args.run.display()
        )));
    }
    println!("embedded {found} latent dumps");
    Ok(ExitCode::from(0))
}
