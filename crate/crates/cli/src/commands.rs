use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dampc_core::datagen::{
    collect_dataset, filter_dataset, observation, read_dataset, write_dataset, Dataset,
};
use dampc_core::diffusion::{train_diffusion, DiffusionModel};
use dampc_core::evalharness::{
    emit_report, episode_setup, plan_end_effector_points, run_closed_loop, train_lsm,
    write_heatmaps, Heatmap, LsmModel, MetricsReport, PolicyRun, Variant,
};
use dampc_core::nlp::{cost_grad_check, mode_threshold, solve_multistart};
use dampc_core::nn::{grad_check, Activation, GradCheckReport, MlpSpec};
use dampc_core::selection::{leader_clusters, sample_batch};
use dampc_core::{Error, Pose2};
use serde::Serialize;

use crate::{Command, Common, Failure, RunConfig, VERSION};

const GRADCHECK_INSTANCES: usize = 20;
const GRADCHECK_TOL: f64 = 1e-4;

pub fn dispatch(cmd: &Command, common: &Common) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let force = common.force;
    match cmd {
        Command::Collect => cmd_collect(&cfg, &out, force).map(drop),
        Command::Train { skip_lsm } => cmd_train(&cfg, &out, force, *skip_lsm),
        Command::Eval => cmd_eval(&cfg, &out, force).map(drop),
        Command::Ablate => cmd_ablate(&cfg, &out, force).map(drop),
        Command::Gradcheck => cmd_gradcheck(&cfg, &out, force),
        Command::Heatmap {
            x0,
            target,
            starts,
            samples,
        } => cmd_heatmap(
            &cfg,
            &out,
            force,
            x0.as_deref(),
            target.as_deref(),
            *starts,
            *samples,
        ),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::internal(format!("{}: {e}", path.display()))
}

/// Creates `out`, refusing a non-empty directory unless `force`, and writes
/// the effective config and the tool version into it.
pub fn prepare_out(out: &Path, cfg: &RunConfig, force: bool) -> Result<(), Failure> {
    if let Ok(mut entries) = std::fs::read_dir(out) {
        if entries.next().is_some() && !force {
            return Err(Failure::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    } else if out.exists() {
        return Err(Failure::usage(format!(
            "{} exists and is not a directory",
            out.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Failure::internal(e.to_string()))?;
    write_file(&out.join("config.json"), &(json + "\n"))?;
    write_file(&out.join("VERSION"), &format!("dampc {VERSION}\n"))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| io_failure(path, e))
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

/// Maps a load error of an input file to a usage failure naming the file.
fn input_error<'a>(path: &'a Path, what: &'a str) -> impl FnOnce(Error) -> Failure + 'a {
    move |e| Failure::usage(format!("cannot load {what} {}: {e}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    require(path, "dataset")?;
    read_dataset(path).map_err(input_error(path, "dataset"))
}

pub fn load_diffusion(path: &Path) -> Result<DiffusionModel, Failure> {
    require(path, "diffusion model")?;
    DiffusionModel::load(path).map_err(input_error(path, "diffusion model"))
}

pub fn load_lsm(path: &Path) -> Result<LsmModel, Failure> {
    require(path, "regression model")?;
    LsmModel::load(path).map_err(input_error(path, "regression model"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectSummary {
    pub episodes: usize,
    pub truncated_episodes: usize,
    pub records: usize,
    pub kept: usize,
}

/// Collects `exploration.episodes` episodes and writes the d_y-filtered
/// dataset to `out/dataset.bin`.
pub fn cmd_collect(cfg: &RunConfig, out: &Path, force: bool) -> Result<CollectSummary, Failure> {
    prepare_out(out, cfg, force)?;
    let t0 = Instant::now();
    let (ds, report) = collect_dataset(
        &cfg.exploration,
        &cfg.ocp,
        &cfg.arm,
        cfg.exploration.episodes,
        cfg.seed,
    )?;
    let kept = filter_dataset(&ds, cfg.exploration.dy_filter_threshold);
    let summary = CollectSummary {
        episodes: report.episodes,
        truncated_episodes: report.truncated_episodes,
        records: report.records,
        kept: kept.len(),
    };
    write_dataset(&kept, &out.join("dataset.bin"))?;
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::internal(e.to_string()))?;
    write_file(&out.join("collect.json"), &(json + "\n"))?;
    let frac = if summary.records == 0 {
        0.0
    } else {
        100.0 * summary.kept as f64 / summary.records as f64
    };
    println!(
        "{} episodes ({} truncated), {} records, {} kept after the d_y filter ({frac:.1}%) in {:.1} s",
        summary.episodes,
        summary.truncated_episodes,
        summary.records,
        summary.kept,
        t0.elapsed().as_secs_f64()
    );
    Ok(summary)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut csv = String::from("step,loss\n");
    for (k, l) in losses.iter().enumerate() {
        writeln!(csv, "{k},{l}").unwrap();
    }
    csv
}

/// Trains on `paths.dataset`; writes `diffusion.bin`, `lsm.bin` and the
/// loss curves.
pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool, skip_lsm: bool) -> Result<(), Failure> {
    let ds = load_dataset(&cfg.paths.dataset)?;
    prepare_out(out, cfg, force)?;
    let t0 = Instant::now();
    let (model, losses) = train_diffusion(&ds, &cfg.diffusion)?;
    model.save(&out.join("diffusion.bin"))?;
    write_file(&out.join("diffusion_loss.csv"), &loss_csv(&losses))?;
    println!(
        "diffusion: {} steps on {} records in {:.1} s, final loss {}",
        losses.len(),
        ds.len(),
        t0.elapsed().as_secs_f64(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    if !skip_lsm {
        let t0 = Instant::now();
        let (lsm, losses) = train_lsm(&ds, &cfg.lsm)?;
        lsm.save(&out.join("lsm.bin"))?;
        write_file(&out.join("lsm_loss.csv"), &loss_csv(&losses))?;
        println!(
            "lsm: {} steps in {:.1} s, final loss {}",
            losses.len(),
            t0.elapsed().as_secs_f64(),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Closed-loop runs of `variants` over shared seeds, reported into `out`.
pub fn evaluate_variants(
    cfg: &RunConfig,
    variants: &[Variant],
    out: &Path,
    force: bool,
) -> Result<Vec<MetricsReport>, Failure> {
    let diffusion = if variants.iter().any(|v| v.needs_diffusion()) {
        Some(load_diffusion(&cfg.paths.diffusion)?)
    } else {
        None
    };
    let lsm = if variants.contains(&Variant::Lsm) {
        Some(load_lsm(&cfg.paths.lsm)?)
    } else {
        None
    };
    prepare_out(out, cfg, force)?;
    let mut runs = Vec::with_capacity(variants.len());
    for v in variants {
        let policy = v.policy(
            &cfg.eval,
            diffusion.as_ref(),
            lsm.as_ref(),
            &cfg.diffusion.sampling,
            &cfg.selection,
        )?;
        let t0 = Instant::now();
        let logs = run_closed_loop(&policy, &cfg.arm, &cfg.ocp, &cfg.eval, cfg.seed)?;
        log::info!(
            "{}: {} episodes in {:.1} s",
            v.name(),
            logs.len(),
            t0.elapsed().as_secs_f64()
        );
        runs.push(PolicyRun {
            name: v.name().to_string(),
            logs,
        });
    }
    let reports = emit_report(out, &runs, &cfg.arm, &cfg.ocp, &cfg.eval)?;
    println!("{}", MetricsReport::CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_row());
    }
    Ok(reports)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<MetricsReport>, Failure> {
    evaluate_variants(cfg, &cfg.eval.policies, out, force)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<MetricsReport>, Failure> {
    evaluate_variants(cfg, &cfg.eval.ablation, out, force)
}

/// Gradient checks of small networks of both activations and of the OCP
/// cost; writes `gradcheck.csv` and fails if any check fails.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), Failure> {
    prepare_out(out, cfg, force)?;
    let outcome =
        |r: dampc_core::Result<GradCheckReport>, tol: f64| -> Result<(f64, bool), Failure> {
            match r {
                Ok(rep) => Ok((rep.max_rel_error, true)),
                Err(Error::GradCheck { max_rel_error, .. }) => Ok((max_rel_error, false)),
                Err(e) => Err(e.into()),
            }
            .map(|(err, ok)| (err, ok && err < tol))
        };
    let mut rows = Vec::new();
    for act in [Activation::Relu, Activation::Gelu] {
        let spec = MlpSpec::new(vec![6, 12, 12, 4], act, cfg.seed);
        let name = format!(
            "mlp-{}",
            if act == Activation::Relu {
                "relu"
            } else {
                "gelu"
            }
        );
        rows.push((
            name,
            outcome(
                grad_check(&spec, GRADCHECK_INSTANCES, GRADCHECK_TOL),
                GRADCHECK_TOL,
            )?,
        ));
    }
    rows.push((
        "ocp-cost".to_string(),
        outcome(
            cost_grad_check(
                &cfg.ocp,
                &cfg.arm,
                GRADCHECK_INSTANCES,
                cfg.seed,
                GRADCHECK_TOL,
            ),
            GRADCHECK_TOL,
        )?,
    ));
    let mut csv = String::from("check,instances,max_rel_error,tolerance,passed\n");
    for (name, (err, ok)) in &rows {
        writeln!(
            csv,
            "{name},{GRADCHECK_INSTANCES},{err},{GRADCHECK_TOL},{ok}"
        )
        .unwrap();
        println!(
            "{name}: max relative error {err:.3e} {}",
            if *ok { "ok" } else { "FAILED" }
        );
    }
    write_file(&out.join("gradcheck.csv"), &csv)?;
    match rows.iter().find(|(_, (_, ok))| !ok) {
        Some((name, _)) => Err(Failure::internal(format!("gradient check {name} failed"))),
        None => Ok(()),
    }
}

/// Start and target from the flags, or episode 0 of the seed.
fn heatmap_problem(
    cfg: &RunConfig,
    x0: Option<&[f64]>,
    target: Option<&[f64]>,
) -> Result<(Vec<f64>, Pose2), Failure> {
    match (x0, target) {
        (Some(x), Some(t)) => {
            if x.len() != cfg.arm.dof() || t.len() != 3 {
                return Err(Failure::usage(format!(
                    "--x0 needs {} values and --target needs 3",
                    cfg.arm.dof()
                )));
            }
            Ok((x.to_vec(), Pose2::new(t[0], t[1], t[2])))
        }
        (None, None) => {
            let (start, target, _) = episode_setup(&cfg.arm, &cfg.ocp, &cfg.eval, cfg.seed, 0)?;
            Ok((start, target))
        }
        _ => Err(Failure::usage("pass both --x0 and --target, or neither")),
    }
}

pub fn cmd_heatmap(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    x0: Option<&[f64]>,
    target: Option<&[f64]>,
    starts: usize,
    samples: usize,
) -> Result<(), Failure> {
    if starts == 0 || samples == 0 {
        return Err(Failure::usage("--starts and --samples must be at least 1"));
    }
    let (x0, yd) = heatmap_problem(cfg, x0, target)?;
    let diffusion = load_diffusion(&cfg.paths.diffusion)?;
    let lsm = load_lsm(&cfg.paths.lsm)?;
    prepare_out(out, cfg, force)?;
    let (arm, ocp) = (&cfg.arm, &cfg.ocp);
    let ms = solve_multistart(ocp, arm, &x0, &yd, starts, cfg.seed)?;
    let mut expert: Vec<Vec<f64>> = ms
        .solutions
        .iter()
        .filter(|s| s.converged)
        .map(|s| s.xi.u.clone())
        .collect();
    if expert.is_empty() {
        expert = ms.solutions.iter().map(|s| s.xi.u.clone()).collect();
    }
    let obs = observation(&x0, &yd);
    let sampled: Vec<Vec<f64>> = sample_batch(
        &diffusion,
        &cfg.diffusion.sampling,
        &obs,
        None,
        arm.dof(),
        samples,
        0,
    )?
    .into_iter()
    .map(|p| p.u_plan)
    .collect();
    let regressed = vec![lsm.predict_plan(&obs)?];
    let tau = mode_threshold(ocp.horizon, arm.dof());
    let mut maps = Vec::new();
    for (name, plans) in [
        ("mpc", &expert),
        ("diffusion", &sampled),
        ("lsm", &regressed),
    ] {
        let mut h = Heatmap::for_arm(arm, cfg.eval.heatmap_cells);
        for p in plan_end_effector_points(arm, &x0, plans, ocp.dt)? {
            h.add(p);
        }
        let refs: Vec<&[f64]> = plans.iter().map(|p| p.as_slice()).collect();
        let modes = leader_clusters(&refs, tau).sizes.len();
        println!("{name}: {} plans, {modes} modes", plans.len());
        maps.push((name.to_string(), h));
    }
    write_heatmaps(out, &maps)?;
    Ok(())
}
