use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdkd::oracle::suite::{run_suite, summarize, SuiteConfig};
use cdkd::train::{self, parse_metrics_csv, EpochMetrics, RunCheckpoint, RunOptions, RunOutput};

use crate::config::{Need, Overrides, RunConfig};
use crate::plot::render_svg;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const PLOT_FILE: &str = "metrics.svg";
pub const EVAL_FILE: &str = "eval.txt";

fn prepare(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join(SNAPSHOT_FILE), cfg.snapshot())?;
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    println!(
        "epoch {:>3}  lr {:.5}  edt {:.4}  loss {:.4} (cd {:.4} gkd {:.4} ce {:.4})  train {:.2}%  val {:.2}% / {:.2}%",
        m.epoch,
        m.lr,
        m.edt_weight,
        m.loss_total,
        m.loss_cd,
        m.loss_gkd,
        m.loss_ce,
        m.train_top1,
        m.val_top1,
        m.val_top5
    );
}

fn finish(cfg: &RunConfig, out: &RunOutput, title: &str) -> Result<()> {
    fs::write(cfg.out_dir.join(PLOT_FILE), render_svg(&out.checkpoint.metrics, title))?;
    let st = &out.checkpoint.state;
    if let Some(m) = out.checkpoint.metrics.last() {
        println!(
            "done: final val top-1 {:.2}%, best {:.2}% at epoch {}",
            m.val_top1,
            st.best_val_top1,
            st.best_epoch.map_or("-".into(), |e| e.to_string())
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn load_resume(path: Option<&Path>) -> Result<Option<RunCheckpoint>> {
    path.map(|p| RunCheckpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

pub fn train_teacher(config: &Path, ov: &Overrides, resume: Option<&Path>) -> Result<RunOutput> {
    let cfg = RunConfig::load(config, ov, Need::Teacher)?;
    let spec = cfg.teacher.clone().expect("teacher section is required");
    let (train_ds, val_ds) = cfg.data.load()?;
    prepare(&cfg)?;
    let mut cb = print_epoch;
    let out = train::train_teacher(
        &spec,
        &train_ds,
        &val_ds,
        &cfg.train,
        RunOptions {
            out_dir: Some(&cfg.out_dir),
            resume: load_resume(resume)?,
            on_epoch: Some(&mut cb),
        },
    )?;
    finish(&cfg, &out, "teacher")?;
    Ok(out)
}

pub fn distill(config: &Path, ov: &Overrides, teacher_ckpt: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    let cfg = RunConfig::load(config, ov, Need::Student)?;
    let spec = cfg.student.clone().expect("student section is required");
    let teacher = RunCheckpoint::load(teacher_ckpt).with_context(|| format!("loading {}", teacher_ckpt.display()))?;
    let (train_ds, val_ds) = cfg.data.load()?;
    prepare(&cfg)?;
    let mut cb = print_epoch;
    let out = train::distill(
        &teacher,
        &spec,
        &train_ds,
        &val_ds,
        &cfg.distill,
        &cfg.train,
        RunOptions {
            out_dir: Some(&cfg.out_dir),
            resume: load_resume(resume)?,
            on_epoch: Some(&mut cb),
        },
    )?;
    if let Some((a, b)) = out.teacher_checksums {
        if a != b {
            bail!("teacher parameters changed during distillation ({a:08x} -> {b:08x})");
        }
        println!("teacher checksum {a:08x} unchanged");
    }
    finish(&cfg, &out, "distillation")?;
    Ok(out)
}

/// Evaluates `ckpt` on the validation split described by `config` (or the
/// default synthetic data when no config is given).
pub fn eval(ckpt: &Path, config: Option<&Path>, ov: &Overrides, best: bool) -> Result<train::EvalMetrics> {
    let run = RunCheckpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = match config {
        Some(p) => RunConfig::load(p, ov, Need::Nothing)?,
        None => RunConfig::from_text(
            "[optim]\nlr = 0.1\n[schedule]\nmilestones = []\n[run]\nepochs = 1\n",
            ov,
            Need::Nothing,
        )?,
    };
    let (_, val_ds) = cfg.data.load()?;
    let net = if best { &run.best } else { &run.network };
    let m = train::evaluate(net, &val_ds, &run.normalization)?;
    println!("top1_error = {}", m.top1_error);
    println!("top5_error = {}", m.top5_error);
    if config.is_some() || ov.out_dir.is_some() {
        fs::create_dir_all(&cfg.out_dir)?;
        fs::write(
            cfg.out_dir.join(EVAL_FILE),
            format!(
                "checkpoint = {}\nparameters = {}\ntop1_error = {}\ntop5_error = {}\n",
                ckpt.display(),
                if best { "best" } else { "final" },
                m.top1_error,
                m.top5_error
            ),
        )?;
    }
    Ok(m)
}

pub fn gradcheck(seed: Option<u64>) -> Result<()> {
    let mut cfg = SuiteConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let reports = run_suite(&cfg)?;
    let fams = summarize(&reports);
    let mut failed = 0;
    for f in &fams {
        println!(
            "{:<8} {:<26} {:>3} cases  worst rel {:.3e}  tol {:.0e}",
            if f.failures == 0 { "PASS" } else { "FAIL" },
            f.family,
            f.cases,
            f.worst_rel,
            f.tolerance
        );
        failed += f.failures;
    }
    for r in reports.iter().filter(|r| !r.pass) {
        println!("  failed {}: abs {:.3e} rel {:.3e}", r.case_id, r.max_abs_diff, r.max_rel_diff);
    }
    if failed > 0 {
        bail!("{failed} of {} oracle cases failed", reports.len());
    }
    println!("all {} oracle cases passed", reports.len());
    Ok(())
}

pub fn plot(csv: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let rows = parse_metrics_csv(&text).with_context(|| format!("parsing {}", csv.display()))?;
    if rows.is_empty() {
        bail!("{} has no epoch rows", csv.display());
    }
    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| csv.with_extension("svg"));
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    fs::write(&dest, render_svg(&rows, &title))?;
    println!("wrote {}", dest.display());
    Ok(dest)
}
