//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test --release -p cdkd-core --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cdkd::checkpoint::Checkpoint;
use cdkd::data::{
    decode_cifar, encode_cifar, make_synthetic_split, CifarVariant, Dataset, Split, SyntheticSpec,
};
use cdkd::losses::{argmax_rows, cd_loss, channel_weights, gkd_loss, kd_loss, DistillConfig};
use cdkd::model::NetworkSpec;
use cdkd::optim::{edt_weight, LrSchedule, SgdConfig};
use cdkd::oracle::suite::{gradient_checks, summarize, value_checks, FamilySummary};
use cdkd::seed;
use cdkd::tensor::{Tape, Tensor};
use cdkd::train::{
    distill, resume_distill, train_teacher, AugmentSpec, RunCheckpoint, RunOptions, TrainConfig, IDENTITY_TOL,
    METRICS_FILE,
};
use rand::Rng;
use rand_distr::StandardNormal;

const LOSS_TOL: f64 = 1e-6;
const EDT_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;
const VALUE_TOL: f64 = 1e-5;
const GRAD_CASES: usize = 20;
const VALUE_CASES: usize = 50;
const MASK_CASES: usize = 200;
const SUITE_SEED: u64 = 0x5eed;

const LOSS_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const VALUE_BUDGET: Duration = Duration::from_secs(60);
const ABLATION_BUDGET: Duration = Duration::from_secs(20 * 60);

const ABLATION_SEEDS: u64 = 5;
const ABLATION_EPOCHS: usize = 24;
const TEACHER_EPOCHS: usize = 30;
const TEACHER_MAX_ERROR: f64 = 10.0;
const TEACHER_CHANNELS: [usize; 3] = [12, 24, 48];
const STUDENT_CHANNELS: [usize; 3] = [6, 12, 24];
const ABLATION_LR: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn normal(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect()
}

fn tiny_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 12,
        image_size: 8,
        seed: 11,
    };
    make_synthetic_split(&spec, 4).unwrap()
}

fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        drop_last: false,
        sgd: SgdConfig {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        },
        schedule: LrSchedule {
            milestones: vec![2],
            factor: 0.1,
        },
        augment: AugmentSpec {
            pad: 1,
            random_crop: true,
            hflip_prob: 0.5,
        },
        normalization: None,
        seed,
        wall_clock: false,
    }
}

fn tiny_distill_cfg() -> DistillConfig {
    DistillConfig {
        n_decay: 2,
        ..Default::default()
    }
}

fn tiny_specs() -> (NetworkSpec, NetworkSpec) {
    (NetworkSpec::family(&[4, 6, 8], 1, 4, 3), NetworkSpec::family(&[2, 3, 4], 1, 4, 3))
}

fn tiny_teacher(train: &Dataset, val: &Dataset) -> RunCheckpoint {
    let (teacher, _) = tiny_specs();
    train_teacher(&teacher, train, val, &tiny_cfg(2, 3), RunOptions::default()).unwrap().checkpoint
}

fn tiny_distill(teacher: &RunCheckpoint, epochs: usize, seed: u64, dir: Option<&Path>) -> cdkd::train::RunOutput {
    let (train, val) = tiny_data();
    let (_, student) = tiny_specs();
    let opts = RunOptions {
        out_dir: dir,
        ..Default::default()
    };
    distill(teacher, &student, &train, &val, &tiny_distill_cfg(), &tiny_cfg(epochs, seed), opts).unwrap()
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    (elapsed <= budget, format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs()))
}

fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..20 {
        let tape = Tape::new();
        let x = t(&[3, 5, 4, 4], normal(&mut rng, 240, 1.0));
        let a = channel_weights(tape.constant(x.clone())).unwrap();
        let b = channel_weights(tape.constant(x)).unwrap();
        ok &= cd_loss(&a, &b).unwrap().item() == 0.0;

        let teacher = t(&[6, 5], normal(&mut rng, 30, 2.0));
        let student = tape.constant(t(&[6, 5], normal(&mut rng, 30, 2.0)));
        let pred = argmax_rows(&teacher);
        let wrong: Vec<usize> = pred.iter().map(|p| (p + 1) % 5).collect();
        let tv = tape.constant(teacher);
        let (g, c) = gkd_loss(student, tv, &wrong, 4.0).unwrap();
        ok &= g.item() == 0.0 && c == 0;
        let (g, c) = gkd_loss(student, tv, &pred, 4.0).unwrap();
        let kd = kd_loss(student, tv, 4.0).unwrap().item();
        ok &= c == 6;
        worst = worst.max((g.item() as f64 - kd as f64).abs());
    }
    let alpha = 1.7;
    let edt = DistillConfig {
        alpha,
        ..Default::default()
    }
    .edt();
    ok &= (edt_weight(&edt, 0) - alpha).abs() <= LOSS_TOL;

    let (train, val) = tiny_data();
    let teacher = tiny_teacher(&train, &val);
    let out = tiny_distill(&teacher, 3, 1, None);
    let mut worst_identity = 0.0f64;
    for b in &out.steps {
        worst_identity = worst_identity.max(b.identity_residual() / (b.total as f64).abs().max(1.0));
    }
    let first = out.checkpoint.metrics[0].edt_weight;
    ok &= worst <= LOSS_TOL && worst_identity <= IDENTITY_TOL && first == tiny_distill_cfg().alpha;
    let (fast, time) = within(start.elapsed(), LOSS_BUDGET);
    outcome(
        ok && fast,
        format!(
            "|gkd-kd| {worst:.1e}, identity residual {worst_identity:.1e} over {} steps, {time}",
            out.steps.len()
        ),
    )
}

fn family_outcome(fams: &[FamilySummary], min_cases: usize, tol: f64, start: Instant, budget: Duration) -> Outcome {
    let failures: usize = fams.iter().map(|f| f.failures).sum();
    let thin = fams.iter().filter(|f| f.cases < min_cases).count();
    let worst = fams.iter().map(|f| f.worst_rel).fold(0.0, f64::max);
    let (fast, time) = within(start.elapsed(), budget);
    outcome(
        failures == 0 && thin == 0 && worst <= tol && fast,
        format!("{} families, {failures} failures, worst rel {worst:.2e} (tol {tol:.0e}), {time}", fams.len()),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let fams = summarize(&gradient_checks(SUITE_SEED, GRAD_CASES).unwrap());
    let expected = [
        "add", "sub", "mul", "mul_scalar", "scale", "relu", "log", "square", "sum", "mean", "sum_rows", "matmul",
        "add_bias", "conv2d", "global_avg_pool", "softmax", "cd", "kd", "gkd", "ce", "total",
    ];
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|op| !fams.iter().any(|f| f.family == format!("grad/{op}")))
        .collect();
    let mut o = family_outcome(&fams, GRAD_CASES, GRAD_TOL, start, GRAD_BUDGET);
    if !missing.is_empty() {
        o.pass = false;
        o.detail.push_str(&format!(", missing {missing:?}"));
    }
    o
}

fn value_suite() -> Outcome {
    let start = Instant::now();
    let fams = summarize(&value_checks(seed::derive(SUITE_SEED, 1), VALUE_CASES).unwrap());
    let mut o = family_outcome(&fams, VALUE_CASES, VALUE_TOL, start, VALUE_BUDGET);
    if fams.len() != 7 {
        o.pass = false;
    }
    o
}

fn masking() -> Outcome {
    let mut rng = seed::rng(202);
    let (n, k) = (8, 5);
    let mut checked_rows = 0;
    for case in 0..MASK_CASES {
        let teacher = t(&[n, k], normal(&mut rng, n * k, 2.0));
        let pred = argmax_rows(&teacher);
        let wrong: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let labels: Vec<usize> = pred.iter().zip(&wrong).map(|(&p, &w)| if w { (p + 1) % k } else { p }).collect();
        let base = normal(&mut rng, n * k, 2.0);
        let mut perturbed = base.clone();
        for i in (0..n).filter(|&i| wrong[i]) {
            for j in 0..k {
                perturbed[i * k + j] += rng.sample::<f32, _>(StandardNormal) * 5.0;
            }
        }
        let eval = |logits: &[f32]| {
            let tape = Tape::new();
            let x = t(&[n, k], logits.to_vec()).with_requires_grad();
            let xv = tape.leaf(&x);
            let (loss, _) = gkd_loss(xv, tape.constant(teacher.clone()), &labels, 4.0).unwrap();
            let value = loss.item();
            let grad = if loss.requires_grad() {
                tape.backward(loss).unwrap();
                tape.grad(xv).unwrap().into_data()
            } else {
                vec![0.0; n * k]
            };
            (value, grad)
        };
        let (v0, g0) = eval(&base);
        let (v1, g1) = eval(&perturbed);
        if v0.to_bits() != v1.to_bits() {
            return outcome(false, format!("case {case}: gkd changed from {v0} to {v1}"));
        }
        for i in (0..n).filter(|&i| wrong[i]) {
            checked_rows += 1;
            if g0[i * k..(i + 1) * k].iter().chain(&g1[i * k..(i + 1) * k]).any(|&g| g != 0.0) {
                return outcome(false, format!("case {case}: non-zero gradient on teacher-wrong row {i}"));
            }
        }
    }
    outcome(true, format!("{MASK_CASES} cases, {checked_rows} teacher-wrong rows, value delta 0, gradients 0"))
}

struct AblationRow {
    name: &'static str,
    alpha: f64,
    lambda: f64,
    gkd: bool,
}

const ROWS: [AblationRow; 4] = [
    AblationRow {
        name: "scratch",
        alpha: 0.0,
        lambda: 1.0,
        gkd: false,
    },
    AblationRow {
        name: "CD",
        alpha: 1.0,
        lambda: 1.0,
        gkd: false,
    },
    AblationRow {
        name: "CD+GKD",
        alpha: 1.0,
        lambda: 1.0,
        gkd: true,
    },
    AblationRow {
        name: "CD+GKD+EDT",
        alpha: 1.0,
        lambda: 0.5,
        gkd: true,
    },
];

fn ablation_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        drop_last: false,
        sgd: SgdConfig {
            lr0: ABLATION_LR,
            momentum: 0.9,
            weight_decay: 5e-4,
        },
        schedule: LrSchedule {
            milestones: vec![epochs * 2 / 3],
            factor: 0.1,
        },
        augment: AugmentSpec::NONE,
        normalization: None,
        seed,
        wall_clock: false,
    }
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        classes: 8,
        per_class: 200,
        image_size: 16,
        seed: 7,
    };
    let (train, val) = make_synthetic_split(&spec, 100).unwrap();
    let teacher_spec = NetworkSpec::family(&TEACHER_CHANNELS, 1, 8, 3);
    let student_spec = NetworkSpec::family(&STUDENT_CHANNELS, 1, 8, 3);
    let teacher = train_teacher(
        &teacher_spec,
        &train,
        &val,
        &ablation_cfg(TEACHER_EPOCHS, 1000),
        RunOptions::default(),
    )
    .unwrap()
    .checkpoint;
    let teacher_err = teacher.metrics.last().unwrap().val_top1;
    println!("    teacher {TEACHER_CHANNELS:?}: val top-1 error {teacher_err:.3}%");
    let mut means = Vec::new();
    for row in &ROWS {
        let dcfg = DistillConfig {
            alpha: row.alpha,
            lambda: row.lambda,
            n_decay: ABLATION_EPOCHS * 2 / 3,
            gkd_enabled: row.gkd,
            ..Default::default()
        };
        let errs: Vec<f64> = (0..ABLATION_SEEDS)
            .map(|s| {
                let out = distill(
                    &teacher,
                    &student_spec,
                    &train,
                    &val,
                    &dcfg,
                    &ablation_cfg(ABLATION_EPOCHS, s),
                    RunOptions::default(),
                )
                .unwrap();
                out.checkpoint.metrics.last().unwrap().val_top1
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("    {:<11} mean val top-1 error {mean:7.3}%  per seed {errs:?}", row.name);
        means.push(mean);
    }
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    println!("    strict ordering across all four rows (reported only): {}", if monotone { "yes" } else { "no" });
    let (scratch, cd, full) = (means[0], means[1], means[3]);
    let (fast, time) = within(start.elapsed(), ABLATION_BUDGET);
    outcome(
        teacher_err < TEACHER_MAX_ERROR && scratch > cd && full <= cd && fast,
        format!(
            "teacher {teacher_err:.2}% (< {TEACHER_MAX_ERROR}), scratch {scratch:.3} > CD {cd:.3} >= CD+GKD+EDT {full:.3}, {time}"
        ),
    )
}

fn edt_schedule() -> Outcome {
    let (train, val) = tiny_data();
    let teacher = tiny_teacher(&train, &val);
    let out = tiny_distill(&teacher, 4, 2, None);
    let cfg = tiny_distill_cfg();
    let col: Vec<f64> = out.checkpoint.metrics.iter().map(|m| m.edt_weight).collect();
    let non_increasing = col.windows(2).all(|w| w[1] <= w[0]);
    let start_ok = (col[0] - cfg.alpha).abs() <= EDT_TOL;
    let decay_ok = (col[cfg.n_decay] - cfg.alpha * cfg.lambda).abs() <= EDT_TOL;
    outcome(non_increasing && start_ok && decay_ok, format!("edt_weight column {col:?}"))
}

fn determinism() -> Outcome {
    let (train, val) = tiny_data();
    let teacher = tiny_teacher(&train, &val);
    let before = teacher.network.checksum();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = tiny_distill(&teacher, 3, 7, Some(a.path()));
    tiny_distill(&teacher, 3, 7, Some(b.path()));
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let csv_same = read(&a, METRICS_FILE) == read(&b, METRICS_FILE);
    let ckpt_same = read(&a, "student.ckpt") == read(&b, "student.ckpt");
    let frozen = ra.teacher_checksums == Some((before, before)) && teacher.network.checksum() == before;
    outcome(
        csv_same && ckpt_same && frozen,
        format!("csv identical {csv_same}, checkpoint identical {ckpt_same}, teacher checksum {before:08x} unchanged {frozen}"),
    )
}

fn format_fidelity() -> Outcome {
    let mut rng = seed::rng(303);
    let mut notes = Vec::new();
    let mut ok = true;
    for (variant, classes) in [(CifarVariant::Cifar10, 10), (CifarVariant::Cifar100Fine, 100)] {
        let n = 7;
        let px: Vec<f32> = (0..n * 3072).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let ds = Dataset::new(t(&[n, 3, 32, 32], px), labels, classes, Split::Train).unwrap();
        let bytes = encode_cifar(&ds, variant).unwrap();
        let back = decode_cifar(&bytes, variant).unwrap();
        let exact = back.images.data() == ds.images.data()
            && back.labels == ds.labels
            && encode_cifar(&back, variant).unwrap() == bytes;
        let truncated = decode_cifar(&bytes[..bytes.len() - 1], variant).is_err();
        ok &= exact && truncated;
        notes.push(format!("{variant:?} round trip {exact}, truncation rejected {truncated}"));
    }

    let (train, val) = tiny_data();
    let teacher = tiny_teacher(&train, &val);
    let full_dir = tempfile::tempdir().unwrap();
    let full = tiny_distill(&teacher, 4, 5, Some(full_dir.path()));
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    full.checkpoint.save(&p1).unwrap();
    RunCheckpoint::load(&p1).unwrap().save(&p2).unwrap();
    let ckpt_same = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let mut corrupt = std::fs::read(&p1).unwrap();
    corrupt[20] ^= 1;
    let corrupt_rejected = Checkpoint::from_bytes(&corrupt).is_err();

    let part_dir = tempfile::tempdir().unwrap();
    tiny_distill(&teacher, 2, 5, Some(part_dir.path()));
    let partial = RunCheckpoint::load(part_dir.path().join("student.ckpt")).unwrap();
    let resumed = resume_distill(
        &teacher,
        partial,
        &train,
        &val,
        &tiny_distill_cfg(),
        &tiny_cfg(4, 5),
        RunOptions {
            out_dir: Some(part_dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    let replay = resumed.csv() == full.csv()
        && std::fs::read(part_dir.path().join(METRICS_FILE)).unwrap()
            == std::fs::read(full_dir.path().join(METRICS_FILE)).unwrap();
    ok &= ckpt_same && corrupt_rejected && replay;
    notes.push(format!(
        "checkpoint save/load/save identical {ckpt_same}, corruption rejected {corrupt_rejected}, resume-at-epoch-2 replay identical {replay}"
    ));
    outcome(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("loss identities", loss_identities),
        ("gradient checks", gradient_suite),
        ("oracle equivalence", value_suite),
        ("masking semantics", masking),
        ("desk-scale ablation", ablation),
        ("EDT schedule", edt_schedule),
        ("determinism", determinism),
        ("format fidelity", format_fidelity),
    ];
    let only: Vec<usize> = std::env::var("CDKD_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run();
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
