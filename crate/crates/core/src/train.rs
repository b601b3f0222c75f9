//! Teacher pretraining, distillation, evaluation, run checkpoints and the
//! per-epoch metrics CSV.
//!
//! Every random choice in a run is a pure function of the root seed, the
//! epoch and the batch index, so a run resumed from an end-of-epoch
//! checkpoint replays the uninterrupted run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{augment_batch, augment_rng, iterate_batches, normalize, AugmentConfig, BatchPlan, Dataset};
use crate::kv::{self, KvDoc};
use crate::losses::{argmax_rows, cd_loss, ce_loss, channel_weights, gkd_loss, kd_loss, total_loss, DistillConfig, LossBreakdown};
use crate::model::{ChannelAdapter, Network, NetworkSpec};
use crate::optim::{edt_weight, lr_at_epoch, LrSchedule, Sgd, SgdConfig};
use crate::seed::RunSeeds;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,edt_weight,loss_total,loss_cd,loss_gkd,loss_ce,teacher_correct_frac,train_top1,val_top1,val_top5,wall_seconds";

/// Identity tolerance for `total = edt_weight·cd + gkd + ce`, relative to
/// `max(1, |total|)`.
pub const IDENTITY_TOL: f64 = 1e-6;

const EVAL_BATCH: usize = 200;

/// Geometric augmentation; normalization comes from [`Normalization`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub pad: usize,
    pub random_crop: bool,
    pub hflip_prob: f64,
}

impl AugmentSpec {
    pub const NONE: AugmentSpec = AugmentSpec {
        pad: 0,
        random_crop: false,
        hflip_prob: 0.0,
    };

    pub fn is_none(&self) -> bool {
        self.pad == 0 && self.hflip_prob == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub means: Vec<f32>,
    pub stds: Vec<f32>,
}

impl Normalization {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let (means, stds) = ds.channel_stats();
        Self { means, stds }
    }

    pub fn augment_config(&self, spec: &AugmentSpec) -> AugmentConfig {
        AugmentConfig {
            pad: spec.pad,
            random_crop: spec.random_crop,
            hflip_prob: spec.hflip_prob,
            channel_means: self.means.clone(),
            channel_stds: self.stds.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub augment: AugmentSpec,
    /// Override for the per-channel statistics; computed from the training
    /// split when absent.
    pub normalization: Option<Normalization>,
    pub seed: u64,
    /// Record real elapsed time; off keeps the CSV byte-reproducible.
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.sgd.validate()?;
        self.schedule.validate()
    }
}

/// Progress through a run. `epoch` counts completed epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub best_val_top1: f64,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            seed,
            best_val_top1: f64::INFINITY,
            best_epoch: None,
        }
    }

    pub fn seeds(&self) -> RunSeeds {
        RunSeeds::from_root(self.seed)
    }
}

/// One CSV row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub edt_weight: f64,
    pub loss_total: f64,
    pub loss_cd: f64,
    pub loss_gkd: f64,
    pub loss_ce: f64,
    pub teacher_correct_frac: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.edt_weight,
            self.loss_total,
            self.loss_cd,
            self.loss_gkd,
            self.loss_ce,
            self.teacher_correct_frac,
            self.train_top1,
            self.val_top1,
            self.val_top5,
            self.wall_seconds
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Config(format!("metrics row needs 12 fields, got {}: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("metrics field {} is not a number: `{}`", i + 1, f[i])))
        };
        Ok(Self {
            epoch: f[0]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("metrics epoch is not an integer: `{}`", f[0])))?,
            lr: num(1)?,
            edt_weight: num(2)?,
            loss_total: num(3)?,
            loss_cd: num(4)?,
            loss_gkd: num(5)?,
            loss_ce: num(6)?,
            teacher_correct_frac: num(7)?,
            train_top1: num(8)?,
            val_top1: num(9)?,
            val_top5: num(10)?,
            wall_seconds: num(11)?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(Error::Config(format!("unexpected metrics header `{h}`"))),
        None => return Err(Error::Config("empty metrics file".into())),
    }
    lines.map(EpochMetrics::parse_row).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1_error: f64,
    pub top5_error: f64,
}

/// Percentage of rows whose label is not among the `k` largest logits.
/// Equal logits rank by index, lowest first.
pub fn topk_error(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("topk_error", format!("logits {s:?} for {} labels", labels.len())));
    }
    let classes = s[1];
    let mut wrong = 0usize;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let ly = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > ly || (v == ly && j < y))
            .count();
        if rank >= k {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Deterministic evaluation: normalization only, in dataset order.
pub fn evaluate(net: &Network, ds: &Dataset, norm: &Normalization) -> Result<EvalMetrics> {
    let spec = net.spec();
    if spec.num_classes != ds.class_count {
        return Err(Error::Config(format!(
            "network predicts {} classes, dataset has {}",
            spec.num_classes, ds.class_count
        )));
    }
    let cfg = norm.augment_config(&AugmentSpec::NONE);
    let (mut w1, mut w5) = (0.0f64, 0.0f64);
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(idx)?;
        let logits = net.logits(&normalize(&x, &cfg)?)?;
        w1 += topk_error(&logits, &y, 1)? * idx.len() as f64;
        w5 += topk_error(&logits, &y, 5)? * idx.len() as f64;
    }
    let n = ds.len() as f64;
    Ok(EvalMetrics {
        top1_error: w1 / n,
        top5_error: w5 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher.ckpt",
            Role::Student => "student.ckpt",
        }
    }
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct RunCheckpoint {
    pub role: Role,
    pub network: Network,
    /// Parameters at the epoch with the lowest validation top-1 error.
    pub best: Network,
    pub adapters: Vec<ChannelAdapter>,
    /// Momentum buffers in optimizer order: network parameters, then
    /// non-identity adapter kernels.
    pub velocity: Vec<Vec<f32>>,
    pub state: TrainState,
    pub normalization: Normalization,
    pub metrics: Vec<EpochMetrics>,
    pub teacher_checksum: Option<u32>,
}

impl RunCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut h = KvDoc::new();
        h.section_mut("checkpoint").set("role", self.role.as_str());
        self.network.spec().write_kv(h.section_mut("model"));
        let st = &self.state;
        h.section_mut("state")
            .set("epoch", st.epoch)
            .set("global_step", st.global_step)
            .set("seed", st.seed)
            .set("best_val_top1", st.best_val_top1)
            .set("best_epoch", st.best_epoch.map_or("none".to_string(), |e| e.to_string()));
        h.section_mut("normalize")
            .set("means", kv::list(&self.normalization.means))
            .set("stds", kv::list(&self.normalization.stds));
        let ins: Vec<usize> = self.adapters.iter().map(|a| a.in_channels()).collect();
        let outs: Vec<usize> = self.adapters.iter().map(|a| a.out_channels()).collect();
        h.section_mut("adapters").set("in", kv::list(&ins)).set("out", kv::list(&outs));
        if let Some(c) = self.teacher_checksum {
            h.section_mut("teacher").set("checksum", c);
        }
        let m = h.section_mut("metrics");
        for r in &self.metrics {
            m.set(&format!("e{}", r.epoch), r.csv_row());
        }
        let mut c = Checkpoint::new(h);
        for p in self.network.params() {
            c.push(format!("net.{}", p.name), &p.tensor);
        }
        for p in self.best.params() {
            c.push(format!("best.{}", p.name), &p.tensor);
        }
        for (i, a) in self.adapters.iter().enumerate() {
            if let Some(k) = a.kernel() {
                c.push(format!("adapter.{i}"), k);
            }
        }
        for (i, v) in self.velocity.iter().enumerate() {
            let t = Tensor::new([v.len()], v.clone()).expect("every optimizer slot holds at least one value");
            c.push(format!("opt.{i}"), &t);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let h = &c.header;
        let role = match h.require("checkpoint")?.get_str("role").as_deref() {
            Some("teacher") => Role::Teacher,
            Some("student") => Role::Student,
            other => return Err(Error::Checkpoint(format!("unknown role {other:?}"))),
        };
        let spec = NetworkSpec::from_kv(h.require("model")?)?;
        let s = h.require("state")?;
        let need = |v: Option<u64>, k: &str| v.ok_or_else(|| Error::Checkpoint(format!("[state] missing `{k}`")));
        let best_epoch = match s.get_str("best_epoch").as_deref() {
            None | Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Checkpoint(format!("bad best_epoch `{v}`")))?),
        };
        let state = TrainState {
            epoch: need(s.get_u64("epoch")?, "epoch")? as usize,
            global_step: need(s.get_u64("global_step")?, "global_step")?,
            seed: need(s.get_u64("seed")?, "seed")?,
            best_val_top1: s.get_f64("best_val_top1")?.unwrap_or(f64::INFINITY),
            best_epoch,
        };
        let n = h.require("normalize")?;
        let normalization = Normalization {
            means: n.get_list("means", "numbers")?.unwrap_or_default(),
            stds: n.get_list("stds", "numbers")?.unwrap_or_default(),
        };
        let a = h.require("adapters")?;
        let ins: Vec<usize> = a.get_list("in", "integers")?.unwrap_or_default();
        let outs: Vec<usize> = a.get_list("out", "integers")?.unwrap_or_default();
        if ins.len() != outs.len() {
            return Err(Error::Checkpoint("adapter in/out lists differ in length".into()));
        }
        let mut adapters = Vec::with_capacity(ins.len());
        for (i, (&ci, &co)) in ins.iter().zip(&outs).enumerate() {
            match c.tensor(&format!("adapter.{i}")) {
                Some(k) => {
                    let ad = ChannelAdapter::from_kernel(k.clone())?;
                    if ad.in_channels() != ci || ad.out_channels() != co {
                        return Err(Error::Checkpoint(format!("adapter {i} kernel does not match {ci}->{co}")));
                    }
                    adapters.push(ad);
                }
                None if ci == co => adapters.push(ChannelAdapter::identity(ci)),
                None => return Err(Error::Checkpoint(format!("missing kernel for adapter {i}"))),
            }
        }
        let network = Network::from_params(&spec, c.with_prefix("net."))?;
        let best = Network::from_params(&spec, c.with_prefix("best."))?;
        let mut velocity = Vec::new();
        while let Some(t) = c.tensor(&format!("opt.{}", velocity.len())) {
            velocity.push(t.data().to_vec());
        }
        let teacher_checksum = match h.section("teacher") {
            Some(t) => t.get_u64("checksum")?.map(|v| v as u32),
            None => None,
        };
        let mut metrics = Vec::new();
        if let Some(m) = h.section("metrics") {
            for e in &m.entries {
                metrics.push(EpochMetrics::parse_row(&e.value)?);
            }
        }
        Ok(Self {
            role,
            network,
            best,
            adapters,
            velocity,
            state,
            normalization,
            metrics,
            teacher_checksum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Frozen-teacher values for one batch.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    pub taps: Vec<Tensor>,
}

impl TeacherOutputs {
    pub fn compute(teacher: &Network, x: &Tensor) -> Result<Self> {
        let (logits, taps) = teacher.forward_with_taps(x)?;
        Ok(Self {
            logits,
            taps: taps.into_iter().map(|(_, t)| t).collect(),
        })
    }
}

/// Upper bound on the memory spent caching teacher outputs, in bytes.
pub const TEACHER_CACHE_LIMIT: usize = 256 << 20;

/// Teacher outputs for every training sample. Only valid when the input
/// pipeline is deterministic (no augmentation); every op of the forward
/// pass is per-sample, so cached rows are bit-identical to a per-batch
/// recomputation.
struct TeacherCache {
    logits: Tensor,
    taps: Vec<Tensor>,
}

impl TeacherCache {
    fn bytes_needed(teacher: &Network, ds: &Dataset) -> Result<usize> {
        let (_, h, w) = ds.image_shape();
        let spec = teacher.spec();
        let per_sample: usize = spec.num_classes
            + spec
                .tap_sizes(h, w)?
                .iter()
                .zip(spec.tap_channels())
                .map(|((th, tw), c)| c * th * tw)
                .sum::<usize>();
        Ok(per_sample * ds.len() * std::mem::size_of::<f32>())
    }

    fn build(teacher: &Network, ds: &Dataset, aug: &AugmentConfig) -> Result<Self> {
        let mut logits = Vec::new();
        let mut taps: Vec<Vec<f32>> = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (raw, _) = ds.batch(chunk)?;
            let out = TeacherOutputs::compute(teacher, &normalize(&raw, aug)?)?;
            logits.extend_from_slice(out.logits.data());
            if taps.is_empty() {
                taps = vec![Vec::new(); out.taps.len()];
                shapes = out.taps.iter().map(|t| t.shape().to_vec()).collect();
            }
            for (dst, t) in taps.iter_mut().zip(&out.taps) {
                dst.extend_from_slice(t.data());
            }
        }
        let n = ds.len();
        Ok(Self {
            logits: Tensor::new([n, teacher.spec().num_classes], logits)?,
            taps: taps
                .into_iter()
                .zip(shapes)
                .map(|(d, mut s)| {
                    s[0] = n;
                    Tensor::new(s, d)
                })
                .collect::<Result<_>>()?,
        })
    }

    fn select(&self, idx: &[usize]) -> Result<TeacherOutputs> {
        Ok(TeacherOutputs {
            logits: self.logits.select(idx)?,
            taps: self.taps.iter().map(|t| t.select(idx)).collect::<Result<_>>()?,
        })
    }
}

/// A training objective recorded on a tape.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub logits: Var<'t>,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var<'t>>,
    /// Kernel leaf per adapter (None for identity adapters).
    pub adapter_params: Vec<Option<Var<'t>>>,
}

/// Builds the full objective for one batch. Without a teacher this is plain
/// cross entropy; with one it is `edt_weight·CD + GKD + CE` where CD averages
/// the per-tap penalties. When `edt_weight` is 0 the CD value is still
/// computed for logging but no gradient flows from it into the student.
pub fn objective<'t>(
    tape: &'t Tape,
    student: &Network,
    x: Var<'t>,
    labels: &[usize],
    teacher: Option<(&TeacherOutputs, &[ChannelAdapter], &DistillConfig)>,
    edt_weight: f32,
) -> Result<Objective<'t>> {
    let fwd = student.forward(tape, x)?;
    let ce = ce_loss(fwd.logits, labels)?;
    let Some((tout, adapters, cfg)) = teacher else {
        let zero = tape.constant(Tensor::scalar(0.0));
        let (total, breakdown) = total_loss(tape, &[], zero, ce, 0.0, 0)?;
        return Ok(Objective {
            total,
            breakdown,
            logits: fwd.logits,
            params: fwd.params,
            adapter_params: Vec::new(),
        });
    };
    if fwd.taps.len() != tout.taps.len() || adapters.len() != tout.taps.len() {
        return Err(Error::InvalidSpec(format!(
            "student has {} taps, teacher {}, adapters {}",
            fwd.taps.len(),
            tout.taps.len(),
            adapters.len()
        )));
    }
    let adapter_params: Vec<Option<Var<'t>>> = adapters.iter().map(|a| a.register(tape)).collect();
    let mut cd_terms = Vec::with_capacity(adapters.len());
    for ((tap, t_feat), (ad, kv)) in fwd.taps.iter().zip(&tout.taps).zip(adapters.iter().zip(&adapter_params)) {
        let s_feat = if edt_weight > 0.0 { tap.feature } else { tap.feature.detach() };
        let adapted = ad.adapt(*kv, s_feat, t_feat.shape())?;
        let ws = channel_weights(adapted)?;
        let wt = channel_weights(tape.constant(t_feat.detached()))?;
        cd_terms.push(cd_loss(&ws, &wt)?);
    }
    let t_logits = tape.constant(tout.logits.detached());
    let (gkd, correct) = if cfg.plain_kd_fallback {
        let correct = count_correct(&tout.logits, labels);
        (kd_loss(fwd.logits, t_logits, cfg.temperature)?, correct)
    } else if cfg.gkd_enabled {
        gkd_loss(fwd.logits, t_logits, labels, cfg.temperature)?
    } else {
        (tape.constant(Tensor::scalar(0.0)), count_correct(&tout.logits, labels))
    };
    let gkd = if cfg.kd_t_squared && (cfg.plain_kd_fallback || cfg.gkd_enabled) {
        gkd.scale(cfg.temperature * cfg.temperature)
    } else {
        gkd
    };
    let (total, breakdown) = total_loss(tape, &cd_terms, gkd, ce, edt_weight, correct)?;
    Ok(Objective {
        total,
        breakdown,
        logits: fwd.logits,
        params: fwd.params,
        adapter_params,
    })
}

fn count_correct(teacher_logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(teacher_logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Hooks and resume point for a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Metrics CSV, checkpoint and any diagnostic dump are written here.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<RunCheckpoint>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: RunCheckpoint,
    /// Loss breakdown of every optimizer step taken in this invocation.
    pub steps: Vec<LossBreakdown>,
    /// Teacher checksum before and after the run (distillation only).
    pub teacher_checksums: Option<(u32, u32)>,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        metrics_csv(&self.checkpoint.metrics)
    }
}

struct Distill<'a> {
    teacher: &'a Network,
    cfg: &'a DistillConfig,
}

/// Trains `spec` from scratch with cross entropy.
pub fn train_teacher(
    spec: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let norm = cfg
        .normalization
        .clone()
        .unwrap_or_else(|| Normalization::from_dataset(train));
    run(Role::Teacher, spec, train, val, cfg, norm, None, opts)
}

/// Distills the frozen network in `teacher` into a fresh `student_spec`.
/// Inputs are normalized with the teacher's statistics.
pub fn distill(
    teacher: &RunCheckpoint,
    student_spec: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    dcfg.validate()?;
    let t_spec = teacher.network.spec();
    if t_spec.num_classes != student_spec.num_classes || t_spec.input_channels != student_spec.input_channels {
        return Err(Error::InvalidSpec(format!(
            "teacher maps {} channels to {} classes, student {} to {}",
            t_spec.input_channels, t_spec.num_classes, student_spec.input_channels, student_spec.num_classes
        )));
    }
    let frozen = teacher.network.clone().freeze();
    let d = Distill {
        teacher: &frozen,
        cfg: dcfg,
    };
    run(
        Role::Student,
        student_spec,
        train,
        val,
        cfg,
        teacher.normalization.clone(),
        Some(d),
        opts,
    )
}

/// Resumes `ckpt` (written by a run with the same configuration) and trains
/// until `cfg.epochs`.
pub fn resume_distill(
    teacher: &RunCheckpoint,
    ckpt: RunCheckpoint,
    train: &Dataset,
    val: &Dataset,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<RunOutput> {
    let spec = ckpt.network.spec().clone();
    distill(
        teacher,
        &spec,
        train,
        val,
        dcfg,
        cfg,
        RunOptions {
            resume: Some(ckpt),
            ..opts
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn run(
    role: Role,
    spec: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    norm: Normalization,
    teacher: Option<Distill<'_>>,
    mut opts: RunOptions<'_>,
) -> Result<RunOutput> {
    spec.validate()?;
    let (c, h, w) = train.image_shape();
    if c != spec.input_channels {
        return Err(Error::Config(format!(
            "data has {c} channels, network expects {}",
            spec.input_channels
        )));
    }
    if train.class_count != spec.num_classes || val.class_count != spec.num_classes {
        return Err(Error::Config(format!(
            "network predicts {} classes, data has {} (train) / {} (val)",
            spec.num_classes, train.class_count, val.class_count
        )));
    }
    spec.tap_sizes(h, w)?;
    let aug = norm.augment_config(&cfg.augment);
    aug.validate(c)?;

    let teacher_sum_start = teacher.as_ref().map(|d| d.teacher.checksum());
    let resumed = opts.resume.take();
    let (mut student, mut adapters, mut state, mut metrics, mut best, velocity) = match resumed {
        Some(ck) => {
            if ck.role != role || ck.network.spec() != spec {
                return Err(Error::Checkpoint("resume checkpoint does not match this run".into()));
            }
            if ck.state.seed != cfg.seed {
                return Err(Error::Checkpoint(format!(
                    "resume checkpoint was written with seed {}, run uses {}",
                    ck.state.seed, cfg.seed
                )));
            }
            if ck.normalization != norm {
                return Err(Error::Checkpoint("resume checkpoint normalization differs".into()));
            }
            (ck.network, ck.adapters, ck.state, ck.metrics, ck.best, Some(ck.velocity))
        }
        None => {
            let state = TrainState::new(cfg.seed);
            let seeds = state.seeds();
            let net = Network::build(spec, seeds.model)?;
            let adapters = match &teacher {
                Some(d) => ChannelAdapter::for_pair(spec, d.teacher.spec(), seeds.adapter)?,
                None => Vec::new(),
            };
            (net.clone(), adapters, state, Vec::new(), net, None)
        }
    };
    let seeds = state.seeds();

    let trainable: Vec<&Tensor> = student
        .params()
        .iter()
        .map(|p| &p.tensor)
        .chain(adapters.iter().filter_map(|a| a.kernel()))
        .collect();
    let mut opt = Sgd::new(cfg.sgd, &trainable)?;
    if let Some(v) = velocity {
        opt.set_velocity(v)?;
    }

    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        shuffle_seed: seeds.shuffle,
        drop_last: cfg.drop_last,
    };
    let cache = match &teacher {
        Some(d) if cfg.augment.is_none() && TeacherCache::bytes_needed(d.teacher, train)? <= TEACHER_CACHE_LIMIT => {
            Some(TeacherCache::build(d.teacher, train, &aug)?)
        }
        _ => None,
    };
    let mut steps = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(&cfg.schedule, cfg.sgd.lr0, epoch);
        let w = teacher.as_ref().map_or(0.0, |d| edt_weight(&d.cfg.edt(), epoch));
        let batches = iterate_batches(train, &plan, epoch)?;
        let mut sums = [0.0f64; 4];
        let (mut correct, mut seen, mut train_wrong) = (0usize, 0usize, 0.0f64);
        for (bi, idx) in batches.iter().enumerate() {
            let (raw, labels) = train.batch(idx)?;
            let x = augment_batch(&raw, &aug, &mut augment_rng(seeds.augment, epoch, bi))?;
            let tout = match (&cache, &teacher) {
                (Some(c), _) => Some(c.select(idx)?),
                (None, Some(d)) => Some(TeacherOutputs::compute(d.teacher, &x)?),
                (None, None) => None,
            };
            let tape = Tape::new();
            let xv = tape.constant(x);
            let t = match (&tout, &teacher) {
                (Some(o), Some(d)) => Some((o, adapters.as_slice(), d.cfg)),
                _ => None,
            };
            let obj = objective(&tape, &student, xv, &labels, t, w as f32)?;
            let b = obj.breakdown;
            if ![b.total, b.cd, b.gkd, b.ce].iter().all(|v| v.is_finite()) {
                return Err(non_finite(opts.out_dir, &state, epoch, bi, lr, &b));
            }
            if b.identity_residual() > IDENTITY_TOL * (b.total.abs() as f64).max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss identity violated at step {}: {b:?}",
                    state.global_step
                )));
            }
            tape.backward(obj.total)?;
            student.collect_grads(&tape, &obj.params)?;
            for (a, v) in adapters.iter_mut().zip(&obj.adapter_params) {
                if let (Some(k), Some(v)) = (a.kernel_mut(), v) {
                    tape.accumulate_into(*v, k)?;
                }
            }
            train_wrong += topk_error(&obj.logits.value(), &labels, 1)? * labels.len() as f64;
            drop(obj);
            drop(tape);
            let mut refs: Vec<&mut Tensor> = student
                .params_mut()
                .iter_mut()
                .map(|p| &mut p.tensor)
                .chain(adapters.iter_mut().filter_map(|a| a.kernel_mut()))
                .collect();
            opt.step(&mut refs, lr)?;

            sums[0] += b.total as f64;
            sums[1] += b.cd as f64;
            sums[2] += b.gkd as f64;
            sums[3] += b.ce as f64;
            correct += b.correct_teacher_count;
            seen += labels.len();
            state.global_step += 1;
            steps.push(b);
        }
        let nb = batches.len().max(1) as f64;
        let ev = evaluate(&student, val, &norm)?;
        let row = EpochMetrics {
            epoch,
            lr,
            edt_weight: w,
            loss_total: sums[0] / nb,
            loss_cd: sums[1] / nb,
            loss_gkd: sums[2] / nb,
            loss_ce: sums[3] / nb,
            teacher_correct_frac: if teacher.is_some() && seen > 0 {
                correct as f64 / seen as f64
            } else {
                0.0
            },
            train_top1: if seen > 0 { train_wrong / seen as f64 } else { 0.0 },
            val_top1: ev.top1_error,
            val_top5: ev.top5_error,
            wall_seconds: if cfg.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if ev.top1_error < state.best_val_top1 {
            state.best_val_top1 = ev.top1_error;
            state.best_epoch = Some(epoch);
            best = student.clone();
        }
        state.epoch = epoch + 1;
        metrics.push(row);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        if let Some(dir) = opts.out_dir {
            let ck = RunCheckpoint {
                role,
                network: student.clone(),
                best: best.clone(),
                adapters: adapters.clone(),
                velocity: opt.velocity().to_vec(),
                state,
                normalization: norm.clone(),
                metrics: metrics.clone(),
                teacher_checksum: teacher_sum_start,
            };
            write_artifacts(dir, &ck)?;
        }
    }

    let teacher_checksums = match (&teacher, teacher_sum_start) {
        (Some(d), Some(s)) => Some((s, d.teacher.checksum())),
        _ => None,
    };
    let checkpoint = RunCheckpoint {
        role,
        network: student,
        best,
        adapters,
        velocity: opt.velocity().to_vec(),
        state,
        normalization: norm,
        metrics,
        teacher_checksum: teacher_sum_start,
    };
    if let Some(dir) = opts.out_dir {
        write_artifacts(dir, &checkpoint)?;
    }
    Ok(RunOutput {
        checkpoint,
        steps,
        teacher_checksums,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";

fn write_artifacts(dir: &Path, ck: &RunCheckpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&ck.metrics))?;
    ck.save(dir.join(ck.role.file_name()))
}

fn non_finite(dir: Option<&Path>, state: &TrainState, epoch: usize, batch: usize, lr: f64, b: &LossBreakdown) -> Error {
    let mut dump = String::new();
    let _ = writeln!(dump, "non-finite loss");
    let _ = writeln!(dump, "epoch = {epoch}");
    let _ = writeln!(dump, "batch = {batch}");
    let _ = writeln!(dump, "global_step = {}", state.global_step);
    let _ = writeln!(dump, "lr = {lr}");
    let _ = writeln!(dump, "edt_weight = {}", b.edt_weight);
    let _ = writeln!(dump, "loss_total = {}", b.total);
    let _ = writeln!(dump, "loss_cd = {}", b.cd);
    let _ = writeln!(dump, "loss_gkd = {}", b.gkd);
    let _ = writeln!(dump, "loss_ce = {}", b.ce);
    if let Some(dir) = dir {
        let _ = fs::create_dir_all(dir);
        let _ = fs::write(dir.join(DIAGNOSTIC_FILE), &dump);
    }
    Error::NonFiniteLoss(dump.lines().skip(1).collect::<Vec<_>>().join(", "))
}
