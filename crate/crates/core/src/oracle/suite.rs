//! Engine-versus-oracle comparisons: gradient checks against central
//! differences of the `f64` oracles, and value checks on random small cases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::losses::{cd_loss, ce_loss, channel_weights, gkd_loss, kd_loss, DistillConfig};
use crate::model::{ChannelAdapter, Network, NetworkSpec};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{objective, TeacherOutputs};
use crate::Result;

/// Relative tolerance for gradient checks.
pub const GRAD_TOL: f64 = 1e-3;
/// Value tolerance for plain reductions (GAP, CD).
pub const REDUCTION_TOL: f64 = 1e-6;
/// Value tolerance for conv, matmul and the softmax-based losses.
pub const KERNEL_TOL: f64 = 1e-5;

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub grad_cases: usize,
    pub value_cases: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            grad_cases: 20,
            value_cases: 50,
        }
    }
}

/// Summary by case family (`grad/conv2d`, `value/kd`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct FamilySummary {
    pub family: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub tolerance: f64,
}

pub fn summarize(reports: &[OracleReport]) -> Vec<FamilySummary> {
    let mut out: Vec<FamilySummary> = Vec::new();
    for r in reports {
        let fam = r.case_id.rsplit_once('/').map_or(r.case_id.as_str(), |(f, _)| f).to_string();
        let s = match out.iter_mut().find(|s| s.family == fam) {
            Some(s) => s,
            None => {
                out.push(FamilySummary {
                    family: fam,
                    cases: 0,
                    failures: 0,
                    worst_rel: 0.0,
                    tolerance: r.tolerance,
                });
                out.last_mut().unwrap()
            }
        };
        s.cases += 1;
        s.failures += usize::from(!r.pass);
        s.worst_rel = s.worst_rel.max(r.max_rel_diff);
    }
    out
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OracleReport>> {
    let mut v = gradient_checks(cfg.seed, cfg.grad_cases)?;
    v.extend(value_checks(seed::derive(cfg.seed, 1), cfg.value_cases)?);
    Ok(v)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

/// One input of a gradient case.
struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Input {
    fn new(shape: &[usize], data: Vec<f32>) -> Self {
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Self {
        Self::new(shape, normal_vec(rng, numel(shape), scale))
    }
}

/// Differentiates `engine` on a tape and `oracle` by central differences
/// over the concatenation of all inputs.
fn grad_case(
    id: String,
    inputs: &[Input],
    engine: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    oracle: impl Fn(&[&[f64]]) -> f64,
) -> Result<OracleReport> {
    let tape = Tape::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|i| Tensor::new(i.shape.clone(), i.data.clone()).map(Tensor::with_requires_grad))
        .collect::<Result<_>>()?;
    let leaves: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let loss = engine(&tape, &leaves)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (l, t) in leaves.iter().zip(&tensors) {
        match tape.grad(*l) {
            Some(g) => analytic.extend(f64s(g.data())),
            None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    let flat: Vec<f64> = inputs.iter().flat_map(|i| f64s(&i.data)).collect();
    let sizes: Vec<usize> = inputs.iter().map(|i| i.data.len()).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut parts = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &s in &sizes {
                parts.push(&x[off..off + s]);
                off += s;
            }
            oracle(&parts)
        },
        &flat,
        FD_STEP,
    );
    Ok(OracleReport::compare_grad(id, &analytic, &numeric, GRAD_TOL))
}

/// Contracts a tensor output with fixed random weights to get a scalar.
fn project<'t>(tape: &'t Tape, v: Var<'t>, r: &[f32]) -> Result<Var<'t>> {
    let c = tape.constant(Tensor::new(v.shape(), r.to_vec())?);
    Ok(v.mul(c)?.sum())
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(x, y)| x * *y as f64).sum()
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn argmax64(row: &[f64]) -> usize {
    let mut b = 0;
    for j in 1..row.len() {
        if row[j] > row[b] {
            b = j;
        }
    }
    b
}

/// Labels equal to the teacher argmax on roughly half of the rows.
fn mixed_labels(rng: &mut ChaCha8Rng, teacher: &[f32], n: usize, k: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = f64s(&teacher[i * k..(i + 1) * k]);
            let top = argmax64(&row);
            if i == 0 || rng.random::<bool>() {
                top
            } else {
                (top + rng.random_range(1..k)) % k
            }
        })
        .collect()
}

pub fn gradient_checks(seed: u64, cases: usize) -> Result<Vec<OracleReport>> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    for i in 0..cases {
        let rng = &mut rng;
        let shape = [rng.random_range(1..4), rng.random_range(2..6)];
        let n = numel(&shape);

        let (a, b) = (Input::normal(rng, &shape, 1.0), Input::normal(rng, &shape, 1.0));
        let r = normal_vec(rng, n, 1.0);
        out.push(grad_case(
            format!("grad/add/{i}"),
            &[a, b],
            |t, v| project(t, v[0].add(v[1])?, &r),
            |x| (0..n).map(|j| (x[0][j] + x[1][j]) * r[j] as f64).sum(),
        )?);

        let (a, b) = (Input::normal(rng, &shape, 1.0), Input::normal(rng, &shape, 1.0));
        out.push(grad_case(
            format!("grad/sub/{i}"),
            &[a, b],
            |t, v| project(t, v[0].sub(v[1])?, &r),
            |x| (0..n).map(|j| (x[0][j] - x[1][j]) * r[j] as f64).sum(),
        )?);

        let (a, b) = (Input::normal(rng, &shape, 1.0), Input::normal(rng, &shape, 1.0));
        out.push(grad_case(
            format!("grad/mul/{i}"),
            &[a, b],
            |t, v| project(t, v[0].mul(v[1])?, &r),
            |x| (0..n).map(|j| x[0][j] * x[1][j] * r[j] as f64).sum(),
        )?);

        let (a, s) = (Input::normal(rng, &shape, 1.0), Input::normal(rng, &[], 1.0));
        out.push(grad_case(
            format!("grad/mul_scalar/{i}"),
            &[a, s],
            |t, v| project(t, v[0].mul(v[1])?, &r),
            |x| (0..n).map(|j| x[0][j] * x[1][0] * r[j] as f64).sum(),
        )?);

        let c: f32 = rng.random_range(-2.0..2.0);
        let a = Input::normal(rng, &shape, 1.0);
        out.push(grad_case(
            format!("grad/scale/{i}"),
            &[a],
            |t, v| project(t, v[0].scale(c), &r),
            |x| (0..n).map(|j| c as f64 * x[0][j] * r[j] as f64).sum(),
        )?);

        let a = Input::new(&shape, away_from_zero(rng, n));
        out.push(grad_case(
            format!("grad/relu/{i}"),
            &[a],
            |t, v| project(t, v[0].relu(), &r),
            |x| (0..n).map(|j| x[0][j].max(0.0) * r[j] as f64).sum(),
        )?);

        let a = Input::new(&shape, (0..n).map(|_| rng.random_range(0.3f32..3.0)).collect());
        out.push(grad_case(
            format!("grad/log/{i}"),
            &[a],
            |t, v| project(t, v[0].log(), &r),
            |x| (0..n).map(|j| x[0][j].ln() * r[j] as f64).sum(),
        )?);

        let a = Input::normal(rng, &shape, 1.0);
        out.push(grad_case(
            format!("grad/square/{i}"),
            &[a],
            |t, v| project(t, v[0].square(), &r),
            |x| (0..n).map(|j| x[0][j] * x[0][j] * r[j] as f64).sum(),
        )?);

        let a = Input::normal(rng, &shape, 1.0);
        out.push(grad_case(
            format!("grad/sum/{i}"),
            &[a],
            |_, v| Ok(v[0].sum()),
            |x| x[0].iter().sum(),
        )?);

        let a = Input::normal(rng, &shape, 1.0);
        out.push(grad_case(
            format!("grad/mean/{i}"),
            &[a],
            |_, v| Ok(v[0].mean()),
            |x| x[0].iter().sum::<f64>() / n as f64,
        )?);

        let (rows, cols) = (shape[0], shape[1]);
        let rr = normal_vec(rng, rows, 1.0);
        let a = Input::normal(rng, &shape, 1.0);
        out.push(grad_case(
            format!("grad/sum_rows/{i}"),
            &[a],
            |t, v| project(t, v[0].sum_rows()?, &rr),
            |x| (0..rows).map(|p| (0..cols).map(|q| x[0][p * cols + q]).sum::<f64>() * rr[p] as f64).sum(),
        )?);

        let (m, k, nn) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
        let rm = normal_vec(rng, m * nn, 1.0);
        let (a, b) = (Input::normal(rng, &[m, k], 1.0), Input::normal(rng, &[k, nn], 1.0));
        out.push(grad_case(
            format!("grad/matmul/{i}"),
            &[a, b],
            |t, v| project(t, v[0].matmul(v[1])?, &rm),
            |x| dot(&oracle_matmul(x[0], x[1], m, k, nn), &rm),
        )?);

        let (a, b) = (Input::normal(rng, &shape, 1.0), Input::normal(rng, &[cols], 1.0));
        out.push(grad_case(
            format!("grad/add_bias/{i}"),
            &[a, b],
            |t, v| project(t, v[0].add_bias(v[1])?, &r),
            |x| (0..rows).map(|p| (0..cols).map(|q| (x[0][p * cols + q] + x[1][q]) * r[p * cols + q] as f64).sum::<f64>()).sum(),
        )?);

        let xs = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7)];
        let kk = if rng.random::<bool>() { 3 } else { 1 };
        let ks = [rng.random_range(1..4), xs[1], kk, kk];
        let stride = rng.random_range(1..3);
        let pad = if kk == 3 { rng.random_range(0..2) } else { 0 };
        let (_, os) = oracle_conv2d(&vec![0.0; numel(&xs)], xs, &vec![0.0; numel(&ks)], ks, stride, pad);
        let rc = normal_vec(rng, numel(&os), 1.0);
        let (a, b) = (Input::normal(rng, &xs, 1.0), Input::normal(rng, &ks, 0.5));
        out.push(grad_case(
            format!("grad/conv2d/{i}"),
            &[a, b],
            |t, v| project(t, v[0].conv2d(v[1], stride, pad)?, &rc),
            |x| dot(&oracle_conv2d(x[0], xs, x[1], ks, stride, pad).0, &rc),
        )?);

        let gs = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let rg = normal_vec(rng, gs[0] * gs[1], 1.0);
        let a = Input::normal(rng, &gs, 1.0);
        out.push(grad_case(
            format!("grad/global_avg_pool/{i}"),
            &[a],
            |t, v| project(t, v[0].global_avg_pool()?, &rg),
            |x| dot(&oracle_channel_weights(x[0], gs[0], gs[1], gs[2], gs[3]), &rg),
        )?);

        let temp = [1.0f32, 2.0, 4.0][i % 3];
        let (sn, sk) = (rng.random_range(1..4), rng.random_range(2..7));
        let rs = normal_vec(rng, sn * sk, 1.0);
        let a = Input::normal(rng, &[sn, sk], 2.0);
        out.push(grad_case(
            format!("grad/softmax/{i}"),
            &[a],
            |t, v| project(t, v[0].softened_softmax(temp)?, &rs),
            |x| dot(&oracle_softmax(x[0], sn, sk, temp as f64), &rs),
        )?);

        // losses
        let ft = Input::normal(rng, &gs, 1.0);
        let fs = Input::normal(rng, &gs, 1.0);
        let teacher_feat = f64s(&ft.data);
        let tt = Tensor::new(gs.to_vec(), ft.data.clone())?;
        out.push(grad_case(
            format!("grad/cd/{i}"),
            &[fs],
            |t, v| cd_loss(&channel_weights(v[0])?, &channel_weights(t.constant(tt.clone()))?),
            |x| {
                let ws = oracle_channel_weights(x[0], gs[0], gs[1], gs[2], gs[3]);
                let wt = oracle_channel_weights(&teacher_feat, gs[0], gs[1], gs[2], gs[3]);
                oracle_cd(&ws, &wt, gs[0], gs[1])
            },
        )?);

        let (ln, lk) = (rng.random_range(1..6), rng.random_range(2..8));
        let t_logits = normal_vec(rng, ln * lk, 3.0);
        let tl = Tensor::new([ln, lk], t_logits.clone())?;
        let t64 = f64s(&t_logits);
        let s = Input::normal(rng, &[ln, lk], 3.0);
        out.push(grad_case(
            format!("grad/kd/{i}"),
            &[s],
            |t, v| kd_loss(v[0], t.constant(tl.clone()), temp),
            |x| oracle_kd(x[0], &t64, ln, lk, temp as f64),
        )?);

        let labels = mixed_labels(rng, &t_logits, ln, lk);
        let s = Input::normal(rng, &[ln, lk], 3.0);
        out.push(grad_case(
            format!("grad/gkd/{i}"),
            &[s],
            |t, v| Ok(gkd_loss(v[0], t.constant(tl.clone()), &labels, temp)?.0),
            |x| oracle_gkd(x[0], &t64, &labels, ln, lk, temp as f64),
        )?);

        let labels = random_labels(rng, ln, lk);
        let s = Input::normal(rng, &[ln, lk], 3.0);
        out.push(grad_case(
            format!("grad/ce/{i}"),
            &[s],
            |_, v| ce_loss(v[0], &labels),
            |x| oracle_ce(x[0], &labels, ln, lk),
        )?);

        out.push(composite_case(i, rng)?);
    }
    Ok(out)
}

fn oracle_params(net: &Network) -> Vec<OracleParam> {
    net.params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), f64s(p.tensor.data())))
        .collect()
}

/// Full objective on a 2-sample batch: student forward with taps, channel
/// adapters, per-tap CD, GKD and CE, weighted by a random EDT weight.
/// Gradient with respect to every student parameter and adapter kernel.
fn composite_case(i: usize, rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let student_spec = NetworkSpec::family(&[2, 3, 4], 1, 3, 3);
    let teacher_spec = NetworkSpec::family(&[3, 3, 6], 1, 3, 3);
    let student = Network::build(&student_spec, rng.random())?;
    let teacher = Network::build(&teacher_spec, rng.random())?.freeze();
    let adapters = ChannelAdapter::for_pair(&student_spec, &teacher_spec, rng.random())?;
    let xs = [2usize, 3, 8, 8];
    let x = Tensor::new(xs.to_vec(), normal_vec(rng, numel(&xs), 1.0))?;
    let tout = TeacherOutputs::compute(&teacher, &x)?;
    let k = 3;
    let labels = mixed_labels(rng, tout.logits.data(), 2, k);
    let w: f32 = rng.random_range(0.1..2.0);
    let cfg = DistillConfig {
        temperature: [1.0, 2.0, 4.0][i % 3],
        ..DistillConfig::default()
    };

    let tape = Tape::new();
    let obj = objective(&tape, &student, tape.constant(x.clone()), &labels, Some((&tout, &adapters, &cfg)), w)?;
    tape.backward(obj.total)?;
    let mut analytic = Vec::new();
    for (leaf, p) in obj.params.iter().zip(student.params()) {
        match tape.grad(*leaf) {
            Some(g) => analytic.extend(f64s(g.data())),
            None => analytic.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
        }
    }
    for v in obj.adapter_params.iter().flatten() {
        analytic.extend(f64s(tape.grad(*v).expect("adapter kernel has a gradient").data()));
    }

    let base = oracle_params(&student);
    let kernels: Vec<(usize, Vec<usize>)> = adapters
        .iter()
        .enumerate()
        .filter_map(|(j, a)| a.kernel().map(|k| (j, k.shape().to_vec())))
        .collect();
    let mut flat: Vec<f64> = base.iter().flat_map(|p| p.2.clone()).collect();
    for a in &adapters {
        if let Some(k) = a.kernel() {
            flat.extend(f64s(k.data()));
        }
    }
    let x64 = f64s(x.data());
    let t_logits = f64s(tout.logits.data());
    let t_taps: Vec<(Vec<f64>, Vec<usize>)> = tout.taps.iter().map(|t| (f64s(t.data()), t.shape().to_vec())).collect();
    let temp = cfg.temperature as f64;
    let f = |v: &[f64]| -> f64 {
        let mut off = 0;
        let params: Vec<OracleParam> = base
            .iter()
            .map(|(n, s, d)| {
                let p = (n.clone(), s.clone(), v[off..off + d.len()].to_vec());
                off += d.len();
                p
            })
            .collect();
        let fwd = oracle_forward(&student_spec, &params, &x64, xs);
        let mut cd_terms = Vec::new();
        for (j, ((s_tap, ss), (t_tap, ts))) in fwd.taps.iter().zip(&t_taps).enumerate() {
            let adapted = match kernels.iter().find(|(kj, _)| *kj == j) {
                Some((_, kshape)) => {
                    let len = numel(kshape);
                    let kern = &v[off..off + len];
                    off += len;
                    oracle_conv2d(s_tap, *ss, kern, [kshape[0], kshape[1], 1, 1], 1, 0).0
                }
                None => s_tap.clone(),
            };
            let ws = oracle_channel_weights(&adapted, ts[0], ts[1], ts[2], ts[3]);
            let wt = oracle_channel_weights(t_tap, ts[0], ts[1], ts[2], ts[3]);
            cd_terms.push(oracle_cd(&ws, &wt, ts[0], ts[1]));
        }
        let gkd = oracle_gkd(&fwd.logits, &t_logits, &labels, 2, k, temp);
        let ce = oracle_ce(&fwd.logits, &labels, 2, k);
        oracle_total(&cd_terms, gkd, ce, w as f64)
    };
    let numeric = finite_diff_grad(f, &flat, FD_STEP);
    Ok(OracleReport::compare_grad(format!("grad/total/{i}"), &analytic, &numeric, GRAD_TOL))
}

fn value_of(v: Var<'_>) -> Vec<f64> {
    f64s(v.value().data())
}

pub fn value_checks(seed: u64, cases: usize) -> Result<Vec<OracleReport>> {
    let mut rng = seed::rng(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    for i in 0..cases {
        let tape = Tape::new();
        let gs = [rng.random_range(1..5), rng.random_range(1..17), rng.random_range(1..9), rng.random_range(1..9)];
        let a = normal_vec(rng, numel(&gs), 1.0);
        let b = normal_vec(rng, numel(&gs), 1.0);
        let va = tape.constant(Tensor::new(gs.to_vec(), a.clone())?);
        let vb = tape.constant(Tensor::new(gs.to_vec(), b.clone())?);
        let (wa, wb) = (channel_weights(va)?, channel_weights(vb)?);
        let oa = oracle_channel_weights(&f64s(&a), gs[0], gs[1], gs[2], gs[3]);
        let ob = oracle_channel_weights(&f64s(&b), gs[0], gs[1], gs[2], gs[3]);
        out.push(OracleReport::compare(format!("value/channel_weights/{i}"), &value_of(wa.values), &oa, REDUCTION_TOL));
        out.push(OracleReport::compare(
            format!("value/cd/{i}"),
            &value_of(cd_loss(&wa, &wb)?),
            &[oracle_cd(&oa, &ob, gs[0], gs[1])],
            REDUCTION_TOL,
        ));

        let (n, k) = (rng.random_range(1..17), rng.random_range(2..17));
        let temp = [1.0f32, 2.0, 4.0, 8.0][i % 4];
        let s = normal_vec(rng, n * k, 3.0);
        let t = normal_vec(rng, n * k, 3.0);
        let vs = tape.constant(Tensor::new([n, k], s.clone())?);
        let vt = tape.constant(Tensor::new([n, k], t.clone())?);
        let (s64, t64) = (f64s(&s), f64s(&t));
        out.push(OracleReport::compare(
            format!("value/kd/{i}"),
            &value_of(kd_loss(vs, vt, temp)?),
            &[oracle_kd(&s64, &t64, n, k, temp as f64)],
            KERNEL_TOL,
        ));
        let labels = mixed_labels(rng, &t, n, k);
        out.push(OracleReport::compare(
            format!("value/gkd/{i}"),
            &value_of(gkd_loss(vs, vt, &labels, temp)?.0),
            &[oracle_gkd(&s64, &t64, &labels, n, k, temp as f64)],
            KERNEL_TOL,
        ));
        let labels = random_labels(rng, n, k);
        out.push(OracleReport::compare(
            format!("value/ce/{i}"),
            &value_of(ce_loss(vs, &labels)?),
            &[oracle_ce(&s64, &labels, n, k)],
            KERNEL_TOL,
        ));

        let kk = [1usize, 3][rng.random_range(0..2)];
        let xs = [rng.random_range(1..4), rng.random_range(1..17), rng.random_range(kk..17), rng.random_range(kk..17)];
        let ks = [rng.random_range(1..17), xs[1], kk, kk];
        let stride = rng.random_range(1..3);
        let pad = if kk == 3 { rng.random_range(0..2) } else { 0 };
        let x = normal_vec(rng, numel(&xs), 1.0);
        let kern = normal_vec(rng, numel(&ks), 0.3);
        let y = tape
            .constant(Tensor::new(xs.to_vec(), x.clone())?)
            .conv2d(tape.constant(Tensor::new(ks.to_vec(), kern.clone())?), stride, pad)?;
        let (oy, os) = oracle_conv2d(&f64s(&x), xs, &f64s(&kern), ks, stride, pad);
        let shape_ok = y.shape() == os.to_vec();
        let mut r = OracleReport::compare(format!("value/conv2d/{i}"), &value_of(y), &oy, KERNEL_TOL);
        r.pass &= shape_ok;
        out.push(r);

        let (m, kd, nn) = (rng.random_range(1..17), rng.random_range(1..17), rng.random_range(1..17));
        let a = normal_vec(rng, m * kd, 1.0);
        let b = normal_vec(rng, kd * nn, 1.0);
        let y = tape
            .constant(Tensor::new([m, kd], a.clone())?)
            .matmul(tape.constant(Tensor::new([kd, nn], b.clone())?))?;
        out.push(OracleReport::compare(
            format!("value/matmul/{i}"),
            &value_of(y),
            &oracle_matmul(&f64s(&a), &f64s(&b), m, kd, nn),
            KERNEL_TOL,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let reports = run_suite(&SuiteConfig {
            seed: 11,
            grad_cases: 2,
            value_cases: 3,
        })
        .unwrap();
        let bad: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
        assert!(bad.is_empty(), "{bad:#?}");
        let fams = summarize(&reports);
        assert!(fams.iter().any(|f| f.family == "grad/total"));
        assert!(fams.iter().any(|f| f.family == "value/conv2d"));
    }
}
