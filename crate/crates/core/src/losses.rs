//! Distillation objectives: per-channel GAP weights, the channel distillation
//! (CD) penalty, temperature KD, guided KD restricted to teacher-correct
//! samples, cross entropy, and the combined objective
//! `total = edt_weight · CD + GKD + CE`.
//!
//! Every teacher-side input is detached before use; no gradient ever
//! reaches the teacher.

use crate::optim::EdtParams;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Distillation hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f32,
    /// Initial CD weight.
    pub alpha: f64,
    /// Per-`n_decay`-epochs decay factor of the CD weight.
    pub lambda: f64,
    pub n_decay: usize,
    pub gkd_enabled: bool,
    /// Use plain KD over every sample instead of the teacher-correct subset.
    pub plain_kd_fallback: bool,
    /// Multiply the KD/GKD term by T².
    pub kd_t_squared: bool,
    /// Floor the EDT exponent to whole `n_decay` periods.
    pub edt_stepwise: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha: 1.0,
            lambda: 0.5,
            n_decay: 30,
            gkd_enabled: true,
            plain_kd_fallback: false,
            kd_t_squared: false,
            edt_stepwise: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.edt().validate()
    }

    pub fn edt(&self) -> EdtParams {
        EdtParams {
            alpha: self.alpha,
            lambda: self.lambda,
            n_decay: self.n_decay,
            stepwise: self.edt_stepwise,
        }
    }
}

/// Per-sample, per-channel spatial means of a feature map, `[n, c]`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelWeights<'t> {
    pub values: Var<'t>,
}

pub fn channel_weights<'t>(feature: Var<'t>) -> Result<ChannelWeights<'t>> {
    let s = feature.shape();
    if s.len() != 4 {
        return Err(Error::shape("channel_weights", format!("expected [n,c,h,w], got {s:?}")));
    }
    Ok(ChannelWeights {
        values: feature.global_avg_pool()?,
    })
}

/// `Σ_ij (ws_ij − wt_ij)² / (n·c)`, gradient to the student side only.
pub fn cd_loss<'t>(student: &ChannelWeights<'t>, teacher: &ChannelWeights<'t>) -> Result<Var<'t>> {
    let (ss, ts) = (student.values.shape(), teacher.values.shape());
    if ss != ts {
        return Err(Error::shape("cd_loss", format!("student weights {ss:?} vs teacher weights {ts:?}")));
    }
    Ok(student.values.sub(teacher.values.detach())?.square().mean())
}

fn check_logits(op: &'static str, s: &Var<'_>, t: &Var<'_>) -> Result<(usize, usize)> {
    let (ss, ts) = (s.shape(), t.shape());
    if ss.len() != 2 || ss != ts {
        return Err(Error::shape(op, format!("student logits {ss:?} vs teacher logits {ts:?}")));
    }
    Ok((ss[0], ss[1]))
}

/// `Σ_i mask_i · KL(p_t^i ‖ p_s^i) / Σ_i mask_i`, or an exact 0 when the mask
/// is empty. KD and GKD both go through here so that an all-ones mask gives
/// bit-identical results.
fn masked_kl<'t>(student: Var<'t>, teacher: Var<'t>, mask: &[f32], temperature: f32) -> Result<Var<'t>> {
    let tape = student.tape();
    let count: f32 = mask.iter().sum();
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pt = teacher.detach().softened_softmax(temperature)?;
    let ps = student.softened_softmax(temperature)?;
    let per_row = pt.mul(pt.log().sub(ps.log())?)?.sum_rows()?;
    let m = tape.constant(Tensor::new([mask.len()], mask.to_vec())?);
    Ok(per_row.mul(m)?.sum().scale(1.0 / count))
}

/// Batch mean of `KL(p_t ‖ p_s)` at temperature `T`.
pub fn kd_loss<'t>(student_logits: Var<'t>, teacher_logits: Var<'t>, temperature: f32) -> Result<Var<'t>> {
    let (n, _) = check_logits("kd_loss", &student_logits, &teacher_logits)?;
    masked_kl(student_logits, teacher_logits, &vec![1.0; n], temperature)
}

/// Row argmax with ties going to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok(())
}

/// KD restricted to the samples whose teacher argmax equals the label.
/// Returns the loss and the number of such samples; with none, the loss is 0.
pub fn gkd_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: Var<'t>,
    labels: &[usize],
    temperature: f32,
) -> Result<(Var<'t>, usize)> {
    let (n, k) = check_logits("gkd_loss", &student_logits, &teacher_logits)?;
    check_labels(labels, n, k)?;
    let pred = argmax_rows(&teacher_logits.value());
    let mask: Vec<f32> = pred.iter().zip(labels).map(|(p, l)| if p == l { 1.0 } else { 0.0 }).collect();
    let correct = mask.iter().filter(|&&m| m == 1.0).count();
    Ok((masked_kl(student_logits, teacher_logits, &mask, temperature)?, correct))
}

/// Batch mean of `−log softmax(logits)[label]` at temperature 1.
pub fn ce_loss<'t>(student_logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = student_logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("ce_loss", format!("expected [n,k], got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    check_labels(labels, n, k)?;
    let mut onehot = vec![0.0f32; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let tape = student_logits.tape();
    let oh = tape.constant(Tensor::new([n, k], onehot)?);
    let logp = student_logits.softened_softmax(1.0)?.log();
    Ok(logp.mul(oh)?.sum().scale(-1.0 / n as f32))
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cd: f32,
    pub gkd: f32,
    pub ce: f32,
    pub edt_weight: f32,
    pub total: f32,
    pub correct_teacher_count: usize,
}

impl LossBreakdown {
    /// Value-level composition: `cd` is the mean of the per-tap terms.
    pub fn compose(cd_terms: &[f32], gkd: f32, ce: f32, edt_weight: f32, correct_teacher_count: usize) -> Result<Self> {
        if !(edt_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("edt_weight must be non-negative, got {edt_weight}")));
        }
        if cd_terms.is_empty() && edt_weight > 0.0 {
            return Err(Error::InvalidArgument("CD is enabled but there are no CD terms".into()));
        }
        let cd = if cd_terms.is_empty() {
            0.0
        } else {
            cd_terms.iter().sum::<f32>() / cd_terms.len() as f32
        };
        Ok(Self {
            cd,
            gkd,
            ce,
            edt_weight,
            total: edt_weight * cd + gkd + ce,
            correct_teacher_count,
        })
    }

    /// `|total − (edt_weight·cd + gkd + ce)|`, evaluated in f64.
    pub fn identity_residual(&self) -> f64 {
        let rhs = self.edt_weight as f64 * self.cd as f64 + self.gkd as f64 + self.ce as f64;
        (self.total as f64 - rhs).abs()
    }
}

/// Builds `edt_weight · mean(cd_terms) + gkd + ce` on the tape.
pub fn total_loss<'t>(
    tape: &'t Tape,
    cd_terms: &[Var<'t>],
    gkd: Var<'t>,
    ce: Var<'t>,
    edt_weight: f32,
    correct_teacher_count: usize,
) -> Result<(Var<'t>, LossBreakdown)> {
    if !(edt_weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("edt_weight must be non-negative, got {edt_weight}")));
    }
    let cd = match cd_terms.split_first() {
        None if edt_weight > 0.0 => {
            return Err(Error::InvalidArgument("CD is enabled but there are no CD terms".into()));
        }
        None => tape.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = acc.add(*t)?;
            }
            acc.scale(1.0 / cd_terms.len() as f32)
        }
    };
    let total = cd.scale(edt_weight).add(gkd)?.add(ce)?;
    let breakdown = LossBreakdown {
        cd: cd.item(),
        gkd: gkd.item(),
        ce: ce.item(),
        edt_weight,
        total: total.item(),
        correct_teacher_count,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c<'t>(tape: &'t Tape, shape: &[usize], data: &[f32]) -> Var<'t> {
        tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn channel_weights_is_spatial_mean() {
        let tape = Tape::new();
        let w = channel_weights(c(&tape, &[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(w.values.value().data(), &[2.5]);
        let z = channel_weights(tape.constant(Tensor::zeros([2, 3, 4, 4]))).unwrap();
        assert!(z.values.value().data().iter().all(|&v| v == 0.0));
        assert!(channel_weights(c(&tape, &[2, 2], &[0.; 4])).is_err());
    }

    #[test]
    fn cd_examples() {
        let tape = Tape::new();
        let a = ChannelWeights { values: c(&tape, &[1, 2], &[1., 0.]) };
        let b = ChannelWeights { values: c(&tape, &[1, 2], &[0., 1.]) };
        assert_eq!(cd_loss(&a, &b).unwrap().item(), 1.0);
        assert_eq!(cd_loss(&a, &a).unwrap().item(), 0.0);
        let bad = ChannelWeights { values: c(&tape, &[1, 3], &[0., 1., 2.]) };
        assert!(cd_loss(&a, &bad).is_err());
    }

    #[test]
    fn cd_gradient_skips_teacher() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::new([1, 2], vec![1., 0.]).unwrap().with_requires_grad());
        let t = tape.leaf(&Tensor::new([1, 2], vec![0., 1.]).unwrap().with_requires_grad());
        let l = cd_loss(&ChannelWeights { values: s }, &ChannelWeights { values: t }).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[1.0, -1.0]);
        assert!(tape.grad(t).is_none());
    }

    #[test]
    fn kd_examples() {
        let tape = Tape::new();
        let s = c(&tape, &[2, 3], &[0.3, -1., 2., 0., 0., 0.]);
        assert_eq!(kd_loss(s, s, 4.0).unwrap().item(), 0.0);
        let st = c(&tape, &[1, 2], &[0., 0.]);
        let te = c(&tape, &[1, 2], &[100., -100.]);
        let v = kd_loss(st, te, 1.0).unwrap().item();
        assert!((v - std::f32::consts::LN_2).abs() < 1e-6, "{v}");
        assert!(kd_loss(st, te, 0.0).is_err());
    }

    #[test]
    fn gkd_degenerate_cases() {
        let tape = Tape::new();
        let s = c(&tape, &[2, 3], &[0.1, 0.2, 0.3, 1., -1., 0.5]);
        let t = c(&tape, &[2, 3], &[2., 0., 0., 0., 0., 3.]);
        let (l, n) = gkd_loss(s, t, &[1, 0], 2.0).unwrap();
        assert_eq!((l.item(), n), (0.0, 0));
        let (l, n) = gkd_loss(s, t, &[0, 2], 2.0).unwrap();
        assert_eq!(n, 2);
        assert_eq!(l.item(), kd_loss(s, t, 2.0).unwrap().item());
        assert!(matches!(gkd_loss(s, t, &[0, 3], 2.0), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn teacher_ties_break_low() {
        let t = Tensor::new([2, 3], vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn ce_examples() {
        let tape = Tape::new();
        let k = 7;
        let u = tape.constant(Tensor::zeros([3, k]));
        let v = ce_loss(u, &[0, 3, 6]).unwrap().item();
        assert!((v - (k as f32).ln()).abs() < 1e-6);
        let mut sharp = vec![0.0; 2 * k];
        sharp[2] = 50.0;
        sharp[k + 5] = 50.0;
        let s = c(&tape, &[2, k], &sharp);
        assert!(ce_loss(s, &[2, 5]).unwrap().item() <= 1e-6);
        assert!(ce_loss(s, &[2, 7]).is_err());
    }

    #[test]
    fn total_examples() {
        let b = LossBreakdown::compose(&[0.4, 0.6], 0.2, 1.0, 0.5, 3).unwrap();
        assert!((b.total - 1.45).abs() < 1e-6);
        let b = LossBreakdown::compose(&[0.0], 0.0, 0.8, 1.0, 0).unwrap();
        assert_eq!(b.total, b.ce);
        let b = LossBreakdown::compose(&[0.3], 0.2, 0.8, 0.0, 0).unwrap();
        assert_eq!(b.total, 0.2 + 0.8);
        assert!(LossBreakdown::compose(&[], 0.2, 0.8, 0.5, 0).is_err());

        let tape = Tape::new();
        let terms = [tape.constant(Tensor::scalar(0.4)), tape.constant(Tensor::scalar(0.6))];
        let (t, br) = total_loss(
            &tape,
            &terms,
            tape.constant(Tensor::scalar(0.2)),
            tape.constant(Tensor::scalar(1.0)),
            0.5,
            1,
        )
        .unwrap();
        assert!((t.item() - 1.45).abs() < 1e-6);
        assert!(br.identity_residual() < 1e-6);
    }
}
