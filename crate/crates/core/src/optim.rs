//! SGD with momentum and weight decay, step learning-rate decay, and the
//! early-decay-teacher (EDT) weight on the CD term.

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr0 = 0 is accepted: it freezes the run, which tests rely on.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// One classic-momentum update:
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], cfg: &SgdConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "params {} / grads {} / velocity {}",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    let (lr, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Optimizer over a fixed list of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    /// Every tensor must require grad; a frozen tensor in the set is an error.
    pub fn new(cfg: SgdConfig, params: &[&Tensor]) -> Result<Self> {
        cfg.validate()?;
        if let Some(i) = params.iter().position(|p| !p.requires_grad()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {i} is frozen and cannot be handed to the optimizer"
            )));
        }
        Ok(Self {
            cfg,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f32>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("sgd", "restored velocity does not match the parameter set"));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Updates each tensor from its gradient buffer (missing = zero) and
    /// clears the buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} tensors for {} velocity slots", params.len(), self.velocity.len()),
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
            sgd_step(p.data_mut(), &g, v, &self.cfg, lr)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("lr factor must be in (0, 1), got {}", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }
}

/// `lr0 · factor^(number of milestones ≤ epoch)`.
pub fn lr_at_epoch(schedule: &LrSchedule, lr0: f64, epoch: usize) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * schedule.factor.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdtParams {
    pub alpha: f64,
    pub lambda: f64,
    pub n_decay: usize,
    /// Use `floor(epoch / n_decay)` as the exponent.
    pub stepwise: bool,
}

impl EdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must be in (0, 1], got {}", self.lambda)));
        }
        if self.n_decay == 0 {
            return Err(Error::Config("n_decay must be positive".into()));
        }
        Ok(())
    }
}

/// `alpha · lambda^(epoch / n_decay)`, real-valued exponent unless stepwise.
pub fn edt_weight(p: &EdtParams, epoch: usize) -> f64 {
    let e = if p.stepwise {
        (epoch / p.n_decay) as f64
    } else {
        epoch as f64 / p.n_decay as f64
    };
    p.alpha * p.lambda.powf(e)
}
