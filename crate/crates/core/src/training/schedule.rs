use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// Learning-rate schedule, stepped once per epoch. Both cosine forms anneal
/// towards zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` once the monitored validation loss has
    /// not improved for more than `patience` epochs.
    Plateau { patience: usize, factor: f64 },
    Cosine { t_max: usize },
    /// Cosine cycles of length `t0`, `t0·t_mult`, `t0·t_mult²`, ...
    WarmRestarts { t0: usize, t_mult: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant => true,
            Schedule::Plateau { factor, .. } => factor > 0.0 && factor < 1.0,
            Schedule::Cosine { t_max } => t_max >= 1,
            Schedule::WarmRestarts { t0, t_mult } => t0 >= 1 && t_mult >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self}")))
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse schedule {s:?}"));
        let s = s.trim();
        if s == "constant" {
            return Ok(Schedule::Constant);
        }
        let (name, args) = s.strip_suffix(')').and_then(|s| s.split_once('(')).ok_or_else(bad)?;
        let args: Vec<&str> = args.split(',').map(str::trim).collect();
        let int = |a: &str| a.parse::<usize>().map_err(|_| bad());
        let schedule = match (name.trim(), args.as_slice()) {
            ("plateau", [p, f]) => Schedule::Plateau {
                patience: int(p)?,
                factor: f.parse().map_err(|_| bad())?,
            },
            ("cosine", [t]) => Schedule::Cosine { t_max: int(t)? },
            ("warm_restarts", [t0, m]) => Schedule::WarmRestarts {
                t0: int(t0)?,
                t_mult: int(m)?,
            },
            _ => return Err(bad()),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => write!(f, "constant"),
            Schedule::Plateau { patience, factor } => write!(f, "plateau({patience}, {factor})"),
            Schedule::Cosine { t_max } => write!(f, "cosine({t_max})"),
            Schedule::WarmRestarts { t0, t_mult } => write!(f, "warm_restarts({t0}, {t_mult})"),
        }
    }
}

fn cosine(base: f64, t: f64, period: f64) -> f64 {
    base * (1.0 + (PI * t / period).cos()) / 2.0
}

/// Position inside the warm-restart cycle containing `epoch`:
/// `(epochs since the last restart, cycle length)`.
pub fn restart_cycle(epoch: usize, t0: usize, t_mult: usize) -> (usize, usize) {
    let (mut t, mut len) = (epoch, t0);
    while t >= len {
        t -= len;
        len *= t_mult;
    }
    (t, len)
}

/// Learning rate for `epoch` (0-based). `plateau_reductions` counts how
/// many times a plateau schedule has already cut the rate and is ignored
/// by the other schedules.
pub fn lr_at(schedule: &Schedule, base_lr: f64, epoch: usize, plateau_reductions: usize) -> Result<f64> {
    schedule.validate()?;
    if base_lr <= 0.0 || !base_lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
    }
    Ok(match *schedule {
        Schedule::Constant => base_lr,
        Schedule::Plateau { factor, .. } => base_lr * factor.powi(plateau_reductions as i32),
        Schedule::Cosine { t_max } => cosine(base_lr, epoch as f64, t_max as f64),
        Schedule::WarmRestarts { t0, t_mult } => {
            let (t, len) = restart_cycle(epoch, t0, t_mult);
            cosine(base_lr, t as f64, len as f64)
        }
    })
}

/// Per-run schedule state. Plateau tracking follows the common
/// "min" mode with a relative improvement threshold of 1e-4.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub schedule: Schedule,
    pub base_lr: f64,
    best: f64,
    bad_epochs: usize,
    reductions: usize,
}

const PLATEAU_THRESHOLD: f64 = 1e-4;

impl Scheduler {
    pub fn new(schedule: Schedule, base_lr: f64) -> Result<Self> {
        lr_at(&schedule, base_lr, 0, 0)?;
        Ok(Scheduler {
            schedule,
            base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(&self.schedule, self.base_lr, epoch, self.reductions).expect("validated in Scheduler::new")
    }

    /// Feeds the validation loss at the end of an epoch.
    pub fn observe(&mut self, val_loss: f64) {
        let Schedule::Plateau { patience, .. } = self.schedule else {
            return;
        };
        if val_loss < self.best * (1.0 - PLATEAU_THRESHOLD) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > patience {
            self.reductions += 1;
            self.bad_epochs = 0;
        }
    }
}
