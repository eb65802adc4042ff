//! Central-difference verification of analytic gradients.
//!
//! The numeric side re-evaluates the loss through a freshly built graph for
//! every perturbed coordinate, so it shares no code path with `backward`.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate, with both gradient readings.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} max_rel_err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}) {}",
                e.name,
                e.max_rel_err,
                e.worst_index,
                e.analytic,
                e.numeric,
                if e.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "gradcheck {} (step {:.1e}, tolerance {:.1e}, worst {:.3e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.step,
            self.tolerance,
            self.max_rel_err()
        )
    }
}

/// Relative error with an absolute floor so that near-zero gradients compare
/// absolutely instead of blowing up the quotient.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_loss(loss_fn: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    let loss = loss_fn()?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    let value = loss.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss during gradient check".into(),
        });
    }
    Ok(value)
}

/// Compares `backward` gradients of `loss_fn` against central finite
/// differences for every coordinate of every named parameter. `loss_fn` must
/// rebuild its graph from the given parameter tensors on each call, so that
/// perturbed data is picked up.
pub fn grad_check(
    loss_fn: impl Fn() -> Result<Tensor>,
    params: &[(String, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::invalid(
            "gradcheck step",
            format!("step must lie in [1e-7, 1e-3], got {step}"),
        ));
    }

    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    if !loss.data()[0].is_finite() {
        return Err(Error::NonFinite {
            context: "loss during gradient check".into(),
        });
    }
    loss.backward()?;

    let mut entries = Vec::with_capacity(params.len());
    for (name, param) in params {
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
        let base = param.data();
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: 0.0,
            pass: true,
        };
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + step;
            param.set_data(bumped.clone())?;
            let up = scalar_loss(&loss_fn)?;
            bumped[i] = base[i] - step;
            param.set_data(bumped)?;
            let down = scalar_loss(&loss_fn)?;
            param.set_data(base.clone())?;
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(analytic[i], numeric);
            if rel >= worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = analytic[i];
                worst.numeric = numeric;
            }
        }
        worst.pass = worst.max_rel_err < tolerance;
        entries.push(worst);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        entries,
    })
}
