//! Frame-level training criteria. Every loss is averaged over frames and
//! returns its gradient with respect to the output logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix};

/// Supervision for one frame: a hard label, a soft distribution, or both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetFrame<'a> {
    pub hard: Option<usize>,
    pub soft: Option<&'a [f64]>,
}

impl<'a> TargetFrame<'a> {
    fn validate(&self, classes: usize, frame: usize) -> Result<()> {
        if self.hard.is_none() && self.soft.is_none() {
            return Err(Error::contract(format!("frame {frame} has neither target")));
        }
        if let Some(h) = self.hard {
            if h >= classes {
                return Err(Error::contract(format!(
                    "frame {frame} label {h} out of range for {classes} classes"
                )));
            }
        }
        if let Some(s) = self.soft {
            check_distribution(s, classes, frame)?;
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64], classes: usize, frame: usize) -> Result<()> {
    if row.len() != classes {
        return Err(Error::contract(format!(
            "frame {frame} soft target has {} entries, expected {classes}",
            row.len()
        )));
    }
    if row.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract(format!("frame {frame} soft target has a negative entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "frame {frame} soft target sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Weights of the hard- and soft-target terms plus the distillation
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_hard: f64,
    pub w_soft: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    /// Equal hard/soft weighting, neutral temperature.
    fn default() -> Self {
        LossConfig {
            w_hard: 0.5,
            w_soft: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub const HARD_ONLY: LossConfig = LossConfig {
        w_hard: 1.0,
        w_soft: 0.0,
        temperature: 1.0,
    };

    pub fn soft_only(temperature: f64) -> Self {
        LossConfig {
            w_hard: 0.0,
            w_soft: 1.0,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("loss.w_hard", self.w_hard), ("loss.w_soft", self.w_soft)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(name, format!("weight {w} outside [0, 1]")));
            }
        }
        if (self.w_hard + self.w_soft - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "loss.w_hard + loss.w_soft",
                format!("weights sum to {}, must equal 1", self.w_hard + self.w_soft),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        Ok(())
    }
}

#[inline]
fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Cross-entropy against hard labels: `mean_t -ln p_t(label_t)`, gradient
/// `(p - onehot) / T` at the logits.
pub fn ce_loss(posteriors: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let t_len = posteriors.rows();
    if t_len == 0 {
        return Err(Error::contract("cross-entropy of an empty sequence"));
    }
    if labels.len() != t_len {
        return Err(Error::contract(format!(
            "{} labels for {t_len} frames",
            labels.len()
        )));
    }
    let classes = posteriors.cols();
    let scale = 1.0 / t_len as f64;
    let mut loss = 0.0;
    let mut grad = posteriors.clone();
    for (t, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::contract(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        loss -= safe_ln(posteriors.get(t, label));
        let row = grad.row_mut(t);
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss * scale, grad))
}

/// Re-applies softmax at temperature `tau` to a posterior row:
/// `softmax(log p / tau)`, equal to `softmax(z / tau)` for the logits `z`.
fn tempered(row: &[f64], tau: f64, out: &mut [f64]) {
    if tau == 1.0 {
        out.copy_from_slice(row);
        return;
    }
    for (o, &p) in out.iter_mut().zip(row) {
        *o = safe_ln(p) / tau;
    }
    softmax_in_place(out);
}

/// Soft-target cross-entropy of the student against the teacher, both
/// tempered by `temperature`: `mean_t -sum_c q_tc ln p_tc`. The minimum is
/// the mean teacher entropy, reached when the distributions agree. The
/// returned gradient is with respect to the student's raw logits,
/// `(p - q) / (temperature * T)`.
pub fn distill_loss(
    student: &Matrix,
    teacher: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        return Err(Error::contract(format!(
            "student is {}x{}, teacher is {}x{}",
            student.rows(),
            student.cols(),
            teacher.rows(),
            teacher.cols()
        )));
    }
    if student.rows() == 0 {
        return Err(Error::contract("distillation loss of an empty sequence"));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let t_len = student.rows();
    let classes = student.cols();
    let scale = 1.0 / t_len as f64;
    let mut grad = Matrix::zeros(t_len, classes);
    let mut p = vec![0.0; classes];
    let mut q = vec![0.0; classes];
    let mut loss = 0.0;
    for t in 0..t_len {
        tempered(student.row(t), temperature, &mut p);
        tempered(teacher.row(t), temperature, &mut q);
        let row = grad.row_mut(t);
        for c in 0..classes {
            if q[c] > 0.0 {
                loss -= q[c] * safe_ln(p[c]);
            }
            row[c] = (p[c] - q[c]) * scale / temperature;
        }
    }
    Ok((loss * scale, grad))
}

/// `w_hard * ce_loss + w_soft * distill_loss`, gradient combined the same
/// way. A term with zero weight is not evaluated, so its targets may be
/// absent.
pub fn combined_loss(
    posteriors: &Matrix,
    targets: &[TargetFrame<'_>],
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    if targets.len() != posteriors.rows() {
        return Err(Error::contract(format!(
            "{} targets for {} frames",
            targets.len(),
            posteriors.rows()
        )));
    }
    let classes = posteriors.cols();
    for (t, target) in targets.iter().enumerate() {
        target.validate(classes, t)?;
    }

    let mut loss = 0.0;
    let mut grad = Matrix::zeros(posteriors.rows(), classes);
    if cfg.w_hard > 0.0 {
        let labels = targets
            .iter()
            .enumerate()
            .map(|(t, f)| {
                f.hard.ok_or_else(|| {
                    Error::contract(format!("frame {t} needs a hard target (w_hard > 0)"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (l, g) = ce_loss(posteriors, &labels)?;
        loss += cfg.w_hard * l;
        add_scaled(&mut grad, &g, cfg.w_hard);
    }
    if cfg.w_soft > 0.0 {
        let mut soft = Matrix::zeros(posteriors.rows(), classes);
        for (t, f) in targets.iter().enumerate() {
            let s = f.soft.ok_or_else(|| {
                Error::contract(format!("frame {t} needs a soft target (w_soft > 0)"))
            })?;
            soft.row_mut(t).copy_from_slice(s);
        }
        let (l, g) = distill_loss(posteriors, &soft, cfg.temperature)?;
        loss += cfg.w_soft * l;
        add_scaled(&mut grad, &g, cfg.w_soft);
    }
    Ok((loss, grad))
}

fn add_scaled(acc: &mut Matrix, g: &Matrix, w: f64) {
    acc.as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .for_each(|(a, b)| *a += w * b);
}
