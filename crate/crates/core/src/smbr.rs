//! State-level minimum Bayes risk (sMBR) on frame-layered lattices.
//!
//! A lattice offers, at every frame, a set of state hypotheses (arcs); a
//! path picks one arc per frame and consecutive layers are fully connected.
//! A path scores `sum_t kappa * log p(state_t | t) + lm_t`, and its accuracy
//! is the number of frames whose state matches the reference. The criterion
//! is the expected accuracy `F` under the normalized path distribution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::matrix::{log_sum_exp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeArc {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "lm")]
    pub lm_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLattice", into = "RawLattice")]
pub struct Lattice {
    frames: Vec<Vec<LatticeArc>>,
    reference: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLattice {
    frames: Vec<Vec<LatticeArc>>,
    #[serde(rename = "ref")]
    reference: Vec<usize>,
}

impl TryFrom<RawLattice> for Lattice {
    type Error = Error;

    fn try_from(raw: RawLattice) -> Result<Self> {
        Lattice::new(raw.frames, raw.reference)
    }
}

impl From<Lattice> for RawLattice {
    fn from(l: Lattice) -> Self {
        RawLattice {
            frames: l.frames,
            reference: l.reference,
        }
    }
}

impl Lattice {
    pub fn new(frames: Vec<Vec<LatticeArc>>, reference: Vec<usize>) -> Result<Self> {
        if reference.len() != frames.len() {
            return Err(Error::contract(format!(
                "reference has {} states for {} frames",
                reference.len(),
                frames.len()
            )));
        }
        if let Some(t) = frames.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!("lattice frame {t} has no arcs")));
        }
        if frames.iter().flatten().any(|a| !a.lm_score.is_finite()) {
            return Err(Error::Input("lattice lm score is not finite".into()));
        }
        Ok(Lattice { frames, reference })
    }

    /// Lattice holding only the reference path.
    pub fn single_path(reference: Vec<usize>) -> Self {
        let frames = reference
            .iter()
            .map(|&s| {
                vec![LatticeArc {
                    state: s,
                    lm_score: 0.0,
                }]
            })
            .collect();
        Lattice { frames, reference }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Vec<LatticeArc>] {
        &self.frames
    }

    pub fn reference(&self) -> &[usize] {
        &self.reference
    }

    fn check_against(&self, log_post: &Matrix) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::contract("empty lattice"));
        }
        if log_post.rows() != self.frames.len() {
            return Err(Error::contract(format!(
                "lattice has {} frames, posteriors have {}",
                self.frames.len(),
                log_post.rows()
            )));
        }
        let classes = log_post.cols();
        if self.frames.iter().flatten().any(|a| a.state >= classes)
            || self.reference.iter().any(|&s| s >= classes)
        {
            return Err(Error::contract(format!(
                "lattice state id out of range for {classes} classes"
            )));
        }
        if !log_post.is_finite() {
            return Err(Error::Input("log posteriors are not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmbrConfig {
    /// Acoustic scale applied to frame log posteriors.
    pub kappa: f64,
}

impl Default for SmbrConfig {
    fn default() -> Self {
        SmbrConfig { kappa: 1.0 }
    }
}

impl SmbrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::config("smbr.kappa", "must be positive"));
        }
        Ok(())
    }
}

/// Forward and backward log scores of every arc.
struct Trellis {
    scores: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    log_z: f64,
}

impl Trellis {
    fn build(lat: &Lattice, log_post: &Matrix, kappa: f64) -> Self {
        let t_len = lat.num_frames();
        let scores: Vec<Vec<f64>> = lat
            .frames
            .iter()
            .enumerate()
            .map(|(t, arcs)| {
                arcs.iter()
                    .map(|a| kappa * log_post.get(t, a.state) + a.lm_score)
                    .collect()
            })
            .collect();

        let mut alpha = Vec::with_capacity(t_len);
        alpha.push(scores[0].clone());
        for t in 1..t_len {
            // every arc of layer t-1 connects to every arc of layer t
            let into = log_sum_exp(alpha[t - 1].iter().copied());
            alpha.push(scores[t].iter().map(|s| s + into).collect());
        }

        let mut beta = vec![Vec::new(); t_len];
        beta[t_len - 1] = vec![0.0; scores[t_len - 1].len()];
        for t in (0..t_len - 1).rev() {
            let out = log_sum_exp(scores[t + 1].iter().zip(&beta[t + 1]).map(|(s, b)| s + b));
            beta[t] = vec![out; scores[t].len()];
        }

        let log_z = log_sum_exp(alpha[t_len - 1].iter().copied());
        Trellis {
            scores,
            alpha,
            beta,
            log_z,
        }
    }

    fn gamma(&self) -> Vec<Vec<f64>> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - self.log_z).exp()).collect())
            .collect()
    }
}

/// Posterior probability of every arc (`gamma[t][arc]`), by forward-backward
/// in log space.
pub fn lattice_forward_backward(
    lat: &Lattice,
    frame_log_posteriors: &Matrix,
    cfg: &SmbrConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    lat.check_against(frame_log_posteriors)?;
    Ok(Trellis::build(lat, frame_log_posteriors, cfg.kappa).gamma())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmbrOutput {
    /// Expected state accuracy `F`, in `[0, T]`.
    pub expected_accuracy: f64,
    /// `dF / d log p(s | t)`, `T x C`.
    pub grad: Matrix,
    /// Arc posteriors from the same pass.
    pub gamma: Vec<Vec<f64>>,
}

/// Expected state accuracy and its exact gradient with respect to the frame
/// log posteriors: `kappa * gamma(t, s) * (mean accuracy of paths through s
/// at t - F)`.
pub fn smbr_loss_and_grad(
    lat: &Lattice,
    frame_log_posteriors: &Matrix,
    cfg: &SmbrConfig,
) -> Result<SmbrOutput> {
    cfg.validate()?;
    lat.check_against(frame_log_posteriors)?;
    let t_len = lat.num_frames();
    let tr = Trellis::build(lat, frame_log_posteriors, cfg.kappa);
    let gamma = tr.gamma();
    let acc: Vec<Vec<f64>> = lat
        .frames
        .iter()
        .zip(&lat.reference)
        .map(|(arcs, &r)| arcs.iter().map(|a| f64::from(u8::from(a.state == r))).collect())
        .collect();

    // posterior-weighted accuracy of partial paths ending at / leaving from each arc
    let mut fwd_acc = Vec::with_capacity(t_len);
    fwd_acc.push(acc[0].clone());
    for t in 1..t_len {
        let norm = log_sum_exp(tr.alpha[t - 1].iter().copied());
        let carried: f64 = tr.alpha[t - 1]
            .iter()
            .zip(&fwd_acc[t - 1])
            .map(|(a, f)| (a - norm).exp() * f)
            .sum();
        fwd_acc.push(acc[t].iter().map(|a| a + carried).collect::<Vec<f64>>());
    }
    let mut bwd_acc = vec![Vec::new(); t_len];
    bwd_acc[t_len - 1] = vec![0.0; acc[t_len - 1].len()];
    for t in (0..t_len - 1).rev() {
        let next: Vec<f64> = tr.scores[t + 1]
            .iter()
            .zip(&tr.beta[t + 1])
            .map(|(s, b)| s + b)
            .collect();
        let norm = log_sum_exp(next.iter().copied());
        let carried: f64 = next
            .iter()
            .zip(&acc[t + 1])
            .zip(&bwd_acc[t + 1])
            .map(|((w, a), b)| (w - norm).exp() * (a + b))
            .sum();
        bwd_acc[t] = vec![carried; acc[t].len()];
    }

    let expected_accuracy: f64 = gamma[t_len - 1]
        .iter()
        .zip(&fwd_acc[t_len - 1])
        .map(|(g, a)| g * a)
        .sum();

    let mut grad = Matrix::zeros(t_len, frame_log_posteriors.cols());
    for (t, arcs) in lat.frames.iter().enumerate() {
        for (a, arc) in arcs.iter().enumerate() {
            let through = fwd_acc[t][a] + bwd_acc[t][a];
            let g = grad.get(t, arc.state) + cfg.kappa * gamma[t][a] * (through - expected_accuracy);
            grad.set(t, arc.state, g);
        }
    }
    Ok(SmbrOutput {
        expected_accuracy,
        grad,
        gamma,
    })
}

pub fn save_lattices(path: &Path, lattices: &[Lattice]) -> Result<()> {
    jsonl::write_jsonl_file(path, lattices)
}

pub fn load_lattices(path: &Path) -> Result<Vec<Lattice>> {
    jsonl::read_jsonl_file(path)
}
