//! Metric-learning losses over projected, L2-normalized rows.
//!
//! Row `i` of `gen` is an anchor whose positive is row `labels[i]` of
//! `origins`; every other origin row is a negative. All losses return the
//! batch mean and exact gradients with respect to both inputs.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EPS_NORM;

/// Unit-norm tolerance on loss inputs.
pub const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("row {row} of {which} has norm {norm}, expected 1")]
    NonUnitRow {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("label {label} at row {row} out of range for {count} origins")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        count: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate row {row} of {which} (norm {norm:e})")]
    DegenerateRow {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("unknown loss {0:?}, expected cosface, circle or softmax")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    CosFace,
    Circle,
    Softmax,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::CosFace, LossKind::Circle, LossKind::Softmax];

    /// `(scale, margin)` defaults: CosFace `s = 64, m = 0.35`; Circle
    /// `gamma = 256, m = 0.25`; plain softmax over `s = 64` cosines.
    pub fn default_hyper(self) -> (f64, f64) {
        match self {
            LossKind::CosFace => (64.0, 0.35),
            LossKind::Circle => (256.0, 0.25),
            LossKind::Softmax => (64.0, 0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CosFace => "cosface",
            LossKind::Circle => "circle",
            LossKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosface" => Ok(LossKind::CosFace),
            "circle" => Ok(LossKind::Circle),
            "softmax" => Ok(LossKind::Softmax),
            other => Err(LossError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub kind: LossKind,
    pub scale: f64,
    pub margin: f64,
}

impl LossParams {
    pub fn defaults(kind: LossKind) -> Self {
        let (scale, margin) = kind.default_hyper();
        Self {
            kind,
            scale,
            margin,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_gen: Array2<f64>,
    pub grad_origins: Array2<f64>,
}

fn check_inputs(
    gen: &ArrayView2<f64>,
    origins: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<(), LossError> {
    if gen.ncols() != origins.ncols() {
        return Err(LossError::Shape(format!(
            "gen has {} columns, origins {}",
            gen.ncols(),
            origins.ncols()
        )));
    }
    if labels.len() != gen.nrows() {
        return Err(LossError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            gen.nrows()
        )));
    }
    for (which, m) in [("gen", gen.view()), ("origins", origins.view())] {
        for (row, r) in m.outer_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(LossError::NonUnitRow { which, row, norm });
            }
        }
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= origins.nrows() {
            return Err(LossError::LabelOutOfRange {
                row,
                label,
                count: origins.nrows(),
            });
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps `dL/dcos` back onto both inputs.
fn backprop_cosines(
    dcos: &Array2<f64>,
    gen: &ArrayView2<f64>,
    origins: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    (dcos.dot(origins), dcos.t().dot(gen))
}

/// Large-margin cosine loss:
/// `-log(e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j != y} e^{s cos_j}))`.
pub fn cosface_loss_and_grad(
    gen: ArrayView2<f64>,
    origins: ArrayView2<f64>,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<LossOutput, LossError> {
    check_inputs(&gen, &origins, labels)?;
    let b = gen.nrows();
    let cos = gen.dot(&origins.t());
    let mut dcos = Array2::<f64>::zeros(cos.raw_dim());
    let mut total = 0.0;
    for i in 0..b {
        let y = labels[i];
        let logits: Array1<f64> = cos
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &c)| scale * (c - if j == y { margin } else { 0.0 }))
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        total += lse - logits[y];
        for (j, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            dcos[[i, j]] = scale * (p - target) / b as f64;
        }
    }
    let (grad_gen, grad_origins) = backprop_cosines(&dcos, &gen, &origins);
    Ok(LossOutput {
        loss: total / b as f64,
        grad_gen,
        grad_origins,
    })
}

/// Normalized softmax cross-entropy: CosFace with zero margin.
pub fn softmax_loss_and_grad(
    gen: ArrayView2<f64>,
    origins: ArrayView2<f64>,
    labels: &[usize],
    scale: f64,
) -> Result<LossOutput, LossError> {
    cosface_loss_and_grad(gen, origins, labels, scale, 0.0)
}

/// Circle loss with one positive per anchor:
/// `log(1 + sum_n e^{g a_n (s_n - m)} * e^{-g a_p (s_p - 1 + m)})`
/// with `a_p = [1 + m - s_p]_+` and `a_n = [s_n + m]_+`.
///
/// The weights `a_p`, `a_n` are differentiated through, so the gradient is
/// the exact derivative of the value returned.
pub fn circle_loss_and_grad(
    gen: ArrayView2<f64>,
    origins: ArrayView2<f64>,
    labels: &[usize],
    gamma: f64,
    margin: f64,
) -> Result<LossOutput, LossError> {
    check_inputs(&gen, &origins, labels)?;
    let b = gen.nrows();
    let n_orig = origins.nrows();
    let cos = gen.dot(&origins.t());
    let mut dcos = Array2::<f64>::zeros(cos.raw_dim());
    let (opt_p, delta_p, opt_n, delta_n) = (1.0 + margin, 1.0 - margin, -margin, margin);
    let mut total = 0.0;
    for i in 0..b {
        let y = labels[i];
        let sp = cos[[i, y]];
        let ap = (opt_p - sp).max(0.0);
        let logit_p = -gamma * ap * (sp - delta_p);
        let dlogit_p = if ap > 0.0 {
            -gamma * (ap - (sp - delta_p))
        } else {
            0.0
        };

        let mut logit_n = Vec::with_capacity(n_orig.saturating_sub(1));
        let mut dlogit_n = Vec::with_capacity(n_orig.saturating_sub(1));
        for j in (0..n_orig).filter(|&j| j != y) {
            let sn = cos[[i, j]];
            let an = (sn - opt_n).max(0.0);
            logit_n.push((j, gamma * an * (sn - delta_n)));
            dlogit_n.push(if an > 0.0 {
                gamma * (an + (sn - delta_n))
            } else {
                0.0
            });
        }
        let lse_n = log_sum_exp(logit_n.iter().map(|&(_, l)| l));
        if lse_n == f64::NEG_INFINITY {
            continue;
        }
        let x = lse_n + logit_p;
        total += softplus(x);
        let w = sigmoid(x) / b as f64;
        dcos[[i, y]] = w * dlogit_p;
        for (&(j, l), &dl) in logit_n.iter().zip(&dlogit_n) {
            dcos[[i, j]] = w * (l - lse_n).exp() * dl;
        }
    }
    let (grad_gen, grad_origins) = backprop_cosines(&dcos, &gen, &origins);
    Ok(LossOutput {
        loss: total / b as f64,
        grad_gen,
        grad_origins,
    })
}

pub fn loss_and_grad(
    params: &LossParams,
    gen: ArrayView2<f64>,
    origins: ArrayView2<f64>,
    labels: &[usize],
) -> Result<LossOutput, LossError> {
    match params.kind {
        LossKind::CosFace => cosface_loss_and_grad(gen, origins, labels, params.scale, params.margin),
        LossKind::Circle => circle_loss_and_grad(gen, origins, labels, params.scale, params.margin),
        LossKind::Softmax => softmax_loss_and_grad(gen, origins, labels, params.scale),
    }
}

/// Row-wise L2 normalization, returning the unit rows and the norms.
pub fn normalize_rows(
    x: ArrayView2<f64>,
    which: &'static str,
) -> Result<(Array2<f64>, Vec<f64>), LossError> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm > EPS_NORM && norm.is_finite()) {
            return Err(LossError::DegenerateRow { which, row, norm });
        }
        r.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pulls a gradient through `u = x / |x|`: `(g - (g . u) u) / |x|`.
pub fn normalize_rows_backward(
    unit: ArrayView2<f64>,
    norms: &[f64],
    grad_unit: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad_unit.to_owned();
    for (i, mut g) in out.axis_iter_mut(Axis(0)).enumerate() {
        let u = unit.row(i);
        let along = g.dot(&u);
        g.zip_mut_with(&u, |gv, &uv| *gv = (*gv - along * uv) / norms[i]);
    }
    out
}

/// Loss on raw projected rows: normalize, score, and backpropagate through
/// the normalization. Gradients are with respect to the raw rows.
pub fn projected_loss_and_grad(
    params: &LossParams,
    raw_gen: ArrayView2<f64>,
    raw_origins: ArrayView2<f64>,
    labels: &[usize],
) -> Result<LossOutput, LossError> {
    let (ug, ng) = normalize_rows(raw_gen, "gen")?;
    let (uo, no) = normalize_rows(raw_origins, "origins")?;
    let out = loss_and_grad(params, ug.view(), uo.view(), labels)?;
    Ok(LossOutput {
        loss: out.loss,
        grad_gen: normalize_rows_backward(ug.view(), &ng, out.grad_gen.view()),
        grad_origins: normalize_rows_backward(uo.view(), &no, out.grad_origins.view()),
    })
}
