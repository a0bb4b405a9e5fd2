use serde::{Deserialize, Serialize};

use super::layout::ModelLayout;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let iv = Interval { lo, hi };
        iv.validate("interval")?;
        Ok(iv)
    }

    pub const fn symmetric(bound: f64) -> Self {
        Interval {
            lo: -bound,
            hi: bound,
        }
    }

    pub(crate) fn validate(&self, field: &str) -> Result<()> {
        if !(self.lo < self.hi) || self.lo.is_nan() || self.hi.is_nan() {
            return Err(Error::config(field, "requires lo < hi"));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Saturation limits applied during training.
///
/// Gradients and cell activations outside their range are set to the
/// boundary value. A recurrent-layer error signal outside `diff_range`
/// aborts back propagation for the whole sequence instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub grad_range: Interval,
    pub cell_range: Interval,
    pub diff_range: Interval,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            grad_range: Interval::symmetric(5.0),
            cell_range: Interval::symmetric(50.0),
            diff_range: Interval::symmetric(10000.0),
        }
    }
}

impl ClipConfig {
    /// Ranges wide enough that no realistic value is ever clipped.
    pub fn disabled() -> Self {
        ClipConfig {
            grad_range: Interval::symmetric(1e9),
            cell_range: Interval::symmetric(1e9),
            diff_range: Interval::symmetric(1e9),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grad_range.validate("clip.grad_range")?;
        self.cell_range.validate("clip.cell_range")?;
        self.diff_range.validate("clip.diff_range")
    }
}

/// Activations of one LSTM layer over a sequence.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `T x 4h` post-nonlinearity gates (input, forget, candidate, output).
    gates: Vec<f64>,
    /// `T x h` cell states after clamping.
    cells: Vec<f64>,
    /// Whether the pre-clamp cell value fell outside `cell_range`.
    clamped: Vec<bool>,
    hidden: Matrix,
}

impl LayerCache {
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }
}

/// Everything back propagation needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Matrix,
    layers: Vec<LayerCache>,
    logits: Matrix,
    posteriors: Matrix,
}

impl ForwardCache {
    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn posteriors(&self) -> &Matrix {
        &self.posteriors
    }

    pub fn into_posteriors(self) -> Matrix {
        self.posteriors
    }

    pub fn num_frames(&self) -> usize {
        self.inputs.rows()
    }
}

/// Parameter gradient. A skipped gradient is all zeros and tells the
/// optimizer to leave the model untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layout: ModelLayout,
    values: Vec<f64>,
    skipped: bool,
}

impl Gradients {
    pub fn zeros(layout: &ModelLayout) -> Self {
        Gradients {
            layout: layout.clone(),
            values: vec![0.0; layout.param_count()],
            skipped: false,
        }
    }

    pub fn skipped(layout: &ModelLayout) -> Self {
        Gradients {
            skipped: true,
            ..Gradients::zeros(layout)
        }
    }

    pub fn from_values(layout: &ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::contract("gradient length does not match layout"));
        }
        Ok(Gradients {
            layout: layout.clone(),
            values,
            skipped: false,
        })
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_skipped(&self) -> bool {
        self.skipped
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn check_inputs(model: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != model.layout().input_dim() {
        return Err(Error::contract(format!(
            "input width {} does not match model input_dim {}",
            inputs.cols(),
            model.layout().input_dim()
        )));
    }
    if !inputs.is_finite() {
        return Err(Error::Input("input frames contain non-finite values".into()));
    }
    Ok(())
}

fn layer_forward(
    model: &ModelParams,
    layer: usize,
    input: &Matrix,
    cell_range: Interval,
) -> LayerCache {
    let block = model.layout().layer(layer);
    let (n_in, h) = (block.input, block.hidden);
    let vals = model.values();
    let w = &vals[block.w];
    let u = &vals[block.u];
    let b = &vals[block.b];
    let t_len = input.rows();

    let mut gates = vec![0.0; t_len * 4 * h];
    let mut cells = vec![0.0; t_len * h];
    let mut clamped = vec![false; t_len * h];
    let mut hidden = Matrix::zeros(t_len, h);
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; 4 * h];

    for t in 0..t_len {
        let x = input.row(t);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = b[j] + dot(&w[j * n_in..(j + 1) * n_in], x) + dot(&u[j * h..(j + 1) * h], &h_prev);
        }
        let g_row = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            g_row[k] = sigmoid(z[k]);
            g_row[h + k] = sigmoid(z[h + k]);
            g_row[2 * h + k] = z[2 * h + k].tanh();
            g_row[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        let h_row = hidden.row_mut(t);
        for k in 0..h {
            let (i, f, g, o) = (g_row[k], g_row[h + k], g_row[2 * h + k], g_row[3 * h + k]);
            let pre = f * c_prev[k] + i * g;
            let c = cell_range.clamp(pre);
            clamped[t * h + k] = !cell_range.contains(pre);
            cells[t * h + k] = c;
            h_row[k] = o * c.tanh();
        }
        c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        h_prev.copy_from_slice(h_row);
    }

    LayerCache {
        gates,
        cells,
        clamped,
        hidden,
    }
}

fn head_forward(model: &ModelParams, top: &Matrix) -> (Matrix, Matrix) {
    let head = model.layout().head();
    let vals = model.values();
    let w = &vals[head.w];
    let b = &vals[head.b];
    let (hin, c) = (head.input, head.classes);
    let mut logits = Matrix::zeros(top.rows(), c);
    for t in 0..top.rows() {
        let x = top.row(t);
        let row = logits.row_mut(t);
        for j in 0..c {
            row[j] = b[j] + dot(&w[j * hin..(j + 1) * hin], x);
        }
    }
    let mut posteriors = logits.clone();
    for t in 0..posteriors.rows() {
        softmax_in_place(posteriors.row_mut(t));
    }
    (logits, posteriors)
}

/// Runs the stacked LSTM and softmax head over `inputs` (`T x input_dim`).
/// Cell states are clamped to `clip.cell_range` at every step.
pub fn forward(model: &ModelParams, inputs: &Matrix, clip: &ClipConfig) -> Result<ForwardCache> {
    check_inputs(model, inputs)?;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(model.layout().num_layers());
    for l in 0..model.layout().num_layers() {
        let below = layers.last().map_or(inputs, |c| &c.hidden);
        let cache = layer_forward(model, l, below, clip.cell_range);
        layers.push(cache);
    }
    let top = layers.last().map_or(inputs, |c| &c.hidden);
    let (logits, posteriors) = head_forward(model, top);
    Ok(ForwardCache {
        inputs: inputs.clone(),
        layers,
        logits,
        posteriors,
    })
}

/// Frame posteriors only (inference path).
pub fn posteriors(model: &ModelParams, inputs: &Matrix, clip: &ClipConfig) -> Result<Matrix> {
    forward(model, inputs, clip).map(ForwardCache::into_posteriors)
}

/// Back propagation through time for a loss whose gradient with respect to
/// the output logits is `d_logits` (`T x num_classes`).
///
/// The error signal entering each recurrent layer at each step is checked
/// against `clip.diff_range`; any component outside it returns a skipped,
/// all-zero gradient. Otherwise every gradient entry is clamped to
/// `clip.grad_range`.
pub fn backward(
    model: &ModelParams,
    cache: &ForwardCache,
    d_logits: &Matrix,
    clip: &ClipConfig,
) -> Result<Gradients> {
    let layout = model.layout();
    let t_len = cache.num_frames();
    if cache.layers.len() != layout.num_layers() || cache.inputs.cols() != layout.input_dim() {
        return Err(Error::contract("forward cache does not belong to this model"));
    }
    if d_logits.rows() != t_len || d_logits.cols() != layout.num_classes() {
        return Err(Error::contract(format!(
            "logit gradient is {}x{}, expected {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            t_len,
            layout.num_classes()
        )));
    }

    let vals = model.values();
    let mut grad = vec![0.0; layout.param_count()];

    // output layer
    let head = layout.head();
    let top = &cache.layers[layout.num_layers() - 1].hidden;
    let mut d_above = Matrix::zeros(t_len, head.input);
    {
        let (gw, gb) = grad[head.w.start..head.b.end].split_at_mut(head.w.len());
        let w = &vals[head.w.clone()];
        for t in 0..t_len {
            let dy = d_logits.row(t);
            let h_t = top.row(t);
            let dh = d_above.row_mut(t);
            for (j, &dyj) in dy.iter().enumerate() {
                gb[j] += dyj;
                axpy(dyj, h_t, &mut gw[j * head.input..(j + 1) * head.input]);
                axpy(dyj, &w[j * head.input..(j + 1) * head.input], dh);
            }
        }
    }

    for l in (0..layout.num_layers()).rev() {
        let block = layout.layer(l);
        let (n_in, h) = (block.input, block.hidden);
        let lc = &cache.layers[l];
        let input = if l == 0 {
            &cache.inputs
        } else {
            &cache.layers[l - 1].hidden
        };
        let w = &vals[block.w.clone()];
        let u = &vals[block.u.clone()];
        let (gw, rest) = grad[block.w.start..block.b.end].split_at_mut(block.w.len());
        let (gu, gb) = rest.split_at_mut(block.u.len());

        let mut d_below = Matrix::zeros(if l == 0 { 0 } else { t_len }, n_in);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zero_h = vec![0.0; h];

        for t in (0..t_len).rev() {
            let above = d_above.row(t);
            for k in 0..h {
                dh[k] = above[k] + dh_next[k];
            }
            if !dh.iter().all(|&v| clip.diff_range.contains(v)) {
                return Ok(Gradients::skipped(layout));
            }
            let g_row = &lc.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_row = &lc.cells[t * h..(t + 1) * h];
            let c_prev: &[f64] = if t > 0 {
                &lc.cells[(t - 1) * h..t * h]
            } else {
                &zero_h
            };
            for k in 0..h {
                let (i, f, g, o) = (g_row[k], g_row[h + k], g_row[2 * h + k], g_row[3 * h + k]);
                let tc = c_row[k].tanh();
                let d_o = dh[k] * tc;
                let dc = dh[k] * o * (1.0 - tc * tc) + dc_next[k];
                // clamp has zero slope outside cell_range
                let dpre = if lc.clamped[t * h + k] { 0.0 } else { dc };
                dc_next[k] = dpre * f;
                dz[k] = dpre * g * i * (1.0 - i);
                dz[h + k] = dpre * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dpre * i * (1.0 - g * g);
                dz[3 * h + k] = d_o * o * (1.0 - o);
            }
            let x = input.row(t);
            let h_prev: &[f64] = if t > 0 { lc.hidden.row(t - 1) } else { &zero_h };
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (j, &dzj) in dz.iter().enumerate() {
                if dzj == 0.0 {
                    continue;
                }
                gb[j] += dzj;
                axpy(dzj, x, &mut gw[j * n_in..(j + 1) * n_in]);
                axpy(dzj, h_prev, &mut gu[j * h..(j + 1) * h]);
                axpy(dzj, &u[j * h..(j + 1) * h], &mut dh_next);
                if l > 0 {
                    axpy(dzj, &w[j * n_in..(j + 1) * n_in], d_below.row_mut(t));
                }
            }
        }
        d_above = d_below;
    }

    grad.iter_mut()
        .for_each(|g| *g = clip.grad_range.clamp(*g));
    Ok(Gradients {
        layout: layout.clone(),
        values: grad,
        skipped: false,
    })
}
