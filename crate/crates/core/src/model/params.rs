use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::layout::ModelLayout;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Flat parameter vector of a model together with the layout that gives it
/// meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("parameter {i} is not finite")));
        }
        Ok(ModelParams { layout, values })
    }

    pub fn zeros(layout: ModelLayout) -> Self {
        let n = layout.param_count();
        ModelParams {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replaces the parameter values, keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ModelParams::new(self.layout.clone(), values)
    }

    /// Mutable access for trainers; callers keep the vector finite.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Xavier (Glorot) uniform bound for a `fan_in -> fan_out` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_uniform<R: Rng>(rng: &mut R, out: &mut [f64], bound: f64) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite and positive");
    out.iter_mut().for_each(|v| *v = dist.sample(rng));
}

fn init_layer<R: Rng>(rng: &mut R, layout: &ModelLayout, layer: usize, values: &mut [f64]) {
    let block = layout.layer(layer);
    let (n_in, h) = (block.input, block.hidden);
    // each gate's matrix is its own fan_in x fan_out block
    for gate in values[block.w.clone()].chunks_mut(h * n_in) {
        fill_uniform(rng, gate, xavier_bound(n_in, h));
    }
    for gate in values[block.u.clone()].chunks_mut(h * h) {
        fill_uniform(rng, gate, xavier_bound(h, h));
    }
    values[block.b].iter_mut().for_each(|v| *v = 0.0);
}

fn init_head<R: Rng>(rng: &mut R, layout: &ModelLayout, values: &mut [f64]) {
    let head = layout.head();
    fill_uniform(
        rng,
        &mut values[head.w.clone()],
        xavier_bound(head.input, head.classes),
    );
    values[head.b].iter_mut().for_each(|v| *v = 0.0);
}

/// Xavier-uniform weights, zero biases. Deterministic per seed.
pub fn xavier_init(layout: &ModelLayout, seed: u64) -> ModelParams {
    let mut rng = stream_rng(seed, streams::INIT);
    let mut values = vec![0.0; layout.param_count()];
    for layer in 0..layout.num_layers() {
        init_layer(&mut rng, layout, layer, &mut values);
    }
    init_head(&mut rng, layout, &mut values);
    ModelParams {
        layout: layout.clone(),
        values,
    }
}

/// Grows `teacher` by one LSTM layer (same width as its top layer). The
/// teacher's LSTM layers are copied bit-exactly; the new layer and the output
/// head are freshly Xavier-initialized.
pub fn deepen(teacher: &ModelParams, seed: u64) -> ModelParams {
    let old = teacher.layout();
    let layout = old
        .deepened(old.top_hidden())
        .expect("top hidden size is already valid");
    let mut rng = stream_rng(seed, streams::DEEPEN);
    let mut values = vec![0.0; layout.param_count()];
    let copied = old.layer(old.num_layers() - 1).b.end;
    values[..copied].copy_from_slice(&teacher.values()[..copied]);
    init_layer(&mut rng, &layout, old.num_layers(), &mut values);
    init_head(&mut rng, &layout, &mut values);
    ModelParams { layout, values }
}
