use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a stacked LSTM acoustic model: input width, hidden size of each
/// LSTM layer (bottom first), and the number of output classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct ModelLayout {
    input_dim: usize,
    lstm_layers: Vec<usize>,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    input_dim: usize,
    lstm_layers: Vec<usize>,
    num_classes: usize,
}

impl TryFrom<RawLayout> for ModelLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        ModelLayout::new(raw.input_dim, raw.lstm_layers, raw.num_classes)
    }
}

impl From<ModelLayout> for RawLayout {
    fn from(l: ModelLayout) -> Self {
        RawLayout {
            input_dim: l.input_dim,
            lstm_layers: l.lstm_layers,
            num_classes: l.num_classes,
        }
    }
}

/// Flat-vector ranges of one LSTM layer. Gate rows are stacked in the order
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerBlock {
    pub input: usize,
    pub hidden: usize,
    pub w: Range<usize>,
    pub u: Range<usize>,
    pub b: Range<usize>,
}

impl LayerBlock {
    pub fn range(&self) -> Range<usize> {
        self.w.start..self.b.end
    }
}

/// Flat-vector ranges of the fully connected output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadBlock {
    pub input: usize,
    pub classes: usize,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

impl ModelLayout {
    pub fn new(input_dim: usize, lstm_layers: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("layout.input_dim", "must be at least 1"));
        }
        if lstm_layers.is_empty() {
            return Err(Error::config(
                "layout.lstm_layers",
                "at least one LSTM layer is required",
            ));
        }
        if let Some(i) = lstm_layers.iter().position(|&h| h == 0) {
            return Err(Error::config(
                format!("layout.lstm_layers[{i}]"),
                "hidden size must be at least 1",
            ));
        }
        if num_classes == 0 {
            return Err(Error::config("layout.num_classes", "must be at least 1"));
        }
        Ok(ModelLayout {
            input_dim,
            lstm_layers,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn lstm_layers(&self) -> &[usize] {
        &self.lstm_layers
    }

    pub fn num_layers(&self) -> usize {
        self.lstm_layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn top_hidden(&self) -> usize {
        *self.lstm_layers.last().expect("validated non-empty")
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.lstm_layers[layer - 1]
        }
    }

    fn layer_len(&self, layer: usize) -> usize {
        let h = self.lstm_layers[layer];
        4 * h * (self.layer_input(layer) + h + 1)
    }

    pub fn layer(&self, layer: usize) -> LayerBlock {
        let start: usize = (0..layer).map(|l| self.layer_len(l)).sum();
        let input = self.layer_input(layer);
        let hidden = self.lstm_layers[layer];
        let w = start..start + 4 * hidden * input;
        let u = w.end..w.end + 4 * hidden * hidden;
        let b = u.end..u.end + 4 * hidden;
        LayerBlock {
            input,
            hidden,
            w,
            u,
            b,
        }
    }

    pub fn head(&self) -> HeadBlock {
        let start: usize = (0..self.num_layers()).map(|l| self.layer_len(l)).sum();
        let input = self.top_hidden();
        let w = start..start + self.num_classes * input;
        let b = w.end..w.end + self.num_classes;
        HeadBlock {
            input,
            classes: self.num_classes,
            w,
            b,
        }
    }

    /// Total length of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.head().b.end
    }

    /// Layout with one more LSTM layer of `hidden` units on top.
    pub fn deepened(&self, hidden: usize) -> Result<Self> {
        let mut layers = self.lstm_layers.clone();
        layers.push(hidden);
        ModelLayout::new(self.input_dim, layers, self.num_classes)
    }

    /// Same input and output widths with `layers` hidden layers of size `hidden`.
    pub fn uniform(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        num_classes: usize,
    ) -> Result<Self> {
        ModelLayout::new(input_dim, vec![hidden; layers], num_classes)
    }
}
