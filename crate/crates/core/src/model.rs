//! Channel-structured layer chains and structured channel pruning.
//!
//! A [`ModelGraph`] is a linear chain of layers. Each layer owns a weight
//! matrix with one row per output channel; the row is laid out input-channel
//! major, `kernel_params` entries per input channel. Pruning removes whole
//! output channels (rows) and, because the chain is linear, the matching
//! input-channel column blocks of the next layer.
//!
//! The pruning ratio is the fraction of output channels removed from each
//! layer, not the fraction of parameters removed. On a chain the two diverge
//! quickly: halving both sides of an interior connection removes three
//! quarters of its parameters.

use std::ops::Range;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer range {start}..{end} is out of bounds for a {len}-layer model")]
    InvalidRange { start: usize, end: usize, len: usize },
    #[error("pruning ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("prune mask does not match the stored model: {0}")]
    MaskMismatch(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// One channel-structured layer (a conv or linear block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Parameters per input/output channel connection (9 for a 3x3 conv).
    pub kernel_params: usize,
    /// Abstract work units per input/output channel connection.
    pub work_coeff: f64,
    /// `out_channels` rows of `in_channels * kernel_params` values.
    pub weights: Vec<Vec<f64>>,
}

impl LayerSpec {
    pub fn row_len(&self) -> usize {
        self.in_channels * self.kernel_params
    }

    pub fn param_count(&self) -> u64 {
        (self.kernel_params * self.in_channels * self.out_channels) as u64
    }

    pub fn work_units(&self) -> f64 {
        self.work_coeff * (self.in_channels * self.out_channels) as f64
    }

    /// l1 norm of every output channel's weights.
    pub fn channel_l1(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().map(|w| w.abs()).sum())
            .collect()
    }

    fn check_shape(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_params == 0 {
            return Err(ModelError::Invalid(format!(
                "layer {} has a zero dimension",
                self.id
            )));
        }
        if !(self.work_coeff > 0.0 && self.work_coeff.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "layer {} work_coeff must be positive and finite",
                self.id
            )));
        }
        if self.weights.len() != self.out_channels
            || self.weights.iter().any(|r| r.len() != self.row_len())
        {
            return Err(ModelError::Invalid(format!(
                "layer {} weights are not {}x{}",
                self.id,
                self.out_channels,
                self.row_len()
            )));
        }
        if self.weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "layer {} has non-finite weights",
                self.id
            )));
        }
        Ok(())
    }
}

/// An ordered chain of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ModelGraph {
    /// Validates chain consistency and weight shapes.
    pub fn new(layers: Vec<LayerSpec>, input_channels: usize) -> Result<Self, ModelError> {
        let first = layers
            .first()
            .ok_or_else(|| ModelError::Invalid("model has no layers".into()))?;
        if first.in_channels != input_channels {
            return Err(ModelError::Invalid(format!(
                "first layer takes {} channels, model input is {}",
                first.in_channels, input_channels
            )));
        }
        for layer in &layers {
            layer.check_shape()?;
        }
        for pair in layers.windows(2) {
            if pair[1].in_channels != pair[0].out_channels {
                return Err(ModelError::Invalid(format!(
                    "layer {} outputs {} channels but layer {} takes {}",
                    pair[0].id, pair[0].out_channels, pair[1].id, pair[1].in_channels
                )));
            }
        }
        let output_channels = layers[layers.len() - 1].out_channels;
        Ok(ModelGraph {
            layers,
            input_channels,
            output_channels,
        })
    }

    /// Builds a chain with the given channel widths (`widths.len() - 1`
    /// layers) and seeded uniform weights in [-1, 1].
    pub fn chain(
        widths: &[usize],
        kernel_params: usize,
        work_coeff: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::Invalid("a chain needs at least two widths".into()));
        }
        let specs: Vec<_> = widths
            .windows(2)
            .map(|w| LayerShape {
                out_channels: w[1],
                kernel_params,
                work_coeff,
            })
            .collect();
        Self::synthesize(widths[0], &specs, seed)
    }

    /// Single-channel layers whose work units equal `works`. Handy for
    /// placement problems where only per-layer cost matters.
    pub fn from_layer_works(works: &[f64]) -> Result<Self, ModelError> {
        let specs: Vec<_> = works
            .iter()
            .map(|&w| LayerShape {
                out_channels: 1,
                kernel_params: 1,
                work_coeff: w,
            })
            .collect();
        Self::synthesize(1, &specs, 0)
    }

    pub fn synthesize(
        input_channels: usize,
        shapes: &[LayerShape],
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_channels = input_channels;
        let mut layers = Vec::with_capacity(shapes.len());
        for (id, shape) in shapes.iter().enumerate() {
            let row_len = in_channels * shape.kernel_params;
            let weights = (0..shape.out_channels)
                .map(|_| (0..row_len).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect();
            layers.push(LayerSpec {
                id,
                in_channels,
                out_channels: shape.out_channels,
                kernel_params: shape.kernel_params,
                work_coeff: shape.work_coeff,
                weights,
            });
            in_channels = shape.out_channels;
        }
        Self::new(layers, input_channels)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn check_range(&self, range: &Range<usize>) -> Result<(), ModelError> {
        if range.start > range.end || range.end > self.layers.len() {
            return Err(ModelError::InvalidRange {
                start: range.start,
                end: range.end,
                len: self.layers.len(),
            });
        }
        Ok(())
    }
}

/// Shape of a layer to be synthesized; input width comes from the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub out_channels: usize,
    pub kernel_params: usize,
    pub work_coeff: f64,
}

/// Removed output channels for one layer, in original indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer: usize,
    pub original_out_channels: usize,
    pub removed: Vec<usize>,
}

/// Everything needed to undo an [`apply_prune`] given the original weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub ratio: f64,
    /// Only layers that lost at least one channel appear here.
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn empty() -> Self {
        PruneMask {
            ratio: 0.0,
            layers: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn removed_for(&self, layer: usize) -> &[usize] {
        self.layers
            .iter()
            .find(|m| m.layer == layer)
            .map(|m| m.removed.as_slice())
            .unwrap_or(&[])
    }
}

/// Number of output channels removed from a `channels`-wide layer at
/// `ratio`: `floor(ratio * channels)`, never removing the last channel.
pub fn removed_channel_count(channels: usize, ratio: f64) -> usize {
    if channels == 0 {
        return 0;
    }
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    let k = (ratio * channels as f64 + 1e-9).floor().max(0.0) as usize;
    k.min(channels - 1)
}

pub fn surviving_channel_count(channels: usize, ratio: f64) -> usize {
    channels - removed_channel_count(channels, ratio)
}

/// Output channels ordered by increasing l1 norm; ties go to the lower index.
pub fn l1_channel_ranking(layer: &LayerSpec) -> Vec<usize> {
    let norms = layer.channel_l1();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order
}

/// Prunes every layer in `slice` down to `ratio` of its output channels.
///
/// The model's final layer keeps its outputs so the model's I/O shape never
/// changes. Removing output channel `c` of layer `j` drops input block `c` of
/// layer `j + 1`, even when `j + 1` belongs to the next slice. Channels are
/// ranked on the weights of `model` as given, which is expected to be the
/// unpruned model.
pub fn apply_prune(
    model: &ModelGraph,
    slice: Range<usize>,
    ratio: f64,
) -> Result<(ModelGraph, PruneMask), ModelError> {
    model.check_range(&slice)?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ModelError::InvalidRatio(ratio));
    }
    let last = model.len() - 1;
    let mut mask = PruneMask {
        ratio,
        layers: Vec::new(),
    };
    for j in slice {
        if j == last {
            continue;
        }
        let layer = &model.layers[j];
        let k = removed_channel_count(layer.out_channels, ratio);
        if k == 0 {
            continue;
        }
        let mut removed: Vec<usize> = l1_channel_ranking(layer)[..k].to_vec();
        removed.sort_unstable();
        mask.layers.push(LayerMask {
            layer: j,
            original_out_channels: layer.out_channels,
            removed,
        });
    }

    let mut layers = Vec::with_capacity(model.len());
    for (j, layer) in model.layers.iter().enumerate() {
        let drop_rows = mask.removed_for(j);
        let drop_inputs = if j == 0 { &[][..] } else { mask.removed_for(j - 1) };
        if drop_rows.is_empty() && drop_inputs.is_empty() {
            layers.push(layer.clone());
            continue;
        }
        let kp = layer.kernel_params;
        let weights: Vec<Vec<f64>> = layer
            .weights
            .iter()
            .enumerate()
            .filter(|(o, _)| drop_rows.binary_search(o).is_err())
            .map(|(_, row)| {
                row.chunks(kp)
                    .enumerate()
                    .filter(|(c, _)| drop_inputs.binary_search(c).is_err())
                    .flat_map(|(_, block)| block.iter().copied())
                    .collect()
            })
            .collect();
        layers.push(LayerSpec {
            id: layer.id,
            in_channels: layer.in_channels - drop_inputs.len(),
            out_channels: layer.out_channels - drop_rows.len(),
            kernel_params: kp,
            work_coeff: layer.work_coeff,
            weights,
        });
    }
    let pruned = ModelGraph {
        layers,
        input_channels: model.input_channels,
        output_channels: model.output_channels,
    };
    Ok((pruned, mask))
}

/// Reinserts the channels listed in `mask`, taking their weights from
/// `full`. Surviving weights come from `pruned`.
pub fn restore(
    pruned: &ModelGraph,
    mask: &PruneMask,
    full: &ModelGraph,
) -> Result<ModelGraph, ModelError> {
    if pruned.len() != full.len() {
        return Err(ModelError::MaskMismatch(format!(
            "pruned model has {} layers, stored model has {}",
            pruned.len(),
            full.len()
        )));
    }
    for lm in &mask.layers {
        let orig = full.layers.get(lm.layer).ok_or_else(|| {
            ModelError::MaskMismatch(format!("layer {} does not exist", lm.layer))
        })?;
        if lm.original_out_channels != orig.out_channels {
            return Err(ModelError::MaskMismatch(format!(
                "layer {} originally had {} channels, mask says {}",
                lm.layer, orig.out_channels, lm.original_out_channels
            )));
        }
        if lm.removed.iter().any(|&c| c >= orig.out_channels)
            || lm.removed.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ModelError::MaskMismatch(format!(
                "layer {} mask indices are not sorted channels below {}",
                lm.layer, orig.out_channels
            )));
        }
    }

    let mut layers = Vec::with_capacity(full.len());
    for (j, (cur, orig)) in pruned.layers.iter().zip(&full.layers).enumerate() {
        let rows_removed = mask.removed_for(j);
        let inputs_removed = if j == 0 { &[][..] } else { mask.removed_for(j - 1) };
        let kp = orig.kernel_params;
        if cur.out_channels + rows_removed.len() != orig.out_channels
            || cur.in_channels + inputs_removed.len() != orig.in_channels
            || cur.kernel_params != kp
            || cur.weights.len() != cur.out_channels
            || cur.weights.iter().any(|r| r.len() != cur.row_len())
        {
            return Err(ModelError::MaskMismatch(format!(
                "layer {j} shape does not match the stored model minus the mask"
            )));
        }
        let mut surviving_rows = cur.weights.iter();
        let mut weights = Vec::with_capacity(orig.out_channels);
        for (o, orig_row) in orig.weights.iter().enumerate() {
            if rows_removed.binary_search(&o).is_ok() {
                weights.push(orig_row.clone());
                continue;
            }
            let row = surviving_rows.next().expect("row count checked above");
            let mut blocks = row.chunks(kp);
            let mut rebuilt = Vec::with_capacity(orig.row_len());
            for (c, orig_block) in orig_row.chunks(kp).enumerate() {
                if inputs_removed.binary_search(&c).is_ok() {
                    rebuilt.extend_from_slice(orig_block);
                } else {
                    rebuilt.extend_from_slice(blocks.next().expect("column count checked above"));
                }
            }
            weights.push(rebuilt);
        }
        layers.push(LayerSpec {
            id: orig.id,
            in_channels: orig.in_channels,
            out_channels: orig.out_channels,
            kernel_params: kp,
            work_coeff: orig.work_coeff,
            weights,
        });
    }
    Ok(ModelGraph {
        layers,
        input_channels: full.input_channels,
        output_channels: full.output_channels,
    })
}

/// Moves a pruned slice to a new ratio: full restore, then a fresh prune.
pub fn retarget(
    pruned: &ModelGraph,
    mask: &PruneMask,
    full: &ModelGraph,
    slice: Range<usize>,
    ratio: f64,
) -> Result<(ModelGraph, PruneMask), ModelError> {
    let restored = restore(pruned, mask, full)?;
    apply_prune(&restored, slice, ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostMetrics {
    pub params: u64,
    pub work: f64,
}

/// Parameter count and work units summed over the layers in `range`.
pub fn cost_metrics(model: &ModelGraph, range: Range<usize>) -> Result<CostMetrics, ModelError> {
    model.check_range(&range)?;
    Ok(model.layers[range]
        .iter()
        .fold(CostMetrics::default(), |acc, l| CostMetrics {
            params: acc.params + l.param_count(),
            work: acc.work + l.work_units(),
        }))
}

/// Work of `range` after pruning `range` at `ratio`, computed from channel
/// counts alone.
pub fn pruned_work(model: &ModelGraph, range: Range<usize>, ratio: f64) -> Result<f64, ModelError> {
    let (pruned, _) = apply_prune(model, range.clone(), ratio)?;
    Ok(cost_metrics(&pruned, range)?.work)
}

/// On-disk model description. Weights are optional; missing weights are
/// drawn uniformly from [-1, 1] with `seed`.
///
/// ```toml
/// input_channels = 3
/// seed = 7
///
/// [[layers]]
/// out_channels = 16
/// kernel_params = 9
/// work_coeff = 2.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFixture {
    pub input_channels: usize,
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<LayerFixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFixture {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kernel_params: usize,
    #[serde(default = "unit")]
    pub work_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl ModelFixture {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Invalid(e.message().to_string()))
    }

    pub fn build(&self) -> Result<ModelGraph, ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Invalid("model has no layers".into()));
        }
        // cap sizes so a hostile fixture cannot request gigabytes of weights
        let mut in_ch = self.input_channels;
        let mut total = 0usize;
        for l in &self.layers {
            total = in_ch
                .checked_mul(l.out_channels)
                .and_then(|x| x.checked_mul(l.kernel_params))
                .and_then(|x| x.checked_add(total))
                .filter(|&x| x <= MAX_FIXTURE_PARAMS)
                .ok_or_else(|| {
                    ModelError::Invalid(format!(
                        "model exceeds {MAX_FIXTURE_PARAMS} synthesized parameters"
                    ))
                })?;
            in_ch = l.out_channels;
        }
        let shapes: Vec<_> = self
            .layers
            .iter()
            .map(|l| LayerShape {
                out_channels: l.out_channels,
                kernel_params: l.kernel_params,
                work_coeff: l.work_coeff,
            })
            .collect();
        if self.input_channels == 0 || shapes.iter().any(|s| s.out_channels == 0 || s.kernel_params == 0) {
            return Err(ModelError::Invalid("channel counts must be positive".into()));
        }
        let mut model = ModelGraph::synthesize(self.input_channels, &shapes, self.seed)?;
        for (layer, fixture) in model.layers.iter_mut().zip(&self.layers) {
            if let Some(w) = &fixture.weights {
                layer.weights = w.clone();
            }
        }
        ModelGraph::new(model.layers, self.input_channels)
    }
}

pub const MAX_FIXTURE_PARAMS: usize = 1 << 24;
