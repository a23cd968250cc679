use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derive_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture description of a single layer; the ordered list of these is
/// what the weight-file header carries and what the architecture hash covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Embedding {
        vocab: usize,
        dim: usize,
    },
    RecurrentCell {
        input: usize,
        hidden: usize,
    },
    Conv1d {
        channels_in: usize,
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    /// Two stacked conv1d layers (`channels` filters each) with an identity
    /// skip: `out = x + conv2(relu(conv1(x)))`. Channel count is preserved.
    ResidualBlock {
        channels: usize,
        kernel: usize,
    },
    GlobalMaxPool,
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    Activation {
        activation: Activation,
    },
    /// Parallel branch stacks applied to the same encoded input; their flat
    /// outputs are concatenated.
    ConcatFlatten {
        branches: Vec<Vec<LayerSpec>>,
    },
}

/// A batch of integer-encoded domain names, row-major `[rows, width]`.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub codes: Vec<u16>,
    pub rows: usize,
    pub width: usize,
}

impl EncodedBatch {
    pub fn new(codes: Vec<u16>, rows: usize, width: usize) -> Result<Self> {
        if codes.len() != rows * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} codes, got {}",
                rows,
                width,
                codes.len()
            )));
        }
        Ok(EncodedBatch { codes, rows, width })
    }

    #[inline]
    fn row(&self, r: usize) -> &[u16] {
        &self.codes[r * self.width..(r + 1) * self.width]
    }
}

/// Input contract of a model: expected batch width, vocabulary size, and an
/// opaque encoding tag used to reject mixing models built from different
/// encoding specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSig {
    pub width: usize,
    pub vocab: usize,
    pub tag: u64,
}

#[derive(Debug, Clone)]
pub struct WeightEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named weight storage. Order is the structural traversal order of
/// the layer list, which serialization and optimizer state rely on.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &WeightEntry {
        &self.entries[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Replace a named tensor (shape-checked) and its trainable flag.
    pub fn install(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::WeightFormat(format!("unknown weight name {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::WeightFormat(format!(
                "weight {name:?}: shape {:?} != expected {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = tensor;
        entry.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> usize {
        self.entries.push(WeightEntry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }
}

/// Per-weight gradients aligned with a [`WeightStore`]; frozen weights keep
/// `None` — they receive no gradient entry at all.
#[derive(Debug, Clone)]
pub struct GradStore {
    slots: Vec<Option<Tensor>>,
}

impl GradStore {
    fn for_store(store: &WeightStore) -> Self {
        let slots = store
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    Some(Tensor::zeros(e.tensor.shape()))
                } else {
                    None
                }
            })
            .collect();
        GradStore { slots }
    }

    pub fn slot(&self, idx: usize) -> Option<&Tensor> {
        self.slots[idx].as_ref()
    }

    fn slot_mut(&mut self, idx: usize) -> Option<&mut Tensor> {
        self.slots[idx].as_mut()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Iterate `(store index, gradient)` for weights that got one.
    pub fn iter_present(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (i, t)))
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter_present()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn slot_is_some(&self, idx: usize) -> bool {
        self.slots[idx].is_some()
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Embedding {
        table: usize,
        vocab: usize,
        dim: usize,
    },
    Lstm {
        wx: usize,
        wh: usize,
        b: usize,
        input: usize,
        hidden: usize,
    },
    Conv1d {
        w: usize,
        b: usize,
        channels_in: usize,
        filters: usize,
        kernel: usize,
        act: Activation,
    },
    Residual {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
        channels: usize,
        kernel: usize,
    },
    GlobalMaxPool,
    Dense {
        w: usize,
        b: usize,
        input: usize,
        output: usize,
        act: Activation,
    },
    ActivationOnly {
        act: Activation,
    },
    Parallel {
        branches: Vec<Vec<Layer>>,
    },
}

/// Shape flowing between layers: a per-timestep sequence or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Flow {
    Seq { channels: usize },
    Flat { width: usize },
}

enum Input<'a> {
    Codes(&'a EncodedBatch),
    Flat(&'a Tensor),
}

#[derive(Debug)]
enum TapeExtra {
    None,
    Lstm {
        /// Hidden states `[B, L+1, H]` (index 0 is the zero initial state).
        hs: Tensor,
        /// Cell states `[B, L+1, H]`.
        cs: Tensor,
        /// Gate activations `[B, L, 4H]` in (i, f, g, o) packing.
        gates: Tensor,
        /// `tanh(c_t)` per step `[B, L, H]`.
        tanh_c: Tensor,
    },
    Pool {
        /// Winning time index per `[B, C]` slot.
        argmax: Vec<u32>,
    },
    Residual {
        /// Output of the first conv (post-relu) `[B, L, C]`.
        mid: Tensor,
    },
    Parallel {
        tapes: Vec<Option<Tape>>,
    },
}

/// Cached forward activations for one layer list.
#[derive(Debug)]
pub struct Tape {
    outputs: Vec<Tensor>,
    extras: Vec<TapeExtra>,
}

/// A layered model: ordered layers, a named weight store, and a marker index
/// separating the feature extractor from the classification head.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    store: WeightStore,
    head_marker: usize,
    input: InputSig,
}

// ---------------------------------------------------------------------------
// construction

struct Builder<'a> {
    store: &'a mut WeightStore,
    rng: Option<&'a mut rand_chacha::ChaCha12Rng>,
}

impl Builder<'_> {
    /// Glorot-style uniform init: limit = sqrt(6 / (fan_in + fan_out)).
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> usize {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_deref_mut() {
            use rand::Rng;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * limit;
            }
        }
        self.store.push(name, t, true)
    }

    fn bias(&mut self, name: String, len: usize) -> usize {
        self.store.push(name, Tensor::zeros(&[len]), true)
    }
}

fn build_layers(specs: &[LayerSpec], prefix: &str, b: &mut Builder) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let at = format!("{prefix}L{i}");
        let layer = match spec {
            LayerSpec::Embedding { vocab, dim } => {
                check_pos(&at, &[("vocab", *vocab), ("dim", *dim)])?;
                Layer::Embedding {
                    table: b.weight(format!("{at}.table"), &[*vocab, *dim], *vocab, *dim),
                    vocab: *vocab,
                    dim: *dim,
                }
            }
            LayerSpec::RecurrentCell { input, hidden } => {
                check_pos(&at, &[("input", *input), ("hidden", *hidden)])?;
                Layer::Lstm {
                    wx: b.weight(format!("{at}.wx"), &[*input, 4 * hidden], *input, 4 * hidden),
                    wh: b.weight(format!("{at}.wh"), &[*hidden, 4 * hidden], *hidden, 4 * hidden),
                    b: b.bias(format!("{at}.b"), 4 * hidden),
                    input: *input,
                    hidden: *hidden,
                }
            }
            LayerSpec::Conv1d {
                channels_in,
                filters,
                kernel,
                activation,
            } => {
                check_pos(
                    &at,
                    &[
                        ("channels_in", *channels_in),
                        ("filters", *filters),
                        ("kernel", *kernel),
                    ],
                )?;
                if kernel % 2 == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{at}: conv kernel must be odd for same-padding, got {kernel}"
                    )));
                }
                Layer::Conv1d {
                    w: b.weight(
                        format!("{at}.w"),
                        &[*kernel, *channels_in, *filters],
                        kernel * channels_in,
                        kernel * filters,
                    ),
                    b: b.bias(format!("{at}.b"), *filters),
                    channels_in: *channels_in,
                    filters: *filters,
                    kernel: *kernel,
                    act: *activation,
                }
            }
            LayerSpec::ResidualBlock { channels, kernel } => {
                check_pos(&at, &[("channels", *channels), ("kernel", *kernel)])?;
                let fan = kernel * channels;
                Layer::Residual {
                    w1: b.weight(format!("{at}.w1"), &[*kernel, *channels, *channels], fan, fan),
                    b1: b.bias(format!("{at}.b1"), *channels),
                    w2: b.weight(format!("{at}.w2"), &[*kernel, *channels, *channels], fan, fan),
                    b2: b.bias(format!("{at}.b2"), *channels),
                    channels: *channels,
                    kernel: *kernel,
                }
            }
            LayerSpec::GlobalMaxPool => Layer::GlobalMaxPool,
            LayerSpec::Dense {
                input,
                output,
                activation,
            } => {
                check_pos(&at, &[("input", *input), ("output", *output)])?;
                Layer::Dense {
                    w: b.weight(format!("{at}.w"), &[*input, *output], *input, *output),
                    b: b.bias(format!("{at}.b"), *output),
                    input: *input,
                    output: *output,
                    act: *activation,
                }
            }
            LayerSpec::Activation { activation } => Layer::ActivationOnly { act: *activation },
            LayerSpec::ConcatFlatten { branches } => {
                let mut built = Vec::with_capacity(branches.len());
                for (j, branch) in branches.iter().enumerate() {
                    built.push(build_layers(branch, &format!("{at}.b{j}."), b)?);
                }
                Layer::Parallel { branches: built }
            }
        };
        layers.push(layer);
    }
    Ok(layers)
}

fn check_pos(at: &str, fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(Error::InvalidConfig(format!("{at}: {name} must be positive")));
        }
    }
    Ok(())
}

impl ModelGraph {
    /// Build a model with freshly initialized weights (Glorot uniform, seeded).
    pub fn from_specs(
        specs: &[LayerSpec],
        head_marker: usize,
        input: InputSig,
        init_seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(init_seed);
        Self::build(specs, head_marker, input, Some(&mut rng))
    }

    /// Build with all-zero weights (deserializer installs real values after).
    pub(super) fn from_specs_zeroed(
        specs: &[LayerSpec],
        head_marker: usize,
        input: InputSig,
    ) -> Result<Self> {
        Self::build(specs, head_marker, input, None)
    }

    fn build(
        specs: &[LayerSpec],
        head_marker: usize,
        input: InputSig,
        rng: Option<&mut rand_chacha::ChaCha12Rng>,
    ) -> Result<Self> {
        if head_marker > specs.len() {
            return Err(Error::InvalidConfig(format!(
                "head marker {head_marker} beyond {} layers",
                specs.len()
            )));
        }
        let mut store = WeightStore::default();
        let layers = build_layers(specs, "", &mut Builder { store: &mut store, rng })?;
        let graph = ModelGraph {
            layers,
            store,
            head_marker,
            input,
        };
        graph.infer_flow()?; // validate layer chaining
        Ok(graph)
    }

    pub fn input_sig(&self) -> InputSig {
        self.input
    }

    pub fn head_marker(&self) -> usize {
        self.head_marker
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut WeightStore {
        &mut self.store
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// The ordered architecture description (weights not included).
    pub fn specs(&self) -> Vec<LayerSpec> {
        specs_of(&self.layers, &self.store)
    }

    /// Stable digest over the ordered layer list; used to validate that a
    /// weight file belongs to a model.
    pub fn arch_hash(&self) -> String {
        arch_hash_of(&self.specs())
    }

    /// Width of the flat output (errors if the model ends in sequence form).
    pub fn output_width(&self) -> Result<usize> {
        match self.infer_flow()? {
            Flow::Flat { width } => Ok(width),
            Flow::Seq { .. } => Err(Error::ShapeMismatch(
                "model output is a sequence, not a flat vector".into(),
            )),
        }
    }

    fn infer_flow(&self) -> Result<Flow> {
        infer_flow(&self.specs(), self.input.width, self.takes_codes())
    }

    /// Whether the first layer consumes encoded domains (vs. flat features).
    pub fn takes_codes(&self) -> bool {
        matches!(
            self.layers.first(),
            Some(Layer::Embedding { .. }) | Some(Layer::Parallel { .. })
        )
    }

    // -- forward ------------------------------------------------------------

    /// Forward pass to output probabilities; requires an output width of 1.
    pub fn forward(&self, batch: &EncodedBatch) -> Result<Vec<f64>> {
        let out = self.forward_tensor(batch)?;
        if out.shape().last() != Some(&1) {
            return Err(Error::ShapeMismatch(format!(
                "probability output expects width 1, model yields {:?}",
                out.shape()
            )));
        }
        Ok(out.data().to_vec())
    }

    /// Forward pass returning the raw output tensor (e.g. extractor features).
    pub fn forward_tensor(&self, batch: &EncodedBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let (out, _) = run_layers(&self.layers, &self.store, Input::Codes(batch), false)?;
        Ok(out)
    }

    /// Forward pass for head-part models that consume flat feature vectors.
    pub fn forward_features(&self, features: &Tensor) -> Result<Tensor> {
        if self.takes_codes() {
            return Err(Error::ShapeMismatch(
                "model consumes encoded domains, not features".into(),
            ));
        }
        let (out, _) = run_layers(&self.layers, &self.store, Input::Flat(features), false)?;
        Ok(out)
    }

    /// Forward pass that records the tape needed for [`ModelGraph::backward`].
    pub fn forward_with_tape(&self, batch: &EncodedBatch) -> Result<(Tensor, Tape)> {
        self.check_batch(batch)?;
        let (out, tape) = run_layers(&self.layers, &self.store, Input::Codes(batch), true)?;
        Ok((out, tape.expect("tape requested")))
    }

    pub fn forward_features_with_tape(&self, features: &Tensor) -> Result<(Tensor, Tape)> {
        if self.takes_codes() {
            return Err(Error::ShapeMismatch(
                "model consumes encoded domains, not features".into(),
            ));
        }
        let (out, tape) = run_layers(&self.layers, &self.store, Input::Flat(features), true)?;
        Ok((out, tape.expect("tape requested")))
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if !self.takes_codes() {
            return Err(Error::ShapeMismatch(
                "model consumes flat features, not encoded domains".into(),
            ));
        }
        if batch.width != self.input.width {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} != model input length {}",
                batch.width, self.input.width
            )));
        }
        let vocab = self.input.vocab as u16;
        if let Some(bad) = batch.codes.iter().find(|&&c| c >= vocab) {
            return Err(Error::ShapeMismatch(format!(
                "code {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(())
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from `grad_out` (d loss / d output). One gradient tensor
    /// per trainable weight; frozen weights receive no entry.
    pub fn backward(&self, batch: &EncodedBatch, tape: &Tape, grad_out: &Tensor) -> GradStore {
        let mut grads = GradStore::for_store(&self.store);
        backward_layers(
            &self.layers,
            &self.store,
            Input::Codes(batch),
            tape,
            grad_out.clone(),
            &mut grads,
        );
        grads
    }

    pub fn backward_features(&self, features: &Tensor, tape: &Tape, grad_out: &Tensor) -> GradStore {
        let mut grads = GradStore::for_store(&self.store);
        backward_layers(
            &self.layers,
            &self.store,
            Input::Flat(features),
            tape,
            grad_out.clone(),
            &mut grads,
        );
        grads
    }

    // -- composition --------------------------------------------------------

    /// Split at the head marker into (feature extractor, classification head).
    /// The head consumes the extractor's flat feature output.
    pub fn split_at_marker(&self) -> Result<(ModelGraph, ModelGraph)> {
        if self.head_marker == 0 || self.head_marker >= self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "head marker {} does not split {} layers",
                self.head_marker,
                self.layers.len()
            )));
        }
        let specs = self.specs();
        let (ext_specs, head_specs) = specs.split_at(self.head_marker);

        let extractor = self.rebuild_part(ext_specs, 0, ext_specs.len(), self.input)?;
        let feat_width = match infer_flow(ext_specs, self.input.width, true)? {
            Flow::Flat { width } => width,
            Flow::Seq { .. } => {
                return Err(Error::ShapeMismatch(
                    "extractor part must end in a flat feature vector".into(),
                ))
            }
        };
        let head_sig = InputSig {
            width: feat_width,
            vocab: 0,
            tag: self.input.tag,
        };
        let head = self.rebuild_part(head_specs, self.head_marker, 0, head_sig)?;
        Ok((extractor, head))
    }

    /// Copy the layer range starting at `src_offset` into a fresh graph,
    /// carrying weights over. Names are recomputed from the new positions.
    fn rebuild_part(
        &self,
        part_specs: &[LayerSpec],
        src_offset: usize,
        head_marker: usize,
        input: InputSig,
    ) -> Result<ModelGraph> {
        let mut part = ModelGraph::from_specs_zeroed(part_specs, head_marker, input)?;
        // Traversal order of a spec sublist matches the source store segment.
        let src_range = store_range(&self.layers, &self.store, src_offset, part_specs.len());
        for (dst_idx, src_idx) in src_range.into_iter().enumerate() {
            let src = self.store.entry(src_idx);
            part.store.entries[dst_idx].tensor = src.tensor.clone();
            part.store.entries[dst_idx].trainable = src.trainable;
        }
        Ok(part)
    }

    /// Stitch an extractor and a head back into a single model. Inverse of
    /// [`ModelGraph::split_at_marker`]: hashes and outputs match the original.
    pub fn concat_parts(extractor: &ModelGraph, head: &ModelGraph) -> Result<ModelGraph> {
        if extractor.input.tag != head.input.tag {
            return Err(Error::EncodingMismatch(
                "extractor and head carry different encoding tags".into(),
            ));
        }
        let mut specs = extractor.specs();
        let marker = specs.len();
        specs.extend(head.specs());
        let mut graph = ModelGraph::from_specs_zeroed(&specs, marker, extractor.input)?;
        let n_ext = extractor.store.len();
        for (i, src) in extractor.store.entries.iter().enumerate() {
            graph.store.entries[i].tensor = src.tensor.clone();
            graph.store.entries[i].trainable = src.trainable;
        }
        for (i, src) in head.store.entries.iter().enumerate() {
            graph.store.entries[n_ext + i].tensor = src.tensor.clone();
            graph.store.entries[n_ext + i].trainable = src.trainable;
        }
        Ok(graph)
    }

    /// Compose extractors in parallel under a fresh sigmoid head. Extractor
    /// weights are copied in frozen; the head is initialized from `head_seed`.
    pub fn parallel_compose(extractors: &[ModelGraph], head_seed: u64) -> Result<ModelGraph> {
        if extractors.is_empty() {
            return Err(Error::EmptyInput("no extractors to combine".into()));
        }
        let sig = extractors[0].input;
        let mut widths = Vec::with_capacity(extractors.len());
        for (i, ext) in extractors.iter().enumerate() {
            if ext.input != sig {
                return Err(Error::EncodingMismatch(format!(
                    "extractor {i} input contract {:?} != {:?}",
                    ext.input, sig
                )));
            }
            if !ext.takes_codes() {
                return Err(Error::ShapeMismatch(format!(
                    "extractor {i} does not consume encoded domains"
                )));
            }
            widths.push(ext.output_width()?);
        }
        let total: usize = widths.iter().sum();
        let specs = vec![
            LayerSpec::ConcatFlatten {
                branches: extractors.iter().map(|e| e.specs()).collect(),
            },
            LayerSpec::Dense {
                input: total,
                output: 1,
                activation: Activation::Sigmoid,
            },
        ];
        let mut graph = ModelGraph::from_specs(&specs, 1, sig, head_seed)?;
        // Overwrite branch weights with the trained extractor values, frozen.
        let mut dst = 0;
        for ext in extractors {
            for src in ext.store.entries.iter() {
                graph.store.entries[dst].tensor = src.tensor.clone();
                graph.store.entries[dst].trainable = false;
                dst += 1;
            }
        }
        debug_assert_eq!(graph.store.len(), dst + 2); // dense w + b remain
        Ok(graph)
    }

    /// Mark every weight below the head marker as frozen.
    pub fn freeze_extractor(&mut self) {
        let frozen = store_range(&self.layers, &self.store, 0, self.head_marker);
        for idx in frozen {
            self.store.entries[idx].trainable = false;
        }
    }
}

/// Store indices used by `count` layers starting at `offset` (in traversal
/// order, matching `build_layers`).
fn store_range(layers: &[Layer], _store: &WeightStore, offset: usize, count: usize) -> Vec<usize> {
    fn collect(layer: &Layer, out: &mut Vec<usize>) {
        match layer {
            Layer::Embedding { table, .. } => out.push(*table),
            Layer::Lstm { wx, wh, b, .. } => out.extend([*wx, *wh, *b]),
            Layer::Conv1d { w, b, .. } => out.extend([*w, *b]),
            Layer::Residual { w1, b1, w2, b2, .. } => out.extend([*w1, *b1, *w2, *b2]),
            Layer::Dense { w, b, .. } => out.extend([*w, *b]),
            Layer::GlobalMaxPool | Layer::ActivationOnly { .. } => {}
            Layer::Parallel { branches } => {
                for branch in branches {
                    for l in branch {
                        collect(l, out);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for layer in &layers[offset..offset + count] {
        collect(layer, &mut out);
    }
    out
}

fn specs_of(layers: &[Layer], store: &WeightStore) -> Vec<LayerSpec> {
    layers
        .iter()
        .map(|l| match l {
            Layer::Embedding { vocab, dim, .. } => LayerSpec::Embedding {
                vocab: *vocab,
                dim: *dim,
            },
            Layer::Lstm { input, hidden, .. } => LayerSpec::RecurrentCell {
                input: *input,
                hidden: *hidden,
            },
            Layer::Conv1d {
                channels_in,
                filters,
                kernel,
                act,
                ..
            } => LayerSpec::Conv1d {
                channels_in: *channels_in,
                filters: *filters,
                kernel: *kernel,
                activation: *act,
            },
            Layer::Residual {
                channels, kernel, ..
            } => LayerSpec::ResidualBlock {
                channels: *channels,
                kernel: *kernel,
            },
            Layer::GlobalMaxPool => LayerSpec::GlobalMaxPool,
            Layer::Dense {
                input, output, act, ..
            } => LayerSpec::Dense {
                input: *input,
                output: *output,
                activation: *act,
            },
            Layer::ActivationOnly { act } => LayerSpec::Activation { activation: *act },
            Layer::Parallel { branches } => LayerSpec::ConcatFlatten {
                branches: branches.iter().map(|br| specs_of(br, store)).collect(),
            },
        })
        .collect()
}

pub(super) fn arch_hash_of(specs: &[LayerSpec]) -> String {
    let json = serde_json::to_string(specs).expect("layer specs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn infer_flow(specs: &[LayerSpec], input_width: usize, takes_codes: bool) -> Result<Flow> {
    let mut flow = if takes_codes {
        None // not yet embedded
    } else {
        Some(Flow::Flat { width: input_width })
    };
    for (i, spec) in specs.iter().enumerate() {
        let err = |msg: &str| Error::ShapeMismatch(format!("layer {i}: {msg}"));
        flow = Some(match (spec, flow) {
            (LayerSpec::Embedding { dim, .. }, None) => Flow::Seq { channels: *dim },
            (LayerSpec::Embedding { .. }, Some(_)) => {
                return Err(err("embedding must be the first layer"))
            }
            (LayerSpec::RecurrentCell { input, hidden }, Some(Flow::Seq { channels }))
                if channels == *input =>
            {
                Flow::Flat { width: *hidden }
            }
            (LayerSpec::RecurrentCell { .. }, _) => {
                return Err(err("recurrent cell needs a matching sequence input"))
            }
            (
                LayerSpec::Conv1d {
                    channels_in,
                    filters,
                    ..
                },
                Some(Flow::Seq { channels }),
            ) if channels == *channels_in => Flow::Seq { channels: *filters },
            (LayerSpec::Conv1d { .. }, _) => {
                return Err(err("conv1d needs a matching sequence input"))
            }
            (LayerSpec::ResidualBlock { channels, .. }, Some(Flow::Seq { channels: c }))
                if c == *channels =>
            {
                Flow::Seq { channels: *channels }
            }
            (LayerSpec::ResidualBlock { .. }, _) => {
                return Err(err("residual block needs a matching sequence input"))
            }
            (LayerSpec::GlobalMaxPool, Some(Flow::Seq { channels })) => {
                Flow::Flat { width: channels }
            }
            (LayerSpec::GlobalMaxPool, _) => return Err(err("pool needs a sequence input")),
            (LayerSpec::Dense { input, output, .. }, Some(Flow::Flat { width }))
                if width == *input =>
            {
                Flow::Flat { width: *output }
            }
            (LayerSpec::Dense { .. }, _) => return Err(err("dense needs a matching flat input")),
            (LayerSpec::Activation { .. }, Some(f)) => f,
            (LayerSpec::Activation { .. }, None) => {
                return Err(err("activation cannot be the first layer on codes"))
            }
            (LayerSpec::ConcatFlatten { branches }, None) => {
                let mut total = 0;
                for (j, branch) in branches.iter().enumerate() {
                    match infer_flow(branch, input_width, true)? {
                        Flow::Flat { width } => total += width,
                        Flow::Seq { .. } => {
                            return Err(err(&format!("branch {j} must end flat")))
                        }
                    }
                }
                Flow::Flat { width: total }
            }
            (LayerSpec::ConcatFlatten { .. }, Some(_)) => {
                return Err(err("concat-flatten must be the first layer"))
            }
        });
    }
    flow.ok_or_else(|| Error::ShapeMismatch("empty layer list".into()))
}

// ---------------------------------------------------------------------------
// forward / backward over a layer list

fn run_layers(
    layers: &[Layer],
    store: &WeightStore,
    input: Input,
    want_tape: bool,
) -> Result<(Tensor, Option<Tape>)> {
    let mut tape = want_tape.then(|| Tape {
        outputs: Vec::with_capacity(layers.len()),
        extras: Vec::with_capacity(layers.len()),
    });
    let batch = match &input {
        Input::Codes(b) => Some(*b),
        Input::Flat(_) => None,
    };
    let mut current: Option<Tensor> = match input {
        Input::Codes(_) => None,
        Input::Flat(t) => Some(t.clone()),
    };

    for layer in layers {
        let (out, extra) = match layer {
            Layer::Embedding { table, dim, .. } => {
                let b = batch.ok_or_else(|| {
                    Error::ShapeMismatch("embedding layer needs encoded input".into())
                })?;
                (embedding_forward(store.tensor(*table), b, *dim), TapeExtra::None)
            }
            Layer::Lstm {
                wx,
                wh,
                b: bias,
                input: in_dim,
                hidden,
            } => {
                let x = current.as_ref().expect("lstm input");
                let (h, extra) = lstm_forward(
                    x,
                    store.tensor(*wx),
                    store.tensor(*wh),
                    store.tensor(*bias),
                    *in_dim,
                    *hidden,
                    want_tape,
                );
                (h, extra)
            }
            Layer::Conv1d {
                w,
                b: bias,
                channels_in,
                filters,
                kernel,
                act,
            } => {
                let x = current.as_ref().expect("conv input");
                let out = conv1d_forward(
                    x,
                    store.tensor(*w),
                    store.tensor(*bias),
                    *channels_in,
                    *filters,
                    *kernel,
                    *act,
                );
                (out, TapeExtra::None)
            }
            Layer::Residual {
                w1,
                b1,
                w2,
                b2,
                channels,
                kernel,
            } => {
                let x = current.as_ref().expect("residual input");
                let mid = conv1d_forward(
                    x,
                    store.tensor(*w1),
                    store.tensor(*b1),
                    *channels,
                    *channels,
                    *kernel,
                    Activation::Relu,
                );
                let mut out = conv1d_forward(
                    &mid,
                    store.tensor(*w2),
                    store.tensor(*b2),
                    *channels,
                    *channels,
                    *kernel,
                    Activation::Identity,
                );
                for (o, xi) in out.data_mut().iter_mut().zip(x.data()) {
                    *o += xi;
                }
                (out, TapeExtra::Residual { mid })
            }
            Layer::GlobalMaxPool => {
                let x = current.as_ref().expect("pool input");
                let (out, argmax) = maxpool_forward(x);
                (out, TapeExtra::Pool { argmax })
            }
            Layer::Dense {
                w,
                b: bias,
                input: in_dim,
                output,
                act,
            } => {
                let x = current.as_ref().expect("dense input");
                let out = dense_forward(x, store.tensor(*w), store.tensor(*bias), *in_dim, *output, *act);
                (out, TapeExtra::None)
            }
            Layer::ActivationOnly { act } => {
                let x = current.as_ref().expect("activation input");
                let mut out = x.clone();
                for v in out.data_mut() {
                    *v = act.apply(*v);
                }
                (out, TapeExtra::None)
            }
            Layer::Parallel { branches } => {
                let b = batch.ok_or_else(|| {
                    Error::ShapeMismatch("parallel branches need encoded input".into())
                })?;
                let mut outs = Vec::with_capacity(branches.len());
                let mut tapes = Vec::with_capacity(branches.len());
                for branch in branches {
                    let need = want_tape && branch_has_trainable(branch, store);
                    let (o, t) = run_layers(branch, store, Input::Codes(b), need)?;
                    outs.push(o);
                    tapes.push(t);
                }
                let out = concat_flat(&outs);
                (out, TapeExtra::Parallel { tapes })
            }
        };
        if let Some(t) = tape.as_mut() {
            t.outputs.push(out.clone());
            t.extras.push(extra);
        }
        current = Some(out);
    }
    let out = current.ok_or_else(|| Error::ShapeMismatch("empty layer list".into()))?;
    Ok((out, tape))
}

fn branch_has_trainable(branch: &[Layer], store: &WeightStore) -> bool {
    store_range(branch, store, 0, branch.len())
        .into_iter()
        .any(|i| store.entry(i).trainable)
}

fn backward_layers(
    layers: &[Layer],
    store: &WeightStore,
    input: Input,
    tape: &Tape,
    grad_out: Tensor,
    grads: &mut GradStore,
) {
    let batch = match &input {
        Input::Codes(b) => Some(*b),
        Input::Flat(_) => None,
    };
    let mut grad = grad_out;
    for (i, layer) in layers.iter().enumerate().rev() {
        let layer_input: Option<&Tensor> = if i == 0 {
            match &input {
                Input::Codes(_) => None,
                Input::Flat(t) => Some(t),
            }
        } else {
            Some(&tape.outputs[i - 1])
        };
        let output = &tape.outputs[i];
        grad = match layer {
            Layer::Embedding { table, dim, .. } => {
                let b = batch.expect("embedding input");
                if let Some(gt) = grads.slot_mut(*table) {
                    embedding_backward(gt, b, *dim, &grad);
                }
                return; // nothing below the embedding
            }
            Layer::Lstm {
                wx,
                wh,
                b: bias,
                input: in_dim,
                hidden,
            } => {
                let TapeExtra::Lstm { hs, cs, gates, tanh_c } = &tape.extras[i] else {
                    panic!("lstm tape entry missing");
                };
                lstm_backward(
                    layer_input.expect("lstm input"),
                    store.tensor(*wx),
                    store.tensor(*wh),
                    hs,
                    cs,
                    gates,
                    tanh_c,
                    *in_dim,
                    *hidden,
                    &grad,
                    grads.slot_is_some(*wx).then_some(*wx),
                    grads.slot_is_some(*wh).then_some(*wh),
                    grads.slot_is_some(*bias).then_some(*bias),
                    grads,
                )
            }
            Layer::Conv1d {
                w,
                b: bias,
                channels_in,
                filters,
                kernel,
                act,
            } => conv1d_backward(
                layer_input.expect("conv input"),
                output,
                store.tensor(*w),
                *channels_in,
                *filters,
                *kernel,
                *act,
                &grad,
                *w,
                *bias,
                grads,
            ),
            Layer::Residual {
                w1,
                b1,
                w2,
                b2,
                channels,
                kernel,
            } => {
                let TapeExtra::Residual { mid } = &tape.extras[i] else {
                    panic!("residual tape entry missing");
                };
                let x = layer_input.expect("residual input");
                // out = x + conv2(mid); conv2 is linear.
                // Reconstruct conv2's output activation implicitly: identity
                // backward never consults the output values.
                let dmid = conv1d_backward(
                    mid,
                    output, // unused by identity derivative
                    store.tensor(*w2),
                    *channels,
                    *channels,
                    *kernel,
                    Activation::Identity,
                    &grad,
                    *w2,
                    *b2,
                    grads,
                );
                let mut dx = conv1d_backward(
                    x,
                    mid,
                    store.tensor(*w1),
                    *channels,
                    *channels,
                    *kernel,
                    Activation::Relu,
                    &dmid,
                    *w1,
                    *b1,
                    grads,
                );
                for (dv, gv) in dx.data_mut().iter_mut().zip(grad.data()) {
                    *dv += gv; // skip connection
                }
                dx
            }
            Layer::GlobalMaxPool => {
                let TapeExtra::Pool { argmax } = &tape.extras[i] else {
                    panic!("pool tape entry missing");
                };
                maxpool_backward(layer_input.expect("pool input").shape(), argmax, &grad)
            }
            Layer::Dense {
                w,
                b: bias,
                input: in_dim,
                output: out_dim,
                act,
            } => dense_backward(
                layer_input.expect("dense input"),
                output,
                store.tensor(*w),
                *in_dim,
                *out_dim,
                *act,
                &grad,
                *w,
                *bias,
                grads,
            ),
            Layer::ActivationOnly { act } => {
                let mut g = grad;
                for (gv, y) in g.data_mut().iter_mut().zip(output.data()) {
                    *gv *= act.derive_from_output(*y);
                }
                g
            }
            Layer::Parallel { branches } => {
                let TapeExtra::Parallel { tapes } = &tape.extras[i] else {
                    panic!("parallel tape entry missing");
                };
                let b = batch.expect("parallel input");
                let rows = b.rows;
                let total = grad.len() / rows;
                let mut offset = 0;
                for (branch, branch_tape) in branches.iter().zip(tapes) {
                    let width = branch_tape
                        .as_ref()
                        .map(|t| t.outputs.last().unwrap().len() / rows)
                        .unwrap_or_else(|| {
                            infer_flow(&specs_of(branch, store), b.width, true)
                                .map(|f| match f {
                                    Flow::Flat { width } => width,
                                    Flow::Seq { .. } => 0,
                                })
                                .unwrap_or(0)
                        });
                    if let Some(branch_tape) = branch_tape {
                        let mut slice = Tensor::zeros(&[rows, width]);
                        for r in 0..rows {
                            let src = &grad.data()[r * total + offset..r * total + offset + width];
                            slice.data_mut()[r * width..(r + 1) * width].copy_from_slice(src);
                        }
                        backward_layers(
                            branch,
                            store,
                            Input::Codes(b),
                            branch_tape,
                            slice,
                            grads,
                        );
                    }
                    offset += width;
                }
                return; // parallel sits at the bottom of the stack
            }
        };
    }
}

// ---------------------------------------------------------------------------
// layer math

fn embedding_forward(table: &Tensor, batch: &EncodedBatch, dim: usize) -> Tensor {
    let (rows, width) = (batch.rows, batch.width);
    let mut out = Tensor::zeros(&[rows, width, dim]);
    let t = table.data();
    let o = out.data_mut();
    for r in 0..rows {
        let codes = batch.row(r);
        for (pos, &code) in codes.iter().enumerate() {
            let src = &t[code as usize * dim..(code as usize + 1) * dim];
            let dst_base = (r * width + pos) * dim;
            o[dst_base..dst_base + dim].copy_from_slice(src);
        }
    }
    out
}

fn embedding_backward(grad_table: &mut Tensor, batch: &EncodedBatch, dim: usize, grad_out: &Tensor) {
    let (rows, width) = (batch.rows, batch.width);
    let g = grad_out.data();
    let gt = grad_table.data_mut();
    for r in 0..rows {
        let codes = batch.row(r);
        for (pos, &code) in codes.iter().enumerate() {
            let src_base = (r * width + pos) * dim;
            let dst = &mut gt[code as usize * dim..(code as usize + 1) * dim];
            for (d, s) in dst.iter_mut().zip(&g[src_base..src_base + dim]) {
                *d += s;
            }
        }
    }
}

/// `c[r,:] += a[r,:] @ w` with `a: [rows,k]`, `w: [k,n]`.
#[inline]
fn matmul_acc(a: &[f64], w: &[f64], c: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let crow = &mut c[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wrow = &w[i * n..(i + 1) * n];
            for (cv, &wv) in crow.iter_mut().zip(wrow) {
                *cv += av * wv;
            }
        }
    }
}

/// `da[r,i] += sum_j dc[r,j] * w[i,j]`.
#[inline]
fn matmul_grad_input(dc: &[f64], w: &[f64], da: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let dcrow = &dc[r * n..(r + 1) * n];
        let darow = &mut da[r * k..(r + 1) * k];
        for i in 0..k {
            let wrow = &w[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (dcv, wv) in dcrow.iter().zip(wrow) {
                acc += dcv * wv;
            }
            darow[i] += acc;
        }
    }
}

/// `dw[i,j] += sum_r a[r,i] * dc[r,j]`.
#[inline]
fn matmul_grad_weight(a: &[f64], dc: &[f64], dw: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let dcrow = &dc[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dwrow = &mut dw[i * n..(i + 1) * n];
            for (dwv, &dcv) in dwrow.iter_mut().zip(dcrow) {
                *dwv += av * dcv;
            }
        }
    }
}

fn dense_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
) -> Tensor {
    let rows = x.len() / in_dim;
    let mut out = Tensor::zeros(&[rows, out_dim]);
    {
        let o = out.data_mut();
        for r in 0..rows {
            o[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
        }
        matmul_acc(x.data(), w.data(), o, rows, in_dim, out_dim);
        for v in o.iter_mut() {
            *v = act.apply(*v);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &Tensor,
    y: &Tensor,
    w: &Tensor,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
    grad_out: &Tensor,
    w_idx: usize,
    b_idx: usize,
    grads: &mut GradStore,
) -> Tensor {
    let rows = x.len() / in_dim;
    // dz = grad_out ⊙ act'(y)
    let mut dz = grad_out.clone();
    for (g, yv) in dz.data_mut().iter_mut().zip(y.data()) {
        *g *= act.derive_from_output(*yv);
    }
    if let Some(gw) = grads.slot_mut(w_idx) {
        matmul_grad_weight(x.data(), dz.data(), gw.data_mut(), rows, in_dim, out_dim);
    }
    if let Some(gb) = grads.slot_mut(b_idx) {
        let gbd = gb.data_mut();
        for r in 0..rows {
            for (j, g) in gbd.iter_mut().enumerate() {
                *g += dz.data()[r * out_dim + j];
            }
        }
    }
    let mut dx = Tensor::zeros(&[rows, in_dim]);
    matmul_grad_input(dz.data(), w.data(), dx.data_mut(), rows, in_dim, out_dim);
    dx
}

fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    c_in: usize,
    filters: usize,
    kernel: usize,
    act: Activation,
) -> Tensor {
    let shape = x.shape();
    let (rows, len) = (shape[0], shape[1]);
    let pad = (kernel - 1) / 2;
    let mut out = Tensor::zeros(&[rows, len, filters]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for r in 0..rows {
        let xrow = &xd[r * len * c_in..(r + 1) * len * c_in];
        let orow = &mut od[r * len * filters..(r + 1) * len * filters];
        for t in 0..len {
            let dst = &mut orow[t * filters..(t + 1) * filters];
            dst.copy_from_slice(bd);
            for d in 0..kernel {
                let src_t = t + d;
                if src_t < pad || src_t - pad >= len {
                    continue; // zero padding
                }
                let src = &xrow[(src_t - pad) * c_in..(src_t - pad + 1) * c_in];
                let wk = &wd[d * c_in * filters..(d + 1) * c_in * filters];
                for (c, &xv) in src.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wk[c * filters..(c + 1) * filters];
                    for (dv, &wv) in dst.iter_mut().zip(wrow) {
                        *dv += xv * wv;
                    }
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = act.apply(*v);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &Tensor,
    y: &Tensor,
    w: &Tensor,
    c_in: usize,
    filters: usize,
    kernel: usize,
    act: Activation,
    grad_out: &Tensor,
    w_idx: usize,
    b_idx: usize,
    grads: &mut GradStore,
) -> Tensor {
    let shape = x.shape();
    let (rows, len) = (shape[0], shape[1]);
    let pad = (kernel - 1) / 2;
    let mut dz = grad_out.clone();
    if act != Activation::Identity {
        for (g, yv) in dz.data_mut().iter_mut().zip(y.data()) {
            *g *= act.derive_from_output(*yv);
        }
    }
    let dzd = dz.data();
    let xd = x.data();
    if let Some(gb) = grads.slot_mut(b_idx) {
        let gbd = gb.data_mut();
        for chunk in dzd.chunks_exact(filters) {
            for (g, &d) in gbd.iter_mut().zip(chunk) {
                *g += d;
            }
        }
    }
    if let Some(gw) = grads.slot_mut(w_idx) {
        let gwd = gw.data_mut();
        for r in 0..rows {
            let xrow = &xd[r * len * c_in..(r + 1) * len * c_in];
            let dzrow = &dzd[r * len * filters..(r + 1) * len * filters];
            for t in 0..len {
                let dst = &dzrow[t * filters..(t + 1) * filters];
                for d in 0..kernel {
                    let src_t = t + d;
                    if src_t < pad || src_t - pad >= len {
                        continue;
                    }
                    let src = &xrow[(src_t - pad) * c_in..(src_t - pad + 1) * c_in];
                    let gk = &mut gwd[d * c_in * filters..(d + 1) * c_in * filters];
                    for (c, &xv) in src.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let grow = &mut gk[c * filters..(c + 1) * filters];
                        for (gv, &dv) in grow.iter_mut().zip(dst) {
                            *gv += xv * dv;
                        }
                    }
                }
            }
        }
    }
    let mut dx = Tensor::zeros(&[rows, len, c_in]);
    {
        let dxd = dx.data_mut();
        let wd = w.data();
        for r in 0..rows {
            let dzrow = &dzd[r * len * filters..(r + 1) * len * filters];
            let dxrow = &mut dxd[r * len * c_in..(r + 1) * len * c_in];
            for t in 0..len {
                let dst = &dzrow[t * filters..(t + 1) * filters];
                for d in 0..kernel {
                    let src_t = t + d;
                    if src_t < pad || src_t - pad >= len {
                        continue;
                    }
                    let dxc = &mut dxrow[(src_t - pad) * c_in..(src_t - pad + 1) * c_in];
                    let wk = &wd[d * c_in * filters..(d + 1) * c_in * filters];
                    for (c, dv) in dxc.iter_mut().enumerate() {
                        let wrow = &wk[c * filters..(c + 1) * filters];
                        let mut acc = 0.0;
                        for (&g, &wv) in dst.iter().zip(wrow) {
                            acc += g * wv;
                        }
                        *dv += acc;
                    }
                }
            }
        }
    }
    dx
}

fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let shape = x.shape();
    let (rows, len, ch) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[rows, ch]);
    let mut argmax = vec![0u32; rows * ch];
    let xd = x.data();
    let od = out.data_mut();
    for r in 0..rows {
        let xrow = &xd[r * len * ch..(r + 1) * len * ch];
        let orow = &mut od[r * ch..(r + 1) * ch];
        let arow = &mut argmax[r * ch..(r + 1) * ch];
        orow.copy_from_slice(&xrow[..ch]);
        for t in 1..len {
            let slice = &xrow[t * ch..(t + 1) * ch];
            for (c, &v) in slice.iter().enumerate() {
                if v > orow[c] {
                    orow[c] = v;
                    arow[c] = t as u32;
                }
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward(in_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let (rows, _len, ch) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    let g = grad_out.data();
    for r in 0..rows {
        for c in 0..ch {
            let t = argmax[r * ch + c] as usize;
            dxd[(r * in_shape[1] + t) * ch + c] += g[r * ch + c];
        }
    }
    dx
}

fn lstm_forward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    in_dim: usize,
    hidden: usize,
    want_tape: bool,
) -> (Tensor, TapeExtra) {
    let shape = x.shape();
    let (rows, len) = (shape[0], shape[1]);
    let h4 = 4 * hidden;
    let mut hs = Tensor::zeros(&[rows, len + 1, hidden]);
    let mut cs = Tensor::zeros(&[rows, len + 1, hidden]);
    let mut gates = Tensor::zeros(&[rows, len, h4]);
    let mut tanh_c = Tensor::zeros(&[rows, len, hidden]);

    let xd = x.data();
    let wxd = wx.data();
    let whd = wh.data();
    let bd = b.data();

    // Running h_{t-1} / c_{t-1}, plus the gate pre-activation scratch.
    let mut h_prev = vec![0.0f64; rows * hidden];
    let mut c_prev = vec![0.0f64; rows * hidden];
    let mut z = vec![0.0f64; rows * h4];

    for t in 0..len {
        for r in 0..rows {
            let zrow = &mut z[r * h4..(r + 1) * h4];
            zrow.copy_from_slice(bd);
            let xrow = &xd[(r * len + t) * in_dim..(r * len + t + 1) * in_dim];
            for (i, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wxd[i * h4..(i + 1) * h4];
                for (zv, &wv) in zrow.iter_mut().zip(wrow) {
                    *zv += xv * wv;
                }
            }
            let hrow = &h_prev[r * hidden..(r + 1) * hidden];
            for (i, &hv) in hrow.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                let wrow = &whd[i * h4..(i + 1) * h4];
                for (zv, &wv) in zrow.iter_mut().zip(wrow) {
                    *zv += hv * wv;
                }
            }
        }
        let gd = gates.data_mut();
        let hsd = hs.data_mut();
        let csd = cs.data_mut();
        let tcd = tanh_c.data_mut();
        for r in 0..rows {
            let zrow = &z[r * h4..(r + 1) * h4];
            let gate_base = (r * len + t) * h4;
            let step_base = (r * len + t) * hidden;
            let state_base = (r * (len + 1) + t + 1) * hidden;
            for j in 0..hidden {
                let i_g = Activation::Sigmoid.apply(zrow[j]);
                let f_g = Activation::Sigmoid.apply(zrow[hidden + j]);
                let g_g = zrow[2 * hidden + j].tanh();
                let o_g = Activation::Sigmoid.apply(zrow[3 * hidden + j]);
                gd[gate_base + j] = i_g;
                gd[gate_base + hidden + j] = f_g;
                gd[gate_base + 2 * hidden + j] = g_g;
                gd[gate_base + 3 * hidden + j] = o_g;

                let c = f_g * c_prev[r * hidden + j] + i_g * g_g;
                let tc = c.tanh();
                let h = o_g * tc;
                csd[state_base + j] = c;
                hsd[state_base + j] = h;
                tcd[step_base + j] = tc;
                c_prev[r * hidden + j] = c;
                h_prev[r * hidden + j] = h;
            }
        }
    }

    let out = Tensor::from_vec(&[rows, hidden], h_prev).expect("final hidden shape");
    let extra = if want_tape {
        TapeExtra::Lstm {
            hs,
            cs,
            gates,
            tanh_c,
        }
    } else {
        TapeExtra::None
    };
    (out, extra)
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    hs: &Tensor,
    cs: &Tensor,
    gates: &Tensor,
    tanh_c: &Tensor,
    in_dim: usize,
    hidden: usize,
    grad_h_final: &Tensor,
    wx_idx: Option<usize>,
    wh_idx: Option<usize>,
    b_idx: Option<usize>,
    grads: &mut GradStore,
) -> Tensor {
    let shape = x.shape();
    let (rows, len) = (shape[0], shape[1]);
    let h4 = 4 * hidden;
    let mut dx = Tensor::zeros(&[rows, len, in_dim]);
    let mut dh = grad_h_final.data().to_vec(); // [rows, hidden]
    let mut dc = vec![0.0f64; rows * hidden];
    let mut dz = vec![0.0f64; rows * h4];

    let gd = gates.data();
    let tcd = tanh_c.data();
    let csd = cs.data();
    let hsd = hs.data();
    let xd = x.data();
    let wxd = wx.data();
    let whd = wh.data();

    for t in (0..len).rev() {
        for r in 0..rows {
            let gate_base = (r * len + t) * h4;
            let step_base = (r * len + t) * hidden;
            let c_prev_base = (r * (len + 1) + t) * hidden;
            for j in 0..hidden {
                let i_g = gd[gate_base + j];
                let f_g = gd[gate_base + hidden + j];
                let g_g = gd[gate_base + 2 * hidden + j];
                let o_g = gd[gate_base + 3 * hidden + j];
                let tc = tcd[step_base + j];
                let dh_j = dh[r * hidden + j];

                let do_g = dh_j * tc;
                let dc_j = dc[r * hidden + j] + dh_j * o_g * (1.0 - tc * tc);

                let di = dc_j * g_g;
                let dg = dc_j * i_g;
                let df = dc_j * csd[c_prev_base + j];
                dc[r * hidden + j] = dc_j * f_g; // becomes dc_prev

                dz[r * h4 + j] = di * i_g * (1.0 - i_g);
                dz[r * h4 + hidden + j] = df * f_g * (1.0 - f_g);
                dz[r * h4 + 2 * hidden + j] = dg * (1.0 - g_g * g_g);
                dz[r * h4 + 3 * hidden + j] = do_g * o_g * (1.0 - o_g);
            }
        }
        // Parameter gradients for this step.
        if let Some(bi) = b_idx {
            let gb = grads.slot_mut(bi).unwrap().data_mut();
            for r in 0..rows {
                for j in 0..h4 {
                    gb[j] += dz[r * h4 + j];
                }
            }
        }
        if let Some(wi) = wx_idx {
            let gw = grads.slot_mut(wi).unwrap().data_mut();
            for r in 0..rows {
                let xrow = &xd[(r * len + t) * in_dim..(r * len + t + 1) * in_dim];
                let dzrow = &dz[r * h4..(r + 1) * h4];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[i * h4..(i + 1) * h4];
                    for (gv, &dzv) in grow.iter_mut().zip(dzrow) {
                        *gv += xv * dzv;
                    }
                }
            }
        }
        if let Some(wi) = wh_idx {
            let gw = grads.slot_mut(wi).unwrap().data_mut();
            for r in 0..rows {
                let hrow =
                    &hsd[(r * (len + 1) + t) * hidden..(r * (len + 1) + t + 1) * hidden];
                let dzrow = &dz[r * h4..(r + 1) * h4];
                for (i, &hv) in hrow.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[i * h4..(i + 1) * h4];
                    for (gv, &dzv) in grow.iter_mut().zip(dzrow) {
                        *gv += hv * dzv;
                    }
                }
            }
        }
        // Input and recurrent gradients.
        {
            let dxd = dx.data_mut();
            for r in 0..rows {
                let dzrow = &dz[r * h4..(r + 1) * h4];
                let dxrow = &mut dxd[(r * len + t) * in_dim..(r * len + t + 1) * in_dim];
                for (i, dv) in dxrow.iter_mut().enumerate() {
                    let wrow = &wxd[i * h4..(i + 1) * h4];
                    let mut acc = 0.0;
                    for (&g, &wv) in dzrow.iter().zip(wrow) {
                        acc += g * wv;
                    }
                    *dv += acc;
                }
            }
        }
        for r in 0..rows {
            let dzrow = &dz[r * h4..(r + 1) * h4];
            let dhrow = &mut dh[r * hidden..(r + 1) * hidden];
            for (i, dv) in dhrow.iter_mut().enumerate() {
                let wrow = &whd[i * h4..(i + 1) * h4];
                let mut acc = 0.0;
                for (&g, &wv) in dzrow.iter().zip(wrow) {
                    acc += g * wv;
                }
                *dv = acc; // replaces dh for the previous step
            }
        }
    }
    dx
}

fn concat_flat(outs: &[Tensor]) -> Tensor {
    let rows = outs[0].shape()[0];
    let widths: Vec<usize> = outs.iter().map(|t| t.len() / rows).collect();
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[rows, total]);
    let od = out.data_mut();
    for r in 0..rows {
        let mut offset = 0;
        for (t, &w) in outs.iter().zip(&widths) {
            od[r * total + offset..r * total + offset + w]
                .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            offset += w;
        }
    }
    out
}
