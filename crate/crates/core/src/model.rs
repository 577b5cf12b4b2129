//! Base and hybrid transfer-learning models.
//!
//! A model is a feature extractor (a stack of [`LayerSpec`]s) followed by a
//! dense classifier head ending in softmax. Extractor layers with index below
//! the freeze boundary are frozen. The *base* model freezes the whole
//! extractor and trains one replaced dense layer; the *hybrid* model leaves
//! the top extractor layers trainable and uses a deeper head whose widths
//! shrink step by step down to the class count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Graph, LayerSpec, NodeId, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid extractor: {0}")]
    InvalidExtractor(String),
    #[error("freeze boundary {boundary} outside 0..={len}")]
    BoundaryOutOfRange { boundary: usize, len: usize },
    #[error("bad classifier head: {0}")]
    BadHead(String),
    #[error("feature dimension {feature_dim} cannot be reduced to {num_classes} classes")]
    InvalidDims { feature_dim: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Feature-extractor description: per-sample input shape plus layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extractor {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Extractor {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input_shape, layers }
    }

    /// Validates layer-to-layer shapes and returns the flattened feature width.
    pub fn feature_dim(&self) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(ModelError::InvalidExtractor("no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if *layer == LayerSpec::Softmax {
                return Err(ModelError::InvalidExtractor(format!("layer {i}: softmax belongs to the head")));
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| ModelError::InvalidExtractor(format!("layer {i} ({layer}): {e}")))?;
        }
        Ok(shape.iter().product())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub extractor_layers: Vec<LayerSpec>,
    /// Extractor layers with index below this are frozen.
    pub freeze_boundary: usize,
    /// Dense output widths, last entry equals `num_classes`.
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn extractor(&self) -> Extractor {
        Extractor::new(self.input_shape.clone(), self.extractor_layers.clone())
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.extractor().feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let feature_dim = self.feature_dim()?;
        if self.freeze_boundary > self.extractor_layers.len() {
            return Err(ModelError::BoundaryOutOfRange {
                boundary: self.freeze_boundary,
                len: self.extractor_layers.len(),
            });
        }
        check_head(&self.head_widths, self.num_classes)?;
        debug_assert!(feature_dim > 0);
        Ok(())
    }

    /// Head layers: flatten, dense/relu pairs, final dense and softmax.
    pub fn head_layers(&self) -> Result<Vec<LayerSpec>> {
        let mut width = self.feature_dim()?;
        let mut layers = vec![LayerSpec::Flatten];
        for (j, &w) in self.head_widths.iter().enumerate() {
            layers.push(LayerSpec::dense(width, w));
            if j + 1 < self.head_widths.len() {
                layers.push(LayerSpec::Relu);
            }
            width = w;
        }
        layers.push(LayerSpec::Softmax);
        Ok(layers)
    }

    pub fn is_base(&self) -> bool {
        self.freeze_boundary == self.extractor_layers.len() && self.head_widths == [self.num_classes]
    }
}

fn check_head(widths: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(ModelError::BadHead(format!("need at least 2 classes, got {num_classes}")));
    }
    match widths.last() {
        None => return Err(ModelError::BadHead("empty head".into())),
        Some(&last) if last != num_classes => {
            return Err(ModelError::BadHead(format!("last width {last} differs from {num_classes} classes")))
        }
        _ => {}
    }
    if widths.windows(2).any(|w| w[1] > w[0]) {
        return Err(ModelError::BadHead(format!("widths {widths:?} increase")));
    }
    Ok(())
}

/// Whole extractor frozen, a single trainable dense layer to `num_classes`.
pub fn build_base(extractor: &Extractor, num_classes: usize) -> Result<ModelSpec> {
    extractor.feature_dim()?;
    let spec = ModelSpec {
        input_shape: extractor.input_shape.clone(),
        extractor_layers: extractor.layers.clone(),
        freeze_boundary: extractor.layers.len(),
        head_widths: vec![num_classes],
        num_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Layers below `freeze_boundary` frozen, everything above plus the head trainable.
pub fn build_hybrid(
    extractor: &Extractor,
    freeze_boundary: usize,
    head_widths: &[usize],
    num_classes: usize,
) -> Result<ModelSpec> {
    extractor.feature_dim()?;
    let spec = ModelSpec {
        input_shape: extractor.input_shape.clone(),
        extractor_layers: extractor.layers.clone(),
        freeze_boundary,
        head_widths: head_widths.to_vec(),
        num_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// A small convolutional extractor for `side`×`side` RGB input: a 2×2 input
/// pooling, then three conv/relu/pool blocks of widths 8, 16 and 16.
/// Layer 7 starts the last block, the natural hybrid freeze boundary.
pub fn compact_extractor(side: usize) -> Extractor {
    Extractor::new(
        vec![3, side, side],
        vec![
            LayerSpec::pool(2),
            LayerSpec::conv_padded(3, 8, 3, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::conv_padded(8, 16, 3, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::conv_padded(16, 16, 3, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2),
        ],
    )
}

pub const COMPACT_HYBRID_BOUNDARY: usize = 7;

/// Gradual feature reduction: halve while the result stays above
/// `4 · num_classes`, then finish at `num_classes`.
pub fn default_head(feature_dim: usize, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes < 2 || feature_dim < num_classes {
        return Err(ModelError::InvalidDims { feature_dim, num_classes });
    }
    let mut widths = Vec::new();
    let mut w = feature_dim;
    while w / 2 > 4 * num_classes {
        w /= 2;
        widths.push(w);
    }
    widths.push(num_classes);
    Ok(widths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Extractor,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
struct BuiltLayer {
    spec: LayerSpec,
    params: Vec<ParamId>,
    section: Section,
}

/// A model instance: spec plus initialized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    layers: Vec<BuiltLayer>,
}

impl Model {
    /// Initializes weights uniformly in `±sqrt(6 / fan_in)`, biases at zero.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let head = spec.head_layers()?;
        let all = spec
            .extractor_layers
            .iter()
            .enumerate()
            .map(|(i, l)| (*l, Section::Extractor, i < spec.freeze_boundary, i))
            .chain(head.iter().enumerate().map(|(i, l)| (*l, Section::Head, false, i)));
        for (layer, section, frozen, index) in all {
            let prefix = match section {
                Section::Extractor => "extractor",
                Section::Head => "head",
            };
            let bound = (6.0 / layer.fan_in().max(1) as f64).sqrt();
            let mut ids = Vec::new();
            for (k, shape) in layer.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let (suffix, values) = if k == 0 {
                    ("weight", (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                } else {
                    ("bias", vec![0.0; n])
                };
                let t = Tensor::new(shape, values)?;
                ids.push(params.add(format!("{prefix}.{index}.{suffix}"), t, frozen));
            }
            layers.push(BuiltLayer { spec: layer, params: ids, section });
        }
        Ok(Self { spec, params, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total number of layers, extractor and head together.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of leading layers with no trainable parameter and no trainable
    /// layer below them. Their output depends on the input only.
    pub fn frozen_prefix(&self) -> usize {
        self.spec.freeze_boundary
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.params.trainable_ids()
    }

    /// Runs layers `from..to` on `x` (which must be the output of layer `from - 1`).
    pub fn forward_range(&self, g: &mut Graph, mut x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        for layer in &self.layers[from..to] {
            let p: Vec<NodeId> = layer.params.iter().map(|&id| g.param(self.params.get(id))).collect();
            x = g.layer(&layer.spec, x, &p)?;
        }
        Ok(x)
    }

    /// Class probabilities for a batched input node.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.forward_range(g, x, 0, self.layers.len())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let p = self.forward(&mut g, xn)?;
        Ok(g.value(p).clone())
    }

    /// Output of the first `layers` layers, no gradient recorded.
    pub fn features(&self, x: &Tensor, layers: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let f = self.forward_range(&mut g, xn, 0, layers)?;
        Ok(g.value(f).clone())
    }

    /// Mean cross-entropy of the model on a labelled batch.
    pub fn loss(&self, g: &mut Graph, x: NodeId, one_hot: &Tensor) -> Result<NodeId> {
        let p = self.forward(g, x)?;
        Ok(g.cross_entropy(p, one_hot, tensor::DEFAULT_LOG_EPSILON)?)
    }

    /// Copies extractor weights from `source` wherever names and shapes match.
    /// Returns the number of tensors copied.
    pub fn load_extractor(&mut self, source: &ParamStore) -> usize {
        let mut copied = 0;
        let ids: Vec<ParamId> = self
            .layers
            .iter()
            .filter(|l| l.section == Section::Extractor)
            .flat_map(|l| l.params.iter().copied())
            .collect();
        for id in ids {
            let name = self.params.get(id).name.clone();
            if let Some(src) = source.by_name(&name) {
                if src.tensor().shape() == self.params.get(id).tensor().shape() {
                    let values = src.tensor().values().to_vec();
                    if self.params.load_values(id, &values).is_ok() {
                        copied += 1;
                    }
                }
            }
        }
        copied
    }

    /// Worst relative error between analytic and central-difference gradients
    /// of the cross-entropy loss on one labelled batch.
    pub fn grad_check(&self, x: &Tensor, one_hot: &Tensor, epsilon: f64) -> Result<f64> {
        let err = tensor::grad_check(&self.params, epsilon, |store, g| {
            let probe = Model { spec: self.spec.clone(), params: store.clone(), layers: self.layers.clone() };
            let xn = g.input(x.clone());
            probe.loss(g, xn, one_hot).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::ShapeMismatch(other.to_string()),
            })
        })?;
        Ok(err)
    }
}

/// Trainable parameter ids of a freshly built model, in layer order.
pub fn trainable_params(spec: &ModelSpec) -> Result<Vec<ParamId>> {
    Ok(Model::new(spec.clone(), 0)?.trainable_params())
}

/// Encodes class labels as one-hot rows.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut v = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * num_classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len().max(1), num_classes], v).expect("non-empty label batch")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_layer() -> Extractor {
        Extractor::new(
            vec![1, 8, 8],
            vec![
                LayerSpec::conv_padded(1, 2, 3, 1),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::conv_padded(2, 4, 3, 1),
                LayerSpec::conv_padded(4, 4, 3, 1),
                LayerSpec::Relu,
            ],
        )
    }

    fn names(model: &Model) -> Vec<String> {
        model.trainable_params().iter().map(|&id| model.params().get(id).name.clone()).collect()
    }

    #[test]
    fn default_head_halves_until_four_times_classes() {
        assert_eq!(default_head(512, 3).unwrap(), vec![256, 128, 64, 32, 16, 3]);
        assert_eq!(default_head(8, 8).unwrap(), vec![8]);
        assert_eq!(default_head(4, 8), Err(ModelError::InvalidDims { feature_dim: 4, num_classes: 8 }));
        assert!(default_head(10, 1).is_err());
    }

    #[test]
    fn base_trains_only_the_replaced_layer() {
        let ex = Extractor::new(
            vec![1, 6, 6],
            vec![LayerSpec::conv(1, 2, 3), LayerSpec::Relu, LayerSpec::conv(2, 4, 3), LayerSpec::Relu],
        );
        let spec = build_base(&ex, 3).unwrap();
        assert_eq!(spec.freeze_boundary, 4);
        assert_eq!(spec.head_widths, vec![3]);
        let model = Model::new(spec, 1).unwrap();
        assert_eq!(names(&model), ["head.1.weight", "head.1.bias"]);
    }

    #[test]
    fn base_head_shape_on_sixteen_features() {
        let ex = Extractor::new(vec![16], vec![LayerSpec::Relu]);
        let spec = build_base(&ex, 2).unwrap();
        assert_eq!(spec.head_layers().unwrap(), vec![LayerSpec::Flatten, LayerSpec::dense(16, 2), LayerSpec::Softmax]);
    }

    #[test]
    fn empty_extractor_rejected() {
        let ex = Extractor::new(vec![3, 4, 4], vec![]);
        assert!(matches!(build_base(&ex, 2), Err(ModelError::InvalidExtractor(_))));
        let bad = Extractor::new(vec![3, 4, 4], vec![LayerSpec::conv(1, 2, 3)]);
        assert!(matches!(build_base(&bad, 2), Err(ModelError::InvalidExtractor(_))));
    }

    #[test]
    fn hybrid_boundary_and_head_checks() {
        let ex = six_layer();
        assert!(matches!(build_hybrid(&ex, 7, &[3], 3), Err(ModelError::BoundaryOutOfRange { boundary: 7, len: 6 })));
        assert!(matches!(build_hybrid(&ex, 2, &[16, 32, 3], 3), Err(ModelError::BadHead(_))));
        assert!(matches!(build_hybrid(&ex, 2, &[16, 4], 3), Err(ModelError::BadHead(_))));
        assert!(matches!(build_hybrid(&ex, 2, &[], 3), Err(ModelError::BadHead(_))));
    }

    #[test]
    fn hybrid_reduces_to_base() {
        let ex = six_layer();
        let base = Model::new(build_base(&ex, 3).unwrap(), 5).unwrap();
        let hybrid = Model::new(build_hybrid(&ex, 6, &[3], 3).unwrap(), 5).unwrap();
        assert_eq!(base.trainable_params(), hybrid.trainable_params());
        assert_eq!(names(&base), names(&hybrid));
    }

    #[test]
    fn boundary_zero_trains_everything() {
        let model = Model::new(build_hybrid(&six_layer(), 0, &[8, 3], 3).unwrap(), 0).unwrap();
        assert_eq!(model.trainable_params().len(), model.params().len());
    }

    #[test]
    fn mid_stack_census() {
        // layers 4 (conv 4->4 k3) and 5 (relu) trainable, plus three dense layers.
        let model = Model::new(build_hybrid(&six_layer(), 4, &[128, 64, 3], 3).unwrap(), 0).unwrap();
        assert_eq!(
            names(&model),
            [
                "extractor.4.weight",
                "extractor.4.bias",
                "head.1.weight",
                "head.1.bias",
                "head.3.weight",
                "head.3.bias",
                "head.5.weight",
                "head.5.bias",
            ]
        );
        // feature dim = 4 channels * 4 * 4 = 64
        let want = (4 * 4 * 9 + 4) + (64 * 128 + 128) + (128 * 64 + 64) + (64 * 3 + 3);
        assert_eq!(model.params().trainable_count(), want);
    }

    #[test]
    fn init_is_seeded() {
        let spec = build_hybrid(&six_layer(), 2, &[8, 3], 3).unwrap();
        assert_eq!(Model::new(spec.clone(), 9).unwrap(), Model::new(spec.clone(), 9).unwrap());
        assert_ne!(Model::new(spec.clone(), 9).unwrap(), Model::new(spec, 10).unwrap());
    }

    #[test]
    fn load_extractor_copies_matching_tensors() {
        let spec = build_hybrid(&six_layer(), 2, &[8, 3], 3).unwrap();
        let src = Model::new(spec.clone(), 1).unwrap();
        let mut dst = Model::new(spec, 2).unwrap();
        assert_eq!(dst.load_extractor(src.params()), 6);
        let w = "extractor.0.weight";
        assert_eq!(dst.params().by_name(w).unwrap().tensor(), src.params().by_name(w).unwrap().tensor());
        let h = "head.1.weight";
        assert_ne!(dst.params().by_name(h).unwrap().tensor(), src.params().by_name(h).unwrap().tensor());
    }
}
