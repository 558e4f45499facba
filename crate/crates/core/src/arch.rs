//! Architecture descriptions: layer specs, shape inference and width plans.
//!
//! Widths shrink only along channel/neuron axes; spatial dimensions are never
//! scaled. The network input and the final weight layer are exempt from
//! width scaling so the model keeps its input/output dimensionality at every
//! width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kept_units;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        width: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    MaxPool2d {
        kernel: usize,
    },
    Relu,
    Flatten,
    Batchnorm,
    /// Marks the classification head. The engine stays in logit space; the
    /// losses apply the (numerically stabilized) softmax themselves, so this
    /// layer is an identity in the forward pass.
    SoftmaxOutput,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub od_eligible: bool,
}

impl LayerSpec {
    pub fn dense(width: usize, od_eligible: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { width, bias: true },
            od_eligible,
        }
    }

    pub fn dense_no_bias(width: usize, od_eligible: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { width, bias: false },
            od_eligible,
        }
    }

    pub fn conv2d(filters: usize, kernel: usize, od_eligible: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                filters,
                kernel,
                bias: true,
            },
            od_eligible,
        }
    }

    pub fn maxpool2d(kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2d { kernel },
            od_eligible: false,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            od_eligible: false,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            od_eligible: false,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec {
            kind: LayerKind::Batchnorm,
            od_eligible: false,
        }
    }

    pub fn softmax_output() -> Self {
        LayerSpec {
            kind: LayerKind::SoftmaxOutput,
            od_eligible: false,
        }
    }

    /// Output unit count for dense/conv layers; None for the rest.
    pub fn width(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { width, .. } => Some(width),
            LayerKind::Conv2d { filters, .. } => Some(filters),
            _ => None,
        }
    }

    pub fn has_weights(&self) -> bool {
        self.width().is_some()
    }
}

/// Shape of the feature map flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Vector { n: usize },
    Image { c: usize, h: usize, w: usize },
}

impl FeatureShape {
    pub fn count(&self) -> usize {
        match *self {
            FeatureShape::Vector { n } => n,
            FeatureShape::Image { c, h, w } => c * h * w,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Vector { n } => vec![n],
            FeatureShape::Image { c, h, w } => vec![c, h, w],
        }
    }

    /// Channel count scaled by a kept-unit substitution, spatial dims intact.
    fn with_channels(&self, c: usize) -> FeatureShape {
        match *self {
            FeatureShape::Vector { .. } => FeatureShape::Vector { n: c },
            FeatureShape::Image { h, w, .. } => FeatureShape::Image { c, h, w },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input shape without the batch axis: `[n]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture {
            input_shape,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn input_feature_shape(&self) -> Result<FeatureShape> {
        match self.input_shape.as_slice() {
            [n] => Ok(FeatureShape::Vector { n: *n }),
            [c, h, w] => Ok(FeatureShape::Image {
                c: *c,
                h: *h,
                w: *w,
            }),
            other => Err(Error::InvalidArchitecture(format!(
                "input shape must be [n] or [c, h, w], got {other:?}"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        for spec in &self.layers {
            if let Some(k) = spec.width() {
                if k == 0 {
                    return Err(Error::InvalidArchitecture("zero-width layer".into()));
                }
            }
            if spec.od_eligible && !spec.has_weights() {
                return Err(Error::InvalidArchitecture(
                    "only dense/conv layers can be width-eligible".into(),
                ));
            }
        }
        let last_weight = self.layers.iter().rposition(|s| s.has_weights());
        if let Some(idx) = last_weight {
            if self.layers[idx].od_eligible {
                return Err(Error::InvalidArchitecture(
                    "the final weight layer must keep its full width".into(),
                ));
            }
        } else {
            return Err(Error::InvalidArchitecture(
                "architecture has no weight layers".into(),
            ));
        }
        // Dry-run shape inference at full width to catch size mismatches.
        self.plan_with_kept(&self.full_kept_counts())?;
        Ok(())
    }

    /// Indices of dense/conv layers in architecture order.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// Kept output-unit counts per weight layer at width `p`, computed on
    /// this architecture's own widths.
    pub fn kept_counts(&self, p: f64) -> Result<Vec<usize>> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidWidth(p));
        }
        Ok(self
            .layers
            .iter()
            .filter(|s| s.has_weights())
            .map(|s| {
                let k = s.width().unwrap();
                if s.od_eligible {
                    kept_units(p, k)
                } else {
                    k
                }
            })
            .collect())
    }

    pub fn full_kept_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|s| s.width())
            .collect()
    }

    /// Standalone architecture with every eligible width scaled by the
    /// ceiling rule; used to build independently trained width-`p` models.
    pub fn scaled(&self, p: f64) -> Result<Architecture> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidWidth(p));
        }
        let layers = self
            .layers
            .iter()
            .map(|spec| {
                let mut s = spec.clone();
                if s.od_eligible {
                    match &mut s.kind {
                        LayerKind::Dense { width, .. } => *width = kept_units(p, *width),
                        LayerKind::Conv2d { filters, .. } => *filters = kept_units(p, *filters),
                        _ => {}
                    }
                }
                s
            })
            .collect();
        Architecture::new(self.input_shape.clone(), layers)
    }

    /// Walk the layers with explicit kept counts, producing the feature shape
    /// entering and leaving every layer.
    pub fn plan_with_kept(&self, kept: &[usize]) -> Result<Plan> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut current = self.input_feature_shape()?;
        shapes.push(current);
        let mut weight_ordinal = 0usize;
        for (idx, spec) in self.layers.iter().enumerate() {
            current = match spec.kind {
                LayerKind::Dense { .. } => {
                    let out = kept[weight_ordinal];
                    weight_ordinal += 1;
                    match current {
                        FeatureShape::Vector { .. } => FeatureShape::Vector { n: out },
                        FeatureShape::Image { .. } => {
                            return Err(Error::InvalidArchitecture(format!(
                                "layer {idx}: dense layer needs flattened input"
                            )))
                        }
                    }
                }
                LayerKind::Conv2d { kernel, .. } => {
                    let out = kept[weight_ordinal];
                    weight_ordinal += 1;
                    match current {
                        FeatureShape::Image { h, w, .. } => {
                            if h < kernel || w < kernel {
                                return Err(Error::InvalidArchitecture(format!(
                                    "layer {idx}: {h}x{w} input smaller than {kernel}x{kernel} kernel"
                                )));
                            }
                            FeatureShape::Image {
                                c: out,
                                h: h - kernel + 1,
                                w: w - kernel + 1,
                            }
                        }
                        FeatureShape::Vector { .. } => {
                            return Err(Error::InvalidArchitecture(format!(
                                "layer {idx}: conv layer needs image input"
                            )))
                        }
                    }
                }
                LayerKind::MaxPool2d { kernel } => match current {
                    FeatureShape::Image { c, h, w } => FeatureShape::Image {
                        c,
                        h: h / kernel,
                        w: w / kernel,
                    },
                    FeatureShape::Vector { .. } => {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {idx}: pool layer needs image input"
                        )))
                    }
                },
                LayerKind::Flatten => FeatureShape::Vector { n: current.count() },
                LayerKind::Relu | LayerKind::Batchnorm | LayerKind::SoftmaxOutput => {
                    current.with_channels(match current {
                        FeatureShape::Vector { n } => n,
                        FeatureShape::Image { c, .. } => c,
                    })
                }
            };
            shapes.push(current);
        }
        Ok(Plan { shapes })
    }
}

/// Per-layer feature shapes for one width: `shapes[l]` enters layer `l`,
/// `shapes[l + 1]` leaves it.
#[derive(Clone, Debug)]
pub struct Plan {
    pub shapes: Vec<FeatureShape>,
}

impl Plan {
    pub fn output_shape(&self) -> FeatureShape {
        *self.shapes.last().unwrap()
    }
}

/// The two-conv classifier used for the desk-scale digit task: conv 5x5 x10,
/// pool, conv 5x5 x20, pool, dense head.
pub fn femnist_cnn(classes: usize) -> Architecture {
    Architecture::new(
        vec![1, 28, 28],
        vec![
            LayerSpec::conv2d(10, 5, true),
            LayerSpec::relu(),
            LayerSpec::maxpool2d(2),
            LayerSpec::conv2d(20, 5, true),
            LayerSpec::relu(),
            LayerSpec::maxpool2d(2),
            LayerSpec::flatten(),
            LayerSpec::dense(classes, false),
            LayerSpec::softmax_output(),
        ],
    )
    .expect("static architecture is valid")
}

/// Two-hidden-layer dense classifier for synthetic vector tasks.
pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Architecture {
    let mut layers = Vec::new();
    for &h in hidden {
        layers.push(LayerSpec::dense(h, true));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::dense(classes, false));
    layers.push(LayerSpec::softmax_output());
    Architecture::new(vec![input_dim], layers).expect("static architecture is valid")
}

/// Bias-free two-layer linear map used by the low-rank recovery experiment.
pub fn linear_two_layer(input_dim: usize, hidden: usize, output_dim: usize) -> Architecture {
    Architecture::new(
        vec![input_dim],
        vec![
            LayerSpec::dense_no_bias(hidden, true),
            LayerSpec::dense_no_bias(output_dim, false),
        ],
    )
    .expect("static architecture is valid")
}
