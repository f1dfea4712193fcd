//! The layer menu ("ConvSet") that function genes index into.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("catalog has {0} entries; replacement sampling needs at least 2")]
    DegenerateCatalog(usize),
    #[error("catalog is empty")]
    Empty,
    #[error("function id {id} out of range for a catalog of {len} entries")]
    UnknownFunction { id: usize, len: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Elementwise (or last-axis, for softmax) nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Selu,
    Sigmoid,
    Softmax,
    Softplus,
    Softsign,
    Tanh,
    Exponential,
}

impl Activation {
    pub const ALL: [Activation; 9] = [
        Activation::Relu,
        Activation::Elu,
        Activation::Selu,
        Activation::Sigmoid,
        Activation::Softmax,
        Activation::Softplus,
        Activation::Softsign,
        Activation::Tanh,
        Activation::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::Softplus => "softplus",
            Activation::Softsign => "softsign",
            Activation::Tanh => "tanh",
            Activation::Exponential => "exponential",
        }
    }

    /// Activations whose preceding weights get He initialization.
    pub fn is_relu_family(self) -> bool {
        matches!(self, Activation::Relu | Activation::Elu | Activation::Selu)
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

/// One usable layer with all of its hyperparameters fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    /// Stride 1, same padding, square kernel.
    Conv { filters: usize, kernel: usize },
    /// 2x2 window, stride 2, no padding.
    MaxPool,
    /// 2x2 window, stride 2, no padding.
    AvgPool,
    GlobalAvgPool,
    Activation { which: Activation },
    Dropout { rate: f64 },
    BatchNorm { momentum: f64, epsilon: f64 },
    /// Only valid on rank-1 tensors.
    Dense { units: usize },
    /// Residual sum of two identically shaped inputs.
    Add,
}

impl LayerSpec {
    pub fn arity(&self) -> usize {
        match self {
            LayerSpec::Add => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::GlobalAvgPool => "globalavgpool",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Add => "add",
        }
    }

    /// Short unique token used in genome files, e.g. `conv32x3`, `relu`,
    /// `dense64`.
    pub fn name(&self) -> String {
        match self {
            LayerSpec::Conv { filters, kernel } => format!("conv{filters}x{kernel}"),
            LayerSpec::Activation { which } => which.name().to_string(),
            LayerSpec::Dropout { rate } => format!("dropout{rate}"),
            LayerSpec::BatchNorm { momentum, epsilon } => format!("batchnorm{momentum}e{epsilon}"),
            LayerSpec::Dense { units } => format!("dense{units}"),
            other => other.kind().to_string(),
        }
    }

    /// Human-readable label, e.g. `Conv(32, 3x3)`.
    pub fn label(&self) -> String {
        match self {
            LayerSpec::Conv { filters, kernel } => format!("Conv({filters}, {kernel}x{kernel})"),
            LayerSpec::MaxPool => "MaxPool(2x2)".into(),
            LayerSpec::AvgPool => "AvgPool(2x2)".into(),
            LayerSpec::GlobalAvgPool => "GlobalAvgPool".into(),
            LayerSpec::Activation { which } => {
                let n = which.name();
                let mut c = n.chars();
                let first = c.next().map(|f| f.to_ascii_uppercase()).unwrap_or_default();
                format!("{first}{}", c.as_str())
            }
            LayerSpec::Dropout { rate } => format!("Dropout({rate})"),
            LayerSpec::BatchNorm { momentum, epsilon } => format!("BatchNorm({momentum}, {epsilon})"),
            LayerSpec::Dense { units } => format!("Dense({units})"),
            LayerSpec::Add => "Add".into(),
        }
    }

    fn params_text(&self) -> String {
        match self {
            LayerSpec::Conv { filters, kernel } => format!(" filters={filters} kernel={kernel}"),
            LayerSpec::Activation { which } => format!(" which={}", which.name()),
            LayerSpec::Dropout { rate } => format!(" rate={rate}"),
            LayerSpec::BatchNorm { momentum, epsilon } => {
                format!(" momentum={momentum} epsilon={epsilon}")
            }
            LayerSpec::Dense { units } => format!(" units={units}"),
            _ => String::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// An ordered, immutable list of layer choices. Function genes are indices
/// into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCatalog {
    entries: Vec<LayerSpec>,
}

impl LayerCatalog {
    pub fn new(entries: Vec<LayerSpec>) -> Result<Self, CatalogError> {
        if entries.is_empty() {
            return Err(CatalogError::Empty);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LayerSpec] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&LayerSpec> {
        self.entries.get(id)
    }

    pub fn spec(&self, id: usize) -> Result<&LayerSpec, CatalogError> {
        self.entries.get(id).ok_or(CatalogError::UnknownFunction {
            id,
            len: self.entries.len(),
        })
    }

    /// Looks up a function id by the token [`LayerSpec::name`] produces.
    /// Plain numeric tokens are accepted as raw ids.
    pub fn find_by_name(&self, name: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.name() == name)
            .or_else(|| name.parse::<usize>().ok().filter(|&id| id < self.entries.len()))
    }

    /// Draws a function id uniformly from every entry except `current`.
    pub fn sample_replacement<R: Rng + ?Sized>(
        &self,
        current: usize,
        rng: &mut R,
    ) -> Result<usize, CatalogError> {
        if self.entries.len() < 2 {
            return Err(CatalogError::DegenerateCatalog(self.entries.len()));
        }
        loop {
            let candidate = rng.gen_range(0..self.entries.len());
            if candidate != current {
                return Ok(candidate);
            }
        }
    }

    /// One entry per line: `index kind param=value ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{i} {}{}\n", e.kind(), e.params_text()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CatalogError> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CatalogError::Parse {
                line: lineno + 1,
                message,
            };
            let mut tokens = line.split_whitespace();
            let index: usize = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err("missing entry index".into()))?;
            if index != entries.len() {
                return Err(err(format!("expected index {}, found {index}", entries.len())));
            }
            let kind = tokens.next().ok_or_else(|| err("missing layer kind".into()))?;
            let mut params = std::collections::BTreeMap::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, found `{tok}`")))?;
                params.insert(k, v);
            }
            let num = |key: &str| -> Result<f64, CatalogError> {
                params
                    .get(key)
                    .ok_or_else(|| err(format!("{kind} needs `{key}`")))?
                    .parse::<f64>()
                    .map_err(|e| err(format!("bad `{key}`: {e}")))
            };
            let count = |key: &str| -> Result<usize, CatalogError> {
                params
                    .get(key)
                    .ok_or_else(|| err(format!("{kind} needs `{key}`")))?
                    .parse::<usize>()
                    .map_err(|e| err(format!("bad `{key}`: {e}")))
            };
            let spec = match kind {
                "conv" => LayerSpec::Conv {
                    filters: count("filters")?,
                    kernel: count("kernel")?,
                },
                "maxpool" => LayerSpec::MaxPool,
                "avgpool" => LayerSpec::AvgPool,
                "globalavgpool" => LayerSpec::GlobalAvgPool,
                "activation" => LayerSpec::Activation {
                    which: params
                        .get("which")
                        .ok_or_else(|| err("activation needs `which`".into()))?
                        .parse()
                        .map_err(err)?,
                },
                "dropout" => LayerSpec::Dropout { rate: num("rate")? },
                "batchnorm" => LayerSpec::BatchNorm {
                    momentum: num("momentum")?,
                    epsilon: num("epsilon")?,
                },
                "dense" => LayerSpec::Dense {
                    units: count("units")?,
                },
                "add" => LayerSpec::Add,
                other => return Err(err(format!("unknown layer kind `{other}`"))),
            };
            if let LayerSpec::Conv { filters: 0, .. }
            | LayerSpec::Conv { kernel: 0, .. }
            | LayerSpec::Dense { units: 0 } = spec
            {
                return Err(err("layer sizes must be positive".into()));
            }
            if let LayerSpec::Conv { kernel, .. } = spec {
                if kernel % 2 == 0 {
                    return Err(err("same padding needs an odd kernel".into()));
                }
            }
            entries.push(spec);
        }
        Self::new(entries)
    }
}

pub const DROPOUT_RATE: f64 = 0.2;
pub const BATCHNORM_MOMENTUM: f64 = 0.99;
pub const BATCHNORM_EPSILON: f64 = 0.001;

/// The 25-entry default menu: 8 convolutions, 3 poolings, 9 activations,
/// dropout, batch norm, 2 dense sizes and the residual add.
pub fn default_catalog() -> LayerCatalog {
    let mut entries = Vec::with_capacity(25);
    for filters in [16, 32, 64, 128] {
        for kernel in [3, 5] {
            entries.push(LayerSpec::Conv { filters, kernel });
        }
    }
    entries.push(LayerSpec::MaxPool);
    entries.push(LayerSpec::AvgPool);
    entries.push(LayerSpec::GlobalAvgPool);
    entries.extend(Activation::ALL.map(|which| LayerSpec::Activation { which }));
    entries.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
    entries.push(LayerSpec::BatchNorm {
        momentum: BATCHNORM_MOMENTUM,
        epsilon: BATCHNORM_EPSILON,
    });
    entries.push(LayerSpec::Dense { units: 64 });
    entries.push(LayerSpec::Dense { units: 128 });
    entries.push(LayerSpec::Add);
    LayerCatalog { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_catalog_inventory() {
        let c = default_catalog();
        assert_eq!(c.len(), 8 + 3 + 9 + 1 + 1 + 2 + 1);
        let activations = c
            .entries()
            .iter()
            .filter(|e| matches!(e, LayerSpec::Activation { .. }))
            .count();
        assert_eq!(activations, 9);
        let pools = c
            .entries()
            .iter()
            .filter(|e| matches!(e, LayerSpec::MaxPool | LayerSpec::AvgPool | LayerSpec::GlobalAvgPool))
            .count();
        assert_eq!(pools, 3);
        assert!(c.entries().contains(&LayerSpec::Dropout { rate: 0.2 }));
        assert!(c.entries().contains(&LayerSpec::BatchNorm {
            momentum: 0.99,
            epsilon: 0.001
        }));
    }

    #[test]
    fn names_are_unique() {
        let c = default_catalog();
        let mut names: Vec<_> = c.entries().iter().map(|e| e.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), c.len());
        for (i, e) in c.entries().iter().enumerate() {
            assert_eq!(c.find_by_name(&e.name()), Some(i));
        }
    }

    #[test]
    fn two_entry_catalog_always_flips() {
        let c = LayerCatalog::new(vec![LayerSpec::MaxPool, LayerSpec::Add]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(c.sample_replacement(0, &mut rng).unwrap(), 1);
            assert_eq!(c.sample_replacement(1, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn single_entry_catalog_is_degenerate() {
        let c = LayerCatalog::new(vec![LayerSpec::MaxPool]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            c.sample_replacement(0, &mut rng),
            Err(CatalogError::DegenerateCatalog(1))
        );
        assert_eq!(LayerCatalog::new(vec![]), Err(CatalogError::Empty));
    }

    #[test]
    fn replacement_is_uniform_over_the_others() {
        let c = default_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let current = 7;
        let draws = 100_000;
        let mut counts = vec![0usize; c.len()];
        for _ in 0..draws {
            counts[c.sample_replacement(current, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[current], 0);
        let p = 1.0 / (c.len() - 1) as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &n) in counts.iter().enumerate() {
            if i != current {
                assert!((n as f64 - mean).abs() <= 3.0 * sigma, "entry {i}: {n} vs {mean}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let c = default_catalog();
        let text = c.to_text();
        assert!(text.starts_with("0 conv filters=16 kernel=3\n"));
        assert!(text.contains("21 batchnorm momentum=0.99 epsilon=0.001\n"));
        assert_eq!(LayerCatalog::from_text(&text).unwrap(), c);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(matches!(
            LayerCatalog::from_text("0 conv filters=16\n"),
            Err(CatalogError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            LayerCatalog::from_text("1 maxpool\n"),
            Err(CatalogError::Parse { .. })
        ));
        assert!(matches!(
            LayerCatalog::from_text("0 warp\n"),
            Err(CatalogError::Parse { .. })
        ));
    }
}
