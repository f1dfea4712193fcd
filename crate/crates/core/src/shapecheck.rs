//! Static shape inference over phenotypes: the "does it compile" check.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::LayerSpec;
use crate::genome::Phenotype;

/// Per-sample tensor shape. Spatial tensors are `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorShape {
    Flat(usize),
    Spatial { h: usize, w: usize, c: usize },
}

impl TensorShape {
    pub fn flat(features: usize) -> Self {
        assert!(features >= 1, "dimensions must be positive");
        TensorShape::Flat(features)
    }

    pub fn spatial(h: usize, w: usize, c: usize) -> Self {
        assert!(h >= 1 && w >= 1 && c >= 1, "dimensions must be positive");
        TensorShape::Spatial { h, w, c }
    }

    pub fn rank(&self) -> usize {
        match self {
            TensorShape::Flat(_) => 1,
            TensorShape::Spatial { .. } => 3,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            TensorShape::Flat(f) => f,
            TensorShape::Spatial { h, w, c } => h * w * c,
        }
    }

    /// Size of the innermost (contiguous) axis.
    pub fn last_dim(&self) -> usize {
        match *self {
            TensorShape::Flat(f) => f,
            TensorShape::Spatial { c, .. } => c,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorShape::Flat(n) => write!(f, "({n})"),
            TensorShape::Spatial { h, w, c } => write!(f, "({h}, {w}, {c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeErrorKind {
    RankMismatch,
    SpatialUnderflow,
    ResidualShapeConflict,
    DanglingInput,
}

impl fmt::Display for ShapeErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeErrorKind::RankMismatch => "rank mismatch",
            ShapeErrorKind::SpatialUnderflow => "spatial underflow",
            ShapeErrorKind::ResidualShapeConflict => "residual shape conflict",
            ShapeErrorKind::DanglingInput => "dangling input",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("layer {at_layer}: {reason}")]
pub struct ShapeError {
    /// Index into `Phenotype::layers`; head layers follow the evolved ones.
    pub at_layer: usize,
    pub reason: ShapeErrorKind,
}

/// Output shape of one layer given its input shapes.
pub fn infer_layer(in_shapes: &[TensorShape], layer: &LayerSpec) -> Result<TensorShape, ShapeErrorKind> {
    if in_shapes.len() != layer.arity() {
        return Err(ShapeErrorKind::DanglingInput);
    }
    let x = in_shapes[0];
    match *layer {
        LayerSpec::Conv { filters, .. } => match x {
            TensorShape::Spatial { h, w, .. } => Ok(TensorShape::Spatial { h, w, c: filters }),
            TensorShape::Flat(_) => Err(ShapeErrorKind::RankMismatch),
        },
        LayerSpec::MaxPool | LayerSpec::AvgPool => match x {
            TensorShape::Spatial { h, w, c } if h >= 2 && w >= 2 => Ok(TensorShape::Spatial {
                h: h / 2,
                w: w / 2,
                c,
            }),
            TensorShape::Spatial { .. } => Err(ShapeErrorKind::SpatialUnderflow),
            TensorShape::Flat(_) => Err(ShapeErrorKind::RankMismatch),
        },
        LayerSpec::GlobalAvgPool => match x {
            TensorShape::Spatial { c, .. } => Ok(TensorShape::Flat(c)),
            TensorShape::Flat(_) => Err(ShapeErrorKind::RankMismatch),
        },
        LayerSpec::Activation { .. } | LayerSpec::Dropout { .. } | LayerSpec::BatchNorm { .. } => Ok(x),
        LayerSpec::Dense { units } => match x {
            TensorShape::Flat(_) => Ok(TensorShape::Flat(units)),
            TensorShape::Spatial { .. } => Err(ShapeErrorKind::RankMismatch),
        },
        LayerSpec::Add => {
            if in_shapes[0] == in_shapes[1] {
                Ok(x)
            } else {
                Err(ShapeErrorKind::ResidualShapeConflict)
            }
        }
    }
}

/// Head flatten: rank-3 collapses, rank-1 passes through.
pub fn flatten(x: TensorShape) -> TensorShape {
    TensorShape::Flat(x.numel())
}

/// One line of a shape trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub index: usize,
    pub label: String,
    pub inputs: Vec<TensorShape>,
    pub output: TensorShape,
}

/// Shapes of every layer including the three head layers, or the first failure.
pub fn trace(p: &Phenotype, input_shape: &TensorShape) -> Result<Vec<TraceStep>, ShapeError> {
    let mut slots: Vec<TensorShape> = Vec::with_capacity(p.layers.len() + 1);
    slots.push(*input_shape);
    let mut steps = Vec::with_capacity(p.layers.len() + 3);
    for (i, layer) in p.layers.iter().enumerate() {
        let err = |reason| ShapeError { at_layer: i, reason };
        let ins = layer
            .inputs
            .iter()
            .map(|&s| slots.get(s).copied().filter(|_| s <= i))
            .collect::<Option<Vec<_>>>()
            .ok_or(err(ShapeErrorKind::DanglingInput))?;
        let out = infer_layer(&ins, &layer.spec).map_err(err)?;
        steps.push(TraceStep {
            index: i,
            label: layer.spec.label(),
            inputs: ins,
            output: out,
        });
        slots.push(out);
    }
    let body = *slots.last().expect("input slot present");
    let n = p.layers.len();
    let flat = flatten(body);
    let classes = TensorShape::Flat(p.head.classes);
    steps.push(TraceStep {
        index: n,
        label: "Flatten".into(),
        inputs: vec![body],
        output: flat,
    });
    steps.push(TraceStep {
        index: n + 1,
        label: format!("Dense({})", p.head.classes),
        inputs: vec![flat],
        output: classes,
    });
    steps.push(TraceStep {
        index: n + 2,
        label: "Softmax".into(),
        inputs: vec![classes],
        output: classes,
    });
    Ok(steps)
}

/// Folds shape inference over the phenotype and its head; returns the class
/// probability shape on success.
pub fn compile(p: &Phenotype, input_shape: &TensorShape) -> Result<TensorShape, ShapeError> {
    trace(p, input_shape).map(|steps| steps.last().expect("head present").output)
}

/// Human-readable trace, one `#i kind in_shape -> out_shape` line per layer.
pub fn explain(p: &Phenotype, input_shape: &TensorShape) -> String {
    match trace(p, input_shape) {
        Ok(steps) => steps.iter().map(format_step).collect(),
        Err(e) => {
            let mut partial = String::new();
            // re-run up to the failing layer so the trace shows where it broke
            let prefix = Phenotype {
                layers: p.layers[..e.at_layer].to_vec(),
                head: p.head,
            };
            if let Ok(steps) = trace(&prefix, input_shape) {
                for s in &steps[..e.at_layer] {
                    partial.push_str(&format_step(s));
                }
            }
            partial.push_str(&format!(
                "#{} {} error: {}\n",
                e.at_layer,
                p.layers[e.at_layer].spec.label(),
                e.reason
            ));
            partial
        }
    }
}

fn format_step(s: &TraceStep) -> String {
    let ins = s
        .inputs
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" + ");
    format!("#{} {} {} -> {}\n", s.index, s.label, ins, s.output)
}
