//! Graphviz rendering of a genome's network.

use std::fmt::Write;

use crate::catalog::LayerCatalog;
use crate::genome::{active_nodes, decode, Genome, INPUT_TERMINAL};
use crate::shapecheck::{trace, TensorShape};

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Directed graph of the active layers plus the fixed head, one node per
/// layer labelled with its output shape. The input terminal is not drawn.
/// With `show_inactive`, unused nodes are added in grey.
pub fn to_dot(g: &Genome, catalog: &LayerCatalog, input_shape: &TensorShape, show_inactive: bool) -> String {
    let phenotype = decode(g, catalog);
    let shapes: Vec<Option<TensorShape>> = match trace(&phenotype, input_shape) {
        Ok(steps) => steps.into_iter().map(|s| Some(s.output)).collect(),
        Err(_) => vec![None; phenotype.layers.len() + 3],
    };
    let shape_text = |i: usize| shapes.get(i).cloned().flatten().map_or_else(|| "?".to_string(), |s| s.to_string());

    let active = active_nodes(g);
    let mut out = String::from("digraph network {\n  rankdir=TB;\n  node [shape=box];\n");
    for (i, &col) in active.iter().enumerate() {
        let spec = catalog.entries()[g.node(col).function];
        let label = format!("{} {}", spec.label(), shape_text(i));
        let _ = writeln!(out, "  n{col} [label={}];", quote(&label));
    }
    let n = active.len();
    let head = [("flatten", "Flatten".to_string()), ("dense", format!("Dense({})", phenotype.head.classes)), ("softmax", "Softmax".to_string())];
    for (k, (id, name)) in head.iter().enumerate() {
        let _ = writeln!(out, "  {id} [label={}];", quote(&format!("{name} {}", shape_text(n + k))));
    }
    if show_inactive {
        for col in 1..=g.params().cols {
            if active.binary_search(&col).is_err() {
                let spec = catalog.entries()[g.node(col).function];
                let _ = writeln!(out, "  n{col} [label={}, style=dashed, color=grey, fontcolor=grey];", quote(&spec.label()));
            }
        }
    }
    for &col in &active {
        for &src in &g.node(col).inputs {
            if src != INPUT_TERMINAL {
                let _ = writeln!(out, "  n{src} -> n{col};");
            }
        }
    }
    if g.output() != INPUT_TERMINAL {
        let _ = writeln!(out, "  n{} -> flatten;", g.output());
    }
    out.push_str("  flatten -> dense;\n  dense -> softmax;\n");
    if show_inactive {
        for col in 1..=g.params().cols {
            if active.binary_search(&col).is_err() {
                for &src in &g.node(col).inputs {
                    if src != INPUT_TERMINAL {
                        let _ = writeln!(out, "  n{src} -> n{col} [style=dashed, color=grey];");
                    }
                }
            }
        }
    }
    out.push_str("}\n");
    out
}
