//! Fixed-length CGP chromosomes and their decoding into layer stacks.
//!
//! Node references use `0` for the dataset input terminal and `1..=cols` for
//! the grid columns (a single row). A node in column `c` may read from any
//! reference `r` with `max(0, c - levels_back) <= r < c`; the output gene may
//! point at any reference.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, LayerCatalog, LayerSpec};
use crate::shapecheck::{self, TensorShape};

/// Number of classes produced by the fixed head.
pub const NUM_CLASSES: usize = 10;

/// Whole-genome resampling cap for [`random_genome`].
pub const INIT_RETRY_CAP: usize = 1000;

/// Reference to the dataset input or to a grid column.
pub type NodeRef = usize;

pub const INPUT_TERMINAL: NodeRef = 0;

#[derive(Debug, Error, PartialEq)]
pub enum GenomeError {
    #[error("invalid CGP parameters: {0}")]
    InvalidParams(String),
    #[error("node {col}: {message}")]
    InvalidNode { col: usize, message: String },
    #[error("output reference {0} is outside the grid")]
    InvalidOutput(NodeRef),
    #[error("no compiling genome found in {0} attempts")]
    InitExhausted(usize),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("genome text line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgpParams {
    pub rows: usize,
    pub cols: usize,
    pub levels_back: usize,
    pub mutation_rate: f64,
    pub generations: usize,
}

impl CgpParams {
    pub const STANDARD_MUTATION_RATES: [f64; 3] = [0.01, 0.05, 0.1];
    pub const STANDARD_GENERATIONS: [usize; 3] = [10, 25, 50];

    /// Grid used throughout the experiments: one row, 30 columns, levels-back 10.
    pub fn standard(mutation_rate: f64, generations: usize) -> Self {
        Self {
            rows: 1,
            cols: 30,
            levels_back: 10,
            mutation_rate,
            generations,
        }
    }

    pub fn validate(&self) -> Result<(), GenomeError> {
        let bad = |m: &str| Err(GenomeError::InvalidParams(m.to_string()));
        if self.rows != 1 {
            return bad("only single-row grids are supported");
        }
        if self.cols == 0 {
            return bad("cols must be positive");
        }
        if self.levels_back == 0 || self.levels_back > self.cols {
            return bad("levels_back must lie in 1..=cols");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must lie in [0, 1]");
        }
        if self.generations == 0 {
            return bad("generations must be positive");
        }
        Ok(())
    }

    pub fn is_standard_preset(&self) -> bool {
        self.rows == 1
            && self.cols == 30
            && self.levels_back == 10
            && Self::STANDARD_MUTATION_RATES.contains(&self.mutation_rate)
            && Self::STANDARD_GENERATIONS.contains(&self.generations)
    }

    /// Legal connection targets for a node in column `col` (1-based).
    pub fn connection_range(&self, col: usize) -> std::ops::Range<NodeRef> {
        col.saturating_sub(self.levels_back)..col
    }

    pub fn output_range(&self) -> std::ops::RangeInclusive<NodeRef> {
        0..=self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeGene {
    pub function: usize,
    pub inputs: Vec<NodeRef>,
}

/// A validated chromosome. Immutable; mutation operators build new genomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    params: CgpParams,
    nodes: Vec<NodeGene>,
    output: NodeRef,
}

impl Genome {
    pub fn new(
        params: CgpParams,
        nodes: Vec<NodeGene>,
        output: NodeRef,
        catalog: &LayerCatalog,
    ) -> Result<Self, GenomeError> {
        params.validate()?;
        if nodes.len() != params.cols * params.rows {
            return Err(GenomeError::InvalidParams(format!(
                "expected {} nodes, found {}",
                params.cols * params.rows,
                nodes.len()
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            let col = i + 1;
            let spec = catalog.spec(node.function)?;
            if node.inputs.len() != spec.arity() {
                return Err(GenomeError::InvalidNode {
                    col,
                    message: format!(
                        "{} takes {} inputs, gene has {}",
                        spec.name(),
                        spec.arity(),
                        node.inputs.len()
                    ),
                });
            }
            let range = params.connection_range(col);
            if let Some(bad) = node.inputs.iter().find(|r| !range.contains(r)) {
                return Err(GenomeError::InvalidNode {
                    col,
                    message: format!("input {bad} outside legal range {range:?}"),
                });
            }
        }
        if !params.output_range().contains(&output) {
            return Err(GenomeError::InvalidOutput(output));
        }
        Ok(Self {
            params,
            nodes,
            output,
        })
    }

    /// Assembles genes that are legal by construction (mutation operators).
    pub(crate) fn from_genes_unchecked(params: CgpParams, nodes: Vec<NodeGene>, output: NodeRef) -> Self {
        debug_assert_eq!(nodes.len(), params.cols * params.rows);
        Self {
            params,
            nodes,
            output,
        }
    }

    pub fn params(&self) -> &CgpParams {
        &self.params
    }

    pub fn nodes(&self) -> &[NodeGene] {
        &self.nodes
    }

    /// Gene of the node in column `col` (1-based).
    pub fn node(&self, col: usize) -> &NodeGene {
        &self.nodes[col - 1]
    }

    pub fn output(&self) -> NodeRef {
        self.output
    }

    /// Total gene count: function genes, connection genes and the output gene.
    pub fn gene_count(&self) -> usize {
        self.nodes.iter().map(|n| 1 + n.inputs.len()).sum::<usize>() + 1
    }

    /// Line-oriented text form: a `#` parameter header, one
    /// `col function_name input_refs...` line per node, then `output <ref>`.
    pub fn to_text(&self, catalog: &LayerCatalog) -> String {
        let p = &self.params;
        let mut out = format!(
            "# cgp rows={} cols={} levels_back={} mutation_rate={} generations={}\n",
            p.rows, p.cols, p.levels_back, p.mutation_rate, p.generations
        );
        for (i, node) in self.nodes.iter().enumerate() {
            let name = catalog
                .get(node.function)
                .map(|s| s.name())
                .unwrap_or_else(|| node.function.to_string());
            write!(out, "{} {}", i + 1, name).unwrap();
            for r in &node.inputs {
                write!(out, " {r}").unwrap();
            }
            out.push('\n');
        }
        writeln!(out, "output {}", self.output).unwrap();
        out
    }

    pub fn from_text(text: &str, catalog: &LayerCatalog) -> Result<Self, GenomeError> {
        let mut header: Option<CgpParams> = None;
        let mut nodes = Vec::new();
        let mut output = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| GenomeError::Parse {
                line: lineno + 1,
                message,
            };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(fields) = rest.strip_prefix("cgp") {
                    header = Some(parse_header(fields).map_err(err)?);
                }
                continue;
            }
            if output.is_some() {
                return Err(err("content after the output line".into()));
            }
            let mut tokens = line.split_whitespace();
            let first = tokens.next().unwrap_or_default();
            if first == "output" {
                let r = tokens
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| err("output line needs a node reference".into()))?;
                if tokens.next().is_some() {
                    return Err(err("trailing tokens after output reference".into()));
                }
                output = Some(r);
                continue;
            }
            let col: usize = first
                .parse()
                .map_err(|_| err(format!("expected a column number, found `{first}`")))?;
            if col != nodes.len() + 1 {
                return Err(err(format!("expected column {}, found {col}", nodes.len() + 1)));
            }
            let name = tokens
                .next()
                .ok_or_else(|| err("missing function name".into()))?;
            let function = catalog
                .find_by_name(name)
                .ok_or_else(|| err(format!("unknown function `{name}`")))?;
            let inputs = tokens
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| err(format!("bad input reference `{t}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            nodes.push(NodeGene { function, inputs });
        }
        let output = output.ok_or(GenomeError::Parse {
            line: text.lines().count(),
            message: "missing `output` line".into(),
        })?;
        let params = header.unwrap_or(CgpParams {
            rows: 1,
            cols: nodes.len(),
            levels_back: nodes.len().max(1),
            mutation_rate: 0.0,
            generations: 1,
        });
        Genome::new(params, nodes, output, catalog)
    }
}

fn parse_header(fields: &str) -> Result<CgpParams, String> {
    let mut p = CgpParams {
        rows: 1,
        cols: 0,
        levels_back: 0,
        mutation_rate: 0.0,
        generations: 1,
    };
    for tok in fields.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found `{tok}`"))?;
        let count = || v.parse::<usize>().map_err(|e| format!("bad `{k}`: {e}"));
        match k {
            "rows" => p.rows = count()?,
            "cols" => p.cols = count()?,
            "levels_back" => p.levels_back = count()?,
            "generations" => p.generations = count()?,
            "mutation_rate" => p.mutation_rate = v.parse().map_err(|e| format!("bad `{k}`: {e}"))?,
            _ => return Err(format!("unknown header key `{k}`")),
        }
    }
    Ok(p)
}

/// Columns reachable backwards from the output gene, ascending.
pub fn active_nodes(g: &Genome) -> Vec<NodeRef> {
    let mut active = vec![false; g.nodes.len() + 1];
    let mut stack = vec![g.output];
    while let Some(r) = stack.pop() {
        if r == INPUT_TERMINAL || active[r] {
            continue;
        }
        active[r] = true;
        stack.extend(g.node(r).inputs.iter().copied());
    }
    (1..active.len()).filter(|&c| active[c]).collect()
}

/// One evolved layer of a phenotype. `inputs` index phenotype slots: `0` is
/// the network input, `i + 1` the output of `layers[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenoLayer {
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
}

/// Fixed classification head: Flatten, Dense(classes), Softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub classes: usize,
}

impl Default for Head {
    fn default() -> Self {
        Self {
            classes: NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    pub layers: Vec<PhenoLayer>,
    pub head: Head,
}

impl Phenotype {
    /// Straight stack where each layer consumes the previous one.
    pub fn chain(specs: impl IntoIterator<Item = LayerSpec>) -> Self {
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| PhenoLayer {
                inputs: vec![i; spec.arity()],
                spec,
            })
            .collect();
        Self {
            layers,
            head: Head::default(),
        }
    }

    /// Slot feeding the head.
    pub fn output_slot(&self) -> usize {
        self.layers.len()
    }
}

pub fn decode(g: &Genome, catalog: &LayerCatalog) -> Phenotype {
    let active = active_nodes(g);
    let mut slot_of = vec![0usize; g.nodes.len() + 1];
    let mut layers = Vec::with_capacity(active.len());
    for (i, &col) in active.iter().enumerate() {
        let node = g.node(col);
        let spec = *catalog
            .get(node.function)
            .expect("genome validated against this catalog");
        layers.push(PhenoLayer {
            spec,
            inputs: node.inputs.iter().map(|&r| slot_of[r]).collect(),
        });
        slot_of[col] = i + 1;
    }
    Phenotype {
        layers,
        head: Head::default(),
    }
}

pub(crate) fn random_node<R: Rng + ?Sized>(
    params: &CgpParams,
    catalog: &LayerCatalog,
    col: usize,
    rng: &mut R,
) -> NodeGene {
    let function = rng.gen_range(0..catalog.len());
    let arity = catalog.entries()[function].arity();
    let range = params.connection_range(col);
    let inputs = (0..arity).map(|_| rng.gen_range(range.clone())).collect();
    NodeGene { function, inputs }
}

/// Samples genomes until one decodes to a phenotype that compiles on
/// `input_shape` and has at least one active layer.
pub fn random_genome<R: Rng + ?Sized>(
    params: &CgpParams,
    catalog: &LayerCatalog,
    input_shape: &TensorShape,
    rng: &mut R,
) -> Result<Genome, GenomeError> {
    params.validate()?;
    if catalog.is_empty() {
        return Err(CatalogError::Empty.into());
    }
    for _ in 0..INIT_RETRY_CAP {
        let nodes = (1..=params.cols)
            .map(|col| random_node(params, catalog, col, rng))
            .collect();
        let output = rng.gen_range(params.output_range());
        let g = Genome {
            params: *params,
            nodes,
            output,
        };
        if output == INPUT_TERMINAL {
            continue;
        }
        if shapecheck::compile(&decode(&g, catalog), input_shape).is_ok() {
            return Ok(g);
        }
    }
    Err(GenomeError::InitExhausted(INIT_RETRY_CAP))
}

/// Set of active columns, for callers that need membership tests.
pub fn active_set(g: &Genome) -> BTreeSet<NodeRef> {
    active_nodes(g).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{default_catalog, Activation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mnist() -> TensorShape {
        TensorShape::spatial(28, 28, 1)
    }

    fn id_of(c: &LayerCatalog, spec: LayerSpec) -> usize {
        c.entries().iter().position(|e| *e == spec).unwrap()
    }

    fn chain_genome(c: &LayerCatalog, cols: usize, output: usize) -> Genome {
        let relu = id_of(
            c,
            LayerSpec::Activation {
                which: Activation::Relu,
            },
        );
        let nodes = (1..=cols)
            .map(|col| NodeGene {
                function: relu,
                inputs: vec![col - 1],
            })
            .collect();
        Genome::new(CgpParams::standard(0.05, 10), nodes, output, c).unwrap()
    }

    #[test]
    fn random_genome_respects_locality_and_is_deterministic() {
        let c = default_catalog();
        let p = CgpParams::standard(0.1, 10);
        let a = random_genome(&p, &c, &mnist(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_genome(&p, &c, &mnist(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nodes().len(), 30);
        for (i, n) in a.nodes().iter().enumerate() {
            let col = i + 1;
            for &r in &n.inputs {
                assert!(r < col && r + 10 >= col);
            }
        }
    }

    #[test]
    fn output_on_input_terminal_has_no_active_nodes() {
        let c = default_catalog();
        let g = chain_genome(&c, 30, 0);
        assert!(active_nodes(&g).is_empty());
        let p = decode(&g, &c);
        assert!(p.layers.is_empty());
        assert_eq!(p.head.classes, 10);
    }

    #[test]
    fn chain_reachability() {
        let c = default_catalog();
        let g = chain_genome(&c, 30, 5);
        assert_eq!(active_nodes(&g), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn single_conv_decode() {
        let c = default_catalog();
        let conv = id_of(&c, LayerSpec::Conv { filters: 32, kernel: 3 });
        let mut nodes: Vec<NodeGene> = chain_genome(&c, 30, 0).nodes().to_vec();
        nodes[0] = NodeGene {
            function: conv,
            inputs: vec![0],
        };
        let g = Genome::new(CgpParams::standard(0.05, 10), nodes, 1, &c).unwrap();
        let p = decode(&g, &c);
        assert_eq!(
            p,
            Phenotype::chain([LayerSpec::Conv { filters: 32, kernel: 3 }])
        );
    }

    #[test]
    fn add_nodes_record_both_inputs() {
        let c = default_catalog();
        let add = id_of(&c, LayerSpec::Add);
        let mut nodes: Vec<NodeGene> = chain_genome(&c, 30, 0).nodes().to_vec();
        nodes[3] = NodeGene {
            function: add,
            inputs: vec![1, 3],
        };
        let g = Genome::new(CgpParams::standard(0.05, 10), nodes, 4, &c).unwrap();
        let p = decode(&g, &c);
        assert_eq!(p.layers.len(), 4);
        assert_eq!(p.layers[3].inputs, vec![1, 3]);
    }

    #[test]
    fn construction_rejects_out_of_range_connections() {
        let c = default_catalog();
        let mut nodes = chain_genome(&c, 30, 0).nodes().to_vec();
        nodes[20].inputs = vec![5];
        assert!(matches!(
            Genome::new(CgpParams::standard(0.05, 10), nodes.clone(), 3, &c),
            Err(GenomeError::InvalidNode { col: 21, .. })
        ));
        nodes[20].inputs = vec![21];
        assert!(Genome::new(CgpParams::standard(0.05, 10), nodes.clone(), 3, &c).is_err());
        nodes[20].inputs = vec![11];
        assert!(Genome::new(CgpParams::standard(0.05, 10), nodes.clone(), 31, &c).is_err());
        assert!(Genome::new(CgpParams::standard(0.05, 10), nodes, 30, &c).is_ok());
    }

    #[test]
    fn arity_must_match_function() {
        let c = default_catalog();
        let add = id_of(&c, LayerSpec::Add);
        let mut nodes = chain_genome(&c, 30, 0).nodes().to_vec();
        nodes[4].function = add;
        assert!(matches!(
            Genome::new(CgpParams::standard(0.05, 10), nodes, 3, &c),
            Err(GenomeError::InvalidNode { col: 5, .. })
        ));
    }

    #[test]
    fn params_validation() {
        let mut p = CgpParams::standard(0.05, 10);
        assert!(p.validate().is_ok());
        assert!(p.is_standard_preset());
        p.levels_back = 31;
        assert!(p.validate().is_err());
        p = CgpParams::standard(1.5, 10);
        assert!(p.validate().is_err());
        p = CgpParams::standard(0.05, 10);
        p.rows = 2;
        assert!(p.validate().is_err());
        assert!(!CgpParams::standard(0.2, 10).is_standard_preset());
    }

    #[test]
    fn text_round_trip() {
        let c = default_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = random_genome(&CgpParams::standard(0.01, 25), &c, &mnist(), &mut rng).unwrap();
            let text = g.to_text(&c);
            assert_eq!(Genome::from_text(&text, &c).unwrap(), g);
        }
    }

    #[test]
    fn text_format_shape() {
        let c = default_catalog();
        let g = chain_genome(&c, 30, 2);
        let text = g.to_text(&c);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[1], "1 relu 0");
        assert_eq!(lines[30], "30 relu 29");
        assert_eq!(lines[31], "output 2");
    }

    #[test]
    fn malformed_text_is_rejected() {
        let c = default_catalog();
        for bad in [
            "1 relu 0\n",
            "1 relu 0\noutput x\n",
            "2 relu 0\noutput 1\n",
            "1 frobnicate 0\noutput 1\n",
            "1 relu 0\noutput 1\n2 relu 1\n",
        ] {
            assert!(Genome::from_text(bad, &c).is_err(), "{bad:?}");
        }
        // headerless files get levels_back = cols
        let g = Genome::from_text("1 relu 0\n2 add 0 1\noutput 2\n", &c).unwrap();
        assert_eq!(g.params().levels_back, 2);
        assert_eq!(active_nodes(&g), vec![1, 2]);
    }
}
