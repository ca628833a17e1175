//! Graphviz DOT export for derived CNN genotypes and recurrent cell
//! graphs. Output is fully deterministic: fixed node naming, fixed edge
//! order.

use crate::darts::{CellType, Genotype};
use crate::rnn::{OperandRef, RnnCellGraph};

fn cnn_source_name(source: usize) -> String {
    match source {
        0 => "c_{k-2}".to_string(),
        1 => "c_{k-1}".to_string(),
        s => format!("{}", s - 2),
    }
}

/// One cell type of a genotype as a `digraph`. Node names follow the cell
/// wiring: inputs `c_{k-2}`/`c_{k-1}`, intermediate nodes `0..N-1`, output
/// `c_k`; each retained op labels its edge.
pub fn genotype_cell_dot(genotype: &Genotype, cell_type: CellType) -> String {
    let (name, nodes) = match cell_type {
        CellType::Normal => ("normal", &genotype.normal),
        CellType::Reduction => ("reduction", &genotype.reduction),
    };
    let mut out = String::new();
    out.push_str(&format!("digraph {name} {{\n"));
    out.push_str("  rankdir=LR;\n");
    out.push_str("  \"c_{k-2}\" [shape=box];\n");
    out.push_str("  \"c_{k-1}\" [shape=box];\n");
    for j in 0..nodes.len() {
        out.push_str(&format!("  \"{j}\" [shape=ellipse];\n"));
    }
    out.push_str("  \"c_k\" [shape=box];\n");
    for (j, node) in nodes.iter().enumerate() {
        for edge in &node.edges {
            out.push_str(&format!(
                "  \"{}\" -> \"{j}\" [label=\"{}\"];\n",
                cnn_source_name(edge.source),
                edge.op.name()
            ));
        }
    }
    for j in 0..nodes.len() {
        out.push_str(&format!("  \"{j}\" -> \"c_k\" [label=\"concat\"];\n"));
    }
    out.push_str("}\n");
    out
}

/// Both cells of a genotype, normal first.
pub fn genotype_dot(genotype: &Genotype) -> String {
    let mut out = genotype_cell_dot(genotype, CellType::Normal);
    out.push('\n');
    out.push_str(&genotype_cell_dot(genotype, CellType::Reduction));
    out
}

fn rnn_ref_name(r: OperandRef) -> String {
    match r {
        OperandRef::XT => "x_t".to_string(),
        OperandRef::H1Prev => "h_prev^1".to_string(),
        OperandRef::H2Prev => "h_prev^2".to_string(),
        OperandRef::Node(i) => format!("n{i}"),
    }
}

/// A recurrent cell DAG as a `digraph`: sources `x_t`, `h_prev^1`,
/// `h_prev^2`; op nodes `n0..`; outputs `h_next^1`, `h_next^2`.
pub fn rnn_cell_dot(cell: &RnnCellGraph) -> String {
    let mut out = String::new();
    out.push_str(&format!("digraph cell_{} {{\n", sanitize(&cell.name)));
    out.push_str("  rankdir=LR;\n");
    for src in ["x_t", "h_prev^1", "h_prev^2"] {
        out.push_str(&format!("  \"{src}\" [shape=box];\n"));
    }
    for (i, node) in cell.nodes.iter().enumerate() {
        out.push_str(&format!(
            "  \"n{i}\" [shape=ellipse, label=\"{}\"];\n",
            node.op.name()
        ));
    }
    for out_name in ["h_next^1", "h_next^2"] {
        out.push_str(&format!("  \"{out_name}\" [shape=box];\n"));
    }
    for (i, node) in cell.nodes.iter().enumerate() {
        for (slot, &operand) in node.operands.iter().enumerate() {
            out.push_str(&format!(
                "  \"{}\" -> \"n{i}\" [label=\"arg{slot}\"];\n",
                rnn_ref_name(operand)
            ));
        }
    }
    out.push_str(&format!(
        "  \"{}\" -> \"h_next^1\";\n",
        rnn_ref_name(cell.h1_next)
    ));
    out.push_str(&format!(
        "  \"{}\" -> \"h_next^2\";\n",
        rnn_ref_name(cell.h2_next)
    ));
    out.push_str("}\n");
    out
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darts::{EdgeGene, GenotypeMeta, NodeGene, GENOTYPE_FORMAT_VERSION};
    use crate::rnn::gru_like_cell;
    use crate::space::CnnOpKind;

    fn two_node_genotype() -> Genotype {
        let node = |a: (usize, CnnOpKind), b: (usize, CnnOpKind)| NodeGene {
            edges: vec![
                EdgeGene { source: a.0, op: a.1 },
                EdgeGene { source: b.0, op: b.1 },
            ],
        };
        Genotype {
            version: GENOTYPE_FORMAT_VERSION,
            num_nodes: 2,
            normal: vec![
                node((0, CnnOpKind::SepConv3x3), (1, CnnOpKind::SkipConnect)),
                node((1, CnnOpKind::MaxPool3x3), (2, CnnOpKind::DilConv5x5)),
            ],
            reduction: vec![
                node((0, CnnOpKind::AvgPool3x3), (1, CnnOpKind::SepConv5x5)),
                node((0, CnnOpKind::SkipConnect), (2, CnnOpKind::DilConv3x3)),
            ],
            meta: GenotypeMeta::default(),
        }
    }

    /// Test-side oracle: pull `"a" -> "b" [label="op"];` lines back out.
    fn parse_op_edges(dot: &str) -> Vec<(String, String, String)> {
        let mut edges = Vec::new();
        for line in dot.lines() {
            let line = line.trim();
            if !line.contains("->") || !line.contains("label=") {
                continue;
            }
            let parts: Vec<&str> = line.split("->").collect();
            let from = parts[0].trim().trim_matches('"').to_string();
            let rest = parts[1];
            let to = rest.split('[').next().unwrap().trim().trim_matches('"').to_string();
            let label = rest
                .split("label=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap()
                .to_string();
            edges.push((from, to, label));
        }
        edges
    }

    #[test]
    fn two_node_genotype_has_four_op_edges_per_cell() {
        let g = two_node_genotype();
        let dot = genotype_cell_dot(&g, CellType::Normal);
        let ops: Vec<_> = parse_op_edges(&dot)
            .into_iter()
            .filter(|(_, _, l)| l != "concat")
            .collect();
        assert_eq!(ops.len(), 4);
    }

    #[test]
    fn export_is_deterministic() {
        let g = two_node_genotype();
        assert_eq!(genotype_dot(&g), genotype_dot(&g));
        let cell = gru_like_cell();
        assert_eq!(rnn_cell_dot(&cell), rnn_cell_dot(&cell));
    }

    #[test]
    fn round_trip_edge_multiset_matches_genotype() {
        let g = two_node_genotype();
        for (cell_type, nodes) in [(CellType::Normal, &g.normal), (CellType::Reduction, &g.reduction)]
        {
            let dot = genotype_cell_dot(&g, cell_type);
            let mut parsed: Vec<(String, String, String)> = parse_op_edges(&dot)
                .into_iter()
                .filter(|(_, _, l)| l != "concat")
                .collect();
            let mut expected: Vec<(String, String, String)> = nodes
                .iter()
                .enumerate()
                .flat_map(|(j, node)| {
                    node.edges.iter().map(move |e| {
                        (
                            cnn_source_name(e.source),
                            j.to_string(),
                            e.op.name().to_string(),
                        )
                    })
                })
                .collect();
            parsed.sort();
            expected.sort();
            assert_eq!(parsed, expected);
        }
    }

    #[test]
    fn rnn_dot_names_sources_and_outputs() {
        let dot = rnn_cell_dot(&gru_like_cell());
        for needle in ["\"x_t\"", "\"h_prev^1\"", "\"h_prev^2\"", "\"h_next^1\"", "\"h_next^2\"", "blend"] {
            assert!(dot.contains(needle), "missing {needle} in:\n{dot}");
        }
    }
}
