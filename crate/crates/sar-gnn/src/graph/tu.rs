//! Loader for the TU-format plain-text dataset convention: node-indexed
//! edge pairs, a graph indicator, per-graph labels, and optional per-node
//! labels.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{init_features, Dataset, FeatureMode, Graph};

/// Load `<name>_A.txt`, `<name>_graph_indicator.txt` and
/// `<name>_graph_labels.txt` from `dir`, plus `<name>_node_labels.txt`
/// when present.
///
/// Node ids are 1-indexed and global across the file set; edge pairs are
/// directed in the file and symmetrized on load. Graph labels are remapped
/// to a contiguous `0..K`. Node labels, when present, become one-hot
/// features; otherwise features default to capped degree one-hots.
pub fn load_tu_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let read = |suffix: &str| -> Result<String> {
        let path = dir.join(format!("{name}_{suffix}.txt"));
        std::fs::read_to_string(&path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })
    };

    let indicator_text = read("graph_indicator")?;
    let labels_text = read("graph_labels")?;
    let edges_text = read("A")?;

    // node -> graph assignment (0-indexed graphs)
    let mut node_graph = Vec::new();
    for (lineno, line) in non_empty_lines(&indicator_text) {
        let gid: usize = parse_field(line, lineno, "graph_indicator")?;
        if gid == 0 {
            return Err(Error::Format(format!(
                "graph_indicator line {lineno}: graph ids are 1-indexed"
            )));
        }
        node_graph.push(gid - 1);
    }
    let num_nodes_total = node_graph.len();
    let num_graphs = node_graph.iter().max().map_or(0, |&g| g + 1);
    if num_graphs == 0 {
        return Err(Error::Format("graph_indicator declares no nodes".into()));
    }

    // raw graph labels, remapped to contiguous 0..K
    let mut raw_labels = Vec::new();
    for (lineno, line) in non_empty_lines(&labels_text) {
        let l: i64 = parse_field(line, lineno, "graph_labels")?;
        raw_labels.push(l);
    }
    if raw_labels.len() != num_graphs {
        return Err(Error::Format(format!(
            "graph_labels has {} entries for {} graphs",
            raw_labels.len(),
            num_graphs
        )));
    }
    let classes: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a member by construction"))
        .collect();

    // local node numbering per graph, in ascending global-id order
    let mut local_index = vec![0usize; num_nodes_total];
    let mut graph_sizes = vec![0usize; num_graphs];
    for (node, &g) in node_graph.iter().enumerate() {
        local_index[node] = graph_sizes[g];
        graph_sizes[g] += 1;
    }

    let mut edge_lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (lineno, line) in non_empty_lines(&edges_text) {
        let mut parts = line.split(',');
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (
                parse_field::<usize>(a, lineno, "A")?,
                parse_field::<usize>(b, lineno, "A")?,
            ),
            _ => {
                return Err(Error::Format(format!(
                    "A line {lineno}: expected \"i, j\", got {line:?}"
                )))
            }
        };
        for id in [u, v] {
            if id == 0 || id > num_nodes_total {
                return Err(Error::Format(format!(
                    "A line {lineno}: node id {id} outside 1..={num_nodes_total}"
                )));
            }
        }
        let (u, v) = (u - 1, v - 1);
        if node_graph[u] != node_graph[v] {
            return Err(Error::Format(format!(
                "A line {lineno}: edge joins graphs {} and {}",
                node_graph[u] + 1,
                node_graph[v] + 1
            )));
        }
        edge_lists[node_graph[u]].push((local_index[u], local_index[v]));
    }

    // optional node labels -> one-hot features
    let node_label_path = dir.join(format!("{name}_node_labels.txt"));
    let node_features: Option<Vec<Vec<f64>>> = if node_label_path.exists() {
        let text = std::fs::read_to_string(&node_label_path)?;
        let mut values = Vec::new();
        for (lineno, line) in non_empty_lines(&text) {
            let v: i64 = parse_field(line, lineno, "node_labels")?;
            values.push(v);
        }
        if values.len() != num_nodes_total {
            return Err(Error::Format(format!(
                "node_labels has {} entries for {} nodes",
                values.len(),
                num_nodes_total
            )));
        }
        let distinct: Vec<i64> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let dim = distinct.len();
        Some(
            values
                .iter()
                .map(|v| {
                    let mut row = vec![0.0; dim];
                    row[distinct.binary_search(v).expect("member by construction")] = 1.0;
                    row
                })
                .collect(),
        )
    } else {
        None
    };

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let n = graph_sizes[g];
        if n == 0 {
            return Err(Error::Format(format!("graph {} has no nodes", g + 1)));
        }
        let graph = match &node_features {
            Some(rows) => {
                let mut feats = vec![vec![]; n];
                for (node, &owner) in node_graph.iter().enumerate() {
                    if owner == g {
                        feats[local_index[node]] = rows[node].clone();
                    }
                }
                Graph::new(n, &edge_lists[g], Tensor::from_rows(&feats)?, labels[g], None)?
            }
            None => {
                let bare =
                    Graph::new(n, &edge_lists[g], Tensor::zeros(vec![n, 1]), labels[g], None)?;
                init_features(&bare, FeatureMode::DegreeOnehot { max_degree: 10 })
            }
        };
        graphs.push(graph);
    }

    Dataset::new(name.to_string(), classes.len(), graphs)
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<T: std::str::FromStr>(field: &str, lineno: usize, file: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{file} line {lineno}: cannot parse {field:?}")))
}
