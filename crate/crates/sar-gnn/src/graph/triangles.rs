//! Synthetic triangle-counting benchmark: Erdős–Rényi graphs rejection-
//! sampled to a target triangle-count range, with ground-truth saliency
//! masks over triangle-member nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{init_features, Dataset, FeatureMode, Graph};

/// Count triangles by brute-force enumeration of node triples.
pub fn count_triangles(g: &Graph) -> usize {
    let n = g.num_nodes();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !g.has_edge(i, j) {
                continue;
            }
            for k in j + 1..n {
                if g.has_edge(i, k) && g.has_edge(j, k) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Uniform mass over nodes that belong to at least one triangle, or `None`
/// when the graph is triangle-free.
pub fn triangle_member_mask(g: &Graph) -> Option<Vec<f64>> {
    let n = g.num_nodes();
    let mut member = vec![false; n];
    for i in 0..n {
        for j in i + 1..n {
            if !g.has_edge(i, j) {
                continue;
            }
            for k in j + 1..n {
                if g.has_edge(i, k) && g.has_edge(j, k) {
                    member[i] = true;
                    member[j] = true;
                    member[k] = true;
                }
            }
        }
    }
    let total = member.iter().filter(|&&m| m).count();
    if total == 0 {
        return None;
    }
    let w = 1.0 / total as f64;
    Some(member.iter().map(|&m| if m { w } else { 0.0 }).collect())
}

/// Parameters for [`generate_triangles`].
#[derive(Debug, Clone)]
pub struct TriangleSpec {
    pub count: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    /// Labels span triangle counts `1..=max_label`.
    pub max_label: usize,
    pub edge_prob: f64,
    pub seed: u64,
}

impl Default for TriangleSpec {
    fn default() -> Self {
        TriangleSpec {
            count: 600,
            nodes_min: 6,
            nodes_max: 20,
            max_label: 3,
            edge_prob: 0.16,
            seed: 0,
        }
    }
}

const ATTEMPTS_PER_GRAPH: usize = 100_000;

/// Generate a class-balanced dataset of graphs whose label is the triangle
/// count minus one. Each graph carries a ground-truth saliency mask that is
/// uniform over triangle-member nodes.
pub fn generate_triangles(spec: &TriangleSpec) -> Result<Dataset> {
    if spec.max_label < 2 {
        return Err(Error::Contract("need at least 2 label values".into()));
    }
    if spec.nodes_min < 3 {
        return Err(Error::Contract("nodes_min must be at least 3".into()));
    }
    if spec.nodes_min > spec.nodes_max {
        return Err(Error::Contract("empty node-count range".into()));
    }
    if !(0.0..=1.0).contains(&spec.edge_prob) {
        return Err(Error::Contract("edge_prob outside [0, 1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Per-class quotas balanced within one graph.
    let base = spec.count / spec.max_label;
    let extra = spec.count % spec.max_label;
    let mut quota: Vec<usize> =
        (0..spec.max_label).map(|c| base + usize::from(c < extra)).collect();

    let mut graphs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut accepted = None;
        for _ in 0..ATTEMPTS_PER_GRAPH {
            let n = rng.random_range(spec.nodes_min..=spec.nodes_max);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < spec.edge_prob {
                        edges.push((u, v));
                    }
                }
            }
            let g = Graph::new(n, &edges, Tensor::zeros(vec![n, 1]), 0, None)?;
            let t = count_triangles(&g);
            if t < 1 || t > spec.max_label || quota[t - 1] == 0 {
                continue;
            }
            quota[t - 1] -= 1;
            let truth = triangle_member_mask(&g).expect("t >= 1 implies members exist");
            let labeled = Graph::new(n, &edges, Tensor::zeros(vec![n, 1]), t - 1, Some(truth))?;
            accepted = Some(init_features(
                &labeled,
                FeatureMode::DegreeOnehot { max_degree: 10 },
            ));
            break;
        }
        match accepted {
            Some(g) => graphs.push(g),
            None => {
                return Err(Error::Generation(format!(
                    "exhausted {ATTEMPTS_PER_GRAPH} draws; edge_prob {} cannot reach the \
                     remaining label quota {:?} on {}..={} nodes",
                    spec.edge_prob, quota, spec.nodes_min, spec.nodes_max
                )))
            }
        }
    }
    Dataset::new(
        format!("triangles-{}-{}", spec.max_label, spec.seed),
        spec.max_label,
        graphs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_counts_on_known_graphs() {
        let k3 = super::super::tests::complete_graph(3);
        assert_eq!(count_triangles(&k3), 1);

        let p4 = super::super::tests::path_graph(4);
        assert_eq!(count_triangles(&p4), 0);

        // K4: all C(4,3) triples close
        let k4 = super::super::tests::complete_graph(4);
        assert_eq!(count_triangles(&k4), 4);
    }

    /// Independent route: trace(A^3) / 6 by matrix powering.
    pub(crate) fn triangles_by_trace(g: &Graph) -> usize {
        let n = g.num_nodes();
        let mut a = vec![0.0_f64; n * n];
        for i in 0..n {
            for &j in g.neighbors(i) {
                a[i * n + j] = 1.0;
            }
        }
        let mm = |x: &[f64], y: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let xv = x[i * n + k];
                    if xv == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += xv * y[k * n + j];
                    }
                }
            }
            out
        };
        let a3 = mm(&mm(&a, &a), &a);
        let trace: f64 = (0..n).map(|i| a3[i * n + i]).sum();
        (trace / 6.0).round() as usize
    }

    #[test]
    fn brute_force_matches_trace_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(3..=25);
            let p = rng.random_range(0.05..0.5);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            let g = Graph::new(n, &edges, Tensor::zeros(vec![n, 1]), 0, None).unwrap();
            assert_eq!(count_triangles(&g), triangles_by_trace(&g));
        }
    }

    #[test]
    fn generation_is_deterministic_and_label_consistent() {
        let spec = TriangleSpec {
            count: 10,
            nodes_min: 6,
            nodes_max: 10,
            max_label: 3,
            edge_prob: 0.25,
            seed: 7,
        };
        let d1 = generate_triangles(&spec).unwrap();
        let d2 = generate_triangles(&spec).unwrap();
        assert_eq!(d1, d2);
        for g in &d1.graphs {
            assert_eq!(count_triangles(g) - 1, g.label());
            let truth = g.saliency_truth().unwrap();
            assert!((truth.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn classes_are_balanced_within_one() {
        let spec = TriangleSpec {
            count: 31,
            nodes_min: 6,
            nodes_max: 12,
            max_label: 3,
            edge_prob: 0.25,
            seed: 3,
        };
        let d = generate_triangles(&spec).unwrap();
        let mut counts = vec![0usize; 3];
        for g in &d.graphs {
            counts[g.label()] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 31);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn single_triangle_mask_is_third_on_member_nodes() {
        // path 0-1-2-3-4 plus edge (0,2) closes exactly one triangle {0,1,2}
        let g = Graph::new(
            5,
            &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)],
            Tensor::zeros(vec![5, 1]),
            0,
            None,
        )
        .unwrap();
        assert_eq!(count_triangles(&g), 1);
        let mask = triangle_member_mask(&g).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(mask, vec![third, third, third, 0.0, 0.0]);
    }

    #[test]
    fn relabeling_permutes_the_mask() {
        let spec = TriangleSpec {
            count: 5,
            nodes_min: 6,
            nodes_max: 9,
            max_label: 2,
            edge_prob: 0.3,
            seed: 11,
        };
        let d = generate_triangles(&spec).unwrap();
        for (i, g) in d.graphs.iter().enumerate() {
            let n = g.num_nodes();
            let perm: Vec<usize> = (0..n).map(|v| (v + 2 + i) % n).collect();
            let pg = g.permute(&perm).unwrap();
            // recomputing the mask on the relabeled graph matches the
            // permuted original mask
            assert_eq!(
                triangle_member_mask(&pg).unwrap(),
                pg.saliency_truth().unwrap()
            );
        }
    }

    #[test]
    fn impossible_quota_reports_generation_error() {
        // p = 0 never produces a triangle
        let spec = TriangleSpec {
            count: 2,
            nodes_min: 6,
            nodes_max: 8,
            max_label: 2,
            edge_prob: 0.0,
            seed: 1,
        };
        assert!(matches!(
            generate_triangles(&spec),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn preconditions_are_contract_errors() {
        let mut s = TriangleSpec::default();
        s.max_label = 1;
        assert!(matches!(generate_triangles(&s), Err(Error::Contract(_))));
        let mut s = TriangleSpec::default();
        s.nodes_min = 2;
        assert!(matches!(generate_triangles(&s), Err(Error::Contract(_))));
    }
}
