//! Synthetic graphs for tests and demos.
//!
//! [`citation_like`] draws a planted-partition graph whose nodes carry sparse
//! bag-of-words features biased toward a per-class vocabulary block, which gives
//! the same qualitative structure as citation benchmarks (homophilous edges,
//! informative but noisy features) at any size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, SparseGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationLikeConfig {
    pub name: String,
    pub nodes: usize,
    pub classes: usize,
    pub average_degree: f64,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    pub vocabulary: usize,
    pub words_per_node: usize,
    /// Probability that a word is drawn from the node's class block.
    pub topic_strength: f64,
    pub train_per_class: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for CitationLikeConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            nodes: 600,
            classes: 4,
            average_degree: 4.0,
            homophily: 0.8,
            vocabulary: 200,
            words_per_node: 12,
            topic_strength: 0.3,
            train_per_class: 20,
            validation: 150,
            test: 300,
        }
    }
}

/// Generates a dataset and its canonical split (the first `train_per_class` nodes of
/// each class, then the next `validation` nodes, and the last `test` nodes).
pub fn citation_like(config: &CitationLikeConfig, seed: u64) -> Result<(Dataset, Split)> {
    let c = config.classes;
    if c == 0 || config.nodes < c || config.vocabulary < c {
        return Err(Error::Config("synthetic graph needs nodes >= classes >= 1 and vocabulary >= classes".into()));
    }
    if config.train_per_class * c + config.validation + config.test > config.nodes {
        return Err(Error::Config("split sizes exceed the node count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.nodes;
    let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let target_edges = (n as f64 * config.average_degree / 2.0).round() as usize;
    let mut edges = Vec::with_capacity(target_edges);
    while edges.len() < target_edges {
        let u = rng.random_range(0..n);
        let pool = if c == 1 || rng.random::<f64>() < config.homophily {
            &by_class[labels[u]]
        } else {
            let mut other = rng.random_range(0..c - 1);
            if other >= labels[u] {
                other += 1;
            }
            &by_class[other]
        };
        let v = pool[rng.random_range(0..pool.len())];
        if u != v {
            edges.push((u, v));
        }
    }
    let graph = SparseGraph::from_edges(n, &edges)?;

    let block = config.vocabulary / c;
    let mut triplets = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let mut words: Vec<usize> = (0..config.words_per_node)
            .map(|_| {
                if rng.random::<f64>() < config.topic_strength {
                    y * block + rng.random_range(0..block)
                } else {
                    rng.random_range(0..config.vocabulary)
                }
            })
            .collect();
        words.sort_unstable();
        words.dedup();
        triplets.extend(words.into_iter().map(|k| (i, k, 1.0)));
    }
    let features = CsrMatrix::from_triplets(n, config.vocabulary, &triplets)?;

    let mut train = Vec::new();
    for members in &by_class {
        train.extend(members.iter().copied().take(config.train_per_class));
    }
    train.sort_unstable();
    let test: Vec<usize> = (n - config.test..n).collect();
    let validation: Vec<usize> = (0..n - config.test)
        .filter(|i| train.binary_search(i).is_err())
        .take(config.validation)
        .collect();
    let split = Split {
        train,
        validation,
        test,
    };

    let dataset = Dataset {
        name: config.name.clone(),
        features,
        labels,
        graph,
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
    };
    Ok((dataset, split))
}

/// Two disjoint cliques with identity features and one labeled node each. Every
/// other node is both validation and test.
pub fn two_cliques(first: usize, second: usize) -> (Dataset, Split) {
    let n = first + second;
    let mut edges = Vec::new();
    for (start, len) in [(0, first), (first, second)] {
        for i in start..start + len {
            for j in i + 1..start + len {
                edges.push((i, j));
            }
        }
    }
    let graph = SparseGraph::from_edges(n, &edges).expect("indices in range");
    let features = CsrMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
        .expect("indices in range");
    let labels = (0..n).map(|i| usize::from(i >= first)).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| i != 0 && i != first).collect();
    let dataset = Dataset {
        name: "two-cliques".into(),
        features,
        labels,
        graph,
        class_names: vec!["left".into(), "right".into()],
    };
    let split = Split {
        train: vec![0, first],
        validation: rest.clone(),
        test: rest,
    };
    (dataset, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = CitationLikeConfig::default();
        let (a, sa) = citation_like(&cfg, 1).unwrap();
        let (b, sb) = citation_like(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        sa.validate(a.num_nodes()).unwrap();
        assert_eq!(sa.sizes(), (80, 150, 300));
        assert!(a.class_histogram(&sa.train).iter().all(|&k| k == 20));
        let same = a.graph.edges().filter(|&(i, j)| a.labels[i] == a.labels[j]).count();
        assert!(same as f64 / a.graph.num_edges() as f64 > 0.7);
    }

    #[test]
    fn cliques() {
        let (ds, split) = two_cliques(5, 6);
        assert_eq!(ds.graph.num_edges(), 10 + 15);
        assert_eq!(split.train, vec![0, 5]);
        split.validate(11).unwrap();
    }
}
