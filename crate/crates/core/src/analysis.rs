//! Interpretation of trained AGNN attention.
//!
//! The relevance of neighbour `j` to node `i` measures how far the learned attention
//! departs from uniform averaging over `N(i) ∪ {i}`, as a multiplicative deviation:
//! `R(j→i) = (P_ij − u_i) / u_i` with `u_i = 1 / (|N(i)| + 1)`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, SparseGraph};

/// Per-layer attention matrices captured during an eval-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    layers: Vec<CsrMatrix>,
}

impl AttentionRecord {
    pub fn new(layers: Vec<CsrMatrix>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[CsrMatrix] {
        &self.layers
    }

    pub fn layer(&self, t: usize) -> Result<&CsrMatrix> {
        self.layers.get(t).ok_or_else(|| {
            Error::Input(format!(
                "layer {t} requested from a record with {} layers",
                self.layers.len()
            ))
        })
    }

    pub fn last(&self) -> Option<&CsrMatrix> {
        self.layers.last()
    }
}

/// One entry of `Eˢ = E ∪ {(i, i)}` with its relevance score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRelevance {
    /// The attending node `i`.
    pub dst: usize,
    /// The attended neighbour `j`.
    pub src: usize,
    pub score: f64,
}

impl EdgeRelevance {
    pub fn is_self_loop(&self) -> bool {
        self.dst == self.src
    }
}

/// `R(j→i)` for every `(i, j)` in the self-loop-augmented edge set, row-major.
pub fn edge_relevance(p: &CsrMatrix, graph: &SparseGraph) -> Result<Vec<EdgeRelevance>> {
    let (offsets, cols) = graph.self_loop_pattern();
    if p.nrows() != graph.num_nodes() || p.offsets() != offsets || p.indices() != cols {
        return Err(Error::Input(
            "attention matrix pattern does not match the self-loop-augmented graph".into(),
        ));
    }
    let mut out = Vec::with_capacity(p.nnz());
    for i in 0..p.nrows() {
        let uniform = 1.0 / (graph.degree(i) as f64 + 1.0);
        let (js, vals) = p.row(i);
        for (&j, &v) in js.iter().zip(vals) {
            out.push(EdgeRelevance {
                dst: i,
                src: j,
                score: (v - uniform) / uniform,
            });
        }
    }
    Ok(out)
}

/// Mean relevance between ordered class pairs: entry `(c1, c2)` averages `R(j→i)` over
/// `(i, j) ∈ Eˢ` with `Y_i = c1`, `Y_j = c2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    sums: Array2<f64>,
    counts: Array2<usize>,
}

impl RelevanceMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    /// `None` when no edge connects the two classes.
    pub fn get(&self, c1: usize, c2: usize) -> Option<f64> {
        let n = self.counts[[c1, c2]];
        (n > 0).then(|| self.sums[[c1, c2]] / n as f64)
    }

    pub fn count(&self, c1: usize, c2: usize) -> usize {
        self.counts[[c1, c2]]
    }

    pub fn counts(&self) -> &Array2<usize> {
        &self.counts
    }

    /// Per class: its diagonal entry and the mean of the present off-diagonal
    /// entries in its row.
    pub fn diagonal_dominance(&self) -> Vec<(usize, Option<f64>, Option<f64>)> {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let off: Vec<f64> = (0..k).filter(|&d| d != c).filter_map(|d| self.get(c, d)).collect();
                let mean = (!off.is_empty()).then(|| off.iter().sum::<f64>() / off.len() as f64);
                (c, self.get(c, c), mean)
            })
            .collect()
    }

    /// CSV with a header row and first column of class names; absent cells are empty.
    pub fn write_csv<W: Write>(&self, mut w: W, class_names: &[String]) -> Result<()> {
        self.write_table(&mut w, class_names, |c1, c2| {
            self.get(c1, c2).map(|v| format!("{v}")).unwrap_or_default()
        })
    }

    pub fn write_counts_csv<W: Write>(&self, mut w: W, class_names: &[String]) -> Result<()> {
        self.write_table(&mut w, class_names, |c1, c2| self.count(c1, c2).to_string())
    }

    fn write_table<W: Write>(
        &self,
        w: &mut W,
        class_names: &[String],
        cell: impl Fn(usize, usize) -> String,
    ) -> Result<()> {
        let k = self.num_classes();
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let io = |e| Error::io("<relevance csv>", e);
        let header: Vec<String> = std::iter::once("class".to_string())
            .chain((0..k).map(name))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for c1 in 0..k {
            let row: Vec<String> = std::iter::once(name(c1))
                .chain((0..k).map(|c2| cell(c1, c2)))
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

pub fn class_relevance(
    edges: &[EdgeRelevance],
    labels: &[usize],
    num_classes: usize,
) -> Result<RelevanceMatrix> {
    let mut sums = Array2::zeros((num_classes, num_classes));
    let mut counts = Array2::zeros((num_classes, num_classes));
    for e in edges {
        let (c1, c2) = (labels[e.dst], labels[e.src]);
        if c1 >= num_classes || c2 >= num_classes {
            return Err(Error::Input(format!(
                "label out of range on edge ({}, {})",
                e.dst, e.src
            )));
        }
        sums[[c1, c2]] += e.score;
        counts[[c1, c2]] += 1;
    }
    Ok(RelevanceMatrix { sums, counts })
}

/// Fractions of same-class endpoints among the `m` most and `m` least relevant
/// non-self-loop edges. Ties in score are ordered by `(i, j)`.
pub fn top_bottom_same_class(
    edges: &[EdgeRelevance],
    labels: &[usize],
    m: usize,
) -> Result<(f64, f64)> {
    if m == 0 {
        return Err(Error::Input("edge count m must be positive".into()));
    }
    let mut ranked: Vec<&EdgeRelevance> = edges.iter().filter(|e| !e.is_self_loop()).collect();
    if m > ranked.len() {
        return Err(Error::Input(format!(
            "m = {m} exceeds the {} directed edges available",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.dst, a.src).cmp(&(b.dst, b.src)))
    });
    let same = |slice: &[&EdgeRelevance]| {
        slice.iter().filter(|e| labels[e.dst] == labels[e.src]).count() as f64 / m as f64
    };
    Ok((same(&ranked[..m]), same(&ranked[ranked.len() - m..])))
}

/// Row `target` of `P⁽ℓ⁾ ⋯ P⁽¹⁾`, by repeated sparse vector–matrix products. Entries
/// are sorted by node id.
pub fn aggregate_attention(record: &AttentionRecord, target: usize) -> Result<Vec<(usize, f64)>> {
    let n = record
        .layers()
        .first()
        .map(CsrMatrix::nrows)
        .ok_or_else(|| Error::Input("empty attention record".into()))?;
    if target >= n {
        return Err(Error::Input(format!("target {target} out of range for {n} nodes")));
    }
    let mut v = BTreeMap::from([(target, 1.0)]);
    for p in record.layers().iter().rev() {
        let mut next = BTreeMap::new();
        for (&k, &w) in &v {
            let (cols, vals) = p.row(k);
            for (&j, &pv) in cols.iter().zip(vals) {
                *next.entry(j).or_insert(0.0) += w * pv;
            }
        }
        v = next;
    }
    Ok(v.into_iter().collect())
}

/// One node of a neighbourhood export.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodNode {
    pub node: usize,
    pub hops: usize,
    pub class: usize,
    pub in_train: bool,
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub target: usize,
    pub nodes: Vec<NeighborhoodNode>,
    pub edges: Vec<(usize, usize)>,
}

/// Nodes within `hops` of `target` annotated with aggregated attention to the target.
pub fn neighborhood(
    graph: &SparseGraph,
    labels: &[usize],
    train: &[usize],
    record: &AttentionRecord,
    target: usize,
    hops: usize,
) -> Result<Neighborhood> {
    if hops == 0 {
        return Err(Error::Input("hops must be at least 1".into()));
    }
    let attention: BTreeMap<usize, f64> = aggregate_attention(record, target)?.into_iter().collect();
    let mut reached = graph.within_hops(target, hops);
    reached.sort_unstable();
    let in_train: std::collections::HashSet<usize> = train.iter().copied().collect();
    let members: std::collections::HashSet<usize> = reached.iter().map(|&(u, _)| u).collect();
    let nodes = reached
        .iter()
        .map(|&(u, d)| NeighborhoodNode {
            node: u,
            hops: d,
            class: labels[u],
            in_train: in_train.contains(&u),
            attention: attention.get(&u).copied().unwrap_or(0.0),
        })
        .collect();
    let edges = graph
        .edges()
        .filter(|(i, j)| members.contains(i) && members.contains(j))
        .collect();
    Ok(Neighborhood {
        target,
        nodes,
        edges,
    })
}

impl Neighborhood {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "node_id,class,in_train,attention")?;
        for n in &self.nodes {
            writeln!(w, "{},{},{},{}", n.node, n.class, n.in_train, n.attention)?;
        }
        Ok(())
    }

    /// Graphviz DOT: `width` scales with attention (widest node 2.0), `color` indexes
    /// a 12-colour scheme by class, the target is drawn as a double circle.
    pub fn write_dot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let max = self
            .nodes
            .iter()
            .map(|n| n.attention)
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        writeln!(w, "graph neighborhood {{")?;
        writeln!(w, "  node [shape=circle, style=filled, colorscheme=paired12, fixedsize=true];")?;
        for n in &self.nodes {
            let target = n.node == self.target;
            writeln!(
                w,
                "  {} [width={:.6}, color={}, class={}, in_train={}, attention={}{}];",
                n.node,
                2.0 * n.attention / max,
                n.class % 12 + 1,
                n.class,
                n.in_train,
                n.attention,
                if target { ", target=true, shape=doublecircle" } else { "" }
            )?;
        }
        for (i, j) in &self.edges {
            writeln!(w, "  {i} -- {j};")?;
        }
        writeln!(w, "}}")
    }

    /// Writes `<stem>.csv` and `<stem>.dot` under `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let dot = dir.join(format!("{stem}.dot"));
        let f = File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        self.write_csv(BufWriter::new(f)).map_err(|e| Error::io(&csv, e))?;
        let f = File::create(&dot).map_err(|e| Error::io(&dot, e))?;
        self.write_dot(BufWriter::new(f)).map_err(|e| Error::io(&dot, e))?;
        Ok((csv, dot))
    }
}

/// Edge relevance of every layer as CSV rows `src,dst,layer,R`; `layers[t]` is
/// reported as layer `t + 1`.
pub fn write_edge_relevance_csv<W: Write>(mut w: W, layers: &[Vec<EdgeRelevance>]) -> std::io::Result<()> {
    writeln!(w, "src,dst,layer,R")?;
    for (t, edges) in layers.iter().enumerate() {
        for e in edges {
            writeln!(w, "{},{},{},{}", e.src, e.dst, t + 1, e.score)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_uniform(edges: &[(usize, usize)], n: usize) -> (SparseGraph, CsrMatrix) {
        let g = SparseGraph::from_edges(n, edges).unwrap();
        let p = g.mean_propagator();
        (g, p)
    }

    #[test]
    fn uniform_attention_has_zero_relevance() {
        let (g, p) = graph_with_uniform(&[(0, 1), (1, 2), (2, 0), (2, 3)], 5);
        let r = edge_relevance(&p, &g).unwrap();
        assert_eq!(r.len(), 2 * 4 + 5);
        assert!(r.iter().all(|e| e.score.abs() < 1e-15));
        let m = class_relevance(&r, &[0, 1, 0, 1, 1], 2).unwrap();
        for c1 in 0..2 {
            for c2 in 0..2 {
                assert_eq!(m.get(c1, c2).unwrap_or(0.0), 0.0);
            }
        }
    }

    #[test]
    fn isolated_node_self_relevance_is_zero() {
        let (g, p) = graph_with_uniform(&[], 1);
        let r = edge_relevance(&p, &g).unwrap();
        assert_eq!(r, vec![EdgeRelevance { dst: 0, src: 0, score: 0.0 }]);
    }

    #[test]
    fn single_neighbor_relevance_by_hand() {
        let g = SparseGraph::from_edges(2, &[(0, 1)]).unwrap();
        let (off, cols) = g.self_loop_pattern();
        // row 0: [P00, P01] = [0.25, 0.75]; row 1: [P10, P11] = [0.4, 0.6]
        let p = CsrMatrix::from_parts(2, 2, off, cols, vec![0.25, 0.75, 0.4, 0.6]);
        let r = edge_relevance(&p, &g).unwrap();
        let score = |i, j| r.iter().find(|e| e.dst == i && e.src == j).unwrap().score;
        assert!((score(0, 1) - 0.5).abs() < 1e-15);
        assert!((score(0, 0) + 0.5).abs() < 1e-15);
        assert!((score(1, 0) + 0.2).abs() < 1e-15);
        assert!((score(1, 1) - 0.2).abs() < 1e-15);

        // classes (0, 1): every cell has exactly one sample
        let m = class_relevance(&r, &[0, 1], 2).unwrap();
        assert!((m.get(0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.get(1, 0).unwrap() + 0.2).abs() < 1e-15);
        assert!((m.get(0, 0).unwrap() + 0.5).abs() < 1e-15);
        assert!((m.get(1, 1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(m.counts(), &ndarray::array![[1, 1], [1, 1]]);
    }

    #[test]
    fn pattern_mismatch_is_rejected() {
        let g = SparseGraph::from_edges(3, &[(0, 1)]).unwrap();
        let other = SparseGraph::from_edges(3, &[(1, 2)]).unwrap();
        assert!(edge_relevance(&other.mean_propagator(), &g).is_err());
    }

    #[test]
    fn absent_class_pairs() {
        let (g, p) = graph_with_uniform(&[(0, 1)], 3);
        let r = edge_relevance(&p, &g).unwrap();
        let m = class_relevance(&r, &[0, 0, 2], 3).unwrap();
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.count(0, 2), 0);
        assert_eq!(m.get(1, 1), None);
        assert_eq!(m.count(0, 0), 4);
        let mut buf = Vec::new();
        m.write_csv(&mut buf, &["a".into(), "b".into(), "c".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "class,a,b,c");
        assert_eq!(text.lines().nth(2).unwrap(), "b,,,");
    }

    #[test]
    fn top_bottom_fractions() {
        let edges: Vec<EdgeRelevance> = [(0, 1, 0.9), (1, 0, 0.5), (1, 2, -0.3), (2, 1, -0.8), (0, 0, 5.0)]
            .iter()
            .map(|&(dst, src, score)| EdgeRelevance { dst, src, score })
            .collect();
        let (top, bottom) = top_bottom_same_class(&edges, &[0, 0, 1], 2).unwrap();
        assert_eq!((top, bottom), (1.0, 0.0));
        let (top, bottom) = top_bottom_same_class(&edges, &[3, 3, 3], 4).unwrap();
        assert_eq!((top, bottom), (1.0, 1.0));
        assert!(top_bottom_same_class(&edges, &[0, 0, 1], 0).is_err());
        assert!(top_bottom_same_class(&edges, &[0, 0, 1], 5).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let edges: Vec<EdgeRelevance> = [(2, 0, 0.0), (0, 1, 0.0), (1, 0, 0.0), (0, 2, 0.0)]
            .iter()
            .map(|&(dst, src, score)| EdgeRelevance { dst, src, score })
            .collect();
        // top-1 is (0, 1): same class; bottom-1 is (2, 0): different
        let (top, bottom) = top_bottom_same_class(&edges, &[0, 0, 1], 1).unwrap();
        assert_eq!((top, bottom), (1.0, 0.0));
    }

    #[test]
    fn aggregate_single_layer_is_row() {
        let (_, p) = graph_with_uniform(&[(0, 1), (1, 2)], 3);
        let rec = AttentionRecord::new(vec![p.clone()]);
        let agg = aggregate_attention(&rec, 1).unwrap();
        let (cols, vals) = p.row(1);
        let expect: Vec<(usize, f64)> = cols.iter().copied().zip(vals.iter().copied()).collect();
        assert_eq!(agg, expect);
        assert!(aggregate_attention(&rec, 3).is_err());
    }

    #[test]
    fn isolated_pair_export() {
        let g = SparseGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let (off, cols) = g.self_loop_pattern();
        let p = CsrMatrix::from_parts(4, 4, off, cols, vec![0.8, 0.2, 0.2, 0.8, 0.5, 0.5, 0.5, 0.5]);
        let rec = AttentionRecord::new(vec![p.clone(), p]);
        let nb = neighborhood(&g, &[0, 1, 0, 0], &[1], &rec, 0, 2).unwrap();
        assert_eq!(nb.nodes.iter().map(|n| n.node).collect::<Vec<_>>(), vec![0, 1]);
        let own = nb.nodes[0].attention;
        assert!(own > nb.nodes[1].attention);
        assert!((own + nb.nodes[1].attention - 1.0).abs() < 1e-15);
        assert!(nb.nodes[1].in_train);

        let mut csv = Vec::new();
        nb.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "node_id,class,in_train,attention");
        assert_eq!(text.lines().count(), 3);

        let mut dot = Vec::new();
        nb.write_dot(&mut dot).unwrap();
        let dot = String::from_utf8(dot).unwrap();
        assert!(dot.contains("target=true"));
        assert!(dot.contains("0 -- 1;"));
        assert!(!dot.contains("2 -- 3"));
        assert!(neighborhood(&g, &[0, 1, 0, 0], &[1], &rec, 0, 0).is_err());
    }
}
