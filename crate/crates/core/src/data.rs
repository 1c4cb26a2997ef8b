//! Dataset directory format, feature preprocessing and train/validation/test splits.
//!
//! A dataset directory holds:
//!
//! * `meta.json`: `{"name", "n", "d_x", "d_y", "class_names"}`
//! * `graph.txt`: one `i j` pair per line (0-based, either direction, duplicates allowed)
//! * `features.txt`: sparse triplets `i k v`; absent entries are zero
//! * `labels.txt`: line `i` holds the class of node `i`
//! * `splits/fixed.json` (optional): `{"train": [...], "val": [...], "test": [...]}`

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, SparseGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub n: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub class_names: Vec<String>,
}

/// A fully labeled graph with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: CsrMatrix,
    pub labels: Vec<usize>,
    pub graph: SparseGraph,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            name: self.name.clone(),
            n: self.num_nodes(),
            d_x: self.input_dim(),
            d_y: self.num_classes(),
            class_names: self.class_names.clone(),
        }
    }

    /// The same dataset with L1 row-normalized features.
    pub fn row_normalized(mut self) -> Result<Self> {
        self.features = row_normalize(&self.features)?;
        Ok(self)
    }

    /// Per-class node counts over `indices`.
    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes()];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(k, line)| (k + 1, line.map_err(|e| Error::io(path, e)))))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(
    parts: &mut std::str::SplitWhitespace<'_>,
    path: &Path,
    line: usize,
    what: &str,
) -> Result<T> {
    let token = parts
        .next()
        .ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    token
        .parse()
        .map_err(|_| parse_err(path, line, format!("malformed {what} {token:?}")))
}

fn no_trailing(parts: &mut std::str::SplitWhitespace<'_>, path: &Path, line: usize) -> Result<()> {
    match parts.next() {
        Some(extra) => Err(parse_err(path, line, format!("unexpected trailing field {extra:?}"))),
        None => Ok(()),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Loads and validates a dataset directory. Features are returned as stored; see
/// [`Dataset::row_normalized`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    if meta.class_names.len() != meta.d_y {
        return Err(parse_err(
            &dir.join("meta.json"),
            1,
            format!("{} class names for d_y = {}", meta.class_names.len(), meta.d_y),
        ));
    }

    let path = dir.join("labels.txt");
    let mut labels = Vec::with_capacity(meta.n);
    for (line, text) in open_lines(&path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let y: usize = field(&mut parts, &path, line, "label")?;
        no_trailing(&mut parts, &path, line)?;
        if y >= meta.d_y {
            return Err(parse_err(&path, line, format!("label {y} out of range for d_y = {}", meta.d_y)));
        }
        labels.push(y);
    }
    if labels.len() != meta.n {
        return Err(parse_err(
            &path,
            labels.len(),
            format!("{} labels, meta.json declares n = {}", labels.len(), meta.n),
        ));
    }

    let path = dir.join("features.txt");
    let mut triplets = Vec::new();
    for (line, text) in open_lines(&path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let i: usize = field(&mut parts, &path, line, "node index")?;
        let k: usize = field(&mut parts, &path, line, "feature index")?;
        let v: f64 = field(&mut parts, &path, line, "feature value")?;
        no_trailing(&mut parts, &path, line)?;
        if i >= meta.n || k >= meta.d_x {
            return Err(parse_err(
                &path,
                line,
                format!("entry ({i}, {k}) outside {}x{}", meta.n, meta.d_x),
            ));
        }
        if !v.is_finite() {
            return Err(parse_err(&path, line, "non-finite feature value"));
        }
        triplets.push((i, k, v));
    }
    let features = CsrMatrix::from_triplets(meta.n, meta.d_x, &triplets)?;

    let path = dir.join("graph.txt");
    let mut edges = Vec::new();
    for (line, text) in open_lines(&path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let mut parts = text.split_whitespace();
        let i: usize = field(&mut parts, &path, line, "source node")?;
        let j: usize = field(&mut parts, &path, line, "target node")?;
        no_trailing(&mut parts, &path, line)?;
        if i >= meta.n || j >= meta.n {
            return Err(parse_err(&path, line, format!("edge ({i}, {j}) out of range for n = {}", meta.n)));
        }
        edges.push((i, j));
    }
    let graph = SparseGraph::from_edges(meta.n, &edges)?;

    Ok(Dataset {
        name: meta.name,
        features,
        labels,
        graph,
        class_names: meta.class_names,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `dataset` in the directory format read by [`load_dataset`]. Values are
/// written with shortest round-trip formatting, so reloading is exact.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&dataset.meta()).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("graph.txt");
    let mut w = create(&path)?;
    for (i, j) in dataset.graph.edges() {
        writeln!(w, "{i} {j}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("features.txt");
    let mut w = create(&path)?;
    for i in 0..dataset.features.nrows() {
        let (cols, vals) = dataset.features.row(i);
        for (k, v) in cols.iter().zip(vals) {
            writeln!(w, "{i} {k} {v:?}").map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("labels.txt");
    let mut w = create(&path)?;
    for y in &dataset.labels {
        writeln!(w, "{y}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Divides each row by its L1 sum; all-zero rows stay zero.
pub fn row_normalize(x: &CsrMatrix) -> Result<CsrMatrix> {
    if let Some(pos) = x.values().iter().position(|&v| v < 0.0) {
        return Err(Error::Input(format!(
            "negative feature value {} cannot be row-normalized",
            x.values()[pos]
        )));
    }
    let sums = x.row_sums();
    let mut values = Vec::with_capacity(x.nnz());
    for (i, &s) in sums.iter().enumerate() {
        let (_, vals) = x.row(i);
        values.extend(vals.iter().map(|&v| if s > 0.0 { v / s } else { 0.0 }));
    }
    Ok(x.with_values(values))
}

/// Node index sets for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    #[serde(rename = "val")]
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Checks bounds; train/validation and train/test must not overlap. Validation may
    /// coincide with test (k-fold protocol).
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![0u8; n];
        for (set, bit) in [(&self.train, 1u8), (&self.validation, 2), (&self.test, 4)] {
            for &i in set.iter() {
                if i >= n {
                    return Err(Error::Input(format!("split index {i} out of range for {n} nodes")));
                }
                if seen[i] & bit != 0 {
                    return Err(Error::Input(format!("node {i} listed twice in one split set")));
                }
                seen[i] |= bit;
            }
        }
        if seen.iter().any(|&s| s & 1 != 0 && s & 6 != 0) {
            return Err(Error::Input("training nodes overlap validation or test".into()));
        }
        Ok(())
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn partition(&self, which: Partition) -> &[usize] {
        match which {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    #[serde(rename = "val")]
    Validation,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

pub fn fixed_split_path(dir: &Path) -> PathBuf {
    dir.join("splits").join("fixed.json")
}

/// Reads `splits/fixed.json` verbatim.
pub fn load_fixed_split(dir: impl AsRef<Path>) -> Result<Split> {
    let path = fixed_split_path(dir.as_ref());
    let split: Split = read_json(&path)?;
    Ok(split)
}

pub fn write_fixed_split(dir: impl AsRef<Path>, split: &Split) -> Result<()> {
    let path = fixed_split_path(dir.as_ref());
    let parent = path.parent().expect("has parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let text = serde_json::to_string(split).expect("split serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Uniform sample without replacement of `train + val + test` nodes, partitioned in
/// draw order. Classes are not balanced.
pub fn random_split<R: Rng + ?Sized>(
    n: usize,
    (n_train, n_val, n_test): (usize, usize, usize),
    rng: &mut R,
) -> Result<Split> {
    let total = n_train + n_val + n_test;
    if total > n {
        return Err(Error::Input(format!(
            "split sizes sum to {total} but only {n} nodes exist"
        )));
    }
    let drawn = rand::seq::index::sample(rng, n, total).into_vec();
    let mut train = drawn[..n_train].to_vec();
    let mut validation = drawn[n_train..n_train + n_val].to_vec();
    let mut test = drawn[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        validation,
        test,
    })
}

/// `k` random near-equal partitions (the first `n mod k` get one extra node). Fold
/// `i` validates and tests on partition `i` and trains on the rest.
pub fn kfold_splits<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Input("k-fold needs k >= 2".into()));
    }
    if k > n {
        return Err(Error::Input(format!("k = {k} exceeds {n} nodes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += len;
    }
    Ok((0..k)
        .map(|f| {
            let mut train: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            train.sort_unstable();
            Split {
                train,
                validation: parts[f].clone(),
                test: parts[f].clone(),
            }
        })
        .collect())
}
