//! Graph storage, JSON ingestion, splits and synthetic generators.
//!
//! Input edges are undirected: each pair becomes two directed arcs, and
//! every node gets a self-loop, so in-degrees are at least one.

mod split;
mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use split::{random_split, SplitRatios};
pub use synth::{generate_chain_task, generate_sbm, SbmParams};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// One class per node, softmax cross-entropy, accuracy.
    Single,
    /// Binary label vector per node, sigmoid BCE, micro-F1.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Labels {
    Single(Vec<usize>),
    Multi(Vec<Vec<u8>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub num_classes: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn get(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.get(split)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (count(&self.train), count(&self.val), count(&self.test))
    }

    pub fn is_empty(&self) -> bool {
        self.sizes() == (0, 0, 0)
    }
}

/// Immutable node-classification graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    spec: DatasetSpec,
    features: Tensor,
    /// Undirected input pairs `(u, v)` with `u < v`, sorted.
    pairs: Vec<(usize, usize)>,
    /// In-neighbors of node `i` are `csr_targets[csr_offsets[i]..csr_offsets[i + 1]]`.
    csr_offsets: Vec<usize>,
    csr_targets: Vec<usize>,
    edge_dst: Arc<[usize]>,
    edge_src: Arc<[usize]>,
    edge_reverse: Arc<[usize]>,
    degrees: Vec<usize>,
    labels: Labels,
    masks: Masks,
}

impl Graph {
    /// Validates inputs, expands undirected edges and adds self-loops.
    /// `edges` may list a pair in either orientation but only once.
    pub fn build(
        spec: DatasetSpec,
        features: Tensor,
        edges: &[(usize, usize)],
        labels: Labels,
        masks: Option<Masks>,
    ) -> Result<Self> {
        let n = features.rows();
        if features.cols() != spec.feature_dim || features.shape().len() != 2 {
            return Err(Error::Graph(format!(
                "features: shape {:?} does not match feature_dim {}",
                features.shape(),
                spec.feature_dim
            )));
        }
        if spec.num_classes < 2 {
            return Err(Error::Graph(format!(
                "num_classes {} < 2",
                spec.num_classes
            )));
        }
        if !features.is_finite() {
            return Err(Error::Graph("features: non-finite value".into()));
        }
        let mut pairs = BTreeSet::new();
        let mut loops = BTreeSet::new();
        for (k, &(s, d)) in edges.iter().enumerate() {
            for (what, v) in [("source", s), ("target", d)] {
                if v >= n {
                    return Err(Error::Graph(format!(
                        "edges[{k}]: {what} {v} out of range (num_nodes {n})"
                    )));
                }
            }
            let fresh = if s == d {
                loops.insert(s)
            } else {
                pairs.insert((s.min(d), s.max(d)))
            };
            if !fresh {
                return Err(Error::Graph(format!(
                    "edges[{k}]: duplicate edge ({s}, {d})"
                )));
            }
        }
        validate_labels(&spec, &labels, n)?;
        let masks = match masks {
            Some(m) => {
                validate_masks(&m, n)?;
                m
            }
            None => Masks::empty(n),
        };

        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(u, v) in &pairs {
            neighbors[v].push(u);
            neighbors[u].push(v);
        }
        let mut csr_offsets = Vec::with_capacity(n + 1);
        let mut csr_targets = Vec::new();
        csr_offsets.push(0);
        for nb in neighbors.iter_mut() {
            nb.sort_unstable();
            csr_targets.extend_from_slice(nb);
            csr_offsets.push(csr_targets.len());
        }
        let degrees: Vec<usize> = (0..n)
            .map(|i| csr_offsets[i + 1] - csr_offsets[i])
            .collect();
        let mut edge_dst = Vec::with_capacity(csr_targets.len());
        for (i, &d) in degrees.iter().enumerate() {
            edge_dst.extend(std::iter::repeat_n(i, d));
        }
        let edge_reverse: Vec<usize> = edge_dst
            .iter()
            .zip(&csr_targets)
            .map(|(&i, &j)| {
                let row = &csr_targets[csr_offsets[j]..csr_offsets[j + 1]];
                csr_offsets[j] + row.binary_search(&i).expect("undirected adjacency")
            })
            .collect();

        Ok(Self {
            num_nodes: n,
            spec,
            features,
            pairs: pairs.into_iter().collect(),
            csr_offsets,
            edge_src: Arc::from(csr_targets.clone()),
            csr_targets,
            edge_dst: Arc::from(edge_dst),
            edge_reverse: Arc::from(edge_reverse),
            degrees,
            labels,
            masks,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.csr_targets.len()
    }

    pub fn spec(&self) -> DatasetSpec {
        self.spec
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.csr_offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.csr_targets
    }

    /// In-neighbors of `i`, self-loop included.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.csr_targets[self.csr_offsets[i]..self.csr_offsets[i + 1]]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Destination node of every directed edge (CSR order).
    pub fn edge_dst(&self) -> &Arc<[usize]> {
        &self.edge_dst
    }

    /// Source node of every directed edge (CSR order).
    pub fn edge_src(&self) -> &Arc<[usize]> {
        &self.edge_src
    }

    /// Index of the opposite arc of every edge.
    pub fn edge_reverse(&self) -> &Arc<[usize]> {
        &self.edge_reverse
    }

    pub fn undirected_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        validate_masks(&masks, self.num_nodes)?;
        self.masks = masks;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        validate_labels(&self.spec, &labels, self.num_nodes)?;
        self.labels = labels;
        Ok(self)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Graph("permute: not a permutation".into()));
        }
        let c = self.features.cols();
        let mut feats = vec![0.0; n * c];
        for i in 0..n {
            feats[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(self.features.row(i));
        }
        let edges: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        let labels = match &self.labels {
            Labels::Single(l) => {
                let mut out = vec![0; n];
                for i in 0..n {
                    out[perm[i]] = l[i];
                }
                Labels::Single(out)
            }
            Labels::Multi(l) => {
                let mut out = vec![Vec::new(); n];
                for i in 0..n {
                    out[perm[i]] = l[i].clone();
                }
                Labels::Multi(out)
            }
        };
        let remap = |m: &[bool]| {
            let mut out = vec![false; n];
            for i in 0..n {
                out[perm[i]] = m[i];
            }
            out
        };
        let masks = Masks {
            train: remap(&self.masks.train),
            val: remap(&self.masks.val),
            test: remap(&self.masks.test),
        };
        Graph::build(
            self.spec,
            Tensor::matrix(n, c, feats)?,
            &edges,
            labels,
            Some(masks),
        )
    }

    pub fn to_file(&self) -> GraphFile {
        let features = (0..self.num_nodes)
            .map(|i| self.features.row(i).to_vec())
            .collect();
        let masks = (!self.masks.is_empty()).then(|| MaskFile {
            train: self.masks.indices(Split::Train),
            val: self.masks.indices(Split::Val),
            test: self.masks.indices(Split::Test),
        });
        GraphFile {
            num_nodes: self.num_nodes,
            feature_dim: self.spec.feature_dim,
            task: self.spec.task,
            num_classes: self.spec.num_classes,
            features,
            edges: self.pairs.iter().map(|&(u, v)| [u, v]).collect(),
            labels: self.labels.clone(),
            masks,
        }
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        let n = file.num_nodes;
        if file.features.len() != n {
            return Err(Error::Graph(format!(
                "features: {} rows for num_nodes {n}",
                file.features.len()
            )));
        }
        let mut data = Vec::with_capacity(n * file.feature_dim);
        for (i, row) in file.features.iter().enumerate() {
            if row.len() != file.feature_dim {
                return Err(Error::Graph(format!(
                    "features[{i}]: length {} != feature_dim {}",
                    row.len(),
                    file.feature_dim
                )));
            }
            data.extend_from_slice(row);
        }
        let spec = DatasetSpec {
            task: file.task,
            num_classes: file.num_classes,
            feature_dim: file.feature_dim,
        };
        let masks = match file.masks {
            Some(m) => Some(masks_from_indices(&m, n)?),
            None => None,
        };
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::build(
            spec,
            Tensor::matrix(n, file.feature_dim, data)?,
            &edges,
            file.labels,
            masks,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads and validates a graph file.
pub fn load_graph_json(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Graph::from_json(&text)
}

/// On-disk graph schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub task: TaskKind,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<[usize; 2]>,
    pub labels: Labels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn masks_from_indices(file: &MaskFile, n: usize) -> Result<Masks> {
    let mut masks = Masks::empty(n);
    let mut owner: Vec<Option<&str>> = vec![None; n];
    for (name, list, target) in [
        ("train", &file.train, &mut masks.train),
        ("val", &file.val, &mut masks.val),
        ("test", &file.test, &mut masks.test),
    ] {
        for (k, &i) in list.iter().enumerate() {
            if i >= n {
                return Err(Error::Graph(format!(
                    "masks.{name}[{k}]: node {i} out of range (num_nodes {n})"
                )));
            }
            if let Some(prev) = owner[i] {
                return Err(Error::Graph(format!(
                    "masks.{name}[{k}]: node {i} already in {prev}"
                )));
            }
            owner[i] = Some(name);
            target[i] = true;
        }
    }
    Ok(masks)
}

fn validate_masks(m: &Masks, n: usize) -> Result<()> {
    if m.train.len() != n || m.val.len() != n || m.test.len() != n {
        return Err(Error::Graph("masks: length differs from num_nodes".into()));
    }
    for i in 0..n {
        if [m.train[i], m.val[i], m.test[i]]
            .iter()
            .filter(|&&b| b)
            .count()
            > 1
        {
            return Err(Error::Graph(format!(
                "masks: node {i} is in more than one split"
            )));
        }
    }
    Ok(())
}

fn validate_labels(spec: &DatasetSpec, labels: &Labels, n: usize) -> Result<()> {
    match (spec.task, labels) {
        (TaskKind::Single, Labels::Single(l)) => {
            if l.len() != n {
                return Err(Error::Graph(format!(
                    "labels: {} entries for {n} nodes",
                    l.len()
                )));
            }
            if let Some((i, c)) = l.iter().enumerate().find(|(_, &c)| c >= spec.num_classes) {
                return Err(Error::Graph(format!(
                    "labels[{i}]: class {c} >= num_classes {}",
                    spec.num_classes
                )));
            }
        }
        (TaskKind::Multi, Labels::Multi(l)) => {
            if l.len() != n {
                return Err(Error::Graph(format!(
                    "labels: {} entries for {n} nodes",
                    l.len()
                )));
            }
            for (i, row) in l.iter().enumerate() {
                if row.len() != spec.num_classes || row.iter().any(|&b| b > 1) {
                    return Err(Error::Graph(format!(
                        "labels[{i}]: expected {} binary entries",
                        spec.num_classes
                    )));
                }
            }
        }
        (task, _) => {
            return Err(Error::Graph(format!(
                "labels: layout does not match task {task:?}"
            )));
        }
    }
    Ok(())
}
