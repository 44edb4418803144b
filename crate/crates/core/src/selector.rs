//! Tree-ensemble classifier mapping sample features to a defense id.
//!
//! A plain random forest: Gini-split axis-aligned trees grown on bootstrap
//! samples with a √d feature subset at every node. It serves both as the
//! first-level model guiding acquisition and as the deployed second-level
//! selector. Posteriors are per-class vote fractions, so they sum to one
//! exactly and are invariant to tree order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defenses::DefenseId;
use crate::error::{Result, SageError};
use crate::mat::Mat;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestHyper {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    /// Features tried per node; `None` applies the √d rule.
    pub feature_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for ForestHyper {
    fn default() -> Self {
        ForestHyper {
            n_trees: 200,
            max_depth: 16,
            min_leaf: 1,
            bootstrap: true,
            feature_subsample: None,
            seed: 0,
        }
    }
}

/// One node; `feature < 0` marks a leaf voting for `class`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeNode {
    feature: i32,
    threshold: f64,
    left: u32,
    right: u32,
    class: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
    /// Class histogram per node (kept for leaves; internal nodes empty).
    histograms: Vec<Vec<u32>>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> usize {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.feature < 0 {
                return idx;
            }
            idx = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    fn vote(&self, x: &[f64]) -> usize {
        self.nodes[self.leaf_for(x)].class as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeEnsemble {
    trees: Vec<Tree>,
    pub n_classes: usize,
    pub hyper: ForestHyper,
    pub oob_accuracy: Option<f64>,
}

fn gini_from_counts(counts: &[u32], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let mut sum_sq = 0.0;
    for &c in counts {
        let p = c as f64 / total;
        sum_sq += p * p;
    }
    1.0 - sum_sq
}

fn majority(counts: &[u32]) -> u16 {
    let mut best = 0usize;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best as u16
}

struct TreeBuilder<'a> {
    x: &'a Mat,
    y: &'a [usize],
    n_classes: usize,
    hyper: &'a ForestHyper,
    features_per_node: usize,
    nodes: Vec<TreeNode>,
    histograms: Vec<Vec<u32>>,
}

impl TreeBuilder<'_> {
    fn class_counts(&self, samples: &[usize]) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_classes];
        for &i in samples {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn make_leaf(&mut self, counts: Vec<u32>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            feature: -1,
            threshold: 0.0,
            left: 0,
            right: 0,
            class: majority(&counts),
        });
        self.histograms.push(counts);
        id
    }

    fn best_split(
        &self,
        samples: &[usize],
        counts: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, f64, f64)> {
        let d = self.x.cols();
        let mut feats: Vec<usize> = (0..d).collect();
        // Partial Fisher-Yates for the per-node feature subset.
        let k = self.features_per_node.min(d);
        for i in 0..k {
            let j = rng.gen_range(i..d);
            feats.swap(i, j);
        }
        let mut chosen: Vec<usize> = feats[..k].to_vec();
        chosen.sort_unstable();

        let total = samples.len() as f64;
        let parent = gini_from_counts(counts, total);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
        for &f in &chosen {
            pairs.clear();
            pairs.extend(samples.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left = vec![0u32; self.n_classes];
            for w in 1..pairs.len() {
                left[pairs[w - 1].1] += 1;
                if pairs[w].0 <= pairs[w - 1].0 {
                    continue;
                }
                let nl = w as f64;
                let nr = total - nl;
                if (w < self.hyper.min_leaf) || ((pairs.len() - w) < self.hyper.min_leaf) {
                    continue;
                }
                let mut right = counts.to_vec();
                for (r, l) in right.iter_mut().zip(&left) {
                    *r -= l;
                }
                let score = parent
                    - (nl / total) * gini_from_counts(&left, nl)
                    - (nr / total) * gini_from_counts(&right, nr);
                let threshold = 0.5 * (pairs[w - 1].0 + pairs[w].0);
                if score > 1e-12 && best.as_ref().is_none_or(|b| score > b.2) {
                    best = Some((f, threshold, score));
                }
            }
        }
        best
    }

    fn build(&mut self, samples: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let counts = self.class_counts(&samples);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.hyper.max_depth || samples.len() < 2 * self.hyper.min_leaf.max(1)
        {
            return self.make_leaf(counts);
        }
        let Some((feature, threshold, _)) = self.best_split(&samples, &counts, rng) else {
            return self.make_leaf(counts);
        };
        let (ls, rs): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&i| self.x.get(i, feature) <= threshold);
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            feature: feature as i32,
            threshold,
            left: 0,
            right: 0,
            class: majority(&counts),
        });
        self.histograms.push(Vec::new());
        let left = self.build(ls, depth + 1, rng);
        let right = self.build(rs, depth + 1, rng);
        self.nodes[id as usize].left = left;
        self.nodes[id as usize].right = right;
        id
    }
}

fn fit_one_tree(
    x: &Mat,
    y: &[usize],
    n_classes: usize,
    hyper: &ForestHyper,
    tree_seed: u64,
) -> (Tree, Vec<bool>) {
    let n = x.rows();
    let mut rng = seed::rng(tree_seed);
    let mut in_bag = vec![false; n];
    let samples: Vec<usize> = if hyper.bootstrap {
        (0..n)
            .map(|_| {
                let i = rng.gen_range(0..n);
                in_bag[i] = true;
                i
            })
            .collect()
    } else {
        in_bag.iter_mut().for_each(|b| *b = true);
        (0..n).collect()
    };
    let d = x.cols();
    let features_per_node = hyper
        .feature_subsample
        .unwrap_or_else(|| (d as f64).sqrt().round().max(1.0) as usize)
        .clamp(1, d);
    let mut builder = TreeBuilder {
        x,
        y,
        n_classes,
        hyper,
        features_per_node,
        nodes: Vec::new(),
        histograms: Vec::new(),
    };
    builder.build(samples, 0, &mut rng);
    let oob = in_bag.iter().map(|b| !b).collect();
    (
        Tree {
            nodes: builder.nodes,
            histograms: builder.histograms,
        },
        oob,
    )
}

impl TreeEnsemble {
    /// Degenerate ensemble that always votes one class. This is the honest
    /// model of a unanimous training pool, where `fit` would reject the
    /// single-class input.
    pub fn constant(class: usize, n_classes: usize, hyper: &ForestHyper) -> TreeEnsemble {
        assert!(class < n_classes);
        let mut hist = vec![0u32; n_classes];
        hist[class] = 1;
        let tree = Tree {
            nodes: vec![TreeNode {
                feature: -1,
                threshold: 0.0,
                left: 0,
                right: 0,
                class: class as u16,
            }],
            histograms: vec![hist],
        };
        TreeEnsemble {
            trees: vec![tree; hyper.n_trees.max(1)],
            n_classes,
            hyper: hyper.clone(),
            oob_accuracy: None,
        }
    }

    /// Fit on integer class labels in `[0, n_classes)`.
    pub fn fit(x: &Mat, y: &[usize], n_classes: usize, hyper: &ForestHyper) -> Result<TreeEnsemble> {
        if x.rows() < 10 {
            return Err(SageError::InvalidArgument(format!(
                "need at least 10 rows to fit, got {}",
                x.rows()
            )));
        }
        if x.rows() != y.len() {
            return Err(SageError::DimMismatch {
                expected: x.rows(),
                got: y.len(),
                context: "forest labels".into(),
            });
        }
        let mut distinct: Vec<usize> = y.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(SageError::InvalidArgument(
                "need at least 2 distinct labels".into(),
            ));
        }
        if *distinct.last().unwrap() >= n_classes {
            return Err(SageError::InvalidArgument("label out of range".into()));
        }

        let fitted: Vec<(Tree, Vec<bool>)> = (0..hyper.n_trees as u64)
            .into_par_iter()
            .map(|t| fit_one_tree(x, y, n_classes, hyper, seed::derive_idx(hyper.seed, t)))
            .collect();

        // Out-of-bag accuracy over samples covered by at least one tree.
        let n = x.rows();
        let mut votes = vec![0u32; n * n_classes];
        for (tree, oob) in &fitted {
            for i in 0..n {
                if oob[i] {
                    votes[i * n_classes + tree.vote(x.row(i))] += 1;
                }
            }
        }
        let mut covered = 0usize;
        let mut correct = 0usize;
        for i in 0..n {
            let row = &votes[i * n_classes..(i + 1) * n_classes];
            if row.iter().all(|&v| v == 0) {
                continue;
            }
            covered += 1;
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == y[i] {
                correct += 1;
            }
        }
        let oob_accuracy = if covered > 0 {
            Some(correct as f64 / covered as f64)
        } else {
            None
        };

        Ok(TreeEnsemble {
            trees: fitted.into_iter().map(|(t, _)| t).collect(),
            n_classes,
            hyper: hyper.clone(),
            oob_accuracy,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Raw per-class vote counts; sums to the tree count exactly.
    pub fn predict_votes(&self, x: &[f64]) -> Vec<u32> {
        let mut votes = vec![0u32; self.n_classes];
        for tree in &self.trees {
            votes[tree.vote(x)] += 1;
        }
        votes
    }

    /// Per-class vote fractions. Exactness lives in the counts (they sum to
    /// the tree count); the fractions are their correctly rounded quotients.
    pub fn predict_posteriors(&self, x: &[f64]) -> Vec<f64> {
        let total = self.trees.len() as f64;
        self.predict_votes(x)
            .into_iter()
            .map(|v| v as f64 / total)
            .collect()
    }

    /// Argmax class; ties break toward the lower class index.
    pub fn predict_class(&self, x: &[f64]) -> usize {
        let mut votes = vec![0u32; self.n_classes];
        for tree in &self.trees {
            votes[tree.vote(x)] += 1;
        }
        let mut best = 0usize;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &Mat, y: &[usize]) -> f64 {
        let correct = (0..x.rows())
            .filter(|&i| self.predict_class(x.row(i)) == y[i])
            .count();
        correct as f64 / x.rows().max(1) as f64
    }
}

/// Fit a selector over defense labels (classes fixed to the full portfolio).
pub fn fit(x: &Mat, labels: &[DefenseId], hyper: &ForestHyper) -> Result<TreeEnsemble> {
    let y: Vec<usize> = labels.iter().map(|d| d.index()).collect();
    TreeEnsemble::fit(x, &y, DefenseId::COUNT, hyper)
}

/// Fit a selector, degrading to the constant dispatcher when every label
/// in the pool agrees.
pub fn fit_or_constant(x: &Mat, labels: &[DefenseId], hyper: &ForestHyper) -> Result<TreeEnsemble> {
    let mut distinct: Vec<DefenseId> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(TreeEnsemble::constant(
            distinct[0].index(),
            DefenseId::COUNT,
            hyper,
        ));
    }
    fit(x, labels, hyper)
}

/// Predicted defense; vote ties break by defense id order.
pub fn predict_defense(ens: &TreeEnsemble, x: &[f64]) -> DefenseId {
    DefenseId::ALL[ens.predict_class(x)]
}

/// Versioned textual serialization: per tree, the split structure and leaf
/// histograms.
pub fn serialize_forest(ens: &TreeEnsemble) -> String {
    let mut out = String::new();
    out.push_str("sage-forest 1\n");
    out.push_str(&format!(
        "meta classes={} trees={} max_depth={} min_leaf={} bootstrap={} subsample={} seed={}\n",
        ens.n_classes,
        ens.trees.len(),
        ens.hyper.max_depth,
        ens.hyper.min_leaf,
        ens.hyper.bootstrap,
        ens.hyper
            .feature_subsample
            .map_or("sqrt".to_string(), |v| v.to_string()),
        ens.hyper.seed
    ));
    match ens.oob_accuracy {
        Some(a) => out.push_str(&format!("oob {a:.17e}\n")),
        None => out.push_str("oob none\n"),
    }
    for tree in &ens.trees {
        out.push_str(&format!("tree {}\n", tree.nodes.len()));
        for (node, hist) in tree.nodes.iter().zip(&tree.histograms) {
            if node.feature < 0 {
                let counts: Vec<String> = hist.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("leaf {}\n", counts.join(" ")));
            } else {
                out.push_str(&format!(
                    "split {} {:.17e} {} {}\n",
                    node.feature, node.threshold, node.left, node.right
                ));
            }
        }
    }
    out
}

pub fn deserialize_forest(text: &str) -> Result<TreeEnsemble> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "sage-forest 1" {
        return Err(SageError::ModelFormat(format!(
            "unexpected forest header '{header}'"
        )));
    }
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("meta "))
        .ok_or_else(|| SageError::ModelFormat("missing meta line".into()))?;
    let mut fields = std::collections::BTreeMap::new();
    for kv in meta.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SageError::ModelFormat(format!("bad meta field '{kv}'")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        fields
            .get(k)
            .ok_or_else(|| SageError::ModelFormat(format!("missing meta key '{k}'")))
    };
    let n_classes: usize = get("classes")?
        .parse()
        .map_err(|_| SageError::ModelFormat("bad classes".into()))?;
    let n_trees: usize = get("trees")?
        .parse()
        .map_err(|_| SageError::ModelFormat("bad trees".into()))?;
    let hyper = ForestHyper {
        n_trees,
        max_depth: get("max_depth")?
            .parse()
            .map_err(|_| SageError::ModelFormat("bad max_depth".into()))?,
        min_leaf: get("min_leaf")?
            .parse()
            .map_err(|_| SageError::ModelFormat("bad min_leaf".into()))?,
        bootstrap: get("bootstrap")?
            .parse()
            .map_err(|_| SageError::ModelFormat("bad bootstrap".into()))?,
        feature_subsample: match get("subsample")?.as_str() {
            "sqrt" => None,
            v => Some(
                v.parse()
                    .map_err(|_| SageError::ModelFormat("bad subsample".into()))?,
            ),
        },
        seed: get("seed")?
            .parse()
            .map_err(|_| SageError::ModelFormat("bad seed".into()))?,
    };
    let oob_line = lines
        .next()
        .and_then(|l| l.strip_prefix("oob "))
        .ok_or_else(|| SageError::ModelFormat("missing oob line".into()))?;
    let oob_accuracy = match oob_line {
        "none" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| SageError::ModelFormat("bad oob value".into()))?,
        ),
    };

    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let head = lines
            .next()
            .and_then(|l| l.strip_prefix("tree "))
            .ok_or_else(|| SageError::ModelFormat("missing tree header".into()))?;
        let n_nodes: usize = head
            .parse()
            .map_err(|_| SageError::ModelFormat("bad node count".into()))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut histograms = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines
                .next()
                .ok_or_else(|| SageError::ModelFormat("missing node line".into()))?;
            if let Some(rest) = line.strip_prefix("leaf ") {
                let hist: Vec<u32> = rest
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| SageError::ModelFormat("bad histogram".into()))
                    })
                    .collect::<Result<_>>()?;
                if hist.len() != n_classes {
                    return Err(SageError::ModelFormat("histogram length mismatch".into()));
                }
                nodes.push(TreeNode {
                    feature: -1,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    class: majority(&hist),
                });
                histograms.push(hist);
            } else if let Some(rest) = line.strip_prefix("split ") {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() != 4 {
                    return Err(SageError::ModelFormat(format!("bad split line '{line}'")));
                }
                nodes.push(TreeNode {
                    feature: toks[0]
                        .parse()
                        .map_err(|_| SageError::ModelFormat("bad feature".into()))?,
                    threshold: toks[1]
                        .parse()
                        .map_err(|_| SageError::ModelFormat("bad threshold".into()))?,
                    left: toks[2]
                        .parse()
                        .map_err(|_| SageError::ModelFormat("bad left".into()))?,
                    right: toks[3]
                        .parse()
                        .map_err(|_| SageError::ModelFormat("bad right".into()))?,
                    class: 0,
                });
                histograms.push(Vec::new());
            } else {
                return Err(SageError::ModelFormat(format!("bad node line '{line}'")));
            }
        }
        trees.push(Tree { nodes, histograms });
    }
    Ok(TreeEnsemble {
        trees,
        n_classes,
        hyper,
        oob_accuracy,
    })
}
