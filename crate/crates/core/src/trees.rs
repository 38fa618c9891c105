//! Decision trees with soft (probabilistic) routing.
//!
//! At an internal node splitting variable `j` at cut `c`, an input `v`
//! goes right with probability `ψ((v_j − c)/τ)` where `ψ` is the logistic
//! function and `τ` the bandwidth. A leaf's weight is the product of the
//! branch probabilities on its root path, so the weights always sum to one
//! and the tree's output is the weight-averaged leaf value. As `τ → 0`
//! routing becomes the usual hard traversal.
//!
//! Leaves are always enumerated in depth-first, left-first order; every
//! per-leaf vector in this crate uses that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Logistic gate `1 / (1 + e^{-t})`.
#[inline]
pub fn gate(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftRouting {
    pub bandwidth: f64,
}

impl SoftRouting {
    pub fn new(bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        Self { bandwidth }
    }

    /// Probability of taking the right branch.
    #[inline]
    pub fn right_prob(&self, value: f64, cut: f64) -> f64 {
        gate((value - cut) / self.bandwidth)
    }

    #[inline]
    pub fn left_prob(&self, value: f64, cut: f64) -> f64 {
        gate((cut - value) / self.bandwidth)
    }
}

/// Probability vector over the input dimensions a tree may split on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProbs(Vec<f64>);

impl SplitProbs {
    pub fn uniform(dim: usize) -> Self {
        assert!(dim > 0);
        Self(vec![1.0 / dim as f64; dim])
    }

    /// Normalizes `weights`; panics unless they are non-negative with a
    /// positive sum.
    pub fn new(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        assert!(
            weights.iter().all(|w| *w >= 0.0) && total > 0.0,
            "invalid split probabilities"
        );
        Self(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.0[j]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding: fall back to the last dimension with positive mass
        self.0.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Depth prior: a node at depth `d` splits with probability
/// `γ (1 + d)^{-β}`, and never at or beyond `max_depth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePrior {
    pub gamma: f64,
    pub beta: f64,
    pub max_depth: usize,
}

impl Default for TreePrior {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            beta: 2.0,
            max_depth: 10,
        }
    }
}

impl TreePrior {
    pub fn split_prob(&self, depth: usize) -> f64 {
        if depth >= self.max_depth {
            0.0
        } else {
            self.gamma * (1.0 + depth as f64).powf(-self.beta)
        }
    }

    /// Log prior of the tree topology, including the split-variable
    /// probabilities and the (unit) density of uniform cut points.
    pub fn log_prior(&self, tree: &Tree, s: &SplitProbs) -> f64 {
        fn rec(node: &Node, depth: usize, prior: &TreePrior, s: &SplitProbs) -> f64 {
            match node {
                Node::Leaf { .. } => (1.0 - prior.split_prob(depth)).ln(),
                Node::Split {
                    var, left, right, ..
                } => {
                    prior.split_prob(depth).ln()
                        + s.prob(*var).ln()
                        + rec(left, depth + 1, prior, s)
                        + rec(right, depth + 1, prior, s)
                }
            }
        }
        rec(&tree.root, 0, self, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        mu: f64,
    },
    Split {
        var: usize,
        cut: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Per-node facts gathered in one preorder pass.
#[derive(Clone, Copy, Debug)]
struct NodeInfo {
    depth: usize,
    is_leaf: bool,
    /// Both children are leaves.
    is_nog: bool,
    /// DFS position of the first leaf below (or of the node itself).
    first_leaf: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub root: Node,
}

impl Tree {
    pub fn leaf(mu: f64) -> Self {
        Self {
            root: Node::Leaf { mu },
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.root.n_leaves()
    }

    pub fn n_internal(&self) -> usize {
        self.n_leaves() - 1
    }

    pub fn depth(&self) -> usize {
        fn rec(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + rec(left).max(rec(right)),
            }
        }
        rec(&self.root)
    }

    /// Leaf values in DFS order.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_leaves());
        fn rec(node: &Node, out: &mut Vec<f64>) {
            match node {
                Node::Leaf { mu } => out.push(*mu),
                Node::Split { left, right, .. } => {
                    rec(left, out);
                    rec(right, out);
                }
            }
        }
        rec(&self.root, &mut out);
        out
    }

    pub fn set_leaf_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_leaves());
        fn rec(node: &mut Node, values: &[f64], pos: &mut usize) {
            match node {
                Node::Leaf { mu } => {
                    *mu = values[*pos];
                    *pos += 1;
                }
                Node::Split { left, right, .. } => {
                    rec(left, values, pos);
                    rec(right, values, pos);
                }
            }
        }
        rec(&mut self.root, values, &mut 0);
    }

    /// Number of internal nodes splitting on each of `dim` variables.
    pub fn split_counts(&self, dim: usize) -> Vec<usize> {
        let mut counts = vec![0; dim];
        self.add_split_counts(&mut counts);
        counts
    }

    pub fn add_split_counts(&self, counts: &mut [usize]) {
        fn rec(node: &Node, counts: &mut [usize]) {
            if let Node::Split {
                var, left, right, ..
            } = node
            {
                counts[*var] += 1;
                rec(left, counts);
                rec(right, counts);
            }
        }
        rec(&self.root, counts);
    }

    /// Every cut lies in [0,1], every split variable is below `dim`.
    pub fn is_valid(&self, dim: usize, max_depth: usize) -> bool {
        fn rec(node: &Node, dim: usize) -> bool {
            match node {
                Node::Leaf { mu } => mu.is_finite(),
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => *var < dim && (0.0..=1.0).contains(cut) && rec(left, dim) && rec(right, dim),
            }
        }
        rec(&self.root, dim) && self.depth() <= max_depth
    }

    fn node_infos(&self) -> Vec<NodeInfo> {
        let mut out = Vec::new();
        fn rec(node: &Node, depth: usize, leaf_pos: &mut usize, out: &mut Vec<NodeInfo>) {
            match node {
                Node::Leaf { .. } => {
                    out.push(NodeInfo {
                        depth,
                        is_leaf: true,
                        is_nog: false,
                        first_leaf: *leaf_pos,
                        var: 0,
                    });
                    *leaf_pos += 1;
                }
                Node::Split {
                    var, left, right, ..
                } => {
                    out.push(NodeInfo {
                        depth,
                        is_leaf: false,
                        is_nog: left.is_leaf() && right.is_leaf(),
                        first_leaf: *leaf_pos,
                        var: *var,
                    });
                    rec(left, depth + 1, leaf_pos, out);
                    rec(right, depth + 1, leaf_pos, out);
                }
            }
        }
        rec(&self.root, 0, &mut 0, &mut out);
        out
    }

    /// Mutable access to the node with the given preorder index.
    fn node_mut(&mut self, preorder: usize) -> &mut Node {
        fn size(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 1,
                Node::Split { left, right, .. } => 1 + size(left) + size(right),
            }
        }
        let mut node = &mut self.root;
        let mut target = preorder;
        loop {
            if target == 0 {
                return node;
            }
            match node {
                Node::Leaf { .. } => panic!("preorder index out of range"),
                Node::Split { left, right, .. } => {
                    let left_size = size(left);
                    if target <= left_size {
                        target -= 1;
                        node = left;
                    } else {
                        target -= 1 + left_size;
                        node = right;
                    }
                }
            }
        }
    }

    /// Leaf weights for a single input point.
    pub fn leaf_weights(&self, v: &[f64], routing: SoftRouting) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_leaves());
        fn rec(node: &Node, w: f64, v: &[f64], routing: SoftRouting, out: &mut Vec<f64>) {
            match node {
                Node::Leaf { .. } => out.push(w),
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    let x = v[*var];
                    rec(left, w * routing.left_prob(x, *cut), v, routing, out);
                    rec(right, w * routing.right_prob(x, *cut), v, routing, out);
                }
            }
        }
        rec(&self.root, 1.0, v, routing, &mut out);
        out
    }

    pub fn predict(&self, v: &[f64], routing: SoftRouting) -> f64 {
        fn rec(node: &Node, v: &[f64], routing: SoftRouting) -> f64 {
            match node {
                Node::Leaf { mu } => *mu,
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    let x = v[*var];
                    let pr = routing.right_prob(x, *cut);
                    let pl = routing.left_prob(x, *cut);
                    let mut out = 0.0;
                    if pl != 0.0 {
                        out += pl * rec(left, v, routing);
                    }
                    if pr != 0.0 {
                        out += pr * rec(right, v, routing);
                    }
                    out
                }
            }
        }
        rec(&self.root, v, routing)
    }

    /// Leaf weight columns (one `n`-vector per leaf) for inputs given as
    /// columns.
    pub fn weight_columns(&self, cols: &[Vec<f64>], routing: SoftRouting) -> Vec<Vec<f64>> {
        let n = cols.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(self.n_leaves());
        fn rec(
            node: &Node,
            w: Vec<f64>,
            cols: &[Vec<f64>],
            routing: SoftRouting,
            out: &mut Vec<Vec<f64>>,
        ) {
            match node {
                Node::Leaf { .. } => out.push(w),
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    let (wl, wr) = split_weights(&w, &cols[*var], *cut, routing);
                    rec(left, wl, cols, routing, out);
                    rec(right, wr, cols, routing, out);
                }
            }
        }
        rec(&self.root, vec![1.0; n], cols, routing, &mut out);
        out
    }

    /// Index of the leaf reached by hard traversal (`v_j ≥ c` goes right).
    pub fn hard_leaf(&self, v: &[f64]) -> usize {
        let mut node = &self.root;
        let mut pos = 0;
        loop {
            match node {
                Node::Leaf { .. } => return pos,
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    if v[*var] >= *cut {
                        pos += left.n_leaves();
                        node = right;
                    } else {
                        node = left;
                    }
                }
            }
        }
    }
}

/// Split a weight column at a node: returns (left, right).
pub fn split_weights(
    w: &[f64],
    col: &[f64],
    cut: f64,
    routing: SoftRouting,
) -> (Vec<f64>, Vec<f64>) {
    let mut wl = Vec::with_capacity(w.len());
    let mut wr = Vec::with_capacity(w.len());
    for (wi, x) in w.iter().zip(col) {
        let t = (x - cut) / routing.bandwidth;
        wl.push(wi * gate(-t));
        wr.push(wi * gate(t));
    }
    (wl, wr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MoveKind {
    /// Leaf at this DFS position was split into positions `leaf`, `leaf + 1`.
    Grow { leaf: usize, var: usize, cut: f64 },
    /// Leaves at `leaf`, `leaf + 1` were merged into `leaf`.
    Prune { leaf: usize },
    /// Split rule of an internal node replaced.
    Change,
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub tree: Tree,
    pub kind: MoveKind,
    /// `log q(T' → T) − log q(T → T')`.
    pub log_proposal_ratio: f64,
    /// `log π(T') − log π(T)` under [`TreePrior::log_prior`].
    pub log_prior_ratio: f64,
}

const GROW_PROB: f64 = 0.4;
const PRUNE_PROB: f64 = 0.4;
const CHANGE_PROB: f64 = 0.2;

/// Probabilities of (grow, prune, change) for a tree with the given
/// numbers of growable leaves and internal nodes.
fn move_probs(growable: usize, internal: usize) -> (f64, f64, f64) {
    let g = if growable > 0 { GROW_PROB } else { 0.0 };
    let p = if internal > 0 { PRUNE_PROB } else { 0.0 };
    let c = if internal > 0 { CHANGE_PROB } else { 0.0 };
    let total = g + p + c;
    (g / total, p / total, c / total)
}

/// Draw a GROW / PRUNE / CHANGE proposal.
///
/// Panics if no move is feasible, which only happens when the root is a
/// leaf and `max_depth == 0`.
pub fn propose_move<R: Rng + ?Sized>(
    tree: &Tree,
    s: &SplitProbs,
    prior: &TreePrior,
    rng: &mut R,
) -> Proposal {
    let infos = tree.node_infos();
    let growable: Vec<usize> = (0..infos.len())
        .filter(|&i| infos[i].is_leaf && infos[i].depth < prior.max_depth)
        .collect();
    let nogs: Vec<usize> = (0..infos.len()).filter(|&i| infos[i].is_nog).collect();
    let internal: Vec<usize> = (0..infos.len()).filter(|&i| !infos[i].is_leaf).collect();
    let (pg, pp, _pc) = move_probs(growable.len(), internal.len());
    assert!(pg + pp > 0.0, "no feasible tree move");

    let u: f64 = rng.gen();
    if u < pg {
        let node_idx = growable[rng.gen_range(0..growable.len())];
        let info = infos[node_idx];
        let var = s.sample(rng);
        let cut: f64 = rng.gen();
        let mut new_tree = tree.clone();
        let node = new_tree.node_mut(node_idx);
        let mu = match node {
            Node::Leaf { mu } => *mu,
            _ => unreachable!(),
        };
        *node = Node::Split {
            var,
            cut,
            left: Box::new(Node::Leaf { mu }),
            right: Box::new(Node::Leaf { mu }),
        };
        // reverse move: prune one of the nogs of the new tree
        let new_internal = internal.len() + 1;
        let new_growable = growable.len() - 1
            + if info.depth + 1 < prior.max_depth { 2 } else { 0 };
        let new_nogs = new_tree.node_infos().iter().filter(|i| i.is_nog).count();
        let (_, pp_rev, _) = move_probs(new_growable, new_internal);
        let log_q_fwd = pg.ln() - (growable.len() as f64).ln() + s.prob(var).ln();
        let log_q_rev = pp_rev.ln() - (new_nogs as f64).ln();
        let d = info.depth;
        let log_prior_ratio = prior.split_prob(d).ln()
            + 2.0 * (1.0 - prior.split_prob(d + 1)).ln()
            + s.prob(var).ln()
            - (1.0 - prior.split_prob(d)).ln();
        Proposal {
            tree: new_tree,
            kind: MoveKind::Grow {
                leaf: info.first_leaf,
                var,
                cut,
            },
            log_proposal_ratio: log_q_rev - log_q_fwd,
            log_prior_ratio,
        }
    } else if u < pg + pp {
        let node_idx = nogs[rng.gen_range(0..nogs.len())];
        let info = infos[node_idx];
        let mut new_tree = tree.clone();
        let node = new_tree.node_mut(node_idx);
        let mu = match node {
            Node::Split { left, right, .. } => match (&**left, &**right) {
                (Node::Leaf { mu: a }, Node::Leaf { mu: b }) => 0.5 * (a + b),
                _ => unreachable!(),
            },
            _ => unreachable!(),
        };
        *node = Node::Leaf { mu };
        let d = info.depth;
        // reverse move: grow the merged leaf back with the same rule
        let new_growable = growable.len() + usize::from(d < prior.max_depth)
            - if d + 1 < prior.max_depth { 2 } else { 0 };
        let new_internal = internal.len() - 1;
        let (pg_rev, _, _) = move_probs(new_growable, new_internal);
        let log_q_fwd = pp.ln() - (nogs.len() as f64).ln();
        let log_q_rev = pg_rev.ln() - (new_growable as f64).ln() + s.prob(info.var).ln();
        let log_prior_ratio = -(prior.split_prob(d).ln()
            + 2.0 * (1.0 - prior.split_prob(d + 1)).ln()
            + s.prob(info.var).ln()
            - (1.0 - prior.split_prob(d)).ln());
        Proposal {
            tree: new_tree,
            kind: MoveKind::Prune {
                leaf: info.first_leaf,
            },
            log_proposal_ratio: log_q_rev - log_q_fwd,
            log_prior_ratio,
        }
    } else {
        let node_idx = internal[rng.gen_range(0..internal.len())];
        let old_var = infos[node_idx].var;
        let var = s.sample(rng);
        let cut: f64 = rng.gen();
        let mut new_tree = tree.clone();
        if let Node::Split {
            var: v, cut: c, ..
        } = new_tree.node_mut(node_idx)
        {
            *v = var;
            *c = cut;
        }
        let ratio = s.prob(var).ln() - s.prob(old_var).ln();
        Proposal {
            tree: new_tree,
            kind: MoveKind::Change,
            log_proposal_ratio: -ratio,
            log_prior_ratio: ratio,
        }
    }
}
