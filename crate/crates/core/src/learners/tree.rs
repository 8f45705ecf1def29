//! Least-squares regression trees grown best-first on sparse rows.
//!
//! Splits are exact greedy variance-reduction splits. Absent features count as
//! zero, so a node only scans the nonzero entries of its own rows and folds the
//! implicit zeros into a single group. Ties between equal-gain splits go to the
//! lowest feature index, then the lowest threshold.

use crate::data_io::{SparseDataset, SparseRow};

const NO_CHILD: u32 = u32::MAX;

/// Splits must reduce squared error by more than this fraction of the node's
/// sum of squared residuals, which keeps rounding noise from creating splits.
const MIN_RELATIVE_GAIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Leaf output, already scaled by the shrinkage; zero on internal nodes.
    pub value: f64,
}

impl Node {
    pub fn leaf(value: f64) -> Self {
        Self {
            feature: NO_CHILD,
            threshold: 0.0,
            left: NO_CHILD,
            right: NO_CHILD,
            value,
        }
    }

    #[inline]
    pub fn is_leaf(&self) -> bool {
        self.left == NO_CHILD
    }
}

/// A regression tree stored in pre-order with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub shrinkage: f64,
}

impl RegressionTree {
    /// Checks child links: every internal node's children come after it and
    /// every node is reachable exactly once from the root.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self, String> {
        if nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if seen[i] {
                return Err(format!("node {i} reached twice"));
            }
            seen[i] = true;
            let n = &nodes[i];
            if n.is_leaf() {
                if n.right != NO_CHILD {
                    return Err(format!("node {i} has only one child"));
                }
                continue;
            }
            for c in [n.left, n.right] {
                let c = c as usize;
                if c <= i || c >= nodes.len() {
                    return Err(format!("node {i} has invalid child {c}"));
                }
                stack.push(c);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("unreachable nodes".into());
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    #[inline]
    pub fn predict(&self, row: SparseRow<'_>) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            i = if row.get(n.feature as usize) <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    /// Fits one tree to `residuals` (one per row of `data`).
    pub fn fit(data: &SparseDataset, residuals: &[f64], params: &TreeParams) -> Self {
        Self::fit_presorted(&Presorted::new(data), residuals, params)
    }

    /// [`RegressionTree::fit`] reusing a feature ordering built once per
    /// dataset.
    pub fn fit_presorted(sorted: &Presorted, residuals: &[f64], params: &TreeParams) -> Self {
        assert_eq!(sorted.num_rows, residuals.len());
        let mut grower = Grower::new(sorted, residuals, params);
        grower.grow();
        grower.into_tree()
    }
}

/// Nonzero entries of every feature, sorted by value (then row).
#[derive(Debug, Clone)]
pub struct Presorted {
    num_rows: usize,
    lists: Vec<Vec<(u32, f64)>>,
}

impl Presorted {
    pub fn new(data: &SparseDataset) -> Self {
        let mut lists = vec![Vec::new(); data.num_features()];
        for i in 0..data.len() {
            for (f, v) in data.row(i).iter() {
                if v != 0.0 {
                    lists[f].push((i as u32, v));
                }
            }
        }
        for l in &mut lists {
            l.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        }
        Self {
            num_rows: data.len(),
            lists,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct GrowNode {
    rows: Vec<u32>,
    // per-feature sorted nonzero entries of `rows`; dropped once split
    lists: Vec<Vec<(u32, f64)>>,
    sum: f64,
    split: Option<Split>,
    children: Option<(usize, usize)>,
}

struct Grower<'a> {
    residuals: &'a [f64],
    params: TreeParams,
    nodes: Vec<GrowNode>,
    goes_left: Vec<bool>,
    groups: Vec<(f64, f64, usize)>,
}

impl<'a> Grower<'a> {
    fn new(sorted: &'a Presorted, residuals: &'a [f64], params: &TreeParams) -> Self {
        let mut g = Self {
            residuals,
            params: *params,
            nodes: Vec::new(),
            goes_left: vec![false; sorted.num_rows],
            groups: Vec::new(),
        };
        g.push_node((0..sorted.num_rows as u32).collect(), sorted.lists.clone());
        g
    }

    fn push_node(&mut self, rows: Vec<u32>, lists: Vec<Vec<(u32, f64)>>) -> usize {
        let sum = rows.iter().map(|&i| self.residuals[i as usize]).sum();
        let mut node = GrowNode {
            rows,
            lists,
            sum,
            split: None,
            children: None,
        };
        node.split = self.best_split(&node);
        if node.split.is_none() {
            node.lists = Vec::new();
        }
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn grow(&mut self) {
        let mut leaves = 1;
        while leaves < self.params.max_leaves {
            // best gain among open leaves; earliest node wins ties
            let mut pick: Option<(usize, f64)> = None;
            for (id, n) in self.nodes.iter().enumerate() {
                if let (None, Some(s)) = (n.children, n.split) {
                    if pick.is_none_or(|(_, g)| s.gain > g) {
                        pick = Some((id, s.gain));
                    }
                }
            }
            let Some((id, _)) = pick else { break };
            let split = self.nodes[id].split.unwrap();
            let rows = std::mem::take(&mut self.nodes[id].rows);
            let lists = std::mem::take(&mut self.nodes[id].lists);

            let zero_left = 0.0 <= split.threshold;
            for &i in &rows {
                self.goes_left[i as usize] = zero_left;
            }
            for &(i, v) in &lists[split.feature] {
                self.goes_left[i as usize] = v <= split.threshold;
            }
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                rows.iter().partition(|&&i| self.goes_left[i as usize]);
            let mut left_lists = Vec::with_capacity(lists.len());
            let mut right_lists = Vec::with_capacity(lists.len());
            for list in lists {
                let (l, r): (Vec<_>, Vec<_>) = list.into_iter().partition(|e| self.goes_left[e.0 as usize]);
                left_lists.push(l);
                right_lists.push(r);
            }
            let l = self.push_node(left_rows, left_lists);
            let r = self.push_node(right_rows, right_lists);
            self.nodes[id].children = Some((l, r));
            leaves += 1;
        }
    }

    fn best_split(&mut self, node: &GrowNode) -> Option<Split> {
        let n = node.rows.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        let sum = node.sum;
        let sum_sq: f64 = node.rows.iter().map(|&i| self.residuals[i as usize].powi(2)).sum();
        let parent_score = sum * sum / n as f64;
        let min_gain = MIN_RELATIVE_GAIN * sum_sq;
        let mut best: Option<Split> = None;
        let groups = &mut self.groups;

        for (f, entries) in node.lists.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let nz_sum: f64 = entries.iter().map(|e| self.residuals[e.0 as usize]).sum();
            let zero_count = n - entries.len();

            // (value, residual sum, count) in ascending value order with the
            // implicit zeros merged into one group
            groups.clear();
            let mut zero_done = zero_count == 0;
            for &(i, v) in entries {
                let r = self.residuals[i as usize];
                if !zero_done && v > 0.0 {
                    groups.push((0.0, sum - nz_sum, zero_count));
                    zero_done = true;
                }
                match groups.last_mut() {
                    Some(g) if g.0 == v => {
                        g.1 += r;
                        g.2 += 1;
                    }
                    _ => groups.push((v, r, 1)),
                }
            }
            if !zero_done {
                groups.push((0.0, sum - nz_sum, zero_count));
            }

            let (mut left_sum, mut left_count) = (0.0, 0usize);
            for w in groups.windows(2) {
                left_sum += w[0].1;
                left_count += w[0].2;
                let right_count = n - left_count;
                if left_count < min_leaf {
                    continue;
                }
                if right_count < min_leaf {
                    break;
                }
                let right_sum = sum - left_sum;
                let gain = left_sum * left_sum / left_count as f64
                    + right_sum * right_sum / right_count as f64
                    - parent_score;
                if gain > min_gain && best.is_none_or(|b| gain > b.gain) {
                    let (a, b) = (w[0].0, w[1].0);
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some(Split {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    /// Re-lays the grown nodes out in pre-order.
    fn into_tree(self) -> RegressionTree {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(0usize, None::<(usize, bool)>)];
        while let Some((id, parent)) = stack.pop() {
            let pos = out.len() as u32;
            if let Some((p, is_left)) = parent {
                let node: &mut Node = &mut out[p];
                if is_left {
                    node.left = pos;
                } else {
                    node.right = pos;
                }
            }
            let g = &self.nodes[id];
            match (g.children, g.split) {
                (Some((l, r)), Some(s)) => {
                    out.push(Node {
                        feature: s.feature as u32,
                        threshold: s.threshold,
                        left: NO_CHILD - 1,
                        right: NO_CHILD - 1,
                        value: 0.0,
                    });
                    let me = pos as usize;
                    // right pushed first so the left subtree is laid out first
                    stack.push((r, Some((me, false))));
                    stack.push((l, Some((me, true))));
                }
                _ => {
                    let count = g.rows.len().max(1) as f64;
                    out.push(Node::leaf(self.params.shrinkage * g.sum / count));
                }
            }
        }
        RegressionTree { nodes: out }
    }
}
