//! Binary decomposition of the grading problem and tree-walk prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecomposeMode {
    /// Normal vs. osteoarthritic, then within each group.
    KoaFixed,
    /// Recursive contiguous splits minimizing the sample-count imbalance.
    CountBalanced,
}

/// Where a side of a node leads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Leaf(usize),
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub depth: usize,
    pub left_branch: Branch,
    pub right_branch: Branch,
}

impl TreeNode {
    /// `ln(depth + 1)`.
    pub fn weight(&self) -> f64 {
        ((self.depth + 1) as f64).ln()
    }

    /// 0 for the left side, 1 for the right, `None` outside the node.
    pub fn side_of(&self, class: usize) -> Option<usize> {
        if self.left.contains(&class) {
            Some(0)
        } else if self.right.contains(&class) {
            Some(1)
        } else {
            None
        }
    }
}

/// Nodes in breadth-first order; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyTree {
    pub classes: usize,
    pub nodes: Vec<TreeNode>,
}

impl HierarchyTree {
    pub fn depths(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.depth).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Checks the partition invariants: disjoint non-empty sides, the root
    /// covering every class, branches matching their side and every class
    /// reached by exactly one leaf.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::State(format!("invalid hierarchy: {msg}")));
        let Some(root) = self.nodes.first() else {
            return fail("no nodes".into());
        };
        let union = |n: &TreeNode| {
            let mut u: Vec<usize> = n.left.iter().chain(&n.right).copied().collect();
            u.sort_unstable();
            u
        };
        if union(root) != (0..self.classes).collect::<Vec<_>>() || root.depth != 1 {
            return fail("root must split every class at depth 1".into());
        }
        let mut leaves = vec![0usize; self.classes];
        let mut referenced = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            if n.left.is_empty() || n.right.is_empty() || n.left.iter().any(|c| n.right.contains(c)) {
                return fail(format!("node {} sides overlap or are empty", n.id));
            }
            for (side, branch) in [(&n.left, n.left_branch), (&n.right, n.right_branch)] {
                match branch {
                    Branch::Leaf(c) if side.as_slice() == [c] && c < self.classes => leaves[c] += 1,
                    Branch::Node(j) if j < self.nodes.len() && j > 0 => {
                        let child = &self.nodes[j];
                        let mut s = side.clone();
                        s.sort_unstable();
                        if union(child) != s || child.depth != n.depth + 1 {
                            return fail(format!("node {} does not refine a side of {}", child.id, n.id));
                        }
                        referenced[j] += 1;
                    }
                    _ => return fail(format!("node {} has a branch inconsistent with its side", n.id)),
                }
            }
        }
        if leaves.iter().any(|&l| l != 1) || referenced[1..].iter().any(|&r| r != 1) {
            return fail("every class needs exactly one leaf and every node one parent".into());
        }
        Ok(())
    }

    /// Walks from the root: `decide(node)` returns `[p_left, p_right]`; the
    /// larger side wins and ties go left.
    pub fn predict<P: PartialOrd>(&self, mut decide: impl FnMut(usize) -> Result<[P; 2]>) -> Result<usize> {
        let mut node = 0;
        for _ in 0..=self.nodes.len() {
            let [l, r] = decide(node)?;
            let n = &self.nodes[node];
            let branch = if r > l { n.right_branch } else { n.left_branch };
            match branch {
                Branch::Leaf(c) => return Ok(c),
                Branch::Node(i) => node = i,
            }
        }
        Err(Error::State("tree walk did not reach a leaf".into()))
    }
}

fn push_node(nodes: &mut Vec<TreeNode>, id: String, left: Vec<usize>, right: Vec<usize>, depth: usize) -> usize {
    let leaf = |s: &[usize]| if s.len() == 1 { Branch::Leaf(s[0]) } else { Branch::Node(usize::MAX) };
    nodes.push(TreeNode { id, left_branch: leaf(&left), right_branch: leaf(&right), left, right, depth });
    nodes.len() - 1
}

/// Split point of `range` minimizing `|left total - right total|`; ties
/// take the earliest split.
fn balanced_split(range: &[usize], counts: &[usize]) -> usize {
    let total: usize = range.iter().map(|&c| counts[c]).sum();
    let mut best = (usize::MAX, 1);
    let mut left = 0usize;
    for s in 1..range.len() {
        left += counts[range[s - 1]];
        let imbalance = left.abs_diff(total - left);
        if imbalance < best.0 {
            best = (imbalance, s);
        }
    }
    best.1
}

/// Builds the tree over classes `0..classes`. `counts` (per class) is used
/// by the count-balanced mode.
pub fn decompose(classes: usize, mode: DecomposeMode, counts: &[usize]) -> Result<HierarchyTree> {
    if classes < 2 {
        return Err(Error::Argument(format!("decomposition needs at least 2 classes, got {classes}")));
    }
    if classes == 2 {
        let mut nodes = Vec::new();
        push_node(&mut nodes, "root".into(), vec![0], vec![1], 1);
        return Ok(HierarchyTree { classes, nodes });
    }
    match mode {
        DecomposeMode::KoaFixed => {
            if classes != 5 {
                return Err(Error::Argument(format!("the fixed grading tree covers 5 grades, got {classes}")));
            }
            let mut nodes = Vec::new();
            push_node(&mut nodes, "root".into(), vec![0, 1], vec![2, 3, 4], 1);
            push_node(&mut nodes, "2L".into(), vec![0], vec![1], 2);
            push_node(&mut nodes, "2R".into(), vec![2], vec![3, 4], 2);
            push_node(&mut nodes, "3".into(), vec![3], vec![4], 3);
            nodes[0].left_branch = Branch::Node(1);
            nodes[0].right_branch = Branch::Node(2);
            nodes[2].right_branch = Branch::Node(3);
            Ok(HierarchyTree { classes, nodes })
        }
        DecomposeMode::CountBalanced => {
            if counts.len() != classes {
                return Err(Error::Argument(format!("{} counts for {classes} classes", counts.len())));
            }
            let mut nodes: Vec<TreeNode> = Vec::new();
            // (classes, depth, path, parent slot)
            let mut queue = std::collections::VecDeque::from([((0..classes).collect::<Vec<_>>(), 1usize, String::new(), None)]);
            while let Some((range, depth, path, parent)) = queue.pop_front() {
                let s = balanced_split(&range, counts);
                let (left, right) = (range[..s].to_vec(), range[s..].to_vec());
                let id = if depth == 1 { "root".to_string() } else { format!("{depth}{path}") };
                let idx = push_node(&mut nodes, id, left.clone(), right.clone(), depth);
                if let Some((p, is_right)) = parent {
                    let n: &mut TreeNode = &mut nodes[p];
                    if is_right {
                        n.right_branch = Branch::Node(idx);
                    } else {
                        n.left_branch = Branch::Node(idx);
                    }
                }
                if left.len() > 1 {
                    queue.push_back((left, depth + 1, format!("{path}L"), Some((idx, false))));
                }
                if right.len() > 1 {
                    queue.push_back((right, depth + 1, format!("{path}R"), Some((idx, true))));
                }
            }
            Ok(HierarchyTree { classes, nodes })
        }
    }
}

/// `(sample index, side)` for every sample whose class belongs to the node.
/// `labels[i]` is `None` for samples without a usable label.
pub fn assemble_node_dataset(node: &TreeNode, labels: &[Option<usize>]) -> Vec<(usize, usize)> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.and_then(|c| node.side_of(c)).map(|s| (i, s)))
        .collect()
}

/// `sum ln(l_i + 1) A_i / sum ln(l_i + 1)`.
pub fn aggregate_accuracy(accuracies: &[f64], depths: &[usize]) -> Result<f64> {
    if accuracies.is_empty() || accuracies.len() != depths.len() {
        return Err(Error::Argument(format!("{} accuracies for {} depths", accuracies.len(), depths.len())));
    }
    if let Some(a) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Argument(format!("accuracy {a} outside [0, 1]")));
    }
    if depths.contains(&0) {
        return Err(Error::Argument("node depths start at 1".into()));
    }
    let w: Vec<f64> = depths.iter().map(|&l| ((l + 1) as f64).ln()).collect();
    Ok(w.iter().zip(accuracies).map(|(w, a)| w * a).sum::<f64>() / w.iter().sum::<f64>())
}
