use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;

/// Smallest useful gain per unit of node weight.
pub(crate) const MIN_GAIN: f64 = 1e-12;
/// Relative margin a candidate must clear to displace the incumbent split.
/// Equivalent partitions (e.g. two features splitting the same rows) then
/// resolve to the earliest candidate instead of to rounding noise.
const TIE_REL: f64 = 1e-10;

fn beats(gain: f64, incumbent: f64) -> bool {
    gain - incumbent > TIE_REL * incumbent.abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
}

/// Regression tree stored as a flat node list rooted at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub(crate) fn scale_leaves(&mut self, s: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= s;
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    w: f64,
    wr: f64,
    wr2: f64,
    n: usize,
}

impl Stats {
    fn add(&mut self, w: f64, r: f64) {
        self.w += w;
        self.wr += w * r;
        self.wr2 += w * r * r;
        self.n += 1;
    }

    fn sub(&self, o: &Stats) -> Stats {
        Stats {
            w: self.w - o.w,
            wr: self.wr - o.wr,
            wr2: self.wr2 - o.wr2,
            n: self.n - o.n,
        }
    }

    fn value(&self, lo: f64, hi: f64) -> f64 {
        (self.wr / self.w).clamp(lo, hi)
    }

    /// Weighted SSE around a fixed value `v`.
    fn loss(&self, v: f64) -> f64 {
        self.wr2 - 2.0 * v * self.wr + v * v * self.w
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_value: f64,
    right_value: f64,
}

pub(crate) struct TreeParams<'a> {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Per feature: true when the output must not increase with the feature.
    pub decreasing: &'a [bool],
    pub exec: Execution,
}

pub(crate) fn fit_tree(x: &Array2<f64>, r: &[f64], w: &[f64], rows: Vec<usize>, params: &TreeParams<'_>) -> Tree {
    let mut nodes = Vec::new();
    build(x, r, w, rows, 0, f64::NEG_INFINITY, f64::INFINITY, params, &mut nodes);
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn build(
    x: &Array2<f64>,
    r: &[f64],
    w: &[f64],
    rows: Vec<usize>,
    depth: usize,
    lo: f64,
    hi: f64,
    params: &TreeParams<'_>,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut total = Stats::default();
    for &i in &rows {
        total.add(w[i], r[i]);
    }
    let id = nodes.len();
    nodes.push(Node::Leaf {
        value: total.value(lo, hi),
    });
    if depth >= params.max_depth || rows.len() < 2 * params.min_samples_leaf.max(1) {
        return id;
    }
    let per_feature = params
        .exec
        .map_range(x.ncols(), |f| best_split(x, r, w, &rows, f, &total, lo, hi, params));
    let mut best: Option<Candidate> = None;
    for c in per_feature.into_iter().flatten() {
        if c.gain > MIN_GAIN * total.w && best.is_none_or(|b| beats(c.gain, b.gain)) {
            best = Some(c);
        }
    }
    let Some(c) = best else { return id };

    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, c.feature]] <= c.threshold);
    let ((llo, lhi), (rlo, rhi)) = if params.decreasing[c.feature] {
        let mid = 0.5 * (c.left_value + c.right_value);
        ((lo.max(mid), hi), (lo, hi.min(mid)))
    } else {
        ((lo, hi), (lo, hi))
    };
    let left = build(x, r, w, left_rows, depth + 1, llo, lhi, params, nodes);
    let right = build(x, r, w, right_rows, depth + 1, rlo, rhi, params, nodes);
    nodes[id] = Node::Split {
        feature: c.feature,
        threshold: c.threshold,
        left,
        right,
        gain: c.gain,
    };
    id
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    x: &Array2<f64>,
    r: &[f64],
    w: &[f64],
    rows: &[usize],
    f: usize,
    total: &Stats,
    lo: f64,
    hi: f64,
    params: &TreeParams<'_>,
) -> Option<Candidate> {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]).then(a.cmp(&b)));
    let parent_loss = total.loss(total.value(lo, hi));
    let min_leaf = params.min_samples_leaf.max(1);
    let mut left = Stats::default();
    let mut best: Option<Candidate> = None;
    for k in 0..order.len() - 1 {
        let i = order[k];
        left.add(w[i], r[i]);
        let (a, b) = (x[[i, f]], x[[order[k + 1], f]]);
        if a == b || left.n < min_leaf || order.len() - left.n < min_leaf {
            continue;
        }
        let right = total.sub(&left);
        let (vl, vr) = (left.value(lo, hi), right.value(lo, hi));
        if params.decreasing[f] && vl < vr {
            continue;
        }
        let gain = parent_loss - left.loss(vl) - right.loss(vr);
        if best.is_none_or(|c| beats(gain, c.gain)) {
            let mut threshold = a + 0.5 * (b - a);
            if threshold >= b {
                threshold = a;
            }
            best = Some(Candidate {
                feature: f,
                threshold,
                gain,
                left_value: vl,
                right_value: vr,
            });
        }
    }
    best
}
