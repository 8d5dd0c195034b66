//! CART classification trees with weighted Gini impurity.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureKind, RFConfig};

/// Splits must improve impurity by more than this.
const MIN_GAIN: f64 = 1e-12;

/// Categorical features with at most this many levels at a node are split
/// one level against the rest; larger ones are ordered by class rate.
pub const ONE_VS_REST_MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Threshold { threshold: f64 },
    /// Level codes in the set go left.
    Categories { left: Vec<usize> },
}

impl SplitRule {
    fn goes_left(&self, v: f64) -> bool {
        match self {
            SplitRule::Threshold { threshold } => v <= *threshold,
            SplitRule::Categories { left } => left.contains(&(v as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        /// Weighted class proportions, in class order.
        proportions: Vec<f64>,
        /// Training elements (with bootstrap multiplicity).
        n: usize,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
        /// Weighted Gini decrease.
        gain: f64,
    },
}

/// Nodes in pre-order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        Tree { nodes }
    }

    /// One split on a continuous feature with fixed leaf proportions.
    pub fn stump(feature: usize, threshold: f64, left: Vec<f64>, right: Vec<f64>) -> Self {
        Tree {
            nodes: vec![
                Node::Split {
                    feature,
                    rule: SplitRule::Threshold { threshold },
                    left: 1,
                    right: 2,
                    gain: 0.0,
                },
                Node::Leaf { proportions: left, n: 0 },
                Node::Leaf { proportions: right, n: 0 },
            ],
        }
    }

    pub fn leaf(proportions: Vec<f64>) -> Self {
        Tree {
            nodes: vec![Node::Leaf { proportions, n: 0 }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn is_single_leaf(&self) -> bool {
        matches!(self.nodes.as_slice(), [Node::Leaf { .. }])
    }

    /// Leaf proportions for a row given by `value(feature)`.
    pub fn proportions(&self, value: impl Fn(usize) -> f64) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { proportions, .. } => return proportions,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                    ..
                } => i = if rule.goes_left(value(*feature)) { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn uses_feature(&self, j: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Split { feature, .. } if *feature == j))
    }
}

/// A training element: row index and bootstrap multiplicity.
#[derive(Debug, Clone, Copy)]
pub(super) struct Item {
    pub row: usize,
    pub mult: u32,
}

struct Stats {
    weights: Vec<f64>,
    count: usize,
}

impl Stats {
    fn new(k: usize) -> Self {
        Stats {
            weights: vec![0.0; k],
            count: 0,
        }
    }

    fn add(&mut self, class: usize, w: f64, mult: u32) {
        self.weights[class] += w;
        self.count += mult as usize;
    }

    fn sub(&mut self, class: usize, w: f64, mult: u32) {
        self.weights[class] -= w;
        self.count -= mult as usize;
    }

    fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn gini(weights: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - weights.iter().map(|w| (w / total).powi(2)).sum::<f64>()
}

struct Candidate {
    gain: f64,
    feature: usize,
    rule: SplitRule,
}

pub(super) struct Grower<'a> {
    pub data: &'a Dataset,
    pub config: &'a RFConfig,
    pub class_weights: &'a [f64],
    pub mtry: usize,
    pub nodes: Vec<Node>,
}

impl Grower<'_> {
    fn weight(&self, it: &Item) -> f64 {
        self.class_weights[self.data.labels[it.row]] * f64::from(it.mult)
    }

    fn stats(&self, items: &[Item]) -> Stats {
        let mut s = Stats::new(self.data.classes.len());
        for it in items {
            s.add(self.data.labels[it.row], self.weight(it), it.mult);
        }
        s
    }

    fn leaf(&mut self, s: &Stats) -> usize {
        let total = s.total();
        let proportions = s.weights.iter().map(|w| w / total).collect();
        self.nodes.push(Node::Leaf {
            proportions,
            n: s.count,
        });
        self.nodes.len() - 1
    }

    pub fn grow(&mut self, items: Vec<Item>, depth: usize, rng: &mut impl Rng) -> usize {
        let s = self.stats(&items);
        let pure = s.weights.iter().filter(|w| **w > 0.0).count() <= 1;
        if pure || depth >= self.config.max_depth || s.count < self.config.min_split {
            return self.leaf(&s);
        }
        let p = self.data.n_features();
        let mut features: Vec<usize> = sample(rng, p, self.mtry.min(p)).into_vec();
        features.sort_unstable();
        let mut best: Option<Candidate> = None;
        let parent = gini(&s.weights, s.total());
        for &j in &features {
            let found = match &self.data.kinds[j] {
                FeatureKind::Continuous => self.best_threshold(&items, j, &s, parent),
                FeatureKind::Categorical { .. } => self.best_subset(&items, j, &s, parent),
            };
            if let Some((gain, rule)) = found {
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate { gain, feature: j, rule });
                }
            }
        }
        let Some(best) = best else {
            return self.leaf(&s);
        };
        let (left, right): (Vec<Item>, Vec<Item>) = items
            .into_iter()
            .partition(|it| best.rule.goes_left(self.data.columns[best.feature][it.row]));
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf {
            proportions: Vec::new(),
            n: 0,
        });
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        self.nodes[idx] = Node::Split {
            feature: best.feature,
            rule: best.rule,
            left: l,
            right: r,
            gain: best.gain,
        };
        idx
    }

    fn gain(&self, parent: f64, left: &Stats, right: &Stats) -> Option<f64> {
        let min = self.config.min_leaf;
        if left.count < min || right.count < min {
            return None;
        }
        let (wl, wr) = (left.total(), right.total());
        let w = wl + wr;
        let g = parent - (wl / w) * gini(&left.weights, wl) - (wr / w) * gini(&right.weights, wr);
        (g > MIN_GAIN).then_some(g)
    }

    /// Scans midpoints between consecutive distinct values; the first
    /// (smallest) threshold wins ties.
    fn best_threshold(&self, items: &[Item], j: usize, all: &Stats, parent: f64) -> Option<(f64, SplitRule)> {
        let col = &self.data.columns[j];
        let mut sorted: Vec<&Item> = items.iter().collect();
        sorted.sort_by(|a, b| col[a.row].total_cmp(&col[b.row]));
        let k = self.data.classes.len();
        let mut left = Stats::new(k);
        let mut right = Stats {
            weights: all.weights.clone(),
            count: all.count,
        };
        let mut best: Option<(f64, f64)> = None;
        for w in sorted.windows(2) {
            let (a, b) = (w[0], w[1]);
            let class = self.data.labels[a.row];
            let wt = self.weight(a);
            left.add(class, wt, a.mult);
            right.sub(class, wt, a.mult);
            let (va, vb) = (col[a.row], col[b.row]);
            if va == vb {
                continue;
            }
            if let Some(g) = self.gain(parent, &left, &right) {
                if best.is_none_or(|(bg, _)| g > bg) {
                    let mid = va + (vb - va) / 2.0;
                    let t = if mid < vb { mid } else { va };
                    best = Some((g, t));
                }
            }
        }
        best.map(|(g, threshold)| (g, SplitRule::Threshold { threshold }))
    }

    fn best_subset(&self, items: &[Item], j: usize, all: &Stats, parent: f64) -> Option<(f64, SplitRule)> {
        let col = &self.data.columns[j];
        let k = self.data.classes.len();
        let n_levels = match &self.data.kinds[j] {
            FeatureKind::Categorical { levels } => levels.len(),
            FeatureKind::Continuous => unreachable!("called for categorical features"),
        };
        let mut per_level: Vec<Stats> = (0..n_levels).map(|_| Stats::new(k)).collect();
        for it in items {
            per_level[col[it.row] as usize].add(self.data.labels[it.row], self.weight(it), it.mult);
        }
        let present: Vec<usize> = (0..n_levels).filter(|&l| per_level[l].count > 0).collect();
        if present.len() < 2 {
            return None;
        }
        let complement = |left: &Stats| Stats {
            weights: all.weights.iter().zip(&left.weights).map(|(a, b)| a - b).collect(),
            count: all.count - left.count,
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |g: Option<f64>, set: Vec<usize>| {
            if let Some(g) = g {
                if best.as_ref().is_none_or(|(bg, _)| g > *bg) {
                    best = Some((g, set));
                }
            }
        };
        if present.len() <= ONE_VS_REST_MAX_LEVELS {
            for &l in &present {
                let left = &per_level[l];
                consider(self.gain(parent, left, &complement(left)), vec![l]);
            }
        } else {
            let last = k - 1;
            let rate = |l: usize| per_level[l].weights[last] / per_level[l].total();
            let mut order = present.clone();
            order.sort_by(|a, b| rate(*a).total_cmp(&rate(*b)).then(a.cmp(b)));
            let mut left = Stats::new(k);
            for (i, &l) in order[..order.len() - 1].iter().enumerate() {
                for c in 0..k {
                    left.weights[c] += per_level[l].weights[c];
                }
                left.count += per_level[l].count;
                let mut set = order[..=i].to_vec();
                set.sort_unstable();
                consider(self.gain(parent, &left, &complement(&left)), set);
            }
        }
        best.map(|(g, left)| (g, SplitRule::Categories { left }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[1.0, 1.0], 2.0), 0.5);
        assert_eq!(gini(&[3.0, 0.0], 3.0), 0.0);
        assert_eq!(gini(&[0.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn stump_routes_rows() {
        let t = Tree::stump(0, 0.0, vec![0.9, 0.1], vec![0.1, 0.9]);
        assert_eq!(t.proportions(|_| -1.0), &[0.9, 0.1]);
        assert_eq!(t.proportions(|_| 0.0), &[0.9, 0.1]);
        assert_eq!(t.proportions(|_| 0.5), &[0.1, 0.9]);
        assert_eq!(t.depth(), 1);
        assert!(t.uses_feature(0) && !t.uses_feature(1));
    }

    #[test]
    fn category_rule() {
        let r = SplitRule::Categories { left: vec![0, 2] };
        assert!(r.goes_left(2.0) && !r.goes_left(1.0));
    }
}
