use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forest::{ForestMode, ForestParams};
use super::Dataset;
use crate::rng;

/// Serialized as `{feature, threshold, left, right}` or `{counts}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { counts: Vec<u32> },
}

/// Nodes stored in an arena; the root is node 0. `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right }
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    /// Adds the reached leaf's class frequencies into `out`.
    pub fn accumulate_proba(&self, x: &[f64], out: &mut [f64]) {
        if let Node::Leaf { counts } = &self.nodes[self.leaf_index(x)] {
            let total: u32 = counts.iter().sum();
            for (o, c) in out.iter_mut().zip(counts) {
                *o += *c as f64 / total as f64;
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Candidate {
    /// Higher gain wins; ties go to the lower feature index, then lower threshold.
    fn beats(&self, other: &Candidate) -> bool {
        if self.gain != other.gain {
            return self.gain > other.gain;
        }
        if self.feature != other.feature {
            return self.feature < other.feature;
        }
        self.threshold < other.threshold
    }
}

pub(super) struct TreeBuilder<'a> {
    pub data: &'a Dataset,
    pub params: &'a ForestParams,
    pub k: usize,
    pub tree_index: u64,
    /// Weighted impurity decrease per feature.
    pub importance: Vec<f64>,
}

struct Pending {
    node: usize,
    rows: Vec<usize>,
    depth: usize,
    key: u64,
}

impl<'a> TreeBuilder<'a> {
    fn counts(&self, rows: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.data.n_classes()];
        for &r in rows {
            c[self.data.labels()[r]] += 1;
        }
        c
    }

    /// Grows a tree over `rows` (may contain repeats). Node randomness is keyed
    /// by (seed, tree index, node path), never by visiting order.
    pub fn build(&mut self, rows: Vec<usize>) -> Tree {
        let mut nodes = vec![Node::Leaf { counts: Vec::new() }];
        let mut stack = vec![Pending { node: 0, rows, depth: 0, key: 1 }];
        while let Some(Pending { node, rows, depth, key }) = stack.pop() {
            let counts = self.counts(&rows);
            let n = rows.len() as u32;
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let depth_done = self.params.max_depth.is_some_and(|m| depth >= m);
            let split = if pure || rows.len() < self.params.min_split || depth_done {
                None
            } else {
                self.best_split(&rows, &counts, key)
            };
            let Some(best) = split else {
                nodes[node] = Node::Leaf { counts };
                continue;
            };

            let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&r| self.data.value(r, best.feature) <= best.threshold);
            self.importance[best.feature] += n as f64 * best.gain;

            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { counts: Vec::new() });
            nodes.push(Node::Leaf { counts: Vec::new() });
            nodes[node] = Node::Split { feature: best.feature, threshold: best.threshold, left, right };
            stack.push(Pending { node: right, rows: right_rows, depth: depth + 1, key: rng::mix64(key ^ 0xB5) });
            stack.push(Pending { node: left, rows: left_rows, depth: depth + 1, key: rng::mix64(key ^ 0xA4) });
        }
        Tree { nodes }
    }

    fn best_split(&self, rows: &[usize], parent_counts: &[u32], key: u64) -> Option<Candidate> {
        let mut rng = rng::stream(self.params.seed, &[self.tree_index, key]);
        let d = self.data.n_features();
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let parent_gini = gini(parent_counts, rows.len() as u32);

        let mut best: Option<Candidate> = None;
        let mut evaluated = 0;
        for &j in &order {
            if evaluated == self.k {
                break;
            }
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                let v = self.data.value(r, j);
                (lo.min(v), hi.max(v))
            });
            if lo >= hi {
                continue;
            }
            evaluated += 1;
            let cand = match self.params.mode {
                ForestMode::ExtraTrees => {
                    let threshold = rng.gen_range(lo..hi);
                    let gain = self.gain_at(rows, j, threshold, parent_counts, parent_gini);
                    Some(Candidate { feature: j, threshold, gain })
                }
                ForestMode::RandomForest => self.exhaustive(rows, j, parent_counts, parent_gini),
            };
            if let Some(c) = cand {
                if best.is_none_or(|b| c.beats(&b)) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn gain_at(&self, rows: &[usize], j: usize, threshold: f64, parent: &[u32], parent_gini: f64) -> f64 {
        let mut left = vec![0u32; parent.len()];
        for &r in rows {
            if self.data.value(r, j) <= threshold {
                left[self.data.labels()[r]] += 1;
            }
        }
        let right: Vec<u32> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
        let nl: u32 = left.iter().sum();
        let nr = rows.len() as u32 - nl;
        let n = rows.len() as f64;
        parent_gini - (nl as f64 / n) * gini(&left, nl) - (nr as f64 / n) * gini(&right, nr)
    }

    /// Best threshold over all midpoints between consecutive distinct values.
    fn exhaustive(&self, rows: &[usize], j: usize, parent: &[u32], parent_gini: f64) -> Option<Candidate> {
        let mut vals: Vec<(f64, usize)> =
            rows.iter().map(|&r| (self.data.value(r, j), self.data.labels()[r])).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = vals.len();
        let nf = n as f64;
        let mut left = vec![0u32; parent.len()];
        let mut best: Option<Candidate> = None;
        for i in 0..n - 1 {
            left[vals[i].1] += 1;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let nl = (i + 1) as u32;
            let nr = n as u32 - nl;
            let right: Vec<u32> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
            let gain = parent_gini - (nl as f64 / nf) * gini(&left, nl) - (nr as f64 / nf) * gini(&right, nr);
            let mut threshold = 0.5 * (vals[i].0 + vals[i + 1].0);
            if threshold >= vals[i + 1].0 {
                threshold = vals[i].0;
            }
            let c = Candidate { feature: j, threshold, gain };
            if best.is_none_or(|b| c.beats(&b)) {
                best = Some(c);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5, 0], 5), 0.0);
        assert!((gini(&[5, 5], 10) - 0.5).abs() < 1e-15);
        assert_eq!(gini(&[], 0), 0.0);
    }

    #[test]
    fn tie_break_prefers_low_feature_then_threshold() {
        let a = Candidate { feature: 1, threshold: 0.5, gain: 0.2 };
        let b = Candidate { feature: 2, threshold: 0.1, gain: 0.2 };
        let c = Candidate { feature: 1, threshold: 0.4, gain: 0.2 };
        assert!(a.beats(&b));
        assert!(c.beats(&a));
        assert!(Candidate { gain: 0.3, ..b }.beats(&a));
    }

    #[test]
    fn node_json_shape() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 3, threshold: 0.25, left: 1, right: 2 },
                Node::Leaf { counts: vec![2, 0] },
                Node::Leaf { counts: vec![0, 1] },
            ],
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"nodes":[{"feature":3,"threshold":0.25,"left":1,"right":2},{"counts":[2,0]},{"counts":[0,1]}]}"#
        );
        assert_eq!(serde_json::from_str::<Tree>(&s).unwrap(), t);
    }
}
