use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_design, Classifier};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

/// Binary CART tree on Gini impurity.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    root: Node,
    num_classes: usize,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    num_classes: usize,
    max_depth: usize,
    features_per_split: usize,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        idx.iter().for_each(|&i| c[self.y[i]] += 1);
        c
    }

    fn leaf(&self, counts: &[usize], n: usize) -> Node {
        Node::Leaf(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Node {
        let n = idx.len();
        let counts = self.counts(idx);
        let parent = gini(&counts, n);
        if depth >= self.max_depth || n < 2 || parent == 0.0 {
            return self.leaf(&counts, n);
        }
        let d = self.x[0].len();
        let features = sample(&mut self.rng, d, self.features_per_split.min(d));
        // (weighted child impurity, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        for f in features.iter() {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0usize; self.num_classes];
            let mut right = counts.clone();
            for k in 0..n - 1 {
                let c = self.y[idx[k]];
                left[c] += 1;
                right[c] -= 1;
                let (v, next) = (self.x[idx[k]][f], self.x[idx[k + 1]][f]);
                if v == next {
                    continue;
                }
                let nl = k + 1;
                let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.map_or(true, |b| score < b.0) {
                    best = Some((score, f, v + (next - v) / 2.0));
                }
            }
        }
        match best {
            Some((score, feature, threshold)) if score < parent - 1e-12 => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
                let (mut l, mut r) = (l, r);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(self.build(&mut l, depth + 1)),
                    right: Box::new(self.build(&mut r, depth + 1)),
                }
            }
            _ => self.leaf(&counts, n),
        }
    }
}

impl DecisionTree {
    pub fn fit_indices(
        x: &[Vec<f64>],
        y: &[usize],
        mut idx: Vec<usize>,
        num_classes: usize,
        max_depth: usize,
        features_per_split: usize,
        rng: ChaCha8Rng,
    ) -> Self {
        let mut b = Builder {
            x,
            y,
            num_classes,
            max_depth,
            features_per_split: features_per_split.max(1),
            rng,
        };
        Self {
            root: b.build(&mut idx, 0),
            num_classes,
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> &[f64] {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(p) => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    /// `(feature, threshold)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match &self.root {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf(_) => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(left).max(go(right)),
            }
        }
        go(&self.root)
    }
}

/// Bagged CART trees with leaf-frequency soft voting.
#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    num_classes: usize,
}

impl RandomForest {
    pub fn fit(
        x: &[Vec<f64>],
        y: &[usize],
        num_classes: usize,
        trees: usize,
        max_depth: usize,
        features_per_split: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let d = check_design(x, y, num_classes)?;
        if trees == 0 {
            return Err(Error::InvalidArgument("random forest needs at least one tree".into()));
        }
        let m = features_per_split.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize);
        if m == 0 || m > d {
            return Err(Error::InvalidArgument(format!("features per split {m} outside 1..={d}")));
        }
        let n = x.len();
        let trees = (0..trees as u64)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t.wrapping_mul(0x9e37_79b9)));
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                DecisionTree::fit_indices(x, y, idx, num_classes, max_depth, m, rng)
            })
            .collect();
        Ok(Self { trees, num_classes })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}

impl Classifier for RandomForest {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.predict_proba(x)) {
                *a += p;
            }
        }
        acc.into_iter().map(|a| a / self.trees.len() as f64).collect()
    }
}

impl Classifier for DecisionTree {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let p = DecisionTree::predict_proba(self, x);
        debug_assert_eq!(p.len(), self.num_classes);
        p.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use rand_distr::StandardNormal;

    use super::*;
    use crate::inference::argmax;

    #[test]
    fn stump_recovers_threshold() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 13)).collect();
        let t = DecisionTree::fit_indices(&x, &y, (0..20).collect(), 2, 1, 1, ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.root_split(), Some((0, 12.5)));
        assert_eq!(t.depth(), 1);
        for (row, &l) in x.iter().zip(&y) {
            assert_eq!(argmax(t.predict_proba(row)), l);
        }
    }

    #[test]
    fn constant_labels_give_certain_predictions() {
        let x: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64, -(i as f64)]).collect();
        let rf = RandomForest::fit(&x, &[2; 15], 3, 10, 12, None, 4).unwrap();
        assert_eq!(rf.predict_proba(&[3.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn respects_depth_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let a = RandomForest::fit(&x, &y, 3, 5, 4, None, 9).unwrap();
        let b = RandomForest::fit(&x, &y, 3, 5, 4, None, 9).unwrap();
        assert!(a.trees().iter().all(|t| t.depth() <= 4));
        assert_eq!(a.predict_proba(&x[0]), b.predict_proba(&x[0]));
        let p = a.predict_proba(&x[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn many_trees_beat_one_tree() {
        let data = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<usize>) {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 3;
                x.push((0..6).map(|j| if j == c { 1.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal)).collect());
                y.push(c);
            }
            (x, y)
        };
        let mut wins = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = data(300, &mut rng);
            let (tx, ty) = data(300, &mut rng);
            let acc = |rf: &RandomForest| {
                tx.iter().zip(&ty).filter(|(r, &l)| argmax(&rf.predict_proba(r)) == l).count()
            };
            let one = RandomForest::fit(&x, &y, 3, 1, 12, None, seed).unwrap();
            let many = RandomForest::fit(&x, &y, 3, 200, 12, None, seed).unwrap();
            if acc(&many) >= acc(&one) {
                wins += 1;
            }
        }
        assert!(wins >= 3);
    }
}
