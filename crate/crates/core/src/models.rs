//! Probabilistic classifiers for the feature-based selector: a CART-style
//! decision tree (Gini impurity, midpoint split candidates) and a bagged
//! random forest with out-of-bag bookkeeping.
//!
//! Training is deterministic given data, parameters, and seed: split
//! candidates are scanned in ascending feature-index and threshold order,
//! per-tree RNGs derive from the master seed, and the forest probability is
//! the plain arithmetic mean of its trees' leaf probabilities in tree order.
//! An impure node splits on its best candidate even when the Gini gain is
//! zero (required for patterns like XOR whose first split is gain-free);
//! recursion still terminates because both children are strictly smaller.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scoring::Solver;
use crate::Result;

/// Decision-tree hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf_size: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 64,
            min_leaf_size: 1,
        }
    }
}

/// Random-forest hyperparameters. `mtry = None` means `floor(sqrt(p))`
/// features per split; `bootstrap = false` trains every tree on the full
/// sample (no out-of-bag instances).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub tree: TreeParams,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            mtry: None,
            bootstrap: true,
            tree: TreeParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        p_eax: f64,
        p_lkh: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// CART-style binary probability tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub n_features: usize,
    pub params: TreeParams,
    root: Node,
}

impl DecisionTree {
    /// Greedy CART fit: best split by Gini gain over midpoint candidates,
    /// feature-index then threshold tie-breaks, deterministic output.
    pub fn fit(x: &[Vec<f64>], y: &[Solver], params: TreeParams) -> Result<Self> {
        check_data(x, y)?;
        let n_features = x[0].len();
        let indices: Vec<usize> = (0..x.len()).collect();
        let root = grow(x, y, &indices, params, 0, &mut AllFeatures(n_features));
        Ok(DecisionTree {
            n_features,
            params,
            root,
        })
    }

    /// Class probabilities `(p_eax, p_lkh)` for one feature row.
    pub fn predict_proba(&self, row: &[f64]) -> Result<(f64, f64)> {
        if row.len() != self.n_features {
            return Err(Error::mismatch(format!(
                "expected {} features, got {}",
                self.n_features,
                row.len()
            )));
        }
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { p_eax, p_lkh } => return Ok((*p_eax, *p_lkh)),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn depth(&self) -> usize {
        fn depth_of(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + depth_of(left).max(depth_of(right)),
            }
        }
        depth_of(&self.root)
    }
}

/// Bagged forest of probability trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub n_features: usize,
    pub params: ForestParams,
    trees: Vec<DecisionTree>,
    /// Per tree, the training indices that were not drawn into its bootstrap
    /// sample (empty when bootstrapping is disabled).
    oob_indices: Vec<Vec<usize>>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[Solver], params: ForestParams) -> Result<Self> {
        check_data(x, y)?;
        if params.n_trees == 0 {
            return Err(Error::invalid("forest needs at least one tree"));
        }
        let n = x.len();
        let n_features = x[0].len();
        let mtry = match params.mtry {
            Some(m) => {
                if m == 0 || m > n_features {
                    return Err(Error::invalid(format!(
                        "mtry must be in 1..={n_features}, got {m}"
                    )));
                }
                m
            }
            None => (n_features as f64).sqrt().floor().max(1.0) as usize,
        };

        let mut trees = Vec::with_capacity(params.n_trees);
        let mut oob_indices = Vec::with_capacity(params.n_trees);
        for t in 0..params.n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
            let (sample, oob) = if params.bootstrap {
                let mut drawn = vec![false; n];
                let sample: Vec<usize> = (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        drawn[i] = true;
                        i
                    })
                    .collect();
                let oob = (0..n).filter(|&i| !drawn[i]).collect();
                (sample, oob)
            } else {
                ((0..n).collect(), Vec::new())
            };
            let root = grow(
                x,
                y,
                &sample,
                params.tree,
                0,
                &mut SampledFeatures {
                    n_features,
                    mtry,
                    rng,
                },
            );
            trees.push(DecisionTree {
                n_features,
                params: params.tree,
                root,
            });
            oob_indices.push(oob);
        }
        Ok(RandomForest {
            n_features,
            params,
            trees,
            oob_indices,
        })
    }

    /// Mean of the trees' leaf probabilities, in tree order.
    pub fn predict_proba(&self, row: &[f64]) -> Result<(f64, f64)> {
        let mut sum_e = 0.0;
        let mut sum_l = 0.0;
        for tree in &self.trees {
            let (e, l) = tree.predict_proba(row)?;
            sum_e += e;
            sum_l += l;
        }
        let n = self.trees.len() as f64;
        Ok((sum_e / n, sum_l / n))
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn oob_indices(&self) -> &[Vec<usize>] {
        &self.oob_indices
    }

    /// Out-of-bag `p_eax` per training row: the mean over trees whose
    /// bootstrap missed the row. Rows that every tree saw (rare with
    /// realistically many trees) fall back to the full-forest probability so
    /// the result is defined for every row.
    pub fn oob_p_eax(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut sums = vec![0.0f64; x.len()];
        let mut counts = vec![0usize; x.len()];
        for (tree, oob) in self.trees.iter().zip(&self.oob_indices) {
            for &i in oob {
                let (e, _) = tree.predict_proba(&x[i])?;
                sums[i] += e;
                counts[i] += 1;
            }
        }
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            if counts[i] > 0 {
                out.push(sums[i] / counts[i] as f64);
            } else {
                out.push(self.predict_proba(&x[i])?.0);
            }
        }
        Ok(out)
    }
}

/// Either learner behind one serialization format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Tree(DecisionTree),
    Forest(RandomForest),
}

impl Model {
    pub fn predict_proba(&self, row: &[f64]) -> Result<(f64, f64)> {
        match self {
            Model::Tree(t) => t.predict_proba(row),
            Model::Forest(f) => f.predict_proba(row),
        }
    }

    /// Self-describing JSON serialization, round-trip safe.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            format_version: u32,
            model: &'a Model,
        }
        Ok(serde_json::to_string(&File {
            format_version: 1,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        #[derive(Deserialize)]
        struct File {
            format_version: u32,
            model: Model,
        }
        let file: File = serde_json::from_str(text)?;
        if file.format_version != 1 {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        Ok(file.model)
    }
}

fn check_data(x: &[Vec<f64>], y: &[Solver]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("empty training data"));
    }
    if x.len() != y.len() {
        return Err(Error::mismatch(format!(
            "{} rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    let p = x[0].len();
    if p == 0 {
        return Err(Error::invalid("training data has no features"));
    }
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::mismatch("ragged feature matrix"));
    }
    Ok(())
}

/// Mixes a tree index into the master seed (splitmix64 finalizer).
fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Feature-candidate source for split search: either every feature (plain
/// tree) or `mtry` sampled without replacement per split (forest).
trait FeatureSource {
    fn candidates(&mut self) -> Vec<usize>;
}

struct AllFeatures(usize);

impl FeatureSource for AllFeatures {
    fn candidates(&mut self) -> Vec<usize> {
        (0..self.0).collect()
    }
}

struct SampledFeatures {
    n_features: usize,
    mtry: usize,
    rng: ChaCha8Rng,
}

impl FeatureSource for SampledFeatures {
    fn candidates(&mut self) -> Vec<usize> {
        // Partial Fisher-Yates, then sorted so the lowest-index tie-break of
        // the split search stays meaningful.
        let mut pool: Vec<usize> = (0..self.n_features).collect();
        for i in 0..self.mtry {
            let j = self.rng.random_range(i..self.n_features);
            pool.swap(i, j);
        }
        let mut picked = pool[..self.mtry].to_vec();
        picked.sort_unstable();
        picked
    }
}

fn gini(eax: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let pe = eax as f64 / total as f64;
    let pl = 1.0 - pe;
    1.0 - pe * pe - pl * pl
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow(
    x: &[Vec<f64>],
    y: &[Solver],
    indices: &[usize],
    params: TreeParams,
    depth: usize,
    features: &mut dyn FeatureSource,
) -> Node {
    let total = indices.len();
    let eax_count = indices.iter().filter(|&&i| y[i] == Solver::Eax).count();

    let leaf = || Node::Leaf {
        p_eax: eax_count as f64 / total as f64,
        p_lkh: (total - eax_count) as f64 / total as f64,
    };

    let pure = eax_count == 0 || eax_count == total;
    if pure || depth >= params.max_depth || total < 2 * params.min_leaf_size {
        return leaf();
    }

    let parent_gini = gini(eax_count, total);
    let mut best: Option<BestSplit> = None;
    let mut sorted: Vec<usize> = Vec::with_capacity(total);
    for feature in features.candidates() {
        sorted.clear();
        sorted.extend_from_slice(indices);
        sorted.sort_by(|&a, &b| x[a][feature].partial_cmp(&x[b][feature]).unwrap());

        let mut left_eax = 0usize;
        for split_at in 1..total {
            let prev = sorted[split_at - 1];
            if y[prev] == Solver::Eax {
                left_eax += 1;
            }
            let (lo, hi) = (x[prev][feature], x[sorted[split_at]][feature]);
            if lo == hi {
                continue;
            }
            if split_at < params.min_leaf_size || total - split_at < params.min_leaf_size {
                continue;
            }
            let left_gini = gini(left_eax, split_at);
            let right_gini = gini(eax_count - left_eax, total - split_at);
            let gain = parent_gini
                - (split_at as f64 * left_gini + (total - split_at) as f64 * right_gini)
                    / total as f64;
            // Strictly better gain wins; scan order handles the
            // lowest-feature-index and lowest-threshold tie-breaks.
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(BestSplit {
                    gain,
                    feature,
                    threshold: (lo + hi) / 2.0,
                });
            }
        }
    }

    let Some(best) = best else {
        return leaf(); // no candidate separates two distinct values
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
        .iter()
        .partition(|&&i| x[i][best.feature] <= best.threshold);
    debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());
    Node::Split {
        feature: best.feature,
        threshold: best.threshold,
        left: Box::new(grow(x, y, &left_idx, params, depth + 1, features)),
        right: Box::new(grow(x, y, &right_idx, params, depth + 1, features)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(spec: &[u8]) -> Vec<Solver> {
        spec.iter()
            .map(|&b| if b == 0 { Solver::Eax } else { Solver::Lkh })
            .collect()
    }

    fn accuracy(model: &Model, x: &[Vec<f64>], y: &[Solver]) -> f64 {
        let correct = x
            .iter()
            .zip(y)
            .filter(|(row, &label)| {
                let (pe, _) = model.predict_proba(row).unwrap();
                let pred = if pe >= 0.5 { Solver::Eax } else { Solver::Lkh };
                pred == label
            })
            .count();
        correct as f64 / x.len() as f64
    }

    #[test]
    fn separable_1d_needs_one_split() {
        let x: Vec<Vec<f64>> = (-5..5).map(|v| vec![v as f64 + 0.5]).collect();
        let y = labels(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        assert_eq!(tree.depth(), 1);
        match tree.root() {
            Node::Split { threshold, .. } => {
                assert!(*threshold > -0.5 && *threshold < 0.5);
            }
            _ => panic!("expected a split at the root"),
        }
        assert_eq!(accuracy(&Model::Tree(tree), &x, &y), 1.0);
    }

    #[test]
    fn pure_data_yields_single_leaf() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![Solver::Lkh; 3];
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        assert_eq!(tree.depth(), 0);
        assert_eq!(tree.predict_proba(&[9.0]).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn xor_needs_depth_two() {
        let x = vec![
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let y = labels(&[0, 0, 1, 1]);
        let deep = DecisionTree::fit(
            &x,
            &y,
            TreeParams {
                max_depth: 2,
                min_leaf_size: 1,
            },
        )
        .unwrap();
        assert_eq!(deep.depth(), 2);
        assert_eq!(accuracy(&Model::Tree(deep), &x, &y), 1.0);

        // Brute force over all depth-1 trees: any single axis split leaves
        // both children at 50/50, so no depth-1 tree exceeds 0.75 accuracy.
        let mut best_depth1: f64 = 0.0;
        for feature in 0..2 {
            for threshold in [-0.5, 0.5, 1.5] {
                for (left_class, right_class) in [
                    (Solver::Eax, Solver::Eax),
                    (Solver::Eax, Solver::Lkh),
                    (Solver::Lkh, Solver::Eax),
                    (Solver::Lkh, Solver::Lkh),
                ] {
                    let correct = x
                        .iter()
                        .zip(&y)
                        .filter(|(row, &label)| {
                            let pred = if row[feature] <= threshold {
                                left_class
                            } else {
                                right_class
                            };
                            pred == label
                        })
                        .count();
                    best_depth1 = best_depth1.max(correct as f64 / 4.0);
                }
            }
        }
        assert!(best_depth1 <= 0.75);

        let shallow = DecisionTree::fit(
            &x,
            &y,
            TreeParams {
                max_depth: 1,
                min_leaf_size: 1,
            },
        )
        .unwrap();
        assert!(accuracy(&Model::Tree(shallow), &x, &y) <= best_depth1);
    }

    #[test]
    fn empty_data_is_an_error() {
        assert!(DecisionTree::fit(&[], &[], TreeParams::default()).is_err());
        assert!(RandomForest::fit(&[], &[], ForestParams::default()).is_err());
    }

    #[test]
    fn degenerate_forest_equals_tree() {
        let x: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![i as f64, (i * 7 % 5) as f64])
            .collect();
        let y = labels(&[0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0, 1]);
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        let forest = RandomForest::fit(
            &x,
            &y,
            ForestParams {
                n_trees: 1,
                mtry: Some(2),
                bootstrap: false,
                tree: TreeParams::default(),
                seed: 123,
            },
        )
        .unwrap();
        assert_eq!(forest.trees()[0], tree);
        for row in &x {
            assert_eq!(
                forest.predict_proba(row).unwrap(),
                tree.predict_proba(row).unwrap()
            );
        }
    }

    #[test]
    fn forest_is_seed_deterministic() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 7) as f64, (i % 3) as f64, i as f64 * 0.1])
            .collect();
        let y = labels(&(0..30).map(|i| (i % 2) as u8).collect::<Vec<_>>());
        let params = ForestParams {
            n_trees: 25,
            seed: 77,
            ..ForestParams::default()
        };
        let a = RandomForest::fit(&x, &y, params).unwrap();
        let b = RandomForest::fit(&x, &y, params).unwrap();
        assert_eq!(a, b);
        let probe = vec![3.0, 1.0, 1.5];
        assert_eq!(
            a.predict_proba(&probe).unwrap(),
            b.predict_proba(&probe).unwrap()
        );
    }

    #[test]
    fn forest_probability_is_mean_of_trees() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 4) as f64]).collect();
        let y = labels(&(0..20).map(|i| u8::from(i >= 9)).collect::<Vec<_>>());
        let forest = RandomForest::fit(
            &x,
            &y,
            ForestParams {
                n_trees: 17,
                seed: 5,
                ..ForestParams::default()
            },
        )
        .unwrap();
        let probe = vec![8.5, 2.0];
        let mut sum_e = 0.0;
        let mut sum_l = 0.0;
        for tree in forest.trees() {
            let (e, l) = tree.predict_proba(&probe).unwrap();
            sum_e += e;
            sum_l += l;
        }
        let expected = (sum_e / 17.0, sum_l / 17.0);
        assert_eq!(forest.predict_proba(&probe).unwrap(), expected);
        let (pe, pl) = expected;
        assert!((pe + pl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_leaf_probabilities_are_extreme() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0], vec![11.0], vec![12.0]];
        let y = labels(&[0, 0, 0, 1, 1, 1]);
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        assert_eq!(tree.predict_proba(&[0.5]).unwrap(), (1.0, 0.0));
        assert_eq!(tree.predict_proba(&[11.5]).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
        let y = labels(&[0, 1, 0]);
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        assert!(tree.predict_proba(&[1.0]).is_err());
    }

    #[test]
    fn tree_invariant_under_increasing_affine_transform() {
        let x: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![(i % 5) as f64, (i % 3) as f64 * 2.0])
            .collect();
        let y = labels(&(0..16).map(|i| u8::from(i % 5 >= 2)).collect::<Vec<_>>());
        let tree = DecisionTree::fit(&x, &y, TreeParams::default()).unwrap();
        let transform = |row: &[f64]| vec![row[0] * 3.5 + 11.0, row[1] * 0.25 - 4.0];
        let tx: Vec<Vec<f64>> = x.iter().map(|r| transform(r)).collect();
        let ttree = DecisionTree::fit(&tx, &y, TreeParams::default()).unwrap();
        for (row, trow) in x.iter().zip(&tx) {
            assert_eq!(
                tree.predict_proba(row).unwrap(),
                ttree.predict_proba(trow).unwrap()
            );
        }
    }

    #[test]
    fn model_json_roundtrip() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = labels(&[0, 0, 1, 0, 1, 1, 1, 0, 1, 1]);
        let forest = Model::Forest(
            RandomForest::fit(
                &x,
                &y,
                ForestParams {
                    n_trees: 5,
                    seed: 9,
                    ..ForestParams::default()
                },
            )
            .unwrap(),
        );
        let json = forest.to_json().unwrap();
        let back = Model::from_json(&json).unwrap();
        assert_eq!(forest, back);
    }
}
