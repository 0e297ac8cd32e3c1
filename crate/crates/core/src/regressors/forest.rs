use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub num_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of features considered at each split, rounded up.
    pub feature_subsample: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 100,
            max_depth: None,
            min_leaf: 5,
            feature_subsample: 1.0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::InvalidArgument(
                "forest needs at least one tree".into(),
            ));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("min_leaf must be positive".into()));
        }
        if !(self.feature_subsample > 0.0 && self.feature_subsample <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "feature_subsample must lie in (0, 1], got {}",
                self.feature_subsample
            )));
        }
        Ok(())
    }

    pub fn features_per_split(&self, input_dim: usize) -> usize {
        ((self.feature_subsample * input_dim as f64).ceil() as usize).clamp(1, input_dim)
    }
}

/// Bootstrap multiplicities for one tree plus the seed of its feature sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub counts: Vec<u32>,
    pub feature_seed: u64,
}

/// Draws one bootstrap per tree. Resampled indices come from `rng` in
/// sample-index order, followed by the tree's feature seed.
pub fn draw_bootstraps(n: usize, num_trees: usize, rng: &mut dyn RngCore) -> Vec<Bootstrap> {
    (0..num_trees)
        .map(|_| {
            let mut counts = vec![0u32; n];
            for _ in 0..n {
                counts[rng.random_range(0..n)] += 1;
            }
            Bootstrap {
                counts,
                feature_seed: rng.next_u64(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "kebab-case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, left as usize).max(go(nodes, right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub params: ForestParams,
    pub input_dim: usize,
    pub trees: Vec<Tree>,
}

impl RandomForest {
    pub fn fit(
        params: ForestParams,
        inputs: &[Vec<f64>],
        targets: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        params.validate()?;
        let boots = draw_bootstraps(inputs.len(), params.num_trees, rng);
        Self::fit_with_bootstraps(params, inputs, targets, &boots)
    }

    pub fn fit_with_bootstraps(
        params: ForestParams,
        inputs: &[Vec<f64>],
        targets: &[f64],
        bootstraps: &[Bootstrap],
    ) -> Result<Self> {
        params.validate()?;
        let n = inputs.len();
        if n == 0 {
            return Err(Error::EmptyData(
                "forest fit needs at least one sample".into(),
            ));
        }
        check_dim("targets", n, targets.len())?;
        check_dim("bootstrap count", params.num_trees, bootstraps.len())?;
        let d = inputs[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument(
                "forest inputs must have at least one feature".into(),
            ));
        }
        for x in inputs {
            check_dim("forest input", d, x.len())?;
        }
        for b in bootstraps {
            check_dim("bootstrap counts", n, b.counts.len())?;
        }
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|f| inputs.iter().map(|x| x[f]).collect())
            .collect();
        // One global sort per feature; each tree filters it to its bootstrap.
        let presorted: Vec<Vec<u32>> = cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                idx
            })
            .collect();
        let data = Data {
            cols: &cols,
            y: targets,
            presorted: &presorted,
        };
        let trees = bootstraps
            .par_iter()
            .map(|b| grow_tree(&data, &params, b))
            .collect();
        Ok(Self {
            params,
            input_dim: d,
            trees,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim("forest input", self.input_dim, x.len())?;
        let first = self.trees[0].predict(x);
        let (mut sum, mut same) = (first, true);
        for t in &self.trees[1..] {
            let p = t.predict(x);
            same &= p == first;
            sum += p;
        }
        // Agreeing trees return their common value, which the mean may round away from.
        Ok(if same {
            first
        } else {
            sum / self.trees.len() as f64
        })
    }
}

struct Data<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [f64],
    presorted: &'a [Vec<u32>],
}

struct Builder<'a> {
    data: &'a Data<'a>,
    params: &'a ForestParams,
    w: &'a [u32],
    rng: Stream,
    /// Per feature, the in-bag samples; each node owns the same range in every list.
    order: Vec<Vec<u32>>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
}

fn grow_tree(data: &Data, params: &ForestParams, boot: &Bootstrap) -> Tree {
    let order: Vec<Vec<u32>> = data
        .presorted
        .iter()
        .map(|p| {
            p.iter()
                .copied()
                .filter(|&i| boot.counts[i as usize] > 0)
                .collect()
        })
        .collect();
    let in_bag = order[0].len();
    let mut b = Builder {
        data,
        params,
        w: &boot.counts,
        rng: stream(boot.feature_seed),
        order,
        goes_left: vec![false; data.y.len()],
        scratch: Vec::with_capacity(in_bag),
        nodes: Vec::new(),
    };
    let all: Vec<u32> = (0..data.cols.len() as u32).collect();
    b.build(0, in_bag, 0, &all);
    Tree { nodes: b.nodes }
}

impl Builder<'_> {
    /// `active` lists the features still partitioned at this node; a feature
    /// constant on a node stays constant below it and is dropped.
    fn build(&mut self, lo: usize, hi: usize, depth: usize, active: &[u32]) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });

        let rows = active[0] as usize;
        let (mut sw, mut swy) = (0.0, 0.0);
        let first_y = self.data.y[self.order[rows][lo] as usize];
        let mut constant = true;
        for &i in &self.order[rows][lo..hi] {
            let (w, y) = (self.w[i as usize] as f64, self.data.y[i as usize]);
            sw += w;
            swy += w * y;
            constant &= y == first_y;
        }
        let min_leaf = self.params.min_leaf as f64;
        let depth_ok = self.params.max_depth.is_none_or(|m| depth < m);
        let live: Vec<u32> = active
            .iter()
            .copied()
            .filter(|&f| {
                let (col, list) = (&self.data.cols[f as usize], &self.order[f as usize]);
                col[list[lo] as usize] != col[list[hi - 1] as usize]
            })
            .collect();
        let split = if constant || live.is_empty() || !depth_ok || sw < 2.0 * min_leaf {
            None
        } else {
            self.best_split(lo, hi, sw, swy, &live)
        };
        let Some(split) = split else {
            let value = if constant { first_y } else { swy / sw };
            self.nodes[id as usize] = Node::Leaf { value };
            return id;
        };

        let col = &self.data.cols[split.feature];
        for &i in &self.order[rows][lo..hi] {
            self.goes_left[i as usize] = col[i as usize] <= split.threshold;
        }
        let mut mid = lo;
        for &f in &live {
            self.scratch.clear();
            let list = &mut self.order[f as usize];
            let mut k = lo;
            for j in lo..hi {
                let i = list[j];
                if self.goes_left[i as usize] {
                    list[k] = i;
                    k += 1;
                } else {
                    self.scratch.push(i);
                }
            }
            list[k..hi].copy_from_slice(&self.scratch);
            mid = k;
        }
        let left = self.build(lo, mid, depth + 1, &live);
        let right = self.build(mid, hi, depth + 1, &live);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Maximizes the weighted between-child sum of squares, which is the same
    /// as minimizing the children's weighted squared error.
    fn best_split(
        &mut self,
        lo: usize,
        hi: usize,
        sw: f64,
        swy: f64,
        live: &[u32],
    ) -> Option<BestSplit> {
        let d = self.order.len();
        let m = self.params.features_per_split(d);
        let mut features = if m == d {
            live.iter().map(|&f| f as usize).collect()
        } else {
            // Constant features are sampled too, so the draw does not depend on `live`.
            let mut f = rand::seq::index::sample(&mut self.rng, d, m).into_vec();
            f.retain(|x| live.binary_search(&(*x as u32)).is_ok());
            f
        };
        features.sort_unstable();

        let min_leaf = self.params.min_leaf as f64;
        let parent = swy * swy / sw;
        let mut best_score = parent + 1e-12 * parent.abs().max(1.0);
        let mut best = None;
        for f in features {
            let col = &self.data.cols[f];
            let list = &self.order[f][lo..hi];
            let (mut lw, mut lwy) = (0.0, 0.0);
            for j in 0..list.len() - 1 {
                let i = list[j] as usize;
                let w = self.w[i] as f64;
                lw += w;
                lwy += w * self.data.y[i];
                let (x, next) = (col[i], col[list[j + 1] as usize]);
                if x == next || lw < min_leaf {
                    continue;
                }
                let rw = sw - lw;
                if rw < min_leaf {
                    break;
                }
                let rwy = swy - lwy;
                let score = lwy * lwy / lw + rwy * rwy / rw;
                if score > best_score {
                    best_score = score;
                    let mut threshold = 0.5 * (x + next);
                    if threshold >= next {
                        threshold = x;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}
