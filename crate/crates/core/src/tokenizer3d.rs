//! Lightweight point-cloud tokenizer: per layer, FPS picks centers, kNN
//! gathers neighbourhoods, a shared linear map encodes every
//! `(neighbour feature ∥ offset to center)` pair and a max over the
//! neighbourhood pools it into the center's feature.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, Point3, PointCloud};
use crate::nn::{init_layer_norm, init_linear, Graph, ParamStore, TrainMask};

pub const PREFIX: &str = "tokenizer.";

/// Base channel widths per depth.
pub const LAYER_DIMS: [usize; 4] = [192, 384, 768, 1536];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerLayer {
    /// Centers kept by this layer.
    pub points: usize,
    /// Output channels.
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub layers: Vec<TokenizerLayer>,
    pub k_nn: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// Layer norm after each linear map.
    pub norm: bool,
    /// Append cube coordinates to the colors as first-layer point features.
    pub point_xyz: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::with_depth(3, 1024, 128, 64, 768, &LAYER_DIMS)
    }
}

impl TokenizerConfig {
    /// Halving point schedule ending at `tokens`, channel widths from `dims`.
    /// The first layer keeps at most `input_points` points.
    pub fn with_depth(depth: usize, input_points: usize, tokens: usize, k_nn: usize, output_dim: usize, dims: &[usize]) -> Self {
        let layers = (0..depth)
            .map(|l| TokenizerLayer { points: (tokens << (depth - 1 - l)).min(input_points), dim: dims[l.min(dims.len() - 1)] })
            .collect();
        Self { layers, k_nn, output_dim, activation: Activation::Relu, norm: false, point_xyz: false }
    }

    pub fn tokens(&self) -> usize {
        self.layers.last().map_or(0, |l| l.points)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() > 4 {
            return Err(Error::Config(format!("tokenizer depth {} not in 1..=4", self.layers.len())));
        }
        if self.k_nn == 0 || self.output_dim == 0 {
            return Err(Error::Config("k_nn and output_dim must be positive".into()));
        }
        for w in self.layers.windows(2) {
            if w[1].points >= w[0].points {
                return Err(Error::Config("tokenizer point counts must strictly decrease".into()));
            }
        }
        if self.layers.iter().any(|l| l.points == 0 || l.dim == 0) {
            return Err(Error::Config("tokenizer layers need positive points and dims".into()));
        }
        Ok(())
    }

    /// Width of the per-point input features.
    pub fn point_dim(&self) -> usize {
        if self.point_xyz {
            6
        } else {
            3
        }
    }

    fn needs_projection(&self) -> bool {
        self.layers.last().is_some_and(|l| l.dim != self.output_dim)
    }
}

/// Exact number of learnable scalars.
pub fn tokenizer_param_count(cfg: &TokenizerConfig) -> Result<usize> {
    cfg.validate()?;
    let mut total = 0;
    let mut in_dim = cfg.point_dim();
    for l in &cfg.layers {
        total += (in_dim + 3) * l.dim + l.dim;
        if cfg.norm {
            total += 2 * l.dim;
        }
        in_dim = l.dim;
    }
    if cfg.needs_projection() {
        total += in_dim * cfg.output_dim + cfg.output_dim;
    }
    Ok(total)
}

pub fn init_tokenizer(store: &mut ParamStore, cfg: &TokenizerConfig, rng: &mut impl rand::Rng) {
    let mut in_dim = cfg.point_dim();
    for (i, l) in cfg.layers.iter().enumerate() {
        init_linear(store, rng, &format!("tokenizer.layers.{i}"), in_dim + 3, l.dim);
        if cfg.norm {
            init_layer_norm(store, &format!("tokenizer.layers.{i}.norm"), l.dim);
        }
        in_dim = l.dim;
    }
    if cfg.needs_projection() {
        init_linear(store, rng, "tokenizer.proj", in_dim, cfg.output_dim);
    }
}

/// Geometry-only part of tokenization: which points every layer groups.
/// Depends on coordinates and seed only, so it can be computed once per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerPlan {
    pub layers: Vec<LayerPlan>,
    /// Coordinates of the final token centers.
    pub centers: Vec<Point3>,
    /// Input coordinates.
    pub points: Vec<Point3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    /// Indices of the centers into the previous layer's points.
    pub centers: Vec<usize>,
    /// `centers.len() × k` neighbour indices, flattened row-major.
    pub neighbors: Vec<usize>,
    pub k: usize,
    /// Neighbour offsets to their center, one row per neighbour.
    pub offsets: Mat,
}

impl TokenizerPlan {
    /// The same grouping applied to `f`-mapped input points; centers and
    /// offsets are recomputed from the mapped coordinates.
    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> TokenizerPlan {
        let points: Vec<Point3> = self.points.iter().map(f).collect();
        let mut prev = points.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let center_pts: Vec<Point3> = lp.centers.iter().map(|&i| prev[i]).collect();
            let mut offsets = Mat::zeros(lp.neighbors.len(), 3);
            for (r, &n) in lp.neighbors.iter().enumerate() {
                let c = center_pts[r / lp.k];
                let o = offsets.row_mut(r);
                for a in 0..3 {
                    o[a] = prev[n][a] - c[a];
                }
            }
            layers.push(LayerPlan { offsets, ..lp.clone() });
            prev = center_pts;
        }
        TokenizerPlan { layers, centers: prev, points }
    }

    pub fn build(points: &[Point3], cfg: &TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let first = cfg.layers[0].points;
        if points.len() < first {
            return Err(Error::InvalidArgument(format!("tokenizer needs {first} points, cloud has {}", points.len())));
        }
        let mut prev: Vec<Point3> = points.to_vec();
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let centers = farthest_point_sample(&prev, l.points, seed)?;
            let center_pts: Vec<Point3> = centers.iter().map(|&i| prev[i]).collect();
            let k = cfg.k_nn.min(prev.len());
            let rows = knn_group(&center_pts, &prev, k)?;
            let mut offsets = Mat::zeros(centers.len() * k, 3);
            let mut neighbors = Vec::with_capacity(centers.len() * k);
            for (c, row) in rows.iter().enumerate() {
                for (j, &n) in row.iter().enumerate() {
                    let o = offsets.row_mut(c * k + j);
                    for a in 0..3 {
                        o[a] = prev[n][a] - center_pts[c][a];
                    }
                    neighbors.push(n);
                }
            }
            layers.push(LayerPlan { centers, neighbors, k, offsets });
            prev = center_pts;
        }
        Ok(Self { layers, centers: prev, points: points.to_vec() })
    }
}

/// Tokenizer forward pass on the tape. First-layer point features are the
/// colors, followed by the plan's coordinates when `point_xyz` is set.
pub fn forward(g: &mut Graph, cfg: &TokenizerConfig, plan: &TokenizerPlan, colors: &[Point3]) -> Var {
    let data: Vec<f64> = if cfg.point_xyz {
        colors.iter().zip(&plan.points).flat_map(|(c, p)| c.iter().chain(p).copied()).collect()
    } else {
        colors.iter().flatten().copied().collect()
    };
    let mut feat = g.constant(Mat::from_vec(colors.len(), cfg.point_dim(), data));
    for (i, lp) in plan.layers.iter().enumerate() {
        let nbr = g.tape.gather_rows(feat, &lp.neighbors);
        let off = g.constant(lp.offsets.clone());
        let x = g.tape.concat_cols(&[nbr, off]);
        let mut h = g.linear(&format!("tokenizer.layers.{i}"), x);
        if cfg.norm {
            h = g.layer_norm(&format!("tokenizer.layers.{i}.norm"), h);
        }
        h = match cfg.activation {
            Activation::Gelu => g.tape.gelu(h),
            Activation::Relu => g.tape.relu(h),
        };
        feat = g.tape.group_max(h, lp.k);
    }
    if cfg.needs_projection() {
        feat = g.linear("tokenizer.proj", feat);
    }
    feat
}

/// `k` token features with their 3D centers.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet3D {
    pub features: Mat,
    pub centers: Vec<Point3>,
}

impl TokenSet3D {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Tokenizes a cube-normalized cloud with the weights in `params`.
pub fn tokenize(pc: &PointCloud, cfg: &TokenizerConfig, params: &ParamStore, seed: u64) -> Result<TokenSet3D> {
    for p in params.iter().filter(|p| p.name.starts_with(PREFIX)) {
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("tokenizer weight {}", p.name)));
        }
    }
    let plan = TokenizerPlan::build(&pc.points, cfg, seed)?;
    let mask = TrainMask::none(params);
    let mut g = Graph::new(params, &mask);
    let f = forward(&mut g, cfg, &plan, &pc.colors);
    Ok(TokenSet3D { features: g.value(f).clone(), centers: plan.centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud {
            points: (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
            colors: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        }
    }

    fn small_cfg() -> TokenizerConfig {
        TokenizerConfig::with_depth(2, 64, 8, 4, 6, &[5, 7])
    }

    #[test]
    fn default_config_produces_128_by_768() {
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.layers.iter().map(|l| l.points).collect::<Vec<_>>(), vec![512, 256, 128]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &cfg, &mut rng);
        let pc = random_cloud(&mut rng, 1024);
        let t = tokenize(&pc, &cfg, &store, 0).unwrap();
        assert_eq!(t.features.shape(), (128, 768));
        assert_eq!(t.centers.len(), 128);
    }

    #[test]
    fn zero_weights_give_constant_rows_and_fps_centers() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &cfg, &mut rng);
        for p in store.params_mut() {
            p.value.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let pc = random_cloud(&mut rng, 64);
        let t = tokenize(&pc, &cfg, &store, 3).unwrap();
        // proj of a zero feature is the zero bias
        assert!(t.features.data.iter().all(|&x| x == 0.0));
        let l1 = farthest_point_sample(&pc.points, 16, 3).unwrap();
        let p1: Vec<Point3> = l1.iter().map(|&i| pc.points[i]).collect();
        let l2 = farthest_point_sample(&p1, 8, 3).unwrap();
        assert_eq!(t.centers, l2.iter().map(|&i| p1[i]).collect::<Vec<_>>());
    }

    #[test]
    fn hand_traced_single_layer() {
        let cfg = TokenizerConfig {
            layers: vec![TokenizerLayer { points: 2, dim: 2 }],
            k_nn: 2,
            output_dim: 2,
            activation: Activation::Gelu,
            norm: false,
            point_xyz: false,
        };
        let pts: Vec<Point3> = (0..8).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let cols: Vec<Point3> = (0..8).map(|i| [i as f64 / 8.0, 0.5, 1.0 - i as f64 / 8.0]).collect();
        let pc = PointCloud::new(pts.clone(), cols.clone()).unwrap();
        let mut store = ParamStore::new();
        // rows: r, g, b, dx, dy, dz
        let w = Mat::from_rows(&[
            vec![1.0, -1.0],
            vec![0.5, 0.0],
            vec![0.0, 2.0],
            vec![3.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
        ]);
        store.insert("tokenizer.layers.0.weight", w);
        store.insert("tokenizer.layers.0.bias", Mat::from_vec(1, 2, vec![0.25, -0.5]));
        let t = tokenize(&pc, &cfg, &store, 0).unwrap();
        // FPS from 0 picks 7; neighbours: center 0 -> {0,1}, center 7 -> {7,6}
        assert_eq!(t.centers, vec![pts[0], pts[7]]);
        let enc = |n: usize, c: usize| {
            let dx = pts[n][0] - pts[c][0];
            let col = cols[n];
            [
                gelu(col[0] - 0.0 + 0.5 * col[1] + 3.0 * dx + 0.25),
                gelu(-col[0] + 2.0 * col[2] - 0.5),
            ]
        };
        for (row, (c, nbrs)) in [(0usize, [0usize, 1]), (7, [7, 6])].iter().enumerate() {
            let a = enc(nbrs[0], *c);
            let b = enc(nbrs[1], *c);
            for ch in 0..2 {
                assert!((t.features.at(row, ch) - a[ch].max(b[ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count_closed_form() {
        let one = TokenizerConfig::with_depth(1, 1024, 128, 64, 192, &LAYER_DIMS);
        assert_eq!(tokenizer_param_count(&one).unwrap(), 6 * 192 + 192);
        let projected = TokenizerConfig::with_depth(1, 1024, 128, 64, 768, &LAYER_DIMS);
        assert_eq!(tokenizer_param_count(&projected).unwrap(), 6 * 192 + 192 + 192 * 768 + 768);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &TokenizerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.count_where(|n| n.starts_with(PREFIX)), tokenizer_param_count(&TokenizerConfig::default()).unwrap());
        let empty = TokenizerConfig { layers: vec![], ..Default::default() };
        assert!(tokenizer_param_count(&empty).is_err());
        let small = TokenizerConfig::with_depth(2, 64, 8, 4, 32, &[16, 32]);
        let big = TokenizerConfig::with_depth(2, 64, 8, 4, 64, &[32, 64]);
        let ratio = tokenizer_param_count(&big).unwrap() as f64 / tokenizer_param_count(&small).unwrap() as f64;
        assert!(ratio > 3.0 && ratio < 4.2, "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &cfg, &mut rng);
        assert!(tokenize(&random_cloud(&mut rng, 10), &cfg, &store, 0).is_err());
        store.get_mut("tokenizer.layers.0.weight").unwrap().data[0] = f64::NAN;
        assert!(matches!(tokenize(&random_cloud(&mut rng, 64), &cfg, &store, 0), Err(Error::NonFinite(_))));
        let bad = TokenizerConfig { layers: vec![TokenizerLayer { points: 4, dim: 2 }, TokenizerLayer { points: 4, dim: 2 }], ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn centers_form_a_subset_chain() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pc = random_cloud(&mut rng, 64);
        let plan = TokenizerPlan::build(&pc.points, &cfg, 9).unwrap();
        let l0: Vec<Point3> = plan.layers[0].centers.iter().map(|&i| pc.points[i]).collect();
        let l1: Vec<Point3> = plan.layers[1].centers.iter().map(|&i| l0[i]).collect();
        assert_eq!(l1, plan.centers);
        assert!(plan.centers.iter().all(|c| pc.points.contains(c)));
    }

    #[test]
    fn permuting_points_with_pinned_start_keeps_features() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &cfg, &mut rng);
        let pc = random_cloud(&mut rng, 64);
        // index 0 stays in place so every layer's FPS starts from the same point
        let mut perm: Vec<usize> = vec![0];
        perm.extend((1..64).rev());
        perm.swap(3, 40);
        let permuted = pc.select(&perm);
        let a = tokenize(&pc, &cfg, &store, 0).unwrap();
        let b = tokenize(&permuted, &cfg, &store, 0).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn dominant_neighbour_wins_every_channel() {
        let cfg = TokenizerConfig {
            layers: vec![TokenizerLayer { points: 1, dim: 3 }],
            k_nn: 4,
            output_dim: 3,
            activation: Activation::Gelu,
            norm: false,
            point_xyz: false,
        };
        let mut store = ParamStore::new();
        let mut w = Mat::zeros(6, 3);
        for r in 0..3 {
            for c in 0..3 {
                *w.at_mut(r, c) = 0.1 + 0.05 * (r + c) as f64;
            }
        }
        store.insert("tokenizer.layers.0.weight", w);
        store.insert("tokenizer.layers.0.bias", Mat::zeros(1, 3));
        let w = store.get("tokenizer.layers.0.weight").unwrap().clone();
        let pts: Vec<Point3> = (0..4).map(|i| [0.01 * i as f64, 0.0, 0.0]).collect();
        let mut cols = vec![[0.1, 0.2, 0.1], [0.0, 0.1, 0.2], [0.2, 0.2, 0.2], [0.1, 0.0, 0.0]];
        cols[2] = [1.0, 1.0, 1.0];
        let pc = PointCloud::new(pts.clone(), cols.clone()).unwrap();
        let t = tokenize(&pc, &cfg, &store, 0).unwrap();
        let dx = pts[2][0] - pts[0][0];
        for c in 0..3 {
            let pre = (0..3).map(|r| cols[2][r] * w.at(r, c)).sum::<f64>() + dx * w.at(3, c);
            assert!((t.features.at(0, c) - gelu(pre)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TokenizerConfig { norm: true, ..TokenizerConfig::with_depth(2, 32, 4, 4, 5, &[3, 4]) };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_tokenizer(&mut store, &cfg, &mut rng);
        let pc = random_cloud(&mut rng, 32);
        let plan = TokenizerPlan::build(&pc.points, &cfg, 1).unwrap();
        let mask = TrainMask::new(&store, |_| true);
        let eval = |s: &ParamStore| {
            let m = TrainMask::none(s);
            let mut g = Graph::new(s, &m);
            let f = forward(&mut g, &cfg, &plan, &pc.colors);
            let sq = g.tape.mul(f, f);
            g.value(sq).sum()
        };
        let mut g = Graph::new(&store, &mask);
        let f = forward(&mut g, &cfg, &plan, &pc.colors);
        let sq = g.tape.mul(f, f);
        let loss = g.tape.sum(sq);
        let grads = g.param_grads(loss);
        let h = 1e-6;
        for p in store.iter() {
            let ga = grads.get(&store, &p.name).unwrap();
            for i in 0..p.value.data.len() {
                // parameters are stored f32-rounded, so perturb a raw copy of the values
                let mut plus = store.clone();
                plus.get_mut(&p.name).unwrap().data[i] += h;
                let mut minus = store.clone();
                minus.get_mut(&p.name).unwrap().data[i] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = ga.data[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{i}]: analytic {a} numeric {num}", p.name);
            }
        }
    }
}
