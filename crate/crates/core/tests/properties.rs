use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sepbart::dataset::Dataset;
use sepbart::diagnostics::{positivity_report, trimmed_ate, PositivityOptions};
use sepbart::estimands::{ate_draws, heterogeneity_surface, DrawSet, ExposureContrast, Smoother, VimOptions};
use sepbart::model::{fit, FitConfig, PosteriorDraw};
use sepbart::sim::{GroundTruth, Interaction};
use sepbart::softbart::{Forest, ForestCache, ForestPrior, Inputs};
use sepbart::stats::Matrix;
use sepbart::trees::{propose_move, Node, SoftRouting, SplitProbs, Tree, TreePrior};
use sepbart::tsbart::{InteractionPrior, InteractionForest};

fn random_node(rng: &mut ChaCha8Rng, depth: usize, max_depth: usize, dim: usize) -> Node {
    if depth < max_depth && rng.gen::<f64>() < 0.7 {
        Node::Split {
            var: rng.gen_range(0..dim),
            cut: rng.gen(),
            left: Box::new(random_node(rng, depth + 1, max_depth, dim)),
            right: Box::new(random_node(rng, depth + 1, max_depth, dim)),
        }
    } else {
        Node::Leaf {
            mu: rng.sample(StandardNormal),
        }
    }
}

/// Swaps every pair of children and reflects the cut, so the leaf order
/// is reversed while the function of `1 - v` is unchanged.
fn mirror(node: &Node) -> Node {
    match node {
        Node::Leaf { mu } => Node::Leaf { mu: *mu },
        Node::Split { var, cut, left, right } => Node::Split {
            var: *var,
            cut: 1.0 - cut,
            left: Box::new(mirror(right)),
            right: Box::new(mirror(left)),
        },
    }
}

fn cuts(node: &Node, out: &mut Vec<(usize, f64)>) {
    if let Node::Split { var, cut, left, right } = node {
        out.push((*var, *cut));
        cuts(left, out);
        cuts(right, out);
    }
}

fn hard(node: &Node, v: &[f64]) -> f64 {
    match node {
        Node::Leaf { mu } => *mu,
        Node::Split { var, cut, left, right } => {
            if v[*var] < *cut {
                hard(left, v)
            } else {
                hard(right, v)
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leaf_weights_form_a_distribution(seed in any::<u64>(), bw in 1e-4f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = Tree { root: random_node(&mut rng, 0, 6, 3) };
        let routing = SoftRouting::new(bw);
        for _ in 0..20 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let w = tree.leaf_weights(&v, routing);
            prop_assert_eq!(w.len(), tree.n_leaves());
            prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let dot: f64 = w.iter().zip(tree.leaf_values()).map(|(a, b)| a * b).sum();
            prop_assert!((dot - tree.predict(&v, routing)).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_ignores_leaf_order(seed in any::<u64>(), bw in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = Tree { root: random_node(&mut rng, 0, 5, 4) };
        let mirrored = Tree { root: mirror(&tree.root) };
        let mut rev = tree.leaf_values();
        rev.reverse();
        prop_assert_eq!(mirrored.leaf_values(), rev);
        let routing = SoftRouting::new(bw);
        for _ in 0..20 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
            let r: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
            prop_assert!((tree.predict(&v, routing) - mirrored.predict(&r, routing)).abs() < 1e-12);
        }
    }

    #[test]
    fn moves_respect_depth_bound(seed in any::<u64>(), max_depth in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = TreePrior { max_depth, ..TreePrior::default() };
        let s = SplitProbs::uniform(3);
        let mut tree = Tree::leaf(0.0);
        for _ in 0..200 {
            let p = propose_move(&tree, &s, &prior, &mut rng);
            prop_assert!(p.tree.is_valid(3, max_depth));
            if rng.gen::<f64>() < 0.7 {
                tree = p.tree;
            }
        }
    }

    #[test]
    fn hard_limit_away_from_cuts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = Tree { root: random_node(&mut rng, 0, 6, 3) };
        let mut cs = Vec::new();
        cuts(&tree.root, &mut cs);
        let routing = SoftRouting::new(1e-9);
        for _ in 0..200 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            if cs.iter().any(|(j, c)| (v[*j] - c).abs() < 1e-6) {
                continue;
            }
            prop_assert!((tree.predict(&v, routing) - hard(&tree.root, &v)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tau_vanishes_at_reference(
        x in prop::collection::vec(-3.0f64..3.0, 5),
        w0 in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        for interaction in Interaction::ALL {
            let t = GroundTruth { interaction };
            prop_assert_eq!(t.tau(&x, &w0, &w0), 0.0);
            let direct = t.mu(&x, &w0) - t.mu(&x, &w0);
            prop_assert_eq!(direct, 0.0);
        }
    }

    #[test]
    fn interaction_prediction_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = InteractionForest::new(2, InteractionPrior::with_trees(5, 0.2), &mut rng);
        for t in h.forest.trees.iter_mut() {
            t.root = random_node(&mut rng, 0, 3, 2);
        }
        let max_leaf = h
            .forest
            .trees
            .iter()
            .flat_map(|t| t.leaf_values())
            .fold(0.0f64, |a, b| a.max(b.abs()));
        let bound = 2f64.sqrt() * 5.0 * max_leaf;
        for _ in 0..50 {
            let u: f64 = rng.gen();
            let w: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            prop_assert!(h.predict(u, &w).abs() <= bound + 1e-12);
        }
    }

    /// With a full factorial design the covariates are exactly uncorrelated
    /// in-sample, so importances of an additive interaction sum to one.
    #[test]
    fn additive_importance_sums_to_one(
        coefs in prop::collection::vec(-2.0f64..2.0, 9),
        d in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let levels = [0.1, 0.25, 0.4, 0.6, 0.75, 0.9];
        let mut rows = Vec::new();
        for a in levels {
            for b in levels {
                for c in levels {
                    rows.push(vec![a, b, c]);
                }
            }
        }
        let n = rows.len();
        let x = Matrix::from_rows(&rows);
        let w = Matrix::from_rows(&(0..n).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect::<Vec<_>>());
        let a = |j: usize, v: f64| coefs[3 * j] * v + coefs[3 * j + 1] * v * v + coefs[3 * j + 2] * v.powi(3);
        let tau = |x: &[f64], w: &[f64]| (d[0] * w[0] + d[1] * w[1] + 0.5) * (a(0, x[0]) + a(1, x[1]) + a(2, x[2]));
        let opts = VimOptions { smoother: Smoother::Mean, blocks: Some(1), groups: None, seed: 0 };
        let h = heterogeneity_surface(&tau, &x, &w, &opts).unwrap();
        if let Some(psi) = h.psi() {
            prop_assert!((psi.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{:?}", psi);
            for (pu, p) in h.phi_unit.iter().zip(&psi) {
                prop_assert!(*pu >= -1e-10 && *pu <= h.phi + 1e-10);
                prop_assert!((-1e-10..=1.0 + 1e-10).contains(p));
            }
        }
    }

    #[test]
    fn trimmed_set_is_a_median_split(seed in any::<u64>(), n in 40usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let w: Vec<Vec<f64>> = x.iter().map(|r| {
            let e: f64 = rng.sample(StandardNormal);
            let f: f64 = rng.sample(StandardNormal);
            vec![0.5 * r[0] + e, f]
        }).collect();
        let ds = Dataset {
            y: x.iter().map(|r| r[0]).collect(),
            x: Matrix::from_rows(&x),
            w: Matrix::from_rows(&w),
            covariate_names: vec!["a".into(), "b".into()],
            exposure_names: vec!["e".into(), "f".into()],
        };
        let opts = PositivityOptions::default();
        let r = positivity_report(&ds, &opts).unwrap();
        prop_assert_eq!(&r, &positivity_report(&ds, &opts).unwrap());
        let score = r.min_joint();
        let cut = sepbart::stats::median(&score);
        let kept = score.iter().filter(|s| **s > cut).count();
        prop_assert!(kept == n / 2 || kept == n.div_ceil(2));
    }
}

#[test]
fn softbart_sweeps_keep_valid_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 150;
    let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen()).collect()).collect();
    let y: Vec<f64> = (0..n).map(|i| (6.0 * cols[0][i]).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut forest = Forest::new(3, ForestPrior::with_trees(10));
    let inputs = Inputs::plain(&cols);
    let mut cache = ForestCache::new(&forest, &inputs);
    for _ in 0..100 {
        forest.sweep(&mut cache, &inputs, &y, 0.05, &mut rng).unwrap();
        let s = forest.split_probs.as_slice();
        assert!(s.iter().all(|p| *p >= 0.0));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(forest.bandwidth > 0.0);
        assert!(forest.trees.iter().all(|t| t.is_valid(3, forest.prior.tree_prior.max_depth)));
    }
}

#[test]
fn trimmed_ate_equals_ate_for_constant_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 200;
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let w: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + rng.gen::<f64>(), rng.gen()]).collect();
    let y: Vec<f64> = w.iter().map(|r| 2.0 * r[0] + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let ds = Dataset {
        y,
        x: Matrix::from_rows(&x),
        w: Matrix::from_rows(&w),
        covariate_names: vec!["a".into(), "b".into()],
        exposure_names: vec!["e".into(), "f".into()],
    };
    let (norm, info) = sepbart::dataset::normalize(&ds).unwrap();
    let cfg = FitConfig {
        iterations: 60,
        burn_in: 30,
        thin: 1,
        trees_f: 5,
        trees_g: 5,
        trees_h: 3,
        ..FitConfig::default()
    };
    let mut chains = fit(&norm, &info, &cfg).unwrap();
    // without interaction leaves the effect is constant in x
    let c = &mut chains[0];
    let (xbar, wbar) = (c.xbar().to_vec(), c.wbar().to_vec());
    for d in c.draws.iter_mut() {
        let mut state = d.state.clone();
        for h in state.interactions.iter_mut() {
            for t in h.forest.trees.iter_mut() {
                let zeros = vec![0.0; t.n_leaves()];
                t.set_leaf_values(&zeros);
            }
        }
        *d = PosteriorDraw::from_state(state, d.iteration, &xbar, &wbar);
    }
    let set = DrawSet::from_chains(&chains).unwrap();
    let contrast = ExposureContrast {
        w0: vec![0.5, 0.5],
        w1: vec![1.0, 0.5],
    };
    let report = positivity_report(&ds, &PositivityOptions::default()).unwrap();
    let t = trimmed_ate(&set, &ds.x, &report, &contrast).unwrap();
    assert_eq!(t.kept, n / 2);
    let full = ate_draws(&set, &ds.x, &contrast).unwrap();
    for (a, b) in t.draws.iter().zip(&full) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}
