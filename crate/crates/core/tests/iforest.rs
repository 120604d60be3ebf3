use diffad_core::iforest::*;
use diffad_core::rng::rng_from_seed;
use diffad_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// `c(n)` for n = 256 from an independent 30-digit mpmath evaluation of
/// 2 (ln(n - 1) + gamma) - 2 (n - 1) / n.
const C_256_MPMATH: f64 = 10.244_770_920_119_918;

fn independent_c(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * (((n - 1) as f64).ln() + 0.577_215_664_901_532_9) - 2.0 * (n - 1) as f64 / n as f64
    }
}

fn cluster(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn cfg(n_estimators: usize, subsample: usize, seed: u64) -> ForestConfig {
    ForestConfig {
        n_estimators,
        subsample,
        contamination: 0.05,
        seed,
    }
}

#[test]
fn normalizer_matches_high_precision_oracle() {
    assert_eq!(c_factor(1), 0.0);
    assert!((c_factor(2) - 0.1544).abs() < 1e-4);
    assert!((c_factor(256) - C_256_MPMATH).abs() < 1e-6);
    for n in 2..2000 {
        assert!(c_factor(n + 1) > c_factor(n));
    }
}

/// Four points, one hand-built tree:
/// x0 < 3 ? (x1 < 0.5 ? (x0 < 0.5 ? {(0,0)} : {(1,0)}) : {(0,1)}) : {(5,5)}
#[test]
fn hand_built_tree_scores() {
    let nodes = vec![
        Node::Split {
            dim: 0,
            value: 3.0,
            right: 6,
        },
        Node::Split {
            dim: 1,
            value: 0.5,
            right: 5,
        },
        Node::Split {
            dim: 0,
            value: 0.5,
            right: 4,
        },
        Node::Leaf { size: 1 },
        Node::Leaf { size: 1 },
        Node::Leaf { size: 1 },
        Node::Leaf { size: 1 },
    ];
    let tree = IsolationTree::from_nodes(nodes).unwrap();
    assert_eq!(tree.height(), 3);
    let model = IsolationForestModel {
        trees: vec![tree],
        dims: 2,
        n_estimators: 1,
        subsample_size: 4,
        contamination: 0.0,
        score_threshold: 1.0,
        seed: 0,
        training_scores: vec![],
    };
    let c4 = 2.0 * (3f64.ln() + 0.577_215_664_901_532_9) - 1.5;
    for (x, depth) in [
        ([0.0, 0.0], 3.0),
        ([1.0, 0.0], 3.0),
        ([0.0, 1.0], 2.0),
        ([5.0, 5.0], 1.0),
    ] {
        let want = 2f64.powf(-depth / c4);
        assert!((model.score(&x).unwrap() - want).abs() < 1e-15, "{x:?}");
    }
    assert!(model.score(&[5.0, 5.0]).unwrap() > model.score(&[0.0, 0.0]).unwrap());
}

#[test]
fn average_depth_scores_one_half() {
    let model = IsolationForestModel {
        trees: vec![IsolationTree::from_nodes(vec![Node::Leaf { size: 64 }]).unwrap()],
        dims: 1,
        n_estimators: 1,
        subsample_size: 64,
        contamination: 0.0,
        score_threshold: 1.0,
        seed: 0,
        training_scores: vec![],
    };
    assert_eq!(model.score(&[0.0]).unwrap(), 0.5);
}

#[test]
fn malformed_trees_are_rejected() {
    let bad = vec![
        Node::Split {
            dim: 0,
            value: 1.0,
            right: 3,
        },
        Node::Leaf { size: 1 },
        Node::Leaf { size: 1 },
    ];
    assert!(matches!(IsolationTree::from_nodes(bad), Err(Error::Config(_))));
    let trailing = vec![Node::Leaf { size: 1 }, Node::Leaf { size: 1 }];
    assert!(IsolationTree::from_nodes(trailing).is_err());
}

/// Walks the tree with the set of training points reaching each node,
/// checking leaf sizes and split ranges and returning each point's depth
/// and leaf size.
fn enumerate(
    nodes: &[Node],
    i: usize,
    pts: &[[f64; 2]],
    members: Vec<usize>,
    depth: usize,
    out: &mut Vec<(usize, usize, usize)>,
) -> usize {
    match nodes[i] {
        Node::Leaf { size } => {
            assert_eq!(size, members.len());
            out.extend(members.iter().map(|&m| (m, depth, size)));
            i + 1
        }
        Node::Split { dim, value, right } => {
            let lo = members.iter().map(|&m| pts[m][dim]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|&m| pts[m][dim]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo < value && value < hi, "split {value} outside ({lo}, {hi})");
            let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&m| pts[m][dim] < value);
            let end = enumerate(nodes, i + 1, pts, l, depth + 1, out);
            assert_eq!(end, right);
            enumerate(nodes, right, pts, r, depth + 1, out)
        }
    }
}

#[test]
fn single_tree_scores_match_brute_force_enumeration() {
    for seed in 0..200u64 {
        let n = 2 + (seed % 7) as usize;
        let pts = cluster(n, seed + 1000);
        let model = fit(&pts, &cfg(1, n, seed)).unwrap();
        let tree = &model.trees[0];
        let limit = (n as f64).log2().ceil() as usize;
        assert!(tree.height() <= limit);
        let mut reached = Vec::new();
        enumerate(tree.nodes(), 0, &pts, (0..n).collect(), 0, &mut reached);
        assert_eq!(reached.len(), n);
        for (m, depth, size) in reached {
            let want = 2f64.powf(-(depth as f64 + independent_c(size)) / independent_c(n));
            assert!(
                (model.training_scores[m] - want).abs() <= 1e-15,
                "seed {seed} point {m}"
            );
        }
    }
}

#[test]
fn planted_outliers_rank_highest() {
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut pts = cluster(100, seed);
        let mut rng = rng_from_seed(seed ^ 0xfeed);
        for _ in 0..5 {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(8.0..12.0);
            pts.push([r * angle.cos(), r * angle.sin()]);
        }
        let model = fit(
            &pts,
            &ForestConfig {
                seed,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| model.training_scores[b].total_cmp(&model.training_scores[a]));
        if order[..5].iter().all(|&i| i >= 100) {
            hits += 1;
        }
    }
    assert!(hits >= 95, "outliers ranked top-5 in only {hits}/100 seeds");
}

#[test]
fn identical_points_give_single_leaf_trees() {
    let pts = vec![[2.0, -1.0]; 50];
    let model = fit(&pts, &cfg(20, 32, 3)).unwrap();
    assert!(model.trees.iter().all(|t| t.nodes().len() == 1));
    let s0 = model.training_scores[0];
    assert!(model.training_scores.iter().all(|&s| s == s0));
    assert_eq!(
        model
            .training_scores
            .iter()
            .filter(|&&s| model.verdict_for(s).is_anomalous())
            .count(),
        0
    );
}

#[test]
fn same_seed_same_forest() {
    let pts = cluster(300, 1);
    let a = fit(&pts, &cfg(50, 128, 77)).unwrap();
    let b = fit(&pts, &cfg(50, 128, 77)).unwrap();
    let c = fit(&pts, &cfg(50, 128, 78)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.trees, c.trees);
    // Tree i depends only on seed + i.
    assert_eq!(a.trees[1], c.trees[0]);
}

#[test]
fn quota_of_training_points_is_flagged() {
    for (n, seed) in [(100, 0u64), (101, 1), (237, 2), (1000, 3)] {
        let pts = cluster(n, seed);
        let model = fit(
            &pts,
            &ForestConfig {
                seed,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let flagged = pts
            .iter()
            .filter(|p| model.predict(&p[..]).unwrap().is_anomalous())
            .count();
        assert_eq!(flagged, (0.05 * n as f64).ceil() as usize, "n = {n}");
        let none = model.with_contamination(0.0).unwrap();
        let max = model.training_scores.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(none.score_threshold, max);
        assert!(pts.iter().all(|p| !none.predict(&p[..]).unwrap().is_anomalous()));
    }
}

#[test]
fn raising_contamination_never_flags_fewer() {
    let pts = cluster(400, 9);
    let model = fit(&pts, &cfg(100, 256, 4)).unwrap();
    let mut prev = 0;
    for i in 0..=50 {
        let m = model.with_contamination(i as f64 / 100.0).unwrap();
        let flagged = model
            .training_scores
            .iter()
            .filter(|&&s| m.verdict_for(s).is_anomalous())
            .count();
        assert!(flagged >= prev);
        prev = flagged;
    }
}

#[test]
fn cluster_centre_is_normal() {
    let pts = cluster(500, 12);
    let model = fit(&pts, &cfg(100, 256, 5)).unwrap();
    assert_eq!(model.predict(&[0.0, 0.0]).unwrap(), Verdict::Normal);
    assert_eq!(model.predict(&[40.0, -40.0]).unwrap(), Verdict::Anomalous);
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn rescaling_one_axis_preserves_score_order() {
    let train = cluster(300, 21);
    let test = cluster(200, 22)
        .into_iter()
        .map(|[x, y]| [3.0 * x, 3.0 * y])
        .collect::<Vec<_>>();
    let rescale = |p: &[f64; 2]| [1000.0 * p[0] + 7.0, p[1]];
    let train2: Vec<[f64; 2]> = train.iter().map(rescale).collect();
    let test2: Vec<[f64; 2]> = test.iter().map(rescale).collect();
    for seed in 0..10 {
        let a = fit(&train, &cfg(100, 256, seed)).unwrap();
        let b = fit(&train2, &cfg(100, 256, seed)).unwrap();
        let sa: Vec<f64> = test.iter().map(|p| a.score(p).unwrap()).collect();
        let sb: Vec<f64> = test2.iter().map(|p| b.score(p).unwrap()).collect();
        let rho = spearman(&sa, &sb);
        assert!(rho >= 0.95, "seed {seed}: rank correlation {rho}");
    }
}

#[test]
fn invalid_inputs() {
    assert!(matches!(
        fit(&[[1.0, 2.0]], &ForestConfig::default()),
        Err(Error::Config(_))
    ));
    let empty: Vec<[f64; 2]> = vec![];
    assert!(matches!(fit(&empty, &ForestConfig::default()), Err(Error::Config(_))));
    let pts = cluster(10, 0);
    let bad = ForestConfig {
        contamination: 0.6,
        ..ForestConfig::default()
    };
    assert!(matches!(fit(&pts, &bad), Err(Error::Config(_))));
    let model = fit(&pts, &ForestConfig::default()).unwrap();
    assert_eq!(model.subsample_size, 10);
    assert!(matches!(model.score(&[1.0]), Err(Error::Contract(_))));
    let unfitted = IsolationForestModel { trees: vec![], ..model };
    assert!(matches!(unfitted.score(&[0.0, 0.0]), Err(Error::State(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_lie_in_unit_interval(seed in 0u64..10_000, n in 2usize..300, qx in -50.0f64..50.0, qy in -50.0f64..50.0) {
        let pts = cluster(n, seed);
        let model = fit(&pts, &cfg(10, 64, seed)).unwrap();
        let s = model.score(&[qx, qy]).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
        for t in &model.trees {
            prop_assert!(t.height() <= (model.subsample_size as f64).log2().ceil() as usize);
        }
    }
}
