use diffad_core::numerics::Tensor;
use diffad_core::patching::{stitch, PatchGrid, StitchAccumulator};
use diffad_core::rng::{normal_vec, rng_from_seed};
use diffad_core::Error;
use proptest::prelude::*;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::new(&[h, w], normal_vec(&mut rng_from_seed(seed), h * w)).unwrap()
}

#[test]
fn published_patch_counts() {
    let grid = PatchGrid::new(100, 100, 28, 1).unwrap();
    assert_eq!(grid.dims(), (73, 73));
    assert_eq!(grid.len(), 5_329);
    assert_eq!(81 * grid.len(), 431_649);
}

#[test]
fn strides_that_skip_pixels_are_rejected() {
    assert!(matches!(PatchGrid::new(9, 9, 1, 2), Err(Error::Config(_))));
    assert!(PatchGrid::new(9, 9, 3, 3).is_ok());
}

#[test]
fn centre_coverage_is_patch_area() {
    let grid = PatchGrid::new(100, 100, 28, 1).unwrap();
    let map = stitch(&grid, &vec![0.0; grid.len() * 784]).unwrap();
    assert_eq!(map.coverage[50 * 100 + 50], 784);
    assert_eq!(map.coverage[0], 1);
    assert!(map.coverage.iter().all(|&c| c >= 1));
}

#[test]
fn coverage_is_symmetric_under_half_turn() {
    for (size, p, stride) in [(100, 28, 1), (100, 28, 4), (20, 6, 2)] {
        let grid = PatchGrid::new(size, size, p, stride).unwrap();
        let map = stitch(&grid, &vec![0.0; grid.len() * p * p]).unwrap();
        let n = map.coverage.len();
        for i in 0..n {
            assert_eq!(map.coverage[i], map.coverage[n - 1 - i]);
        }
    }
}

#[test]
fn raw_patches_reassemble_the_image() {
    let img = random_image(100, 100, 3);
    for stride in [1, 4, 24] {
        let grid = PatchGrid::new(100, 100, 28, stride).unwrap();
        let patches = grid.extract(&img).unwrap();
        assert_eq!(stitch(&grid, patches.data()).unwrap().values, img);
    }
}

#[test]
fn batched_accumulation_matches_one_shot() {
    let img = random_image(40, 40, 8);
    let grid = PatchGrid::new(40, 40, 10, 2).unwrap();
    let maps = grid.extract(&img).unwrap().map(|v| v * v);
    let whole = stitch(&grid, maps.data()).unwrap();
    let mut acc = StitchAccumulator::new(&grid);
    let per = 100;
    for (b, chunk) in maps.data().chunks(7 * per).enumerate().rev() {
        acc.add(b * 7, chunk).unwrap();
    }
    let parts = acc.finish().unwrap();
    for (a, b) in whole.values.data().iter().zip(parts.values.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
    assert_eq!(whole.coverage, parts.coverage);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stitching_is_linear(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let grid = PatchGrid::new(16, 16, 6, 2).unwrap();
        let n = grid.len() * 36;
        let m1 = normal_vec(&mut rng_from_seed(seed), n);
        let m2 = normal_vec(&mut rng_from_seed(seed + 1), n);
        let mix: Vec<f32> = m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect();
        let lhs = stitch(&grid, &mix).unwrap();
        let s1 = stitch(&grid, &m1).unwrap();
        let s2 = stitch(&grid, &m2).unwrap();
        for i in 0..lhs.values.len() {
            let rhs = a * s1.values.data()[i] + b * s2.values.data()[i];
            prop_assert!((lhs.values.data()[i] - rhs).abs() <= 1e-5);
        }
    }

    #[test]
    fn patches_are_exact_views(h in 4usize..30, p in 1usize..8, stride in 1usize..4, seed in 0u64..100) {
        prop_assume!(stride <= p && p <= h && (h - p) % stride == 0);
        let img = random_image(h, h + stride, seed);
        let w = h + stride;
        prop_assume!((w - p) % stride == 0);
        let grid = PatchGrid::new(h, w, p, stride).unwrap();
        let patches = grid.extract(&img).unwrap();
        for (k, &(r, c)) in grid.positions().iter().enumerate() {
            for i in 0..p {
                for j in 0..p {
                    prop_assert_eq!(patches.data()[k * p * p + i * p + j], img.data()[(r + i) * w + c + j]);
                }
            }
        }
        prop_assert_eq!(stitch(&grid, patches.data()).unwrap().values, img);
    }
}
