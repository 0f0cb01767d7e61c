use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::milnet::MilDims;

fn node(level: usize, row: usize, col: usize, id: usize) -> PatchNode {
    let mut n = PatchNode::new("c", level, row, col);
    n.node_id = id;
    n
}

fn map_from(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> RasterMap {
    let v = (0..w * h).map(|k| f(k % w, k / w)).collect();
    RasterMap::from_values(w, h, v).unwrap()
}

#[test]
fn rasterize_examples() {
    let grid = RasterGrid::for_extent(224, 224, 16);
    assert_eq!((grid.width, grid.height), (14, 14));
    let a = node(0, 0, 0, 0);
    let m = rasterize(&[&a], &[1.0], &grid).unwrap();
    assert!(m.values().iter().all(|&v| v == 1.0));

    let grid = RasterGrid::for_extent(448, 224, 16);
    let b = node(0, 0, 1, 1);
    let m = rasterize(&[&a, &b], &[1.0, 0.0], &grid).unwrap();
    assert_eq!(m.get(0, 0), 1.0);
    assert_eq!(m.get(13, 13), 1.0);
    assert_eq!(m.get(14, 0), 0.0);

    let grid = RasterGrid::for_extent(448, 448, 16);
    let coarse = node(1, 0, 0, 2);
    let m = rasterize(&[&a, &coarse], &[1.0, 0.0], &grid).unwrap();
    assert_eq!(m.get(3, 3), 0.5);
    assert_eq!(m.get(20, 20), 0.0);
}

#[test]
fn rasterize_rejects_outside_footprints() {
    let grid = RasterGrid::for_extent(224, 224, 16);
    let far = node(0, 0, 1, 7);
    let err = rasterize(&[&far], &[1.0], &grid).unwrap_err();
    assert!(err.to_string().contains("node 7"), "{err}");
}

#[test]
fn smoothing_constant_and_impulse() {
    let c = RasterMap::filled(9, 7, 0.37);
    let s = gaussian_smooth(&c, 2.5).unwrap();
    assert!(s.values().iter().all(|v| (v - 0.37).abs() < 1e-12));

    let imp = map_from(21, 21, |x, y| if (x, y) == (10, 10) { 1.0 } else { 0.0 });
    let s = gaussian_smooth(&imp, 1.0).unwrap();
    let norm: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
    let center = (1.0 / norm).powi(2);
    assert!((s.get(10, 10) - center).abs() < 1e-15);
    assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(gaussian_smooth(&imp, 0.0).is_err());
}

#[test]
fn smoothing_semigroup() {
    let imp = map_from(61, 61, |x, y| if (x, y) == (30, 30) { 1.0 } else { 0.0 });
    let twice = gaussian_smooth(&gaussian_smooth(&imp, 2.0).unwrap(), 2.0).unwrap();
    let once = gaussian_smooth(&imp, 2.0 * 2f64.sqrt()).unwrap();
    let diff: f64 = twice.values().iter().zip(once.values()).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = once.values().iter().map(|v| v * v).sum();
    assert!(diff.sqrt() < 0.02 * norm.sqrt());
}

#[test]
fn reflection_preserves_mass_near_edges() {
    for (x, y) in [(0, 0), (1, 4), (8, 8)] {
        let imp = map_from(9, 9, |a, b| if (a, b) == (x, y) { 2.0 } else { 0.0 });
        let s = gaussian_smooth(&imp, 1.5).unwrap();
        assert!((s.values().iter().sum::<f64>() - 2.0).abs() < 1e-9);
    }
    // Radius wider than the map still folds back inside.
    let imp = map_from(3, 2, |a, b| if (a, b) == (0, 0) { 1.0 } else { 0.0 });
    let s = gaussian_smooth(&imp, 4.0).unwrap();
    assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn multilevel_examples() {
    let cfg = FusionConfig::default();
    let z = RasterMap::zeros(6, 5);
    let one = RasterMap::filled(6, 5, 1.0);
    let f = multilevel_fuse(&[z.clone(), z.clone(), z.clone()], &cfg).unwrap();
    assert!(f.values().iter().all(|&v| v == 0.0));
    let f = multilevel_fuse(&[one.clone(), one.clone(), one.clone()], &cfg).unwrap();
    assert!(f.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let f = multilevel_fuse(&[one.clone(), z.clone(), z.clone()], &cfg).unwrap();
    assert!(f.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    let small = RasterMap::zeros(5, 5);
    assert!(matches!(
        multilevel_fuse(&[one, small], &cfg),
        Err(SaliencyError::DimMismatch { .. })
    ));
}

#[test]
fn confidence_examples() {
    assert_eq!(confidence_score(&RasterMap::filled(4, 4, 0.7)), 0.7);
    let m = map_from(10, 10, |x, y| (y * 10 + x + 1) as f64);
    assert!((confidence_score(&m) - 95.5).abs() < 1e-12);
    assert!((confidence_score(&m.scaled(3.0)) - 3.0 * 95.5).abs() < 1e-9);
    assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 50.0) - 2.5).abs() < 1e-15);
}

#[test]
fn fusion_examples() {
    let cfg = FusionConfig::default();
    let a = map_from(8, 8, |x, _| x as f64 / 7.0);
    let f = confidence_fuse(&a, &a, &a, &cfg).unwrap();
    let want = [0.2, 0.1, 1.0 / 30.0];
    for (w, e) in f.weights.iter().zip(want) {
        assert!((w - e).abs() < 1e-12);
    }
    let c = RasterMap::filled(4, 4, 0.3);
    let f = confidence_fuse(&c, &c, &c, &cfg).unwrap();
    assert!(f.map.values().iter().all(|&v| v == 0.0));
    let z = RasterMap::zeros(4, 4);
    let f = confidence_fuse(&z, &z, &z, &cfg).unwrap();
    assert!((f.weights[0] - 0.6).abs() < 1e-12 && (f.weights[2] - 0.1).abs() < 1e-12);
}

#[test]
fn variant_examples() {
    let cfg = FusionConfig::default();
    let c = RasterMap::filled(3, 3, 0.4);
    let comps = SaliencyComponents {
        combined: c.clone(),
        mil: None,
        gradient: None,
    };
    let base = graphite_variant(Variant::Base, &comps, &cfg).unwrap();
    assert!(base.map.values().iter().all(|&v| v == 0.0));
    let err = graphite_variant(Variant::V1, &comps, &cfg).unwrap_err();
    assert!(err.to_string().contains("GRAPHITE-V1") && err.to_string().contains("MIL"));

    let a = map_from(6, 6, |x, y| ((x + y) % 4) as f64 / 3.0);
    let comps = SaliencyComponents {
        combined: a.clone(),
        mil: Some(a.clone()),
        gradient: Some(a.clone()),
    };
    let v1 = graphite_variant(Variant::V1, &comps, &cfg).unwrap();
    assert!((v1.weights[0] / v1.weights[1] - 2.0).abs() < 1e-12);
    assert!((v1.weights[0] - 1.0 / 3.0).abs() < 1e-12);
    let v2 = graphite_variant(Variant::V2, &comps, &cfg).unwrap();
    assert_eq!(v2, confidence_fuse(&a, &a, &a, &cfg).unwrap());
}

#[test]
fn mil_and_gradient_maps() {
    let cfg = FusionConfig {
        sigma_mil: 0.1,
        ..FusionConfig::default()
    };
    let dims = MilDims {
        input_dim: 1,
        hidden_dim: 1,
        embed_dim: 1,
        key_dim: 1,
        patient_hidden_dim: 1,
    };
    let mut m = MilModel::zeros(dims);
    for p in ["patch_projector.0.weight", "patch_projector.1.weight", "query.weight", "key.weight", "value.weight"] {
        m.set_param(p, &[1.0]).unwrap();
    }
    let grid = RasterGrid::for_extent(448, 224, 16);
    let (a, b) = (node(0, 0, 0, 0), node(0, 0, 1, 1));
    let bag = Bag::new("c", Tensor::from_rows(&[vec![2.0], vec![0.0]]).unwrap(), 1).unwrap();
    let alpha = m.predict(&bag).unwrap().alpha;
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let map = mil_attention_map(&m, &bag, &[&a, &b], &grid, &cfg).unwrap();
    assert!((map.get(3, 3) - 1.0).abs() < 1e-7 && map.get(20, 3).abs() < 1e-12);

    let single = Bag::new("c", Tensor::from_rows(&[vec![2.0]]).unwrap(), 1).unwrap();
    let g1 = RasterGrid::for_extent(224, 224, 16);
    let map = mil_attention_map(&m, &single, &[&a], &g1, &cfg).unwrap();
    assert!(map.values().iter().all(|&v| v == 0.0));

    let dup = Bag::new("c", Tensor::from_rows(&[vec![0.5], vec![0.5]]).unwrap(), 1).unwrap();
    let g = m.embedding_gradient_norms(&dup).unwrap();
    assert_eq!(g[0], g[1]);
    let map = gradient_saliency_map(&m, &dup, &[&a, &b], &grid, &cfg).unwrap();
    assert!(map.values().iter().all(|&v| v >= 0.0));
}

#[test]
fn gradient_norms_match_finite_differences() {
    let m = MilModel::new(
        MilDims {
            input_dim: 3,
            hidden_dim: 6,
            embed_dim: 4,
            key_dim: 4,
            patient_hidden_dim: 5,
        },
        21,
    );
    let bag = Bag::new(
        "c",
        Tensor::from_rows(&[vec![0.3, -0.5, 0.9], vec![-0.2, 0.4, 0.1], vec![0.8, 0.8, -0.6]]).unwrap(),
        1,
    )
    .unwrap();
    let norms = m.embedding_gradient_norms(&bag).unwrap();
    let e = crate::milnet::project_patches(&m, &bag).unwrap();
    let yhat = |e: &Tensor| {
        let (z, _) = crate::milnet::mil_attention(&m, e).unwrap();
        crate::milnet::classify_core(&m, &z).unwrap()
    };
    let h = 1e-5;
    for i in 0..3 {
        let mut sq = 0.0;
        for j in 0..4 {
            let mut up = e.clone();
            up.data_mut()[i * 4 + j] += h;
            let mut dn = e.clone();
            dn.data_mut()[i * 4 + j] -= h;
            sq += ((yhat(&up) - yhat(&dn)) / (2.0 * h)).powi(2);
        }
        let fd = sq.sqrt();
        assert!((fd - norms[i]).abs() / fd.max(1e-6) < 1e-4, "{fd} {}", norms[i]);
    }
}

#[test]
fn csv_round_trip_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let m = map_from(5, 3, |x, y| (x * 3 + y) as f64 / 17.0);
    let p = dir.path().join("m.csv");
    write_csv(&m, &p).unwrap();
    assert_eq!(read_csv(&p).unwrap(), m);
    let png = dir.path().join("m.png");
    write_gray_png(&m.min_max(1e-8), &png).unwrap();
    let img = image::open(&png).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (5, 3));
    assert_eq!(img.get_pixel(0, 0).0[0], 0);
    assert_eq!(img.get_pixel(4, 2).0[0], 255);
    write_color_png(&m, &dir.path().join("c.png")).unwrap();
    let bg = dir.path().join("bg.png");
    image::RgbImage::from_pixel(20, 12, image::Rgb([255, 255, 255])).save(&bg).unwrap();
    let out = dir.path().join("o.png");
    write_overlay(&m, &bg, &out, 0.5).unwrap();
    assert_eq!(image::open(&out).unwrap().to_rgb8().dimensions(), (20, 12));
}

fn arb_map() -> impl Strategy<Value = RasterMap> {
    (2usize..7, 2usize..7).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0.0f64..1.0, w * h)
            .prop_map(move |v| RasterMap::from_values(w, h, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_is_linear(a in arb_map(), k in 0.0f64..5.0) {
        let cfg = FusionConfig::default();
        let b = a.scaled(0.5);
        let c = RasterMap::filled(a.width(), a.height(), 0.2);
        let f = multilevel_fuse(&[a.clone(), b.clone(), c.clone()], &cfg).unwrap();
        let fk = multilevel_fuse(&[a.scaled(k), b.scaled(k), c.scaled(k)], &cfg).unwrap();
        for (x, y) in f.values().iter().zip(fk.values()) {
            prop_assert!((k * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_maps_stay_in_unit_interval(a in arb_map(), s in 0.0f64..1.0) {
        let cfg = FusionConfig::default();
        let b = map_from(a.width(), a.height(), |x, y| ((x * 7 + y * 3) % 5) as f64 * s);
        let g = a.scaled(s);
        let f = confidence_fuse(&a, &b, &g, &cfg).unwrap();
        prop_assert!(f.map.values().iter().all(|&v| (0.0..1.0).contains(&v)));
        for (w, base) in f.weights.iter().zip(cfg.base) {
            prop_assert!(*w <= base + 1e-15);
        }
    }

    #[test]
    fn fusion_weights_are_scale_free(a in arb_map(), k in 0.1f64..10.0) {
        let cfg = FusionConfig::default();
        let b = a.scaled(0.3);
        let g = map_from(a.width(), a.height(), |x, _| x as f64);
        let f = confidence_fuse(&a, &b, &g, &cfg).unwrap();
        let fk = confidence_fuse(&a.scaled(k), &b.scaled(k), &g.scaled(k), &cfg).unwrap();
        for (x, y) in f.weights.iter().zip(&fk.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // Only the fixed eps in the min-max denominator breaks exact
        // invariance; the change is bounded by eps * |1 - 1/k| / range.
        let range = {
            let mut raw = RasterMap::zeros(a.width(), a.height());
            for (m, w) in [&a, &b, &g].iter().zip(&f.weights) {
                raw.add_scaled(m, *w);
            }
            raw.max() - raw.min()
        };
        prop_assume!(range > 1e-3);
        let bound = cfg.eps_norm * (1.0 - 1.0 / k).abs() / range + 1e-13;
        for (x, y) in f.map.values().iter().zip(fk.map.values()) {
            prop_assert!((x - y).abs() <= bound);
        }
    }
}
