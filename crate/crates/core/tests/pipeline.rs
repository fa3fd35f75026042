use std::collections::BTreeMap;

use proptest::prelude::*;

use cheeger_lusin::charts::ChartAtlas;
use cheeger_lusin::cubes::{build_cubes, build_dyadic_tree, default_levels, CubeTree};
use cheeger_lusin::lipfield::{lip_field, ScalarField};
use cheeger_lusin::lusin::{prescribe_compact, LusinResult};
use cheeger_lusin::prescribe::{prescribe, TargetField};
use cheeger_lusin::space::{generate_space, load_space};
use cheeger_lusin::verify::{verify_alberti, verify_lusin, Tolerance};
use cheeger_lusin::{PointSet, Space};

fn grid(n: usize) -> Space {
    let p = BTreeMap::from([("n".to_string(), n as f64)]);
    generate_space("grid1d", &p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn windowed_lip_is_subadditive_on_dyadic_fields(
        a in prop::collection::vec(-512i32..=512, 65),
        b in prop::collection::vec(-512i32..=512, 65),
        k in 1usize..4,
    ) {
        let s = grid(65);
        let rho = k as f64 * s.resolution();
        let f = ScalarField::new("f", a.iter().map(|&v| v as f64 / 512.0).collect());
        let g = ScalarField::new("g", b.iter().map(|&v| v as f64 / 512.0).collect());
        let lf = lip_field(&s, &f, rho).unwrap();
        let lg = lip_field(&s, &g, rho).unwrap();
        let ls = lip_field(&s, &f.add(&g), rho).unwrap();
        for x in 0..s.len() {
            prop_assert!(ls.values[x] <= lf.values[x] + lg.values[x]);
        }
    }

    #[test]
    fn seeded_trees_partition_every_level(seed in 0u64..1000, n in 17usize..80) {
        let s = grid(n);
        let (k_min, k_max) = default_levels(&s, 0.5);
        let tree = build_cubes(&s, 0.5, k_min, k_max, seed).unwrap();
        for k in k_min..=k_max {
            let mut count = vec![0; s.len()];
            for q in tree.level(k) {
                for x in q.members.iter() {
                    count[x] += 1;
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn compact_prescription_respects_decay(level in -2.0f64..2.0, eps in 0.05f64..0.5, lo in 0.05f64..0.4) {
        let s = grid(129);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let omega = PointSet::new(&s, (0..s.len()).filter(|&x| s.coords(x)[0] > lo && s.coords(x)[0] < 1.0 - lo));
        let f = TargetField::from_fn(&s, &atlas, omega.clone(), |_, _| vec![level]).unwrap();
        let r = prescribe_compact(&s, &tree, &atlas, &omega, &f, eps).unwrap();
        let outside = omega.complement(&s);
        for x in 0..s.len() {
            let d = s.distance_to_set(x, &outside);
            prop_assert!(r.u.values[x].abs() <= eps * (d * d).min(1.0));
        }
    }
}

#[test]
fn documents_round_trip() {
    let s = grid(33);
    let text = serde_json::to_string(&s.to_document()).unwrap();
    let back = load_space(&text).unwrap();
    assert_eq!(back.len(), s.len());
    for x in 0..s.len() {
        for y in 0..s.len() {
            assert_eq!(back.dist(x, y), s.dist(x, y));
        }
    }
    let tree = build_cubes(&s, 0.5, 0, 5, 3).unwrap();
    let again = CubeTree::from_document(&back, &tree.to_document()).unwrap();
    assert_eq!(again.to_document().levels.len(), tree.to_document().levels.len());
    assert_eq!(again.constants, tree.constants);
}

#[test]
fn prescription_then_verification() {
    let s = grid(257);
    let tree = build_dyadic_tree(&s).unwrap();
    let atlas = ChartAtlas::split_line(&s, 0.5).unwrap();
    let omega = PointSet::all(&s);
    let f = TargetField::from_fn(&s, &atlas, omega.clone(), |x, _| {
        vec![if s.coords(x)[0] < 0.5 { -1.0 } else { 2.0 }]
    })
    .unwrap();
    let r = prescribe(&s, &tree, &atlas, &omega, &f, 0.25, 6).unwrap();
    let report = verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &Tolerance::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures());
    assert!(r.exceptional_measure() <= 0.25 * r.omega.measure());
}

#[test]
fn compact_run_verifies_as_single_stage() {
    let s = grid(257);
    let tree = build_dyadic_tree(&s).unwrap();
    let atlas = ChartAtlas::coordinates(&s).unwrap();
    let omega = PointSet::new(&s, (0..s.len()).filter(|&x| s.coords(x)[0] > 0.25 && s.coords(x)[0] < 0.75));
    let f = TargetField::from_fn(&s, &atlas, omega.clone(), |_, _| vec![1.0]).unwrap();
    let r = prescribe_compact(&s, &tree, &atlas, &omega, &f, 0.3).unwrap();
    let as_stage = LusinResult::from_compact(&s, &r);
    assert_eq!(as_stage.stages.len(), 1);
    let report = verify_lusin(&s, &atlas, &omega, &f, &as_stage, &Tolerance::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures());
}
