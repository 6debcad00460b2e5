use std::collections::BTreeSet;

use proptest::prelude::*;

use dataevolver::dsl::{
    normalize_yaw, parse_program, print_program, sample_states, ActionPrimitive, ActionProgram,
    CameraPath, SamplingMode, MAX_COMPOSE_DEPTH,
};
use dataevolver::export::{
    build_splits, directional_delta, psnr, read_manifest, write_manifest, PairManifestRow, Split,
    SplitSpec,
};
use dataevolver::outer::{
    evaluate_round, plan_expansion, Direction, EvalRecord, WeakBin, ANGLE_BINS,
};
use dataevolver::review::aggregate_views;
use dataevolver::sim::RgbImage;
use dataevolver::store::{ArtifactKind, ArtifactStore};

fn object() -> impl Strategy<Value = String> {
    "o_[a-z0-9]{0,5}"
}

fn finite() -> impl Strategy<Value = f64> {
    (-1000i32..1000).prop_map(|v| v as f64 / 8.0)
}

fn leaf() -> impl Strategy<Value = ActionPrimitive> {
    prop_oneof![
        (object(), 0u32..2880).prop_map(|(o, y)| ActionPrimitive::rotate(o, y as f64 / 8.0)),
        (object(), finite(), finite(), finite())
            .prop_map(|(object, dx, dy, dz)| ActionPrimitive::Translation { object, dx, dy, dz }),
        (object(), 1u32..400).prop_map(|(object, f)| ActionPrimitive::Scaling {
            object,
            factor: f as f64 / 100.0
        }),
        prop_oneof![
            Just(CameraPath::Named("static".into())),
            Just(CameraPath::Named("orbit".into())),
            prop::collection::vec((finite(), finite(), finite()).prop_map(|(x, y, z)| [x, y, z]), 1..4)
                .prop_map(CameraPath::Waypoints),
        ]
        .prop_map(|path| ActionPrimitive::CameraMotion { path }),
    ]
}

fn primitive() -> impl Strategy<Value = ActionPrimitive> {
    leaf().prop_recursive(MAX_COMPOSE_DEPTH as u32, 24, 4, |inner| {
        prop::collection::vec(inner, 1..4).prop_map(|children| ActionPrimitive::Composition { children })
    })
}

proptest! {
    #[test]
    fn canonical_print_round_trips(root in primitive()) {
        let program = ActionProgram::new(root);
        let text = print_program(&program);
        let parsed = parse_program(&text).unwrap();
        prop_assert_eq!(&parsed, &program);
        prop_assert_eq!(print_program(&parsed), text);
    }

    #[test]
    fn yaw_normalizes_into_range(y in -1e6f64..1e6) {
        let n = normalize_yaw(y);
        prop_assert!((0.0..360.0).contains(&n));
        prop_assert_eq!(normalize_yaw(n), n);
    }

    #[test]
    fn dense_sampling_covers_the_sweep(yaw in 1u32..359, step in 1u32..90) {
        let program = ActionProgram::new(ActionPrimitive::rotate("obj", yaw as f64));
        let states = sample_states(&program, SamplingMode::VideoDense { step_deg: step as f64 }, true).unwrap();
        prop_assert_eq!(states[0].yaw_deg, 0.0);
        prop_assert_eq!(states.last().unwrap().yaw_deg, yaw as f64);
        for w in states.windows(2) {
            let gap = w[1].yaw_deg - w[0].yaw_deg;
            prop_assert!(gap > 0.0 && gap <= step as f64 + 1e-9);
            prop_assert!(w[1].progress >= w[0].progress);
        }
        prop_assert_eq!(states.last().unwrap().clamped, yaw % step != 0);
    }

    #[test]
    fn store_put_is_content_addressed(blobs in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..64), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let mut ids = BTreeSet::new();
        for b in &blobs {
            let a = store.put(b, ArtifactKind::RgbImage).unwrap();
            prop_assert_eq!(store.put(b, ArtifactKind::RgbImage).unwrap(), a.clone());
            prop_assert_eq!(&store.get(&a).unwrap(), b);
            ids.insert(a);
        }
        let distinct: BTreeSet<&Vec<u8>> = blobs.iter().collect();
        prop_assert_eq!(ids.len(), distinct.len());
    }

    #[test]
    fn view_aggregate_lies_between_min_and_mean(views in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let mean = views.iter().sum::<f64>() / views.len() as f64;
        let min = views.iter().copied().fold(f64::INFINITY, f64::min);
        let a = aggregate_views(&views).unwrap();
        prop_assert!(a >= min - 1e-12 && a <= mean + 1e-12);
    }

    #[test]
    fn directional_delta_is_antisymmetric(b in -100.0f64..100.0, o in -100.0f64..100.0) {
        for d in [Direction::Higher, Direction::Lower] {
            prop_assert_eq!(directional_delta(d, b, o), -directional_delta(d, o, b));
        }
        prop_assert_eq!(directional_delta(Direction::Higher, b, o), -directional_delta(Direction::Lower, b, o));
    }

    #[test]
    fn psnr_is_symmetric_and_capped(data in prop::collection::vec(any::<u8>(), 48), other in prop::collection::vec(any::<u8>(), 48)) {
        let a = RgbImage { width: 4, height: 4, data };
        let b = RgbImage { width: 4, height: 4, data: other };
        prop_assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let ab = psnr(&a, &b).unwrap();
        prop_assert_eq!(ab, psnr(&b, &a).unwrap());
        prop_assert!(ab <= 99.0);
    }

    #[test]
    fn splits_partition_the_catalog(n in 10usize..80, seed in any::<u64>()) {
        let objects: Vec<String> = (0..n).map(|i| format!("obj{i:03}")).collect();
        let spec = SplitSpec { seed, n_train_objects: n / 2, n_val_objects: n / 5, n_test_objects: n / 5, target_views_per_object: 7 };
        let s = build_splits(&objects, &spec).unwrap();
        prop_assert_eq!(&s, &build_splits(&objects, &spec).unwrap());
        let all: Vec<&String> = Split::ALL.iter().flat_map(|&k| s.get(k)).collect();
        let set: BTreeSet<&String> = all.iter().copied().collect();
        prop_assert_eq!(set.len(), all.len());
        prop_assert_eq!(s.train.len(), n / 2);
        prop_assert_eq!(s.val.len(), n / 5);
        prop_assert_eq!(s.test.len(), n / 5);
    }

    #[test]
    fn manifest_files_round_trip(rows in prop::collection::vec((object(), 1usize..8), 0..12)) {
        let rows: Vec<PairManifestRow> = rows.into_iter().map(|(o, k)| PairManifestRow {
            source_image: format!("{o}/0.png"),
            target_image: format!("{o}/{}.png", k * 45),
            instruction: format!("Rotate {o} by {} degrees", k * 45),
            target_rotation: (k * 45) as u32,
            object_id: o.clone(),
            object_name: o,
            prompt_version: "v1".into(),
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.jsonl");
        write_manifest(&path, Split::Val, &rows).unwrap();
        let (split, back) = read_manifest(&path).unwrap();
        prop_assert_eq!(split, Split::Val);
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn per_angle_means_match_brute_force(recs in prop::collection::vec((0usize..8, -10.0f64..10.0), 0..60)) {
        let records: Vec<EvalRecord> = recs.iter().map(|&(b, v)| EvalRecord { angle_bin: ANGLE_BINS[b], metric: "m".into(), value: v }).collect();
        let table = evaluate_round(&records).unwrap();
        for (i, &bin) in ANGLE_BINS.iter().enumerate() {
            let vals: Vec<f64> = recs.iter().filter(|r| r.0 == i).map(|r| r.1).collect();
            match table.mean(bin, "m") {
                Some(m) => prop_assert!((m - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-9),
                None => prop_assert!(vals.is_empty()),
            }
        }
    }

    #[test]
    fn expansion_spends_exactly_the_budget(
        weak in prop::collection::vec((0usize..8, 0.0f64..5.0), 0..8),
        budget in 0u32..200,
        n_objects in 1usize..10,
    ) {
        let weak: Vec<WeakBin> = weak.into_iter().map(|(b, s)| WeakBin { bin: ANGLE_BINS[b], shortfall: s }).collect();
        let catalog: Vec<String> = (0..n_objects).map(|i| format!("o{i}")).collect();
        let plan = plan_expansion(&weak, budget, &catalog);
        let targetable = weak.iter().any(|w| w.bin != 360);
        let spent: u32 = plan.requests.iter().map(|r| r.count).sum();
        prop_assert_eq!(spent, if targetable { budget } else { 0 });
        prop_assert!(plan.requests.iter().all(|r| r.bin != 360 && weak.iter().any(|w| w.bin == r.bin)));
    }
}
