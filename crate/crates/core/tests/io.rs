mod common;

use common::checks::{mutated_ply, ply_round_trip};
use proptest::prelude::*;
use psformer::io::{checkpoint_bytes, load_checkpoint, parse_checkpoint, parse_ply_bytes, read_ply, save_checkpoint, write_ply};
use psformer::train::{gen_synthetic_scene, parse_report, synthetic_split, write_report, MetricsReport, ReportRow, Trainer};
use psformer::{Model, ModelConfig, Regime};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ply_round_trip_is_bit_exact(seed in any::<u64>(), binary in any::<bool>(), labelled in any::<bool>(), with_p in any::<bool>()) {
        prop_assert_eq!(ply_round_trip(seed, binary, labelled, with_p), Ok(()));
    }

    #[test]
    fn ply_file_round_trip_is_bit_exact(seed in any::<u64>()) {
        let cloud = gen_synthetic_scene(seed, 100, Regime::Default).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&cloud, None, &path, seed % 2 == 0).unwrap();
        prop_assert_eq!(read_ply(&path).unwrap().cloud, cloud);
    }

    #[test]
    fn mutated_headers_never_panic(seed in any::<u64>()) {
        let _ = parse_ply_bytes(&mutated_ply(seed), "fuzz");
    }

    #[test]
    fn arbitrary_bytes_never_panic(body in proptest::collection::vec(any::<u8>(), 0..400), prefix in 0usize..3) {
        let head: &[u8] = [&b""[..], b"ply\n", b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n"][prefix];
        let _ = parse_ply_bytes(&[head, &body].concat(), "fuzz");
    }

    #[test]
    fn metric_report_round_trips(values in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0usize..10_000), 0..6)) {
        let rows: Vec<ReportRow> = values
            .iter()
            .enumerate()
            .map(|(i, &(mae, f, e, iou, samples))| ReportRow {
                variant: format!("v{i}"),
                metrics: MetricsReport { mae, f_measure: f, e_measure: e, iou, threshold: 0.5, samples },
            })
            .collect();
        prop_assert_eq!(parse_report(&write_report(&rows)).unwrap(), rows);
    }
}

#[test]
fn zero_size_element_with_huge_count_is_quick() {
    let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nelement empty 18446744073709551615\nend_header\n".to_vec();
    bytes.extend([0u8; 24]);
    let f = parse_ply_bytes(&bytes, "empty").unwrap();
    assert_eq!(f.cloud.len(), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::tiny();
    let scenes = synthetic_split(&cfg, 0, cfg.train_scenes).unwrap();
    let mut trainer = Trainer::new(Model::new(cfg.clone()).unwrap());
    trainer.train_epoch(&scenes).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&trainer, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_bytes(&restored), std::fs::read(&path).unwrap());
    assert_eq!(restored.model.params, trainer.model.params);
    assert_eq!(restored.optim, trainer.optim);
    let probe = gen_synthetic_scene(77, 64, Regime::Default).unwrap();
    assert_eq!(restored.model.logits(&probe).unwrap(), trainer.model.logits(&probe).unwrap());

    // the next step from the restored state is identical too
    let mut a = trainer;
    let mut b = parse_checkpoint(&std::fs::read(&path).unwrap(), "ckpt").unwrap();
    assert_eq!(a.train_epoch(&scenes).unwrap(), b.train_epoch(&scenes).unwrap());
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
}
