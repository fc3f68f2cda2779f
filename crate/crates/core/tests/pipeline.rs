use mainet::config::{Profile, RunConfig};
use mainet::data::{class_counts, gen_synthetic, read_dataset, write_dataset};
use mainet::fusion::{decide, er_combine, fuse, read_evidence_csv, FusionMethod};
use mainet::model::Model;
use mainet::params::ParamStore;
use mainet::train::{evaluate, split_dataset, train, LOG_HEADER};
use mainet::Error;

fn smoke() -> RunConfig {
    RunConfig::build(Profile::Smoke, None, &["train.epochs = 2".into()]).unwrap()
}

#[test]
fn generate_train_evaluate_reload() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let samples = gen_synthetic(&cfg.synth().unwrap()).unwrap();
    let manifest = write_dataset(&data_dir, &samples, cfg.seed(), &cfg.to_toml(), "synthetic").unwrap();
    let (back, m2) = read_dataset(&data_dir).unwrap();
    assert_eq!(back, samples);
    assert_eq!(m2.class_counts, class_counts(&samples));
    assert_eq!(manifest.samples, samples.len());

    let tc = cfg.train().unwrap();
    let labels: Vec<usize> = back.iter().map(|s| s.label).collect();
    let split = split_dataset(&labels, &tc.split, tc.seed).unwrap();
    let mut model = Model::new(cfg.model().unwrap(), tc.seed).unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    let mut epochs = 0;
    let summary = train(&mut model, &back, &split, &tc, Some(&run), false, &mut |_| epochs += 1).unwrap();
    assert_eq!(epochs, 2);
    assert_eq!(summary.log.len(), 2);

    let csv = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(LOG_HEADER));
    assert_eq!(csv.lines().count(), 3);

    // the model ends on the best-validation parameters
    let (best, meta) = ParamStore::load(&run, "best").unwrap();
    assert_eq!(meta["epoch"].as_u64(), Some(summary.best_epoch as u64));
    let restored = Model { cfg: model.cfg.clone(), params: best };
    let a = evaluate(&model, &back, &split.test).unwrap();
    let b = evaluate(&restored, &back, &split.test).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.metrics.confusion.iter().flatten().sum::<u64>() as usize, split.test.len());
    assert!(a.loss.is_finite());
}

#[test]
fn evidence_file_through_every_rule() {
    let text = "sample_id,modality_id,p1,p2,p3,w,r\n\
                s1,image,0.7,0.2,0.1,0.9,0.8\n\
                s1,audio,0.5,0.3,0.2,0.6,0.7\n\
                s1,wave,0.2,0.5,0.3,0.4,0.5\n\
                s2,image,0.1,0.1,0.8,1,1\n";
    let groups = read_evidence_csv(text.as_bytes()).unwrap();
    assert_eq!(groups.len(), 2);
    for method in [FusionMethod::Er, FusionMethod::Dst, FusionMethod::Pa, FusionMethod::Mv] {
        let joint = fuse(method, &groups[0].evidences, None).unwrap();
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{method:?}");
        assert_eq!(decide(&joint), 0, "{method:?}");
        // a lone evidence passes through unchanged
        let single = fuse(method, &groups[1].evidences, None).unwrap();
        assert_eq!(decide(&single), 2);
    }
    assert_eq!(er_combine(&groups[1].evidences).unwrap(), groups[1].evidences[0].p);
    assert!(matches!(fuse(FusionMethod::Lf, &groups[0].evidences, None), Err(Error::Config(_))));
}

#[test]
fn config_layers_and_errors() {
    let base = smoke();
    let file = RunConfig::build(Profile::Smoke, Some("[train]\nepochs = 7\n"), &[]).unwrap();
    assert_eq!(file.int("train.epochs"), 7);
    let both = RunConfig::build(Profile::Smoke, Some("[train]\nepochs = 7\n"), &["train.epochs=9".into()]).unwrap();
    assert_eq!(both.int("train.epochs"), 9);
    assert_ne!(base.hash(), both.hash());
    assert_eq!(both.hash(), RunConfig::build(Profile::Smoke, Some("train.epochs = 7"), &["train.epochs=9".into()]).unwrap().hash());
    for (bad, needle) in [("train.nope=1", "train.nope"), ("train.epochs=\"many\"", "train.epochs"), ("model.fusion=\"sideways\"", "sideways")] {
        match RunConfig::build(Profile::Smoke, None, &[bad.into()]).and_then(|c| c.model()) {
            Err(Error::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
}
