use cats_core::checkpoint::Checkpoint;
use cats_core::config::KeyValues;
use cats_core::data::{read_volume, write_dataset, Dataset, SplitRatios, Subset, SynthSpec};
use cats_core::metrics::{score_case, aggregate};
use cats_core::train::{ablate, evaluate, load_samples, train, RunConfig};
use cats_core::{LabelVolume, Mode};

const MICRO: &str = "
data.shape = 8
data.cases = 6
cnn.levels = 4
cnn.base_channels = 2
swin.patch = 1
swin.embed_dim = 4
swin.heads = 1,1,2,2
swin.window = 2
swin.mlp_ratio = 2
train.steps = 5
train.eval_every = 2
train.log_every = 0
train.lr = 0.001
";

fn micro(overrides: &str) -> RunConfig {
    let mut kv = KeyValues::parse(MICRO).unwrap();
    for line in overrides.lines() {
        let (k, v) = line.split_once('=').unwrap();
        kv.set(k.trim(), v.trim());
    }
    RunConfig::from_keys(kv).unwrap()
}

#[test]
fn micro_run_writes_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro("");
    let data = load_samples(&cfg).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (3, 1, 2));
    let out = train(&cfg, &data, Some(dir.path()), &mut |_| {}).unwrap();
    assert_eq!(out.log.steps.len(), 5);
    assert!(out.log.steps.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(out.log.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4, 5]);
    for name in ["last.cv2c", "best.cv2c", "config.txt", "log.csv", "evals.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let last = Checkpoint::load(&dir.path().join("last.cv2c")).unwrap();
    assert_eq!(last.step, 5);
    assert_eq!(last.config, cfg.model);
    let best = Checkpoint::load(&dir.path().join("best.cv2c")).unwrap();
    assert_eq!(best.step as usize, out.best.as_ref().unwrap().step);
    assert_eq!(RunConfig::from_text(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap(), cfg);
}

#[test]
fn same_seed_same_final_loss() {
    let cfg = micro("");
    let data = load_samples(&cfg).unwrap();
    let a = train(&cfg, &data, None, &mut |_| {}).unwrap();
    let b = train(&cfg, &data, None, &mut |_| {}).unwrap();
    assert_eq!(a.log.final_loss().unwrap().to_bits(), b.log.final_loss().unwrap().to_bits());
    let c = train(&micro("train.seed = 1"), &data, None, &mut |_| {}).unwrap();
    assert_ne!(a.log.final_loss(), c.log.final_loss());
}

#[test]
fn checkpoint_reload_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro("");
    let data = load_samples(&cfg).unwrap();
    let out = train(&cfg, &data, Some(dir.path()), &mut |_| {}).unwrap();
    let before = evaluate(&out.model, &data.test).unwrap();
    let model = Checkpoint::load(&dir.path().join("last.cv2c")).unwrap().to_model().unwrap();
    let after = evaluate(&model, &data.test).unwrap();
    assert_eq!(before.to_csv(), after.to_csv());
    assert_eq!(before.summary_table(), after.summary_table());
}

#[test]
fn ground_truth_scores_perfectly() {
    let cfg = micro("");
    let data = load_samples(&cfg).unwrap();
    let mut rows = Vec::new();
    for s in &data.test {
        rows.extend(score_case(&s.id, &s.label, &s.label, 3).unwrap());
    }
    let report = aggregate(rows).unwrap();
    assert_eq!(report.rows.len(), data.test.len() * 2);
    let table = report.summary_table();
    assert!(table.contains("1.000 (0.000)"), "{table}");
    assert_eq!(report.overall.asd_mm.unwrap().mean, 0.0);
    assert_eq!(report.overall.hd95_mm.unwrap().mean, 0.0);
}

#[test]
fn evaluation_records_bad_cases_and_continues() {
    let cfg = micro("");
    let mut data = load_samples(&cfg).unwrap();
    let model = train(&cfg, &data, None, &mut |_| {}).unwrap().model;
    // A label map with a different extent than its image cannot be scored.
    let s = &mut data.test[0];
    s.label = LabelVolume::filled(1, [4, 4, 4], [1.0; 3], 0);
    let report = evaluate(&model, &data.test).unwrap();
    assert_eq!(report.errors.len(), 1);
    assert_eq!(report.rows.len(), (data.test.len() - 1) * 2);
}

#[test]
fn dataset_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        shape: [8; 3],
        cases: 6,
        ..SynthSpec::default()
    };
    let ds = write_dataset(dir.path(), &spec, SplitRatios::default()).unwrap();
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.entries, ds.entries);
    assert_eq!(reopened.entries(Subset::Train).count(), 3);
    let e = &reopened.entries[0];
    let (img, lab) = reopened.load(e).unwrap();
    assert_eq!(img.dims(), [8; 3]);
    assert_eq!(read_volume::<u8>(&dir.path().join(&e.label)).unwrap(), lab);

    let cfg = micro(&format!("data.dir = {}", dir.path().display()));
    let from_dir = load_samples(&cfg).unwrap();
    let in_memory = load_samples(&micro("")).unwrap();
    let ids = |v: &[cats_core::train::Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&from_dir.train), ids(&in_memory.train));
    assert_eq!(from_dir.test[0].image, in_memory.test[0].image);
}

#[test]
fn ablation_is_reproducible_and_reports_deltas() {
    let cfg = micro("train.steps = 3");
    let data = load_samples(&cfg).unwrap();
    let a = ablate(&cfg, &data, &Mode::ALL, None, &mut |_| {}).unwrap();
    assert_eq!(a.runs.len(), 3);
    let text = a.render();
    assert!(text.contains("hybrid - cnn_only"), "{text}");
    assert!(text.contains("hybrid - swin_only"), "{text}");
    let b = ablate(&cfg, &data, &[Mode::CnnOnly], None, &mut |_| {}).unwrap();
    assert_eq!(
        a.get(Mode::CnnOnly).unwrap().report.to_csv(),
        b.get(Mode::CnnOnly).unwrap().report.to_csv()
    );
}

#[test]
fn rejects_bad_runs() {
    let cfg = micro("");
    let mut data = load_samples(&cfg).unwrap();
    data.train[0].label.data_mut()[0] = 9;
    assert_eq!(train(&cfg, &data, None, &mut |_| {}).unwrap_err().kind(), "label_range");
    let huge = micro("train.lr = 1e30\ntrain.steps = 20");
    let data = load_samples(&huge).unwrap();
    let err = train(&huge, &data, None, &mut |_| {}).unwrap_err();
    assert_eq!(err.kind(), "divergence", "{err}");
}
