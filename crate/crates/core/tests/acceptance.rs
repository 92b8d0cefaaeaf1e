//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use cats_core::checkpoint::Checkpoint;
use cats_core::checks::{run_suite, CheckOptions, Suite, SuiteReport};
use cats_core::config::KeyValues;
use cats_core::data::{generate_case, SynthSpec};
use cats_core::train::{ablate, evaluate, load_samples, train, DataSource, RunConfig, Sample, Samples};
use cats_core::{Mode, Model, ModelConfig, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        detail: detail.into(),
    }
}

fn suite_outcome(report: &SuiteReport, limit_s: Option<f64>) -> Outcome {
    let lines: Vec<String> = report
        .results
        .iter()
        .map(|r| format!("{} [{}]", r.name, r.detail))
        .collect();
    let detail = format!("{}; {:.1}s", lines.join("; "), report.seconds);
    if !report.passed() {
        return fail(detail);
    }
    match limit_s {
        Some(limit) if report.seconds >= limit => fail(format!("{detail} (limit {limit}s)")),
        _ => pass(detail),
    }
}

fn geometry() -> Outcome {
    suite_outcome(&run_suite(Suite::Geometry, CheckOptions::default()), Some(30.0))
}

fn attention() -> Outcome {
    suite_outcome(&run_suite(Suite::Attention, CheckOptions::default()), None)
}

fn gradients() -> Outcome {
    suite_outcome(&run_suite(Suite::Gradients, CheckOptions::default()), Some(300.0))
}

fn kernels() -> Outcome {
    suite_outcome(&run_suite(Suite::Kernels, CheckOptions::default()), None)
}

fn metrics() -> Outcome {
    suite_outcome(&run_suite(Suite::Metrics, CheckOptions::default()), Some(60.0))
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn zero_taps() -> Outcome {
    let mut notes = Vec::new();
    for (name, cfg, shape) in [
        ("micro 8^3", ModelConfig::micro(3), [2, 1, 8, 8, 8]),
        ("default 32^3", ModelConfig::default(), [1, 1, 32, 32, 32]),
    ] {
        let mut hybrid: Model<f32> = Model::new(cfg, 21).unwrap();
        hybrid.params_mut().zero_prefix("swin.");
        hybrid.params_mut().zero_prefix("fuse.");
        let cnn = hybrid.with_mode(Mode::CnnOnly).unwrap();
        let x = random_input(&shape, 5);
        let a = hybrid.logits(&x).unwrap();
        let b = cnn.logits(&x).unwrap();
        let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return fail(format!("{name}: logits differ (max {:e})", a.max_abs_diff(&b)));
        }
        notes.push(format!("{name}: {} logits bit-equal", a.numel()));
    }
    pass(notes.join("; "))
}

fn mean_foreground_dice(model: &Model<f32>, sample: &Sample) -> f64 {
    evaluate(model, std::slice::from_ref(sample)).unwrap().mean_dice()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        cases: 1,
        ..SynthSpec::default()
    };
    let case = generate_case(&spec, 0).unwrap();
    let sample = Sample {
        id: case.id,
        image: case.image,
        label: case.label,
    };
    let data = Samples {
        train: vec![sample.clone()],
        val: Vec::new(),
        test: Vec::new(),
    };
    let cfg = RunConfig {
        data: DataSource::Synthetic(spec),
        lr: 1e-3,
        batch_size: 1,
        steps: 200,
        eval_every: 0,
        log_every: 0,
        ..RunConfig::default()
    };
    let out = match train(&cfg, &data, None, &mut |_| {}) {
        Ok(o) => o,
        Err(e) => return fail(format!("training failed: {e}")),
    };
    let dice = mean_foreground_dice(&out.model, &sample);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "one 32^3 case, default model, Adam lr 1e-3, batch 1: training Dice {dice:.4} after {} steps, {secs:.0}s",
        out.log.steps.len()
    );
    if dice >= 0.95 && out.log.steps.len() <= 200 && secs < 600.0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn generalization_config() -> RunConfig {
    let mut kv = KeyValues::parse(
        "cnn.base_channels = 8\n\
         swin.embed_dim = 12\n\
         train.steps = 2000\n\
         train.eval_every = 50\n\
         train.stop_val_dice = 0.85\n\
         train.log_every = 0\n",
    )
    .unwrap();
    kv.set("train.seed", "0");
    RunConfig::from_keys(kv).unwrap()
}

fn generalization() -> Outcome {
    let start = Instant::now();
    let cfg = generalization_config();
    let data = load_samples(&cfg).unwrap();
    let counts = (data.train.len(), data.val.len(), data.test.len());
    if counts != (11, 4, 5) {
        return fail(format!("split is {counts:?}, expected (11, 4, 5)"));
    }
    let report = match ablate(&cfg, &data, &Mode::ALL, None, &mut |_| {}) {
        Ok(r) => r,
        Err(e) => return fail(format!("ablation failed: {e}")),
    };
    print!("{}", indent(&report.render()));
    let hybrid = report.get(Mode::Hybrid).unwrap();
    let per_class: Vec<(u8, f64)> = hybrid.report.per_class.iter().map(|(c, g)| (*c, g.dice.mean)).collect();
    let classes = per_class
        .iter()
        .map(|(c, d)| format!("class {c} {d:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    let deltas = [Mode::CnnOnly, Mode::SwinOnly]
        .iter()
        .map(|&m| {
            let d = hybrid.report.mean_dice() - report.get(m).unwrap().report.mean_dice();
            format!("hybrid - {m} {d:+.3}")
        })
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!(
        "split 11/4/5; hybrid test Dice {classes} after {} steps; {deltas}; {:.0}s",
        hybrid.steps,
        start.elapsed().as_secs_f64()
    );
    if per_class.iter().all(|&(_, d)| d >= 0.80) && hybrid.steps <= 2000 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}\n")).collect()
}

fn determinism() -> Outcome {
    let mut kv = KeyValues::parse(
        "data.shape = 8\ndata.cases = 6\ncnn.levels = 4\ncnn.base_channels = 2\nswin.patch = 1\n\
         swin.embed_dim = 4\nswin.heads = 1,1,2,2\nswin.window = 2\nswin.mlp_ratio = 2\n\
         train.steps = 10\ntrain.eval_every = 5\ntrain.log_every = 0\ntrain.lr = 0.001\n",
    )
    .unwrap();
    kv.set("train.seed", "3");
    let cfg = RunConfig::from_keys(kv).unwrap();
    let data = load_samples(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &data, Some(dir.path()), &mut |_| {}).unwrap();
    let b = train(&cfg, &data, None, &mut |_| {}).unwrap();
    let (la, lb) = (a.log.final_loss().unwrap(), b.log.final_loss().unwrap());
    if la.to_bits() != lb.to_bits() {
        return fail(format!("final losses differ: {la:e} vs {lb:e}"));
    }
    let before = evaluate(&a.model, &data.test).unwrap();
    let reloaded = Checkpoint::load(&dir.path().join("last.cv2c")).unwrap().to_model().unwrap();
    let after = evaluate(&reloaded, &data.test).unwrap();
    if before.to_csv() != after.to_csv() || before.summary_table() != after.summary_table() {
        return fail("evaluation after checkpoint reload differs");
    }
    let io = run_suite(Suite::Io, CheckOptions::default());
    if !io.passed() {
        return suite_outcome(&io, None);
    }
    pass(format!(
        "rerun final loss {la:.9} bit-identical; reloaded checkpoint reproduces report exactly; {}",
        io.results.iter().map(|r| r.detail.as_str()).collect::<Vec<_>>().join("; ")
    ))
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` style arguments select criteria by name.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("geometry_oracles", geometry),
        ("attention_invariants", attention),
        ("gradient_checks", gradients),
        ("kernel_oracles", kernels),
        ("zero_tap_equivalence", zero_taps),
        ("metrics_oracles", metrics),
        ("overfit_sanity", overfit),
        ("generalization_and_ablation", generalization),
        ("determinism_and_persistence", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
