//! Run configuration, training loop, evaluation and ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{render, KeyValues};
use crate::data::{generate_case, make_split, Dataset, SplitRatios, Subset, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_case, MetricsReport};
use crate::model::{Mode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

/// Environment variable that overrides `out_dir`.
pub const OUTPUT_DIR_ENV: &str = "CATS_OUTPUT_DIR";

/// Every recognized key with its default and meaning, in file order.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("model.mode", "hybrid", "hybrid, cnn_only or swin_only"),
    ("model.in_channels", "1", "input image channels"),
    ("model.num_classes", "data.classes", "output classes K, background included"),
    ("cnn.levels", "5", "pyramid levels; inputs must be divisible by 2^(levels-1)"),
    ("cnn.base_channels", "16", "channels at level 0, doubled per level"),
    ("cnn.kernel", "3", "odd convolution kernel size"),
    ("cnn.leaky_slope", "0.01", "negative slope of the activations"),
    ("swin.patch", "2", "patch size per axis (isotropic power of two)"),
    ("swin.embed_dim", "24", "token width of stage 0, doubled per stage"),
    ("swin.heads", "3,6,12,24", "attention heads per stage"),
    ("swin.window", "4", "attention window per axis"),
    ("swin.mlp_ratio", "4", "hidden width of the token MLP relative to its input"),
    ("swin.relative_bias", "true", "learned relative position bias"),
    ("data.dir", "", "existing dataset directory with manifest.csv; empty = generate in memory"),
    ("data.seed", "7", "generator and split seed"),
    ("data.shape", "32", "volume extent per axis"),
    ("data.classes", "3", "2 = single lesion, 3 = nested zones"),
    ("data.noise", "0.1", "Gaussian noise std before normalization"),
    ("data.contrast", "0.2,0.5,0.8", "mean intensity per class"),
    ("data.cases", "20", "number of generated cases"),
    ("data.spacing", "1", "voxel spacing in mm per axis"),
    ("data.split", "55,20,30", "train/val/test percent; train and val floored, test takes the rest"),
    ("train.lr", "0.0001", "constant Adam learning rate"),
    ("train.batch_size", "2", "volumes per step"),
    ("train.steps", "2000", "maximum optimizer steps"),
    ("train.eval_every", "100", "validation cadence in steps (0 = only at the end)"),
    ("train.seed", "0", "weight init and batch order seed"),
    ("train.stop_val_dice", "", "stop once validation mean Dice reaches this value; empty = never"),
    ("train.log_every", "10", "progress line cadence in steps"),
    ("out_dir", "runs/default", "output directory; overridden by CATS_OUTPUT_DIR"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub split: SplitRatios,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub stop_val_dice: Option<f64>,
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataSource::Synthetic(SynthSpec::default()),
            split: SplitRatios::default(),
            lr: 1e-4,
            batch_size: 2,
            steps: 2000,
            eval_every: 100,
            seed: 0,
            stop_val_dice: None,
            log_every: 10,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_keys(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let dir: Option<String> = kv.take("data.dir")?;
        let synth = SynthSpec::default().read_keys(&mut kv)?;
        let data = match dir.filter(|s| !s.is_empty()) {
            Some(dir) => DataSource::Directory(PathBuf::from(dir)),
            None => DataSource::Synthetic(synth.clone()),
        };
        let mut model = d.model.clone();
        if !kv.contains("model.num_classes") {
            let cin = model.in_channels;
            model = model.with_io(cin, synth.num_classes);
        }
        let model = model.read_keys(&mut kv)?;
        let split = d.split.read_keys(&mut kv)?;
        let stop: Option<String> = kv.take("train.stop_val_dice")?;
        let stop_val_dice = match stop.filter(|s| !s.is_empty()) {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("train.stop_val_dice: {e}")))?,
            ),
            None => None,
        };
        let cfg = Self {
            model,
            data,
            split,
            lr: kv.take_or("train.lr", d.lr)?,
            batch_size: kv.take_or("train.batch_size", d.batch_size)?,
            steps: kv.take_or("train.steps", d.steps)?,
            eval_every: kv.take_or("train.eval_every", d.eval_every)?,
            seed: kv.take_or("train.seed", d.seed)?,
            stop_val_dice,
            log_every: kv.take_or("train.log_every", d.log_every)?,
            out_dir: kv.take_or("out_dir", d.out_dir)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_keys(KeyValues::parse(text)?)
    }

    /// Applies the output-directory environment override, if set.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.classes {} differs from model.num_classes {}",
                    spec.num_classes, self.model.num_classes
                )));
            }
            self.model.check_input(spec.shape)?;
        }
        self.model.validate()
    }

    pub fn to_text(&self) -> String {
        let mut entries = self.model.entries();
        match &self.data {
            DataSource::Synthetic(spec) => entries.extend(spec.entries()),
            DataSource::Directory(dir) => entries.push(("data.dir".into(), dir.display().to_string())),
        }
        entries.push(self.split.entry());
        let mut push = |k: &str, v: String| entries.push((k.to_string(), v));
        push("train.lr", self.lr.to_string());
        push("train.batch_size", self.batch_size.to_string());
        push("train.steps", self.steps.to_string());
        push("train.eval_every", self.eval_every.to_string());
        push("train.seed", self.seed.to_string());
        push(
            "train.stop_val_dice",
            self.stop_val_dice.map(|v| v.to_string()).unwrap_or_default(),
        );
        push("train.log_every", self.log_every.to_string());
        push("out_dir", self.out_dir.display().to_string());
        render(&entries)
    }
}

/// One image/label pair in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Volume<f32>,
    pub label: LabelVolume,
}

#[derive(Clone, Debug, Default)]
pub struct Samples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Samples {
    pub fn get(&self, subset: Subset) -> &[Sample] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }
}

/// Generates or reads the dataset named by `cfg`.
pub fn load_samples(cfg: &RunConfig) -> Result<Samples> {
    let mut out = Samples::default();
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let split = make_split(spec.cases, cfg.split, spec.seed)?;
            for index in 0..spec.cases {
                let case = generate_case(spec, index)?;
                let sample = Sample {
                    id: case.id,
                    image: case.image,
                    label: case.label,
                };
                match split.subset_of(index).expect("split covers every case") {
                    Subset::Train => out.train.push(sample),
                    Subset::Val => out.val.push(sample),
                    Subset::Test => out.test.push(sample),
                }
            }
        }
        DataSource::Directory(dir) => {
            let ds = Dataset::open(dir)?;
            for entry in &ds.entries {
                let (image, label) = ds.load(entry)?;
                let sample = Sample {
                    id: entry.id.clone(),
                    image,
                    label,
                };
                match entry.subset {
                    Subset::Train => out.train.push(sample),
                    Subset::Val => out.val.push(sample),
                    Subset::Test => out.test.push(sample),
                }
            }
        }
    }
    Ok(out)
}

/// Adam with constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Endless stream of sample indices, reshuffled every pass.
struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Stacks images into `(N, C, D, H, W)` and labels into a flat buffer.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let dims = first.image.dims();
    let c = first.image.channels();
    let mut x = Vec::with_capacity(samples.len() * first.image.data().len());
    let mut y = Vec::with_capacity(samples.len() * first.label.data().len());
    for s in samples {
        if s.image.dims() != dims || s.label.dims() != dims || s.image.channels() != c {
            return Err(Error::Shape(format!(
                "{}: batch members must share extents {dims:?}",
                s.id
            )));
        }
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(s.label.data());
    }
    Ok((Tensor::from_vec(&[samples.len(), c, dims[0], dims[1], dims[2]], x)?, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub dice_loss: f64,
    pub cross_entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_dice: f64,
    pub class_dice: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub config: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_seconds: f64,
}

impl RunLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,loss,dice_loss,cross_entropy\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.step, s.loss, s.dice_loss, s.cross_entropy);
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("step,mean_dice,class_dice\n");
        for e in &self.evals {
            let per: Vec<String> = e.class_dice.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{},{},{}", e.step, e.mean_dice, per.join(";"));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BestRecord {
    pub step: usize,
    pub val_dice: f64,
    pub weights: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model<f32>,
    pub best: Option<BestRecord>,
    pub log: RunLog,
    pub seed: u64,
}

impl TrainOutput {
    pub fn last_checkpoint(&self) -> Checkpoint {
        let step = self.log.steps.last().map_or(0, |s| s.step) as u64;
        Checkpoint::from_model(&self.model, step, self.seed)
    }

    /// Best validation checkpoint, or the last one without validation data.
    pub fn best_checkpoint(&self) -> Checkpoint {
        match &self.best {
            Some(b) => Checkpoint {
                config: self.model.config().clone(),
                step: b.step as u64,
                seed: self.seed,
                weights: b.weights.clone(),
            },
            None => self.last_checkpoint(),
        }
    }

    pub fn best_model(&self) -> Result<Model<f32>> {
        self.best_checkpoint().to_model()
    }
}

/// Runs prediction on every sample and scores the foreground classes.
/// Cases that fail are listed in the report and skipped.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    let k = model.config().num_classes;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for s in samples {
        let scored = model.predict(&s.image).and_then(|pred| score_case(&s.id, &pred, &s.label, k));
        match scored {
            Ok(r) => rows.extend(r),
            Err(e) => errors.push((s.id.clone(), e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(match errors.into_iter().next() {
            Some((id, msg)) => Error::Empty(format!("no case could be scored; {id}: {msg}")),
            None => Error::Empty("no cases to evaluate".into()),
        });
    }
    let mut report = aggregate(rows)?;
    report.errors = errors;
    Ok(report)
}

fn eval_record(step: usize, report: &MetricsReport) -> EvalRecord {
    EvalRecord {
        step,
        mean_dice: report.mean_dice(),
        class_dice: report.per_class.iter().map(|(_, g)| g.dice.mean).collect(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from the seed in `cfg`. With `out` set, the config snapshot, logs
/// and checkpoints (`last.cv2c`, `best.cv2c`) are written there.
pub fn train(
    cfg: &RunConfig,
    data: &Samples,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("no training cases".into()));
    }
    for s in data.train.iter().chain(&data.val) {
        cfg.model.check_input(s.image.dims())?;
        if let Some(&bad) = s.label.data().iter().find(|&&l| l as usize >= cfg.model.num_classes) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                classes: cfg.model.num_classes,
            });
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.txt"), &cfg.to_text())?;
    }

    let start = Instant::now();
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, model.params());
    let mut sampler = BatchSampler::new(data.train.len(), cfg.seed);
    let mut log = RunLog {
        config: cfg.to_text(),
        ..RunLog::default()
    };
    let mut best: Option<BestRecord> = None;

    for step in 1..=cfg.steps {
        let picks = sampler.next(cfg.batch_size);
        let batch: Vec<&Sample> = picks.iter().map(|&i| &data.train[i]).collect();
        let (x, y) = make_batch(&batch)?;
        let (parts, grads) = model.loss_and_grads(&x, &y)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                step,
                value: parts.total,
            });
        }
        adam.step(model.params_mut(), &grads);
        log.steps.push(StepRecord {
            step,
            loss: parts.total,
            dice_loss: parts.dice,
            cross_entropy: parts.cross_entropy,
        });
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            progress(&format!(
                "step {step:>5} loss {:.5} dice_loss {:.5} ce {:.5} ({:.1}s)",
                parts.total,
                parts.dice,
                parts.cross_entropy,
                start.elapsed().as_secs_f64()
            ));
        }

        let due = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
        if due && !data.val.is_empty() {
            let report = evaluate(&model, &data.val)?;
            let rec = eval_record(step, &report);
            progress(&format!("step {step:>5} val mean dice {:.4}", rec.mean_dice));
            let improved = best.as_ref().is_none_or(|b| rec.mean_dice > b.val_dice);
            if improved {
                best = Some(BestRecord {
                    step,
                    val_dice: rec.mean_dice,
                    weights: model.params().clone(),
                });
                if let Some(dir) = out {
                    Checkpoint::from_model(&model, step as u64, cfg.seed).save(&dir.join("best.cv2c"))?;
                }
            }
            let reached = cfg.stop_val_dice.is_some_and(|t| rec.mean_dice >= t);
            log.evals.push(rec);
            if reached {
                progress(&format!("step {step:>5} validation target reached"));
                break;
            }
        }
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    let output = TrainOutput {
        model,
        best,
        log,
        seed: cfg.seed,
    };
    if let Some(dir) = out {
        output.last_checkpoint().save(&dir.join("last.cv2c"))?;
        if output.best.is_none() {
            output.last_checkpoint().save(&dir.join("best.cv2c"))?;
        }
        write_file(&dir.join("log.csv"), &output.log.steps_csv())?;
        write_file(&dir.join("evals.csv"), &output.log.evals_csv())?;
    }
    Ok(output)
}

/// Writes `report_<name>.csv` and `summary_<name>.txt`.
pub fn write_report(dir: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(format!("report_{name}.csv")), &report.to_csv())?;
    write_file(&dir.join(format!("summary_{name}.txt")), &report.summary_table())
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: Mode,
    pub report: MetricsReport,
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn get(&self, mode: Mode) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    /// Mean test Dice per mode and the signed difference `hybrid - mode`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let classes: Vec<u8> = self
            .runs
            .first()
            .map(|r| r.report.per_class.iter().map(|(c, _)| *c).collect())
            .unwrap_or_default();
        let _ = write!(out, "{:<10} {:>6} {:>10}", "mode", "steps", "final_loss");
        for c in &classes {
            let _ = write!(out, " {:>15}", format!("dice_{c}"));
        }
        let _ = writeln!(out, " {:>15}", "dice_mean");
        for r in &self.runs {
            let _ = write!(out, "{:<10} {:>6} {:>10.5}", r.mode.as_str(), r.steps, r.final_loss);
            for (_, g) in &r.report.per_class {
                let _ = write!(out, " {:>15}", g.dice.to_string());
            }
            let _ = writeln!(out, " {:>15}", r.report.overall.dice.to_string());
        }
        if let Some(h) = self.get(Mode::Hybrid) {
            for r in self.runs.iter().filter(|r| r.mode != Mode::Hybrid) {
                let _ = write!(out, "hybrid - {:<10}", r.mode.as_str());
                for &c in &classes {
                    let d = h.report.class_dice(c).unwrap_or(f64::NAN) - r.report.class_dice(c).unwrap_or(f64::NAN);
                    let _ = write!(out, " dice_{c} {d:+.4}");
                }
                let d = h.report.mean_dice() - r.report.mean_dice();
                let _ = writeln!(
                    out,
                    " mean {d:+.4} ({})",
                    if d > 0.0 {
                        "hybrid higher"
                    } else if d < 0.0 {
                        "hybrid lower"
                    } else {
                        "equal"
                    }
                );
            }
        }
        out
    }
}

/// Trains and tests each mode with the same seeds, data and budget.
pub fn ablate(
    cfg: &RunConfig,
    data: &Samples,
    modes: &[Mode],
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut run_cfg = cfg.clone();
        run_cfg.model.mode = mode;
        let dir = out.map(|d| d.join(mode.as_str()));
        progress(&format!("training {mode}"));
        let trained = train(&run_cfg, data, dir.as_deref(), progress)?;
        let report = evaluate(&trained.best_model()?, &data.test)?;
        if let Some(d) = &dir {
            write_report(d, "test", &report)?;
        }
        runs.push(AblationRun {
            mode,
            report,
            final_loss: trained.log.final_loss().unwrap_or(f64::NAN),
            steps: trained.log.steps.len(),
        });
    }
    let report = AblationReport { runs };
    if let Some(d) = out {
        write_file(&d.join("ablation.txt"), &report.render())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_text_roundtrip() {
        let cfg = RunConfig::from_text("data.classes = 2\ntrain.steps = 5\ntrain.stop_val_dice = 0.9").unwrap();
        assert_eq!(cfg.model.num_classes, 2);
        assert_eq!(cfg.stop_val_dice, Some(0.9));
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::from_text("train.lr = 0").is_err());
        assert!(RunConfig::from_text("train.batch_size = 0").is_err());
        assert!(RunConfig::from_text("train.colour = 1").is_err());
        assert!(RunConfig::from_text("data.classes = 2\nmodel.num_classes = 3").is_err());
    }

    #[test]
    fn documented_keys_are_accepted() {
        let text: String = CONFIG_KEYS
            .iter()
            .filter(|(k, _, _)| !matches!(*k, "model.num_classes" | "data.dir" | "train.stop_val_dice"))
            .map(|(k, v, _)| format!("{k} = {v}\n"))
            .collect();
        assert_eq!(RunConfig::from_text(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn sampler_covers_each_pass() {
        let mut s = BatchSampler::new(5, 3);
        let mut first: Vec<usize> = s.next(5);
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next(7).len(), 7);
    }
}
