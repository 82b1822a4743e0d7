//! Experiment configuration and orchestration: sequential multi-task runs,
//! `m*` sweeps, repeats and programming-operation histograms.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{load_split, DatasetSplit, Split, TaskSchedule, TaskSpec};
use crate::device::{LevelSpec, DEFAULT_ENDURANCE};
use crate::error::{Error, Result};
use crate::net::{BnState, Network, WeightSource};
use crate::optim::{apply_updates, AdamState, UpdateRule};
use crate::quantgrid::{MetaParams, QuantGrid};
use crate::xbar::{derive_grid, init_hardware_weights, CrossbarArray};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HIST_FILE: &str = "ops_hist.csv";
pub const EPOCH_HIST_FILE: &str = "ops_hist_epochs.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_DUMP: &str = "devices-final.tsv";
pub const DEFAULT_BUCKET_WIDTH: u32 = 5;

const INPUT_DIM: usize = 784;
const OUTPUT_DIM: usize = 10;
const EVAL_CHUNK: usize = 1000;

// seed streams, one per consumer of randomness
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_DEVICE: u64 = 2;
const STREAM_READ: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Exact,
    Crossbar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GridSource {
    Uniform { levels: usize, lo: f64, hi: f64 },
    Explicit { values: QuantGrid },
    /// The grid induced by the device level spec.
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub output_bn: bool,
    /// Keep separate batch-norm parameters and statistics for every task.
    /// Each task is trained and evaluated with its own set; a task trained
    /// for the first time starts from the set that was active before it.
    #[serde(default)]
    pub bn_per_task: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub m_star: f64,
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// With `false` every update takes the plain branch regardless of `m*`.
    #[serde(default = "yes")]
    pub metaplastic: bool,
    pub weight_source: WeightMode,
    /// Truncate every training split to its first N samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test_samples: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    /// Rows of `[level, mean_uS, std_uS]`.
    pub levels: LevelSpec,
    #[serde(default = "default_endurance")]
    pub endurance: u32,
    #[serde(default)]
    pub read_noise: f64,
    #[serde(default = "default_target_max")]
    pub target_max: f64,
}

fn default_endurance() -> u32 {
    DEFAULT_ENDURANCE
}

fn default_target_max() -> f64 {
    1.5
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            levels: LevelSpec::default(),
            endurance: DEFAULT_ENDURANCE,
            read_noise: 0.0,
            target_max: default_target_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Save a checkpoint every N epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Device dumps at the end of every task, not only the final one.
    #[serde(default = "yes")]
    pub dump_each_task: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint_every: 0, dump_each_task: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub grid: GridSource,
    pub train: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// 784-256-256-10, 15 + 15 epochs on MNIST then Fashion-MNIST.
    pub fn desk(data_root: &Path) -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/desk"),
            model: ModelConfig { hidden: vec![256, 256], output_bn: false, bn_per_task: true },
            grid: GridSource::Uniform { levels: 17, lo: -1.5, hi: 1.5 },
            train: TrainConfig {
                eta: 5e-3,
                batch_size: 100,
                m_star: 3.0,
                pretrain_epochs: 3,
                metaplastic: true,
                weight_source: WeightMode::Exact,
                max_train_samples: None,
                max_test_samples: None,
            },
            tasks: vec![
                TaskSpec { name: "mnist".into(), dir: data_root.join("mnist"), epochs: 15, m_star: None },
                TaskSpec { name: "fmnist".into(), dir: data_root.join("fashion"), epochs: 15, m_star: None },
            ],
            device: DeviceConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// 784-512-512-10, 50 + 50 epochs, the first 10 without consolidation.
    pub fn full(data_root: &Path) -> Self {
        let mut c = Self::desk(data_root);
        c.output_dir = PathBuf::from("runs/full");
        c.model.hidden = vec![512, 512];
        c.train.pretrain_epochs = 10;
        for t in &mut c.tasks {
            t.epochs = 50;
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> TaskSchedule {
        TaskSchedule {
            tasks: self.tasks.clone(),
            pretrain_epochs: self.train.pretrain_epochs,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![INPUT_DIM];
        d.extend(&self.model.hidden);
        d.push(OUTPUT_DIM);
        d
    }

    pub fn build_grid(&self) -> Result<QuantGrid> {
        match &self.grid {
            GridSource::Uniform { levels, lo, hi } => QuantGrid::uniform(*levels, *lo, *hi),
            GridSource::Explicit { values } => Ok(values.clone()),
            GridSource::Device => Ok(derive_grid(&self.device.levels, self.device.target_max)?.grid),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.eta.is_finite() && t.eta >= 0.0) {
            return Err(Error::config(format!("eta must be finite and non-negative, got {}", t.eta)));
        }
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        MetaParams::new(t.m_star)?;
        if t.max_train_samples == Some(0) || t.max_test_samples == Some(0) {
            return Err(Error::config("sample limits must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::config(format!("duplicate task name {:?}", a.name)));
            }
            if a.name.contains([',', '\n', '"']) {
                return Err(Error::config(format!("task name {:?} is not a valid CSV field", a.name)));
            }
        }
        self.schedule().validate()?;
        if !(self.device.read_noise.is_finite() && self.device.read_noise >= 0.0) {
            return Err(Error::config("device.read_noise must be non-negative"));
        }
        if !(self.device.target_max.is_finite() && self.device.target_max > 0.0) {
            return Err(Error::config("device.target_max must be positive"));
        }
        if self.device.endurance == 0 {
            return Err(Error::config("device.endurance must be at least 1"));
        }
        let grid = self.build_grid()?;
        if t.weight_source == WeightMode::Crossbar {
            let device = derive_grid(&self.device.levels, self.device.target_max)?;
            if grid != device.grid {
                return Err(Error::config(
                    "crossbar runs need the grid to match the device grid (use grid.kind = \"device\")",
                ));
            }
        }
        Ok(())
    }
}

/// Train and test splits of every task, loaded once and shared across runs.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<DatasetSplit>,
    pub test: Vec<DatasetSplit>,
}

fn truncate(split: DatasetSplit, limit: Option<usize>) -> Result<DatasetSplit> {
    match limit {
        Some(n) if n < split.len() => {
            let idx: Vec<usize> = (0..n).collect();
            let images: Vec<u8> = idx.iter().flat_map(|&i| split.raw_image(i).iter().copied()).collect();
            let images = crate::data::IdxImages {
                count: n,
                rows: split.rows,
                cols: split.cols,
                pixels: images,
            };
            DatasetSplit::from_parts(split.name.clone(), images, split.labels()[..n].to_vec())
        }
        _ => Ok(split),
    }
}

impl Datasets {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for t in &config.tasks {
            let tr = load_split(&t.dir, Split::Train, &t.name)?;
            let te = load_split(&t.dir, Split::Test, &t.name)?;
            for s in [&tr, &te] {
                if s.input_dim() != INPUT_DIM {
                    return Err(Error::shape("task images", INPUT_DIM, s.input_dim()));
                }
            }
            train.push(truncate(tr, config.train.max_train_samples)?);
            test.push(truncate(te, config.train.max_test_samples)?);
        }
        Ok(Self { train, test })
    }

    fn check(&self, config: &ExperimentConfig) -> Result<()> {
        if self.train.len() != config.tasks.len() || self.test.len() != config.tasks.len() {
            return Err(Error::shape("datasets per task", config.tasks.len(), (self.train.len(), self.test.len())));
        }
        Ok(())
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub task: String,
    /// Test accuracy (%) on every task, in config order.
    pub accuracy: Vec<f64>,
    pub cum_ops: u64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub task_names: Vec<String>,
    pub network: Network,
    /// Present for crossbar runs.
    pub crossbar: Option<CrossbarArray>,
    /// Per-task batch-norm sets, empty unless `model.bn_per_task`.
    pub task_bn: Vec<Option<BnState>>,
}

impl RunOutcome {
    /// Accuracy on each task after the last epoch.
    pub fn final_accuracy(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.accuracy.as_slice())
    }

    /// Best accuracy on each task over all epochs.
    pub fn max_accuracy(&self) -> Vec<f64> {
        (0..self.task_names.len())
            .map(|t| self.records.iter().map(|r| r.accuracy[t]).fold(f64::NAN, f64::max))
            .collect()
    }

    /// The final network with task `t`'s batch-norm set swapped in.
    pub fn network_for_task(&self, t: usize) -> Result<Network> {
        let mut net = self.network.clone();
        if let Some(Some(state)) = self.task_bn.get(t) {
            net.set_bn_state(state)?;
        }
        Ok(net)
    }

    /// Best accuracy on task `t` over the epochs spent training task `t`.
    pub fn peak_while_training(&self, t: usize) -> Option<f64> {
        let name = self.task_names.get(t)?;
        self.records
            .iter()
            .filter(|r| &r.task == name)
            .map(|r| r.accuracy[t])
            .reduce(f64::max)
    }
}

pub fn metrics_header(task_names: &[String]) -> String {
    let mut h = String::from("epoch,task");
    for n in task_names {
        let _ = write!(h, ",acc_{n}");
    }
    h.push_str(",cum_ops");
    h
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    let mut s = format!("{},{}", r.epoch, r.task);
    for a in &r.accuracy {
        let _ = write!(s, ",{a:.2}");
    }
    let _ = write!(s, ",{}", r.cum_ops);
    s
}

struct BnBank {
    enabled: bool,
    slots: Vec<Option<BnState>>,
    active: Option<usize>,
}

impl BnBank {
    fn new(enabled: bool, tasks: usize) -> Self {
        Self { enabled, slots: vec![None; tasks], active: None }
    }

    fn activate(&mut self, net: &mut Network, task: usize) -> Result<()> {
        if !self.enabled || self.active == Some(task) {
            return Ok(());
        }
        if let Some(cur) = self.active {
            self.slots[cur] = Some(net.bn_state());
        }
        if let Some(state) = &self.slots[task] {
            net.set_bn_state(state)?;
        }
        self.active = Some(task);
        Ok(())
    }

    fn accuracy(&self, net: &mut Network, task: usize, split: &DatasetSplit, source: WeightSource<'_>) -> Result<f64> {
        match &self.slots[task] {
            Some(state) if self.enabled && self.active != Some(task) => {
                let saved = net.bn_state();
                net.set_bn_state(state)?;
                let acc = net.accuracy(split, source, EVAL_CHUNK);
                net.set_bn_state(&saved)?;
                acc
            }
            _ => net.accuracy(split, source, EVAL_CHUNK),
        }
    }

    fn snapshot(&self, net: &Network) -> Vec<Option<BnState>> {
        if !self.enabled {
            return Vec::new();
        }
        let mut slots = self.slots.clone();
        if let Some(cur) = self.active {
            slots[cur] = Some(net.bn_state());
        }
        slots
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loads the datasets named in `config` and runs it.
pub fn run_sequential(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = Datasets::load(config)?;
    run_sequential_with(config, &data)
}

/// Trains on each task in turn, evaluating every task's test split after
/// every epoch. Writes metrics, timing, config, checkpoints and, in crossbar
/// mode, device dumps and programming-op histograms into `output_dir`.
pub fn run_sequential_with(config: &ExperimentConfig, data: &Datasets) -> Result<RunOutcome> {
    config.validate()?;
    data.check(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml())?;

    let grid = config.build_grid()?;
    let mut net = Network::new(&config.dims(), &grid, config.model.output_bn)?;
    let mut init_rng = stream(config.seed, STREAM_INIT);
    let mut data_rng = stream(config.seed, STREAM_DATA);
    let mut device_rng = stream(config.seed, STREAM_DEVICE);

    let crossbar_mode = config.train.weight_source == WeightMode::Crossbar;
    let mut xbar = if crossbar_mode {
        let dev = &config.device;
        let read_seed = {
            use rand::Rng;
            stream(config.seed, STREAM_READ).gen()
        };
        let mut x = CrossbarArray::for_network(&net, dev.levels.clone(), dev.target_max, dev.endurance, dev.read_noise, read_seed)?;
        init_hardware_weights(&mut net, &mut x, &mut device_rng)?;
        Some(x)
    } else {
        net.init_software(&mut init_rng);
        None
    };

    let task_names: Vec<String> = config.tasks.iter().map(|t| t.name.clone()).collect();
    let mut metrics = create(&out.join(METRICS_FILE))?;
    writeln!(metrics, "{}", metrics_header(&task_names))?;
    let mut timing = create(&out.join(TIMING_FILE))?;
    writeln!(timing, "epoch,train_seconds,eval_seconds")?;
    let mut epoch_hist = match &xbar {
        Some(_) => {
            let mut w = create(&out.join(EPOCH_HIST_FILE))?;
            writeln!(w, "epoch,ops_lo,ops_hi,percent_devices")?;
            Some(w)
        }
        None => None,
    };

    let mut adam = AdamState::for_network(&net);
    let eta = config.train.eta;
    let plan = config.schedule().plan(config.train.m_star);
    let mut records = Vec::with_capacity(plan.len());
    let mut bank = BnBank::new(config.model.bn_per_task, config.tasks.len());

    for (i, p) in plan.iter().enumerate() {
        let rule = if config.train.metaplastic {
            UpdateRule::Metaplastic(MetaParams::new(p.m_star)?)
        } else {
            UpdateRule::Plain
        };
        bank.activate(&mut net, p.task)?;
        let t0 = Instant::now();
        let split = &data.train[p.task];
        for (x, y) in split.batches(config.train.batch_size, &mut data_rng)? {
            let source = match &xbar {
                Some(xb) => WeightSource::Crossbar(xb),
                None => WeightSource::Exact,
            };
            let tape = net.forward_train(&x, source)?;
            let grads = net.backward(Some(&tape), &y, source)?;
            net.update_running_stats(&tape);
            let update = adam.adam_step(&grads)?;
            let changed = apply_updates(&mut net, &update, rule, eta)?;
            if let Some(xb) = &mut xbar {
                if changed > 0 {
                    xb.write_network(&net, &mut device_rng)?;
                }
            }
        }
        let train_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let source = match &xbar {
            Some(xb) => WeightSource::Crossbar(xb),
            None => WeightSource::Exact,
        };
        let accuracy = data
            .test
            .iter()
            .enumerate()
            .map(|(t, s)| bank.accuracy(&mut net, t, s, source))
            .collect::<Result<Vec<_>>>()?;
        let eval_s = t1.elapsed().as_secs_f64();

        let record = MetricsRecord {
            epoch: p.epoch,
            task: task_names[p.task].clone(),
            accuracy,
            cum_ops: xbar.as_ref().map_or(0, CrossbarArray::total_ops),
            seconds: train_s + eval_s,
        };
        writeln!(metrics, "{}", metrics_row(&record))?;
        writeln!(timing, "{},{train_s:.3},{eval_s:.3}", p.epoch)?;
        metrics.flush()?;
        timing.flush()?;
        log::info!(
            "epoch {} [{}] acc {:?} ops {} ({:.1}s)",
            record.epoch,
            record.task,
            record.accuracy,
            record.cum_ops,
            record.seconds
        );
        records.push(record);

        if let (Some(xb), Some(w)) = (&xbar, &mut epoch_hist) {
            for b in ops_histogram(&xb.ops_counts(), DEFAULT_BUCKET_WIDTH)? {
                writeln!(w, "{},{},{},{:.4}", p.epoch, b.lo, b.hi, b.percent)?;
            }
        }
        let last_of_task = plan.get(i + 1).is_none_or(|n| n.task != p.task);
        if let Some(xb) = &xbar {
            if config.output.dump_each_task && last_of_task && i + 1 < plan.len() {
                let path = out.join(format!("devices-epoch{:03}.tsv", p.epoch));
                xb.write_dump(create(&path)?)?;
            }
        }
        let every = config.output.checkpoint_every;
        if every > 0 && p.epoch % every == 0 && i + 1 < plan.len() {
            checkpoint(&net, &adam, &data_rng, &bank, p.epoch)
                .save(&out.join(format!("epoch{:03}.ckpt", p.epoch)))?;
        }
    }
    metrics.flush()?;
    timing.flush()?;
    if let Some(w) = &mut epoch_hist {
        w.flush()?;
    }

    checkpoint(&net, &adam, &data_rng, &bank, plan.len()).save(&out.join(FINAL_CHECKPOINT))?;
    if let Some(xb) = &xbar {
        let mut w = create(&out.join(FINAL_DUMP))?;
        xb.write_dump(&mut w)?;
        w.flush()?;
        write_histogram(&out.join(HIST_FILE), &ops_histogram(&xb.ops_counts(), DEFAULT_BUCKET_WIDTH)?)?;
    }

    let task_bn = bank.snapshot(&net);
    Ok(RunOutcome { records, task_names, network: net, crossbar: xbar, task_bn })
}

fn checkpoint(net: &Network, adam: &AdamState, rng: &ChaCha8Rng, bank: &BnBank, epoch: usize) -> Checkpoint {
    Checkpoint {
        epoch: epoch as u64,
        network: net.clone(),
        adam: adam.clone(),
        rng: RngState::capture(rng),
        task_bn: bank.snapshot(net),
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Final and best accuracies per task, aggregated over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatSummary {
    pub final_acc: Vec<Stat>,
    pub max_acc: Vec<Stat>,
    pub cum_ops: Stat,
}

/// Runs `config` `repeats` times with seeds `seed, seed + 1, ...`, each in
/// its own `rep<i>` subdirectory.
pub fn run_repeats(config: &ExperimentConfig, data: &Datasets, repeats: usize) -> Result<RepeatSummary> {
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let mut finals = Vec::new();
    let mut maxes = Vec::new();
    let mut ops = Vec::new();
    for r in 0..repeats {
        let mut c = config.clone();
        c.seed = config.seed.wrapping_add(r as u64);
        if repeats > 1 {
            c.output_dir = config.output_dir.join(format!("rep{r}"));
        }
        let o = run_sequential_with(&c, data)?;
        let tasks = o.task_names.len();
        finals.push(o.final_accuracy().map_or(vec![f64::NAN; tasks], <[f64]>::to_vec));
        maxes.push(o.max_accuracy());
        ops.push(o.records.last().map_or(0.0, |r| r.cum_ops as f64));
    }
    let col = |rows: &[Vec<f64>], t: usize| Stat::of(&rows.iter().map(|r| r[t]).collect::<Vec<_>>());
    let tasks = config.tasks.len();
    Ok(RepeatSummary {
        final_acc: (0..tasks).map(|t| col(&finals, t)).collect(),
        max_acc: (0..tasks).map(|t| col(&maxes, t)).collect(),
        cum_ops: Stat::of(&ops),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m_star: f64,
    pub summary: RepeatSummary,
}

pub fn sweep_header(task_names: &[String]) -> String {
    let mut h = String::from("m_star,repeats");
    for kind in ["final", "max"] {
        for n in task_names {
            let _ = write!(h, ",{kind}_{n},{kind}_{n}_std");
        }
    }
    h
}

/// One run (or `repeats` runs) per `m*` value with shared seeds, each in an
/// `mstar_<value>` subdirectory; writes `sweep.csv` into `output_dir`.
pub fn run_sweep(config: &ExperimentConfig, data: &Datasets, m_values: &[f64], repeats: usize) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() {
        return Err(Error::config("sweep needs at least one m* value"));
    }
    for &m in m_values {
        MetaParams::new(m)?;
    }
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let names: Vec<String> = config.tasks.iter().map(|t| t.name.clone()).collect();
    let mut csv = create(&config.output_dir.join(SWEEP_FILE))?;
    writeln!(csv, "{}", sweep_header(&names))?;
    let mut rows = Vec::new();
    for &m in m_values {
        let mut c = config.clone();
        c.train.m_star = m;
        c.output_dir = config.output_dir.join(format!("mstar_{m}"));
        let summary = run_repeats(&c, data, repeats)?;
        let mut line = format!("{m},{repeats}");
        for stats in [&summary.final_acc, &summary.max_acc] {
            for s in stats.iter() {
                let _ = write!(line, ",{:.2},{:.2}", s.mean, s.std);
            }
        }
        writeln!(csv, "{line}")?;
        csv.flush()?;
        rows.push(SweepRow { m_star: m, summary });
    }
    Ok(rows)
}

/// Devices whose op count falls in `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBucket {
    pub lo: u32,
    pub hi: u32,
    pub count: usize,
    pub percent: f64,
}

/// Percentage of devices per programming-op bucket of `width` ops. Buckets
/// run contiguously from 0 up to the one holding the largest count.
pub fn ops_histogram(ops: &[u32], width: u32) -> Result<Vec<HistBucket>> {
    if width == 0 {
        return Err(Error::config("histogram bucket width must be at least 1"));
    }
    if ops.is_empty() {
        return Err(Error::Usage("no device op counts to histogram".into()));
    }
    let max = *ops.iter().max().expect("non-empty");
    let mut counts = vec![0usize; (max / width) as usize + 1];
    for &o in ops {
        counts[(o / width) as usize] += 1;
    }
    let n = ops.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistBucket {
            lo: b as u32 * width,
            hi: (b as u32 + 1) * width,
            count,
            percent: 100.0 * count as f64 / n,
        })
        .collect())
}

pub fn write_histogram(path: &Path, buckets: &[HistBucket]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "ops_lo,ops_hi,devices,percent_devices")?;
    for b in buckets {
        writeln!(w, "{},{},{},{:.4}", b.lo, b.hi, b.count, b.percent)?;
    }
    w.flush()?;
    Ok(())
}

/// Share of devices (in %) with at most `limit` programming ops.
pub fn percent_at_most(ops: &[u32], limit: u32) -> f64 {
    100.0 * ops.iter().filter(|&&o| o <= limit).count() as f64 / ops.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let root = Path::new("data");
        ExperimentConfig::desk(root).validate().unwrap();
        ExperimentConfig::full(root).validate().unwrap();
        assert_eq!(ExperimentConfig::full(root).dims(), vec![784, 512, 512, 10]);
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = ExperimentConfig::desk(Path::new("data"));
        c.grid = GridSource::Explicit { values: QuantGrid::uniform(5, -1.0, 1.0).unwrap() };
        c.train.max_test_samples = Some(7);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        c.grid = GridSource::Device;
        c.train.weight_source = WeightMode::Crossbar;
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ExperimentConfig::desk(Path::new("data"));
        let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
            Box::new(|c| c.train.batch_size = 0),
            Box::new(|c| c.train.eta = -1.0),
            Box::new(|c| c.train.eta = f64::NAN),
            Box::new(|c| c.train.m_star = -0.5),
            Box::new(|c| c.model.hidden = vec![0]),
            Box::new(|c| c.tasks.clear()),
            Box::new(|c| c.tasks[1].name = "mnist".into()),
            Box::new(|c| c.grid = GridSource::Uniform { levels: 1, lo: 0.0, hi: 1.0 }),
            // crossbar needs the device grid
            Box::new(|c| c.train.weight_source = WeightMode::Crossbar),
            Box::new(|c| c.device.read_noise = -1.0),
        ];
        for (i, f) in cases.iter().enumerate() {
            let mut c = base.clone();
            f(&mut c);
            assert!(c.validate().is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::desk(Path::new("data")).to_toml();
        text = text.replace("[train]", "[train]\nlearning_rate = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn histogram_buckets() {
        let ops = [1, 1, 2, 4, 5, 9, 10, 26];
        let h = ops_histogram(&ops, 5).unwrap();
        assert_eq!(h.len(), 6);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![4, 2, 1, 0, 0, 1]);
        assert_eq!((h[5].lo, h[5].hi), (25, 30));
        let total: f64 = h.iter().map(|b| b.percent).sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert!(ops_histogram(&[], 5).is_err());
        assert!(ops_histogram(&ops, 0).is_err());
        assert_eq!(percent_at_most(&ops, 5), 62.5);
    }

    #[test]
    fn all_init_ops_land_in_first_bucket() {
        let h = ops_histogram(&vec![1u32; 1000], 5).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].percent, 100.0);
    }

    #[test]
    fn stat_mean_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.290_994_448_735_805_6).abs() < 1e-12);
        assert_eq!(Stat::of(&[5.0]).std, 0.0);
    }

    #[test]
    fn metrics_formatting() {
        let names = vec!["mnist".to_string(), "fmnist".to_string()];
        assert_eq!(metrics_header(&names), "epoch,task,acc_mnist,acc_fmnist,cum_ops");
        let r = MetricsRecord {
            epoch: 3,
            task: "mnist".into(),
            accuracy: vec![97.123, 10.0],
            cum_ops: 42,
            seconds: 1.0,
        };
        assert_eq!(metrics_row(&r), "3,mnist,97.12,10.00,42");
        assert_eq!(
            sweep_header(&names),
            "m_star,repeats,final_mnist,final_mnist_std,final_fmnist,final_fmnist_std,max_mnist,max_mnist_std,max_fmnist,max_fmnist_std"
        );
    }
}
