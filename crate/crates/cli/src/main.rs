use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use md5::{Digest, Md5};

use metaplast::checkpoint::Checkpoint;
use metaplast::data::{load_split, Split};
use metaplast::device::read_dump;
use metaplast::harness::{
    ops_histogram, percent_at_most, run_repeats, run_sweep, Datasets, ExperimentConfig, GridSource, WeightMode,
    DEFAULT_BUCKET_WIDTH,
};
use metaplast::net::WeightSource;
use metaplast::xbar::CrossbarArray;

#[derive(Parser)]
#[command(name = "metaplast", version, about = "Metaplastic quantized training on simulated memristor crossbars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download MNIST and Fashion-MNIST and verify their checksums
    FetchData {
        #[arg(long, default_value = "data")]
        dest: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::All)]
        dataset: Which,
        /// Download again even when a verified copy exists
        #[arg(long)]
        force: bool,
    },
    /// Sequential multi-task training run
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// One run per m* value, aggregated into sweep.csv
    Sweep {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Histogram of programming ops per device from one or more dumps
    HistOps {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH)]
        width: u32,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test accuracy of a checkpoint, optionally through a device dump
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config naming the tasks and device model
        #[command(flatten)]
        exp: ExpArgs,
        /// Evaluate through the conductances in this dump
        #[arg(long)]
        devices: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Mnist,
    Fashion,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct ExpArgs {
    /// TOML experiment config
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Dataset root for presets (expects mnist/ and fashion/ inside)
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m_star: Option<f64>,
    /// Switches to crossbar mode on the device grid
    #[arg(long)]
    crossbar: bool,
    /// Print the resolved config and exit
    #[arg(long)]
    print_config: bool,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(Preset::Full)) => ExperimentConfig::full(&self.data),
            (None, _) => ExperimentConfig::desk(&self.data),
        };
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.m_star {
            c.train.m_star = m;
        }
        if self.crossbar {
            c.train.weight_source = WeightMode::Crossbar;
            c.grid = GridSource::Device;
        }
        c.validate()?;
        Ok(c)
    }
}

struct Remote {
    dir: &'static str,
    base: &'static str,
    files: [(&'static str, &'static str); 4],
}

const MNIST: Remote = Remote {
    dir: "mnist",
    base: "https://ossci-datasets.s3.amazonaws.com/mnist/",
    files: [
        ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
        ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
        ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
        ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
    ],
};

const FASHION: Remote = Remote {
    dir: "fashion",
    base: "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    files: [
        ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
        ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
        ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
        ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
    ],
};

fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fetch(remote: &Remote, dest: &Path, force: bool) -> Result<()> {
    let dir = dest.join(remote.dir);
    fs::create_dir_all(&dir)?;
    for (name, sum) in remote.files {
        let path = dir.join(name);
        if !force {
            if let Ok(existing) = fs::read(&path) {
                if md5_hex(&existing) == sum {
                    log::info!("{} already present", path.display());
                    continue;
                }
            }
        }
        let url = format!("{}{name}", remote.base);
        log::info!("downloading {url}");
        let mut body = Vec::new();
        ureq::get(&url)
            .call()
            .with_context(|| format!("GET {url}"))?
            .into_reader()
            .read_to_end(&mut body)?;
        let got = md5_hex(&body);
        if got != sum {
            bail!("checksum mismatch for {url}: expected {sum}, got {got}");
        }
        let tmp = path.with_extension("part");
        fs::write(&tmp, &body)?;
        fs::rename(&tmp, &path)?;
        println!("{}  {}", sum, path.display());
    }
    Ok(())
}

fn print_summary(names: &[String], s: &metaplast::harness::RepeatSummary) {
    for (i, n) in names.iter().enumerate() {
        println!(
            "{n}: final {:.2} ± {:.2}  max {:.2} ± {:.2}",
            s.final_acc[i].mean, s.final_acc[i].std, s.max_acc[i].mean, s.max_acc[i].std
        );
    }
    println!("programming ops: {:.0} ± {:.0}", s.cum_ops.mean, s.cum_ops.std);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FetchData { dest, dataset, force } => {
            let remotes: &[&Remote] = match dataset {
                Which::Mnist => &[&MNIST],
                Which::Fashion => &[&FASHION],
                Which::All => &[&MNIST, &FASHION],
            };
            for r in remotes {
                fetch(r, &dest, force)?;
            }
        }
        Command::Train { exp, repeats } => {
            let config = exp.resolve()?;
            if exp.print_config {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let data = Datasets::load(&config)?;
            let summary = run_repeats(&config, &data, repeats)?;
            let names: Vec<String> = config.tasks.iter().map(|t| t.name.clone()).collect();
            print_summary(&names, &summary);
            println!("outputs in {}", config.output_dir.display());
        }
        Command::Sweep { exp, values, repeats } => {
            let config = exp.resolve()?;
            if exp.print_config {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let data = Datasets::load(&config)?;
            let rows = run_sweep(&config, &data, &values, repeats)?;
            let names: Vec<String> = config.tasks.iter().map(|t| t.name.clone()).collect();
            for r in &rows {
                println!("m* = {}", r.m_star);
                print_summary(&names, &r.summary);
            }
            println!("sweep table in {}", config.output_dir.join(metaplast::harness::SWEEP_FILE).display());
        }
        Command::HistOps { dumps, width, out } => {
            let mut ops = Vec::new();
            for path in &dumps {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let records = read_dump(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
                ops.extend(records.iter().map(|r| r.ops));
            }
            let buckets = ops_histogram(&ops, width)?;
            let mut csv = String::from("ops_lo,ops_hi,devices,percent_devices\n");
            for b in &buckets {
                csv.push_str(&format!("{},{},{},{:.4}\n", b.lo, b.hi, b.count, b.percent));
            }
            match out {
                Some(p) => fs::write(&p, csv)?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
            eprintln!(
                "{} devices, {:.2}% with <= 25 ops, {:.2}% with > 50 ops",
                ops.len(),
                percent_at_most(&ops, 25),
                100.0 - percent_at_most(&ops, 50)
            );
        }
        Command::Eval { checkpoint, exp, devices } => {
            let config = exp.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut net = ckpt.network;
            let xbar = match &devices {
                Some(path) => {
                    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    let records = read_dump(BufReader::new(f))?;
                    let shapes: Vec<_> = net.layers.iter().map(|l| l.w_quant.dim()).collect();
                    let d = &config.device;
                    Some(CrossbarArray::from_dump(&records, &shapes, d.levels.clone(), d.target_max, d.endurance)?)
                }
                None => None,
            };
            let source = match &xbar {
                Some(x) => WeightSource::Crossbar(x),
                None => WeightSource::Exact,
            };
            println!("checkpoint epoch {}", ckpt.epoch);
            if !ckpt.task_bn.is_empty() && ckpt.task_bn.len() != config.tasks.len() {
                bail!("checkpoint holds batch-norm sets for {} tasks, config names {}", ckpt.task_bn.len(), config.tasks.len());
            }
            for (k, t) in config.tasks.iter().enumerate() {
                if let Some(Some(state)) = ckpt.task_bn.get(k) {
                    net.set_bn_state(state)?;
                }
                let test = load_split(&t.dir, Split::Test, &t.name)?;
                let acc = net.accuracy(&test, source, 1000)?;
                println!("{}: {acc:.2}%", t.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<metaplast::Error>(), Some(metaplast::Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
