use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrvq::bench::{self, Split as BenchSplit, Table};
use hrvq::io::{
    load_cifar10, load_mnist_dir, load_netpbm_dir, write_image_grid, Checkpoint, ConfigFile, DataError,
    Dataset, DatasetSpec, SectionTag, Split,
};
use hrvq::model::{evaluate, HrvqModel, MetricsLog, ModelConfig, TrainConfig, Trainer};
use hrvq::prior::{self, PriorConfig, PriorData, PriorModel, SampleRequest};
use hrvq::tensor::Tensor;
use hrvq::{exec, seeded_rng, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hrvq", version, about = "Hierarchical residual VQ-VAE: training, sampling and benchmarks")]
struct Cli {
    /// `key = value` configuration file; command-line flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 disables parallel execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an autoencoder, checkpointing after every epoch.
    Train(TrainArgs),
    /// Fit the code prior on a trained model's index maps.
    TrainPrior(TrainPriorArgs),
    /// Reconstruct images from a chosen layer onwards.
    Reconstruct(ReconstructArgs),
    /// Draw images through the prior and decoder.
    Sample(SampleArgs),
    /// Run an experiment and write its table as CSV.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Held-out MSE and codebook usage of a checkpoint.
    Stats(StatsArgs),
    /// List the sections of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// MNIST directory, CIFAR-10 batch file or directory, or a NetPBM directory.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Use the test split instead of the training split.
    #[arg(long)]
    test: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written after every epoch.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Per-epoch metrics CSV [default: OUT with a .csv extension].
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Single flat codebook with this many codewords.
    #[arg(long, value_name = "M", conflicts_with_all = ["layers", "codebook_size"])]
    flat: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainPriorArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained autoencoder checkpoint.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Output checkpoint holding the autoencoder and the prior.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Condition on dataset labels.
    #[arg(long)]
    class_conditional: bool,
    #[arg(long)]
    train_limit: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// First layer whose codewords enter the decoder.
    #[arg(long, default_value_t = 1)]
    from_layer: usize,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// NetPBM grid: originals first, then reconstructions.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint holding an autoencoder and its prior.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long)]
    label: Option<u8>,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum BenchKind {
    /// Held-out MSE versus depth at a fixed number of leaf codewords.
    Depth {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        leaf: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Flat versus hierarchical models at growing codeword budgets.
    Collapse {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 512])]
        budgets: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Reconstruction time and exact search cost, hierarchical versus flat.
    Timing {
        /// Images to reconstruct; random images of the configured shape if absent.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long)]
        test: bool,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        codebook_size: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Let the code search use the worker pool.
        #[arg(long)]
        parallel: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) | Error::TapeReused => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Settings from the config file, then flags, then `--set` pairs.
struct Settings {
    file: ConfigFile,
}

impl Settings {
    fn load(cli: &Cli) -> Result<Self> {
        let mut file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        if let Some(s) = cli.seed {
            file.set("seed", s);
            file.set("prior_seed", s);
        }
        Ok(Settings { file })
    }

    fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.file.set(key, v);
        }
    }

    fn overrides(&mut self, o: &Overrides) -> Result<()> {
        for pair in &o.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {pair}` is not KEY=VALUE")))?;
            self.file.set(k.trim(), v.trim());
        }
        Ok(())
    }

    /// Resolves both configurations; any key neither consumes is an error.
    fn resolve(mut self) -> Result<(TrainConfig, PriorConfig)> {
        let mut train = TrainConfig::mnist();
        train.apply(&mut self.file)?;
        let mut prior = PriorConfig::new(2, 1, 1);
        prior.apply(&mut self.file)?;
        self.file.finish()?;
        train.validate()?;
        Ok((train, prior))
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        exec::configure_threads(t);
        if t == 1 {
            exec::set_parallel(false);
        }
    }
    let mut settings = Settings::load(&cli)?;
    match &cli.command {
        Command::Train(a) => {
            settings.flag("epochs", a.epochs);
            settings.flag("layers", a.layers);
            settings.flag("codebook_size", a.codebook_size);
            settings.flag("train_limit", a.train_limit);
            if let Some(m) = a.flat {
                settings.flag("layers", Some(1));
                settings.flag("codebook_size", Some(m));
                settings.flag("quantizer", Some("flat"));
                settings.flag("combined_terms", Some(false));
            }
            settings.overrides(&a.overrides)?;
            let (config, _) = settings.resolve()?;
            train(a, config)
        }
        Command::TrainPrior(a) => {
            settings.flag("prior_epochs", a.epochs);
            settings.overrides(&a.overrides)?;
            let (_, prior) = settings.resolve()?;
            train_prior(a, prior)
        }
        Command::Reconstruct(a) => {
            settings.resolve()?;
            reconstruct(a)
        }
        Command::Sample(a) => {
            settings.resolve()?;
            sample(a, cli.seed.unwrap_or(0))
        }
        Command::Bench { kind } => bench_cmd(kind, settings),
        Command::Stats(a) => {
            settings.resolve()?;
            stats(a)
        }
        Command::InspectCheckpoint { path } => inspect(path),
    }
}

fn load_dataset(kind: &str, args: &DataArgs) -> Result<Dataset> {
    load_dataset_at(kind, &args.data, args.test)
}

fn load_dataset_at(kind: &str, path: &Path, test: bool) -> Result<Dataset> {
    if !path.exists() {
        return Err(DataError::Malformed { file: path.display().to_string(), detail: "no such file or directory".into() }.into());
    }
    let split = if test { Split::Test } else { Split::Train };
    match kind {
        "mnist" => load_mnist_dir(path, split),
        "cifar10" => {
            let files: Vec<PathBuf> = if path.is_dir() {
                if test {
                    vec![path.join("test_batch.bin")]
                } else {
                    (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect()
                }
            } else {
                vec![path.to_path_buf()]
            };
            let (mut data, mut labels) = (Vec::new(), Vec::new());
            for f in &files {
                let (imgs, labs) = load_cifar10(f)?;
                data.extend_from_slice(imgs.data());
                labels.extend(labs);
            }
            let n = labels.len();
            let spec = DatasetSpec {
                name: "cifar10".into(),
                channels: 3,
                height: 32,
                width: 32,
                train_count: if test { 0 } else { n },
                test_count: if test { n } else { 0 },
                sources: files,
            };
            Dataset::new(spec, Tensor::new([n, 3, 32, 32], data)?, labels)
        }
        _ => load_netpbm_dir(path),
    }
}

fn check_shape(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let want = [model.channels, model.height, model.width];
    if data.image_shape() != want {
        return Err(Error::Config(format!(
            "images are {:?} but the model expects {:?}",
            data.image_shape(),
            want
        )));
    }
    Ok(())
}

fn train(a: &TrainArgs, config: TrainConfig) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => Trainer::new(config)?,
    };
    let data = load_dataset(&trainer.config.dataset.clone(), &a.data)?;
    check_shape(&trainer.config.model, &data)?;
    let (train, held) = trainer.config.split(&data)?;
    if train.is_empty() {
        return Err(Error::Config("no training images after the held-out split".into()));
    }
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    if a.resume.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let mut log = MetricsLog::open(&metrics, trainer.config.model.layers)?;
    trainer.fit(&train, &held, |t, rec| {
        log.append(rec)?;
        t.to_checkpoint().save(&a.out)?;
        let ppl: Vec<String> = rec.heldout.usage.layers.iter().map(|l| format!("{:.2}", l.perplexity)).collect();
        println!(
            "epoch {} loss {:.5} heldout_mse {:.5} perplexity [{}]",
            rec.epoch,
            rec.train_loss.total,
            rec.heldout.mse,
            ppl.join(", ")
        );
        Ok(())
    })?;
    trainer.to_checkpoint().save(&a.out)?;
    Ok(())
}

fn encode_all(model: &HrvqModel, images: &Tensor, batch: usize) -> Result<Vec<hrvq::codebook::IndexMap>> {
    let n = images.shape()[0];
    let mut maps = Vec::with_capacity(n);
    for start in (0..n).step_by(batch) {
        maps.extend(model.encode_codes(&images.slice_batch(start, batch.min(n - start))?)?);
    }
    Ok(maps)
}

fn train_prior(a: &TrainPriorArgs, mut config: PriorConfig) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let (model, train_config) = HrvqModel::from_checkpoint(&ck)?;
    let mut data = load_dataset(&train_config.dataset, &a.data)?;
    check_shape(&train_config.model, &data)?;
    if let Some(k) = a.train_limit {
        data = data.take(k)?;
    }
    let mc = model.config();
    config.vocab = usize::try_from(mc.num_leaves()).map_err(|_| Error::Config("too many leaf codewords for a prior".into()))?;
    config.height = mc.latent;
    config.width = mc.latent;
    let labels = if a.class_conditional {
        if data.labels.is_empty() {
            return Err(Error::Config("class conditioning needs a labelled dataset".into()));
        }
        config.classes = data.labels.iter().copied().max().map_or(0, |l| l as usize + 1);
        data.labels.clone()
    } else {
        Vec::new()
    };
    config.validate()?;
    let codes = PriorData::from_index_maps(&encode_all(&model, &data.images, train_config.batch_size)?, labels)?;
    let (train, held) = codes.split_holdout(train_config.holdout);
    let mut p = PriorModel::new(config.clone(), &mut seeded_rng(config.seed))?;
    prior::prior_train(&mut p, &train, &held, |e| {
        println!("epoch {} train_nll {:.4} heldout_nll {:.4}", e.epoch, e.train_nll, e.heldout_nll);
        Ok(())
    })?;
    let mut out = Checkpoint::new();
    for s in &ck.sections {
        if s.tag != SectionTag::PRIOR {
            out.push(s.tag, s.payload.clone());
        }
    }
    out.push(SectionTag::PRIOR, p.to_section());
    out.save(&a.out)
}

fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (model, config) = HrvqModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let data = load_dataset(&config.dataset, &a.data)?;
    check_shape(&config.model, &data)?;
    let images = data.take(a.count)?.images;
    let recon = model.reconstruct(&images, a.from_layer)?;
    println!("mse {:.6}", bench::mse(&images, &recon)?);
    let [n, c, h, w] = images.dims4("reconstruct")?;
    let both = Tensor::new([2 * n, c, h, w], [images.data(), recon.data()].concat())?;
    write_image_grid(&both, a.cols, &a.out)?;
    Ok(())
}

fn sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let (model, _) = HrvqModel::from_checkpoint(&ck)?;
    let p = PriorModel::from_section(ck.require(SectionTag::PRIOR)?)?;
    let req = SampleRequest { count: a.count, temperature: a.temperature, seed, label: a.label };
    let (images, _) = prior::sample(&p, &model, &req)?;
    if a.count > 0 {
        write_image_grid(&images, a.cols, &a.out)?;
    }
    Ok(())
}

fn bench_cmd(kind: &BenchKind, mut settings: Settings) -> Result<()> {
    match kind {
        BenchKind::Depth { data, depths, leaf, out, overrides } => {
            settings.overrides(overrides)?;
            let (base, _) = settings.resolve()?;
            let ds = load_dataset(&base.dataset, data)?;
            check_shape(&base.model, &ds)?;
            let (train, held) = base.split(&ds)?;
            let r = bench::depth_ablation(BenchSplit { train: &train, heldout: &held }, &base, depths, *leaf)?;
            r.table().write(out)?;
            println!("mse non-increasing in depth: {}", r.non_increasing);
        }
        BenchKind::Collapse { data, budgets, layers, out, overrides } => {
            settings.overrides(overrides)?;
            let (base, _) = settings.resolve()?;
            let ds = load_dataset(&base.dataset, data)?;
            check_shape(&base.model, &ds)?;
            let (train, held) = base.split(&ds)?;
            let r = bench::collapse_study(BenchSplit { train: &train, heldout: &held }, &base, budgets, *layers)?;
            r.table().write(out)?;
            println!("hierarchical mse non-increasing: {}", r.hier_non_increasing);
            println!("flat mse worsens: {}", r.flat_worsens);
        }
        BenchKind::Timing { data, test, samples, layers, codebook_size, batch_size, parallel, out, overrides } => {
            settings.overrides(overrides)?;
            let (base, _) = settings.resolve()?;
            let leaf = codebook_size
                .checked_pow(*layers as u32)
                .ok_or_else(|| Error::Config("leaf count overflows".into()))?;
            let hier_cfg = base.clone().hierarchy(*layers, *codebook_size).model;
            let flat_cfg = base.clone().flat(leaf).model;
            let hier = HrvqModel::new(hier_cfg, &mut seeded_rng(base.seed))?;
            let flat = HrvqModel::new(flat_cfg, &mut seeded_rng(base.seed))?;
            let images = match data {
                Some(p) => {
                    let ds = load_dataset_at(&base.dataset, p, *test)?;
                    check_shape(&base.model, &ds)?;
                    ds.take(*samples)?.images
                }
                None => {
                    use rand::Rng as _;
                    let mut rng = seeded_rng(base.seed);
                    let m = &base.model;
                    Tensor::from_fn([*samples, m.channels, m.height, m.width], |_| rng.random::<f32>())
                }
            };
            let count = (*samples).min(images.shape()[0]);
            let hier_label = format!("hierarchical_{layers}x{codebook_size}");
            let flat_label = format!("flat_{leaf}");
            let r = bench::decode_timing(
                &[(hier_label.as_str(), &hier), (flat_label.as_str(), &flat)],
                &images,
                count,
                (*batch_size).max(1),
                *parallel,
            )?;
            r.table().write(out)?;
            if let (Some(h), Some(f)) = (r.rows.first(), r.rows.get(1)) {
                println!(
                    "search cost ratio {:.4}, search speed-up {:.2}x, end-to-end speed-up {:.2}x",
                    r.counter_ratio(1, 0).unwrap_or(f64::NAN),
                    f.search_ms / h.search_ms,
                    f.total_ms() / h.total_ms()
                );
            }
        }
    }
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let (model, config) = HrvqModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let mut data = load_dataset(&config.dataset, &a.data)?;
    check_shape(&config.model, &data)?;
    if let Some(k) = a.limit {
        data = data.take(k)?;
    }
    let r = evaluate(&model, &data, config.batch_size)?;
    let mut t = Table::new(&["layer", "codewords", "perplexity", "used_fraction"]);
    for (i, l) in r.usage.layers.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            l.histogram.len().to_string(),
            format!("{:.4}", l.perplexity),
            format!("{:.4}", l.used_fraction),
        ]);
    }
    println!("images {} mse {:.6} distance_evals {}", r.images, r.mse, r.distance_evals);
    print!("{}", t.to_csv());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let mut s = String::new();
    let _ = writeln!(s, "{}: format version {}, {} bytes", path.display(), hrvq::io::FORMAT_VERSION, bytes.len());
    for sec in &ck.sections {
        let _ = writeln!(
            s,
            "  {} {:>10} bytes  crc32 {:08x}",
            sec.tag.name(),
            sec.payload.len(),
            hrvq::io::checkpoint::section_crc(sec.tag, &sec.payload)
        );
    }
    if let Some(conf) = ck.section(SectionTag::CONFIG) {
        let _ = writeln!(s, "config:");
        for line in String::from_utf8_lossy(conf).lines() {
            let _ = writeln!(s, "  {line}");
        }
    }
    if let Some(p) = ck.section(SectionTag::PRIOR) {
        let prior = PriorModel::from_section(p)?;
        let _ = writeln!(s, "prior:");
        for line in prior.config().to_text().lines() {
            let _ = writeln!(s, "  {line}");
        }
    }
    print!("{s}");
    Ok(())
}
