use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fun_core::cassi::{self, DispersionSpec};
use fun_core::checkpoint::Checkpoint;
use fun_core::config::RunConfig;
use fun_core::data::{self, Dataset, DatasetSpec};
use fun_core::focal::{fsm_forward, naive_self_attention, AttentionParams, FsmConfig, FsmParams};
use fun_core::nn::Init;
use fun_core::suites::{run_suite, Suite};
use fun_core::train::{self, RunDir, Trainer};
use fun_core::{ParamStore, Tape, Tensor};

mod overlay;

#[derive(Parser)]
#[command(name = "fun", version, about = "Snapshot spectral imaging: simulate, train, reconstruct and detect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (cubes, annotations, mask, manifest).
    GenData {
        /// Total scene count; defaults to the configured train + val sizes
        /// (160 without a config).
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; defaults to the configured one (7 without a config).
        #[arg(long)]
        seed: Option<u64>,
        /// Run configuration whose `dataset` table sets the scene layout.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenes held out for validation; defaults to one in five when
        /// `--scenes` is given, else to the configured split.
        #[arg(long)]
        val: Option<usize>,
    },
    /// Push a cube through mask, prism and detector.
    Simulate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        dispersion_step: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the run directory receives the config echo, metrics
    /// log, checkpoints and sample reconstructions.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set train.lr=0.0005`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct a cube from a measurement.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect objects in a measurement and write one record per detection.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write one PNG per band of the reconstruction with the boxes drawn.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Count multiply-accumulates of focal modulation and self-attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run finite-difference gradient suites.
    GradCheck {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { scenes, out, seed, config, val } => gen_data(scenes, &out, seed, config.as_deref(), val),
        Command::Simulate { cube, mask, sigma, seed, dispersion_step, out } => {
            simulate(&cube, &mask, sigma, seed, dispersion_step, &out)
        }
        Command::Train { config, out, overrides, resume } => train_cmd(config.as_deref(), &out, &overrides, resume.as_deref()),
        Command::Eval { ckpt, split, data } => eval(&ckpt, split, data.as_deref()),
        Command::Reconstruct { ckpt, measurement, out } => reconstruct(&ckpt, &measurement, &out),
        Command::Detect { ckpt, measurement, out, overlay } => detect(&ckpt, &measurement, &out, overlay.as_deref()),
        Command::Bench { sizes, channels, seed } => bench(&sizes, channels, seed),
        Command::GradCheck { module, seed } => grad_check(&module, seed),
    }
}

fn read_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    Ok(RunConfig::parse_with_overrides(&text, overrides)?)
}

fn gen_data(scenes: Option<usize>, out: &Path, seed: Option<u64>, config: Option<&Path>, val: Option<usize>) -> Result<()> {
    let base = match config {
        Some(_) => read_config(config, &[])?.dataset,
        None => DatasetSpec::default(),
    };
    let (scenes, val) = match (scenes, val) {
        (Some(n), v) => (n, v.unwrap_or(n / 5)),
        (None, v) => (base.train + base.val, v.unwrap_or(base.val)),
    };
    if val > scenes {
        bail!("{val} validation scenes requested out of {scenes}");
    }
    let spec = DatasetSpec { train: scenes - val, val, seed: seed.unwrap_or(base.seed), ..base };
    let ds = data::generate_dataset(&spec)?;
    let manifest = ds.save(out)?;
    let objects: usize = ds.train.iter().chain(&ds.val).map(|s| s.annotations.len()).sum();
    println!(
        "wrote {} train + {} val scenes ({objects} objects) to {}",
        ds.train.len(),
        ds.val.len(),
        manifest.display()
    );
    Ok(())
}

fn simulate(cube: &Path, mask: &Path, sigma: f64, seed: u64, step: usize, out: &Path) -> Result<()> {
    let x = data::load_cube(cube).with_context(|| format!("loading cube {}", cube.display()))?;
    let m = data::load_cube(mask).with_context(|| format!("loading mask {}", mask.display()))?;
    let x = x.into_cube::<f64>();
    let m = data::cube_to_mask(&m.into_cube::<f64>())?;
    let y = cassi::forward(&x, &m, DispersionSpec::new(step), sigma, seed)?;
    data::save_cube(out, &data::measurement_to_cube(&y))?;
    println!("measurement {}x{} written to {}", y.height(), y.width(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {} (run `fun gen-data` first)", dir.display()))
}

fn train_cmd(config: Option<&Path>, out: &Path, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(ck) => {
            if config.is_some() || !overrides.is_empty() {
                bail!("--resume continues the checkpoint's own configuration; drop --config and --set");
            }
            Trainer::from_checkpoint(&Checkpoint::load(ck).with_context(|| format!("loading {}", ck.display()))?)?
        }
        None => Trainer::new(read_config(config, overrides)?)?,
    };
    let dir = RunDir::create(out)?;
    fs::write(out.join(RunDir::CONFIG), trainer.config.to_toml())?;
    let data = load_dataset(Path::new(&trainer.config.data_dir))?;
    if data.spec.scene != trainer.config.dataset.scene {
        bail!("dataset in {} was generated with a different scene layout", trainer.config.data_dir);
    }
    println!(
        "training {} parameters for {} steps (from step {})",
        trainer.params.count(),
        trainer.config.train.steps,
        trainer.step()
    );
    let steps = trainer.config.train.steps;
    let log = trainer.run(&data, steps, Some(&dir))?;
    for row in &log {
        if let train::LogRow::Eval { step, summary } = row {
            println!(
                "step {step:>6}  psnr {:.3} (shift-back {:.3})  ssim {:.4}  sam {:.3}  mAP@0.5 {:.4}",
                summary.psnr, summary.baseline_psnr, summary.ssim, summary.sam, summary.map
            );
        }
    }
    Ok(())
}

fn eval(ckpt: &Path, split: SplitArg, data_dir: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&trainer.config.data_dir));
    let data = load_dataset(&dir)?;
    let samples = match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let report = train::evaluate(&trainer.model, &trainer.params, samples, &data.mask, &trainer.config.train)?;
    println!("scene\tpsnr\tssim\tsam");
    for row in &report.rows {
        println!("{row}");
    }
    let s = report.summary;
    println!("mean\t{:.4}\t{:.5}\t{:.4}", s.psnr, s.ssim, s.sam);
    println!("shift-back\t{:.4}\t{:.5}\t{:.4}", s.baseline_psnr, s.baseline_ssim, s.baseline_sam);
    for (k, ap) in report.per_class_ap.iter().enumerate() {
        match ap {
            Some(ap) => println!("AP@0.5 class {k}\t{ap:.4}"),
            None => println!("AP@0.5 class {k}\t-"),
        }
    }
    println!("mAP@0.5\t{:.4}", s.map);
    // same form as the eval rows of the run's metrics log
    let row = train::LogRow::Eval { step: ck.step, summary: s };
    println!("{}", serde_json::to_string(&row)?);
    Ok(())
}

fn load_measurement(path: &Path) -> Result<cassi::Measurement<f32>> {
    let c = data::load_cube(path).with_context(|| format!("loading measurement {}", path.display()))?;
    Ok(data::cube_to_measurement(&c.into_cube::<f32>())?)
}

fn reconstruct(ckpt: &Path, measurement: &Path, out: &Path) -> Result<()> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?)?;
    let y = load_measurement(measurement)?;
    let (recon, _) = train::infer(&t.model, &t.params, &y, t.config.train.dispersion())?;
    data::save_cube(out, &recon)?;
    println!("{}x{}x{} cube written to {}", recon.height(), recon.width(), recon.bands(), out.display());
    Ok(())
}

fn detect(ckpt: &Path, measurement: &Path, out: &Path, overlay_dir: Option<&Path>) -> Result<()> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?)?;
    let y = load_measurement(measurement)?;
    let (recon, dets) = train::infer(&t.model, &t.params, &y, t.config.train.dispersion())?;
    let image_id = measurement.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut text = String::new();
    for d in &dets {
        text.push_str(&format!("{image_id} {d}\n"));
    }
    fs::write(out, text)?;
    println!("{} detections written to {}", dets.len(), out.display());
    if let Some(dir) = overlay_dir {
        let paths = overlay::write_band_overlays(&recon, &dets, dir, image_id)?;
        println!("{} overlay images in {}", paths.len(), dir.display());
    }
    Ok(())
}

fn bench(sizes: &[usize], channels: usize, seed: u64) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) || channels == 0 {
        bail!("sizes and channel count must be positive");
    }
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, seed);
    let fsm = FsmParams::init(&mut init, "fsm", &FsmConfig::default(), channels)?;
    let attn = AttentionParams::init(&mut init, "attn", channels)?;
    println!("side\ttokens\tfsm_macs\tattention_macs\tfsm_growth\tattention_growth");
    let mut prev: Option<(u64, u64)> = None;
    for &s in sizes {
        let count = |f: &dyn Fn(&mut Tape<f32>, fun_core::Var) -> fun_core::Result<fun_core::Var>| -> Result<u64> {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(Tensor::zeros(&[1, s, s, channels]));
            let before = tape.macs();
            f(&mut tape, x)?;
            Ok(tape.macs() - before)
        };
        let a = count(&|t, x| fsm_forward(t, x, &fsm))?;
        let b = count(&|t, x| naive_self_attention(t, x, &attn))?;
        let growth = |now: u64, then: Option<u64>| then.map_or("-".to_string(), |p| format!("{:.2}", now as f64 / p as f64));
        println!(
            "{s}\t{}\t{a}\t{b}\t{}\t{}",
            s * s,
            growth(a, prev.map(|p| p.0)),
            growth(b, prev.map(|p| p.1))
        );
        prev = Some((a, b));
    }
    Ok(())
}

fn grad_check(module: &str, seed: u64) -> Result<()> {
    let suites: Vec<Suite> = if module == "all" { Suite::ALL.to_vec() } else { vec![module.parse()?] };
    let mut failed = 0;
    for s in suites {
        for c in run_suite(s, seed)? {
            println!("{s:<12} {c}");
            failed += usize::from(!c.passes());
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
