use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use panoseg::eval::{domain_gap, evaluate, EvalItem, EvalReport};
use panoseg::experiment::ExperimentConfig;
use panoseg::geometry::{plan_windows, Image};
use panoseg::pseudolabel::update_pseudolabels;
use panoseg::report::{bar_chart, line_chart, smooth};
use panoseg::segnet::SegNet;
use panoseg::synth::{generate_dataset, load_dataset, Dataset, Domain, MANIFEST_FILE};
use panoseg::train::{adapt_target, read_metrics_csv, train_source, write_csv, AdaptData};
use panoseg::{selftest, Error, Result};

#[derive(Parser)]
#[command(
    name = "panoseg",
    version,
    about = "Pinhole-to-panorama segmentation adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML with [generation], [model], [train] and [eval] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, initialization and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_enum)]
    memory: Option<Switch>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    bank_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic pinhole and panorama dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on labeled pinhole images.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a source checkpoint to the panoramas.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write fused pseudo-labels for the training panoramas.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on a labeled split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write colorized predictions.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Learning curves, per-class charts and summaries of finished runs.
    Report {
        /// Run directories holding metrics.csv and report.json.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Source and target report JSON for a domain-gap table.
        #[arg(long, num_args = 2, value_names = ["SOURCE", "TARGET"])]
        gap: Option<Vec<PathBuf>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks and oracles.
    Selftest,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<()> {
    if let Some(m) = o.memory {
        cfg.train.memory = matches!(m, Switch::On);
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if let Some(t) = o.threshold {
        cfg.train.threshold = t;
    }
    if let Some(n) = o.bank_size {
        cfg.model.bank_size = n;
    }
    cfg.validate()
}

fn open_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_dataset(&path.join(MANIFEST_FILE))
    } else {
        load_dataset(path)
    }
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// Loads a checkpoint with the run's bank size and memory settings.
fn load_net(ckpt: &Path, cfg: &ExperimentConfig) -> Result<SegNet<f32>> {
    let mut net = SegNet::load(ckpt)?;
    net.config.bank_size = cfg.model.bank_size;
    net.config.memory_enabled = cfg.model.memory_enabled;
    Ok(net)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let m = generate_dataset(&cfg.generation, &common.out)?;
            println!(
                "wrote {} images to {}",
                m.entries.len(),
                common.out.display()
            );
        }
        Command::TrainSource { common, data } => {
            let cfg = load_config(&common)?;
            let ds = open_data(&data)?;
            let source = ds.load_all(Domain::Source, Some("train"))?;
            create(&common.out)?;
            let run = train_source(SegNet::new(cfg.model.clone())?, &source, &cfg.train)?;
            run.net.save(&common.out.join("source.ckpt"))?;
            write_csv(&run.metrics, &common.out.join("metrics.csv"))?;
            cfg.save(&common.out.join("experiment.toml"))?;
            let last = run.metrics.last().map_or(f64::NAN, |m| m.loss_total);
            println!(
                "trained {} iterations, final loss {last:.4}",
                run.metrics.len()
            );
        }
        Command::Adapt {
            common,
            data,
            ckpt,
            overrides,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides)?;
            let net = load_net(&ckpt, &cfg)?;
            let ds = open_data(&data)?;
            let source = ds.load_all(Domain::Source, Some("train"))?;
            let target = ds.load_all(Domain::Target, Some("train"))?;
            let val = ds.load_all(Domain::Target, Some("val"))?;
            let names = ds.manifest.class_names.clone();
            let target_refs: Vec<(String, &Image)> = target
                .iter()
                .map(|s| (format!("scene{:04}_erp", s.scene), &s.image))
                .collect();
            let val_items: Vec<EvalItem> = val
                .iter()
                .map(|s| (format!("scene{:04}_erp", s.scene), &s.image, &s.labels))
                .collect();
            create(&common.out)?;
            let input = AdaptData {
                source: &source,
                target: &target_refs,
                target_eval: &val_items,
                class_names: &names,
            };
            let run = adapt_target(&net, &input, &cfg.train, Some(&common.out.join("pseudo")))?;
            run.net.save(&common.out.join("adapted.ckpt"))?;
            write_csv(&run.metrics, &common.out.join("metrics.csv"))?;
            write_csv(&run.epochs, &common.out.join("epochs.csv"))?;
            cfg.save(&common.out.join("experiment.toml"))?;
            if !val_items.is_empty() {
                let memory = cfg.train.memory && cfg.model.bank_size > 0;
                let report = evaluate(
                    &run.net,
                    &val_items,
                    &cfg.target_plan()?,
                    memory,
                    cfg.eval.fusion,
                    &names,
                    None,
                )?;
                report.write_json(&common.out.join("report.json"))?;
                write(&common.out.join("report.csv"), &report.to_csv())?;
                println!(
                    "adapted {} iterations, target mIoU {:.2}",
                    run.metrics.len(),
                    report.miou
                );
            } else {
                println!("adapted {} iterations", run.metrics.len());
            }
        }
        Command::Pseudolabel {
            common,
            data,
            ckpt,
            overrides,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides)?;
            let net = load_net(&ckpt, &cfg)?;
            let ds = open_data(&data)?;
            let target = ds.load_all(Domain::Target, Some("train"))?;
            if target.is_empty() {
                return Err(Error::EmptyDataset("no target training images".into()));
            }
            let refs: Vec<(String, &Image)> = target
                .iter()
                .map(|s| (format!("scene{:04}_erp", s.scene), &s.image))
                .collect();
            let memory = cfg.train.memory && cfg.model.bank_size > 0;
            let (_, records) = update_pseudolabels(
                &net,
                &refs,
                &cfg.target_plan()?,
                cfg.train.threshold,
                memory,
                0,
                Some(&common.out),
            )?;
            let mean =
                records.iter().map(|r| r.uncertain_fraction).sum::<f64>() / records.len() as f64;
            println!(
                "wrote {} pseudo-labels, mean uncertain fraction {mean:.3}",
                records.len()
            );
        }
        Command::Eval {
            common,
            data,
            ckpt,
            domain,
            split,
            png,
            overrides,
        } => {
            let mut cfg = load_config(&common)?;
            apply(&mut cfg, &overrides)?;
            let net = load_net(&ckpt, &cfg)?;
            let ds = open_data(&data)?;
            let domain = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            let entries = ds.entries(domain, Some(&split));
            let samples = entries
                .iter()
                .map(|e| ds.load(e))
                .collect::<Result<Vec<_>>>()?;
            let items: Vec<EvalItem> = entries
                .iter()
                .zip(&samples)
                .map(|(e, s)| {
                    let stem = Path::new(&e.image)
                        .file_stem()
                        .map_or(String::new(), |s| s.to_string_lossy().into_owned());
                    (stem, &s.image, &s.labels)
                })
                .collect();
            let first = samples
                .first()
                .ok_or_else(|| Error::EmptyDataset(format!("no {split} images")))?;
            let plan = plan_windows(first.image.width(), net.config.patch_size, cfg.train.stride)?;
            let memory = cfg.train.memory && cfg.model.bank_size > 0;
            create(&common.out)?;
            let pngs = png.then(|| common.out.join("predictions"));
            let report = evaluate(
                &net,
                &items,
                &plan,
                memory,
                cfg.eval.fusion,
                &ds.manifest.class_names,
                pngs.as_deref(),
            )?;
            report.write_json(&common.out.join("report.json"))?;
            write(&common.out.join("report.csv"), &report.to_csv())?;
            println!("mIoU {:.2} over {} images", report.miou, items.len());
        }
        Command::Report { runs, gap, out } => {
            create(&out)?;
            let mut curves = Vec::new();
            let mut bars = Vec::new();
            let mut names = Vec::new();
            let mut summary = String::from("run,miou,final_loss\n");
            for dir in &runs {
                let label = dir.file_name().map_or(dir.display().to_string(), |n| {
                    n.to_string_lossy().into_owned()
                });
                let metrics = read_metrics_csv(&dir.join("metrics.csv"))?;
                let pts: Vec<(f64, f64)> = metrics
                    .iter()
                    .map(|m| (m.iter as f64, m.loss_total))
                    .collect();
                curves.push((label.clone(), smooth(&pts, 25)));
                let final_loss = metrics.last().map_or(f64::NAN, |m| m.loss_total);
                let miou = match EvalReport::read_json(&dir.join("report.json")) {
                    Ok(r) => {
                        names = r.class_names.clone();
                        bars.push((label.clone(), r.iou.clone()));
                        r.miou.to_string()
                    }
                    Err(Error::MissingFile(_)) => String::new(),
                    Err(e) => return Err(e),
                };
                summary.push_str(&format!("{label},{miou},{final_loss}\n"));
            }
            write(
                &out.join("learning_curves.svg"),
                &line_chart("Training loss", "loss_total", &curves),
            )?;
            write(&out.join("summary.csv"), &summary)?;
            if !bars.is_empty() {
                write(
                    &out.join("per_class.svg"),
                    &bar_chart("Per-class IoU", &names, &bars),
                )?;
            }
            if let Some(paths) = gap {
                let gap = domain_gap(
                    &EvalReport::read_json(&paths[0])?,
                    &EvalReport::read_json(&paths[1])?,
                )?;
                let mut csv = String::from("class,delta\n");
                for (n, d) in gap.class_names.iter().zip(&gap.iou) {
                    csv.push_str(&format!(
                        "{n},{}\n",
                        d.map(|v| v.to_string()).unwrap_or_default()
                    ));
                }
                csv.push_str(&format!("mIoU,{}\n", gap.miou));
                write(&out.join("domain_gap.csv"), &csv)?;
            }
            println!("wrote report for {} runs to {}", runs.len(), out.display());
        }
        Command::Selftest => {
            let results = selftest::run_all()?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            if failed > 0 {
                return Err(Error::SelfTest(failed));
            }
        }
    }
    Ok(())
}

/// Exit status per error kind.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::NonTiling { .. } | Error::DegeneratePatch(_) => 2,
        Error::MissingFile(_) | Error::MissingCheckpoint(_) => 3,
        Error::EmptyDataset(_)
        | Error::BadLabelValue { .. }
        | Error::GeometryMismatch(_)
        | Error::EmptyResult
        | Error::EmptyPredictionSet => 4,
        Error::Io { .. } | Error::Image { .. } | Error::Json { .. } => 5,
        Error::SelfTest(_) => 6,
        Error::Numerics(_) => 7,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
