mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arfsfr::checkpoint::Checkpoint;
use arfsfr::episodes::{generate_synthetic_dataset, Dataset, SampleRef, Split};
use arfsfr::io::save_tensor;
use arfsfr::model::Model;
use arfsfr::trainer::{self, EpisodeClassifier, Ensemble, OracleClassifier, TEST_STREAM};
use arfsfr::verify::{self, gradient_suite};
use arfsfr::{DType, Tape, Tensor};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "arfsfr", version, about = "Few-shot classification with adaptive receptive fields and spatial-frequency fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the [data] section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model episodically and write checkpoints and the training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on test episodes and print `mean ± ci95`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Use a stub that always predicts the true label.
        #[arg(long)]
        oracle: bool,
        /// Split to draw episodes from.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Evaluate the probability-averaging ensemble of several checkpoints.
    EnsembleEval {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Restrict to one module (tensor-core, spectral, fusion, arf, similarity, encoder).
        #[arg(long)]
        module: Option<String>,
    },
    /// Write the fusion weights W_s, W_f and the frequency features for one sample.
    ExportMaps {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample as `class:index`.
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the modal discrete kernel size per ARF layer over the validation split.
    ShowRf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load_model(cfg: &RunConfig, path: &Path) -> AnyResult<Model> {
    Ok(Checkpoint::load(path)?.restore(&cfg.model)?.0)
}

fn check_dataset(cfg: &RunConfig, data: &Dataset) -> AnyResult<()> {
    let e = &cfg.model.encoder;
    let want = [e.in_channels, e.image_size, e.image_size];
    match data.image_shape() {
        Some(shape) if shape == want => Ok(()),
        other => Err(format!("dataset images have shape {other:?}, config expects {want:?}").into()),
    }
}

fn parse_sample(text: &str) -> AnyResult<SampleRef> {
    let (c, i) = text.split_once(':').ok_or("sample must be `class:index`")?;
    Ok(SampleRef { class: c.trim().parse()?, index: i.trim().parse()? })
}

fn run(command: Command) -> AnyResult<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = generate_synthetic_dataset(&cfg.data, cfg.data_seed)?;
            ds.save(&out)?;
            println!("wrote {} samples in {} classes to {}", ds.num_samples(), ds.classes.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            check_dataset(&cfg, &ds)?;
            std::fs::create_dir_all(&out)?;
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let outcome = trainer::train(model, &ds, &cfg.train, &cfg.eval)?;
            std::fs::write(out.join("train.log"), &outcome.log)?;
            outcome.final_checkpoint.save(&out.join("final.arfc"))?;
            if let Some((acc, ck)) = &outcome.best {
                ck.save(&out.join("best.arfc"))?;
                println!("best validation accuracy {acc:.2}");
            }
            for (i, ck) in outcome.snapshots.iter().enumerate() {
                ck.save(&out.join(format!("snapshot_{}.arfc", i + 1)))?;
            }
            for (epoch, report) in &outcome.validation {
                println!("epoch {epoch}: validation {report}");
            }
        }
        Command::Eval { config, checkpoint, data, oracle, split } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            let classifier: Box<dyn EpisodeClassifier> = match (oracle, checkpoint) {
                (true, _) => Box::new(OracleClassifier),
                (false, Some(p)) => {
                    check_dataset(&cfg, &ds)?;
                    Box::new(load_model(&cfg, &p)?)
                }
                (false, None) => return Err("--checkpoint is required without --oracle".into()),
            };
            let report = trainer::evaluate(classifier.as_ref(), &ds, &cfg.eval.sampler(split, TEST_STREAM), cfg.eval.episodes)?;
            println!("{report}");
        }
        Command::EnsembleEval { config, checkpoints, data, split } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            check_dataset(&cfg, &ds)?;
            let members = checkpoints.iter().map(|p| load_model(&cfg, p)).collect::<AnyResult<Vec<_>>>()?;
            let ensemble = Ensemble::new(members)?;
            let report = trainer::evaluate(&ensemble, &ds, &cfg.eval.sampler(split, TEST_STREAM), cfg.eval.episodes)?;
            println!("{report}");
        }
        Command::Gradcheck { module } => {
            let rows = gradient_suite(module.as_deref())?;
            println!("{:<12} {:<22} {:>12} {:>8}  result", "module", "case", "max_rel_err", "coords");
            for row in &rows {
                let verdict = if row.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{:<12} {:<22} {:>12.3e} {:>8}  {verdict}",
                    row.module, row.case, row.report.max_rel_error, row.report.coordinates
                );
            }
            let failed = rows.iter().filter(|r| !r.passed()).count();
            println!("{} of {} cases pass (tolerance {:e})", rows.len() - failed, rows.len(), verify::TOLERANCE);
            if failed > 0 {
                return Err(format!("{failed} gradient case(s) failed").into());
            }
        }
        Command::ExportMaps { config, checkpoint, data, sample, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            check_dataset(&cfg, &ds)?;
            let model = load_model(&cfg, &checkpoint)?;
            let r = parse_sample(&sample)?;
            if r.class >= ds.classes.len() || r.index >= ds.classes[r.class].samples.len() {
                return Err(format!("no sample {sample} in the dataset").into());
            }
            let image = ds.sample(r);
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            let batch = Tensor::new(shape, image.data().to_vec())?;
            let tape = Tape::inference();
            let vars = model.params.vars(&tape, |_| false);
            let ctx = model.forward_context(&tape, &vars, false);
            let encoded = model.encoder.encode(&ctx, tape.constant(batch))?;
            std::fs::create_dir_all(&out)?;
            let mut written = Vec::new();
            if let Some(f) = &encoded.fusion {
                written.push(("w_spatial", f.w_spatial.value().clone()));
                written.push(("w_frequency", f.w_frequency.value().clone()));
            }
            if let Some(omega) = encoded.omega_f {
                written.push(("omega_f", omega.value().clone()));
            }
            if written.is_empty() {
                return Err("model has no frequency branch or fusion to export".into());
            }
            for (name, t) in written {
                let path = out.join(format!("{name}.arft"));
                save_tensor(&path, &t, DType::F64)?;
                println!("{} {:?}", path.display(), t.shape());
            }
        }
        Command::ShowRf { config, checkpoint, data, split } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            check_dataset(&cfg, &ds)?;
            let model = load_model(&cfg, &checkpoint)?;
            let refs: Vec<SampleRef> = ds
                .split_classes(split)
                .into_iter()
                .flat_map(|c| (0..ds.classes[c].samples.len()).map(move |index| SampleRef { class: c, index }))
                .collect();
            if refs.is_empty() {
                return Err(format!("split {split} has no samples").into());
            }
            let mut counts: BTreeMap<String, BTreeMap<(usize, usize), usize>> = BTreeMap::new();
            for chunk in refs.chunks(64) {
                let images: Vec<&Tensor> = chunk.iter().map(|&r| ds.sample(r)).collect();
                let batch = Tensor::stack(&images)?;
                let tape = Tape::inference();
                let vars = model.params.vars(&tape, |_| false);
                let ctx = model.forward_context(&tape, &vars, false);
                let encoded = model.encoder.encode(&ctx, tape.constant(batch))?;
                for (site, out) in &encoded.arf {
                    let entry = counts.entry(site.to_string()).or_default();
                    for &s in &out.sizes {
                        *entry.entry(s).or_default() += 1;
                    }
                }
            }
            if counts.is_empty() {
                println!("model has no ARF layers");
            }
            println!("{:<20} {:>8} {:>8}  share", "layer", "N_u", "N_v");
            for (site, hist) in &counts {
                let total: usize = hist.values().sum();
                let (&(nu, nv), &n) = hist.iter().max_by_key(|(k, &n)| (n, std::cmp::Reverse(**k))).expect("non-empty");
                println!("{site:<20} {nu:>8} {nv:>8}  {:.2}", n as f64 / total as f64);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
