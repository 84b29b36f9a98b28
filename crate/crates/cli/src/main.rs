use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mmground::checkpoint;
use mmground::config::RunConfig;
use mmground::data::{build_sample, gen_synthetic, write_pgm, ManifestRecord, Pixels, SyntheticConfig};
use mmground::eval::{evaluate, PredictionRecord};
use mmground::pipeline::{ablation_csv, ablation_table, ablation_variants, run_ablations, train, Dataset};
use mmground::saliency::{gradient_norm_map, to_u8};
use mmground::selftest::{self, SelfTestOptions};
use mmground::{Error, Fault, Precision, Result, Scalar};

#[derive(Parser, Debug)]
#[command(name = "mmground", version, about = "Image-text manipulation detection and grounding")]
struct Cli {
    /// JSON run config; missing fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// f32 or f64
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus (images, manifest.jsonl, vocab.txt)
    GenFixtures {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        fake_ratio: f64,
    },
    /// Train and write checkpoint.bin, loss.csv, config.json and vocab.txt
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Total optimizer steps (overrides the epoch count)
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write report.csv, report.txt and predictions.jsonl
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Print the prediction for one image and caption as JSON
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        /// Defaults to vocab.txt next to the checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Gradient-norm map of the binary logit for one manifest sample, as PGM
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sample id; all samples when omitted
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train the full model and the no-frequency / no-selection variants and compare
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run the oracle and gradient-check suites
    Selftest {
        /// Flip the sign of one backward rule; the gradient checks must then fail
        #[arg(long)]
        inject_fault: bool,
    },
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    io(path, std::fs::write(path, contents))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    io(&cli.out, std::fs::create_dir_all(&cli.out))?;
    Ok(&cli.out)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::from_json(&io(p, std::fs::read_to_string(p))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(p) = cli.precision {
        run.precision = p;
    }
    run.validate()?;
    Ok(run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` is a clean run that found failures (selftest).
fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Command::GenFixtures { n, fake_ratio } => {
            let run = run_config(cli)?;
            let cfg = SyntheticConfig {
                n_samples: *n,
                fake_ratio: *fake_ratio,
                seed: run.seed,
                image_size: run.model.image_size,
                ..SyntheticConfig::default()
            };
            cfg.validate()?;
            let dir = out_dir(cli)?;
            let corpus = gen_synthetic(&cfg, dir)?;
            let fakes = corpus.records.iter().filter(|r| r.pair_fake == 1).count();
            println!("wrote {} samples ({fakes} manipulated) to {}", corpus.records.len(), dir.display());
            Ok(true)
        }
        Command::Train {
            manifest,
            steps,
            epochs,
            vocab,
        } => {
            let mut run = run_config(cli)?;
            if steps.is_some() {
                run.steps = *steps;
            }
            if let Some(e) = epochs {
                run.epochs = *e;
                run.steps = None;
            }
            run.validate()?;
            let data = Dataset::load(manifest, vocab.as_deref(), run.exec)?;
            match run.precision {
                Precision::F32 => train_cmd::<f32>(cli, &run, &data),
                Precision::F64 => train_cmd::<f64>(cli, &run, &data),
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            vocab,
        } => match load_precision(cli, checkpoint)? {
            Precision::F32 => eval_cmd::<f32>(cli, checkpoint, manifest, vocab.as_deref()),
            Precision::F64 => eval_cmd::<f64>(cli, checkpoint, manifest, vocab.as_deref()),
        },
        Command::Infer {
            checkpoint,
            image,
            text,
            vocab,
        } => match load_precision(cli, checkpoint)? {
            Precision::F32 => infer_cmd::<f32>(checkpoint, image, text, vocab.as_deref()),
            Precision::F64 => infer_cmd::<f64>(checkpoint, image, text, vocab.as_deref()),
        },
        Command::Saliency {
            checkpoint,
            manifest,
            id,
            vocab,
        } => match load_precision(cli, checkpoint)? {
            Precision::F32 => saliency_cmd::<f32>(cli, checkpoint, manifest, id.as_deref(), vocab.as_deref()),
            Precision::F64 => saliency_cmd::<f64>(cli, checkpoint, manifest, id.as_deref(), vocab.as_deref()),
        },
        Command::Ablate { manifest, steps, vocab } => {
            let mut run = run_config(cli)?;
            if steps.is_some() {
                run.steps = *steps;
            }
            let data = Dataset::load(manifest, vocab.as_deref(), run.exec)?;
            let variants = ablation_variants(&run);
            let on_step = |name: &str, s: &mmground::train::StepStats| {
                if s.step.is_multiple_of(50) {
                    eprintln!("{name} step {} loss {:.4}", s.step, s.loss);
                }
            };
            let rows = match run.precision {
                Precision::F32 => run_ablations::<f32>(&variants, &data, on_step)?,
                Precision::F64 => run_ablations::<f64>(&variants, &data, on_step)?,
            };
            let dir = out_dir(cli)?;
            let table = ablation_table(&rows);
            write(&dir.join("ablation.csv"), ablation_csv(&rows))?;
            write(&dir.join("ablation.txt"), &table)?;
            print!("{table}");
            Ok(true)
        }
        Command::Selftest { inject_fault } => {
            let run = run_config(cli)?;
            let report = selftest::run(SelfTestOptions {
                fault: inject_fault.then_some(Fault::NegateMatMulRhs),
                exec: run.exec,
            });
            println!("{report}");
            Ok(report.passed())
        }
    }
}

/// `--precision` if given, else the dtype the checkpoint was trained in.
fn load_precision(cli: &Cli, ckpt: &Path) -> Result<Precision> {
    if let Some(p) = cli.precision {
        return Ok(p);
    }
    let (_, _, run) = checkpoint::load::<f64>(ckpt)?;
    Ok(run.precision)
}

fn train_cmd<T: Scalar>(cli: &Cli, run: &RunConfig, data: &Dataset) -> Result<bool> {
    let dir = out_dir(cli)?;
    let total = run.total_steps(data.len());
    let t0 = Instant::now();
    let mut csv = String::from("step,lr,loss,binary,fine_grained,bbox,token,pyramid\n");
    let trainer = train::<T>(run, data, |s| {
        let t = &s.terms;
        csv.push_str(&format!(
            "{},{:e},{},{},{},{},{},{}\n",
            s.step, s.lr, s.loss, t.binary, t.fine_grained, t.bbox, t.token, t.pyramid
        ));
        if s.step % 25 == 0 || s.step + 1 == total {
            eprintln!(
                "step {:>5}/{total} loss {:.4} lr {:.2e} ({:.1}s)",
                s.step,
                s.loss,
                s.lr,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    checkpoint::save(dir.join("checkpoint.bin"), &trainer.store, run)?;
    write(&dir.join("loss.csv"), csv)?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(run).map_err(Error::from)?)?;
    write(&dir.join("vocab.txt"), data.vocab.to_file_string())?;
    println!("trained {total} steps; checkpoint in {}", dir.display());
    Ok(true)
}

fn eval_cmd<T: Scalar>(cli: &Cli, ckpt: &Path, manifest: &Path, vocab: Option<&Path>) -> Result<bool> {
    let (model, store, run) = checkpoint::load::<T>(ckpt)?;
    let data = Dataset::load(manifest, vocab, run.exec)?;
    let samples = data.samples::<T>(&model.cfg, None, run.exec)?;
    let ev = evaluate(&model, &store, &samples, run.exec)?;
    let dir = out_dir(cli)?;
    let table = ev.report.to_string();
    write(&dir.join("report.csv"), ev.report.to_csv())?;
    write(&dir.join("report.txt"), format!("{table}\n"))?;
    write(&dir.join("predictions.jsonl"), ev.predictions_jsonl()?)?;
    println!("{table}");
    Ok(true)
}

fn vocab_for(ckpt: &Path, vocab: Option<&Path>) -> Result<mmground::backbones::Vocab> {
    let path = vocab.map(Path::to_path_buf).unwrap_or_else(|| ckpt.with_file_name("vocab.txt"));
    mmground::backbones::Vocab::load(path)
}

fn infer_cmd<T: Scalar>(ckpt: &Path, image: &Path, text: &str, vocab: Option<&Path>) -> Result<bool> {
    let (model, store, _) = checkpoint::load::<T>(ckpt)?;
    let vocab = vocab_for(ckpt, vocab)?;
    let rec = ManifestRecord {
        id: image.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
        image_path: image.display().to_string(),
        text: text.to_string(),
        pair_fake: 0,
        fg_labels: [false; 4],
        face_boxes: vec![],
        fake_token_indices: vec![],
    };
    let img = mmground::data::load_image(image)?;
    let s = build_sample::<T>(&rec, &img, &vocab, &model.cfg, None)?;
    let p = model.predict(&store, &s.image, &s.tokens)?;
    let out = PredictionRecord::new(&s.id, &p, s.tokens.content_len());
    println!("{}", serde_json::to_string(&out).map_err(Error::from)?);
    Ok(true)
}

fn saliency_cmd<T: Scalar>(cli: &Cli, ckpt: &Path, manifest: &Path, id: Option<&str>, vocab: Option<&Path>) -> Result<bool> {
    let (model, store, run) = checkpoint::load::<T>(ckpt)?;
    let data = Dataset::load(manifest, vocab, run.exec)?;
    let samples = data.samples::<T>(&model.cfg, None, run.exec)?;
    let chosen: Vec<_> = samples.iter().filter(|s| id.is_none_or(|i| s.id == i)).collect();
    if chosen.is_empty() {
        return Err(Error::Input(format!("no sample with id {:?}", id.unwrap_or_default())));
    }
    let dir = out_dir(cli)?;
    for s in chosen {
        let map = gradient_norm_map(&model, &store, &s.image, &s.tokens)?;
        let &[h, w] = map.shape() else { unreachable!("saliency maps are 2-d") };
        let px = Pixels {
            channels: 1,
            height: h,
            width: w,
            data: to_u8(&map),
        };
        let path = dir.join(format!("{}.saliency.pgm", s.id));
        write_pgm(&path, &px)?;
        println!("{}", path.display());
    }
    Ok(true)
}

