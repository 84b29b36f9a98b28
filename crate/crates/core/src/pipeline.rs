//! Whole-run helpers shared by the command-line tool and the acceptance tests:
//! dataset loading, training with per-epoch augmentation, and the ablation sweep.

use std::path::Path;

use crate::backbones::Vocab;
use crate::config::{ModelConfig, RunConfig, Schedule};
use crate::data::{build_samples, load_images, load_manifest, Corpus, ManifestRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::exec::Exec;
use crate::metrics::EvalReport;
use crate::model::Sample;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::train::{StepStats, Trainer};

/// Records, decoded images and the vocabulary of one manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Tensor<f64>>,
    pub vocab: Vocab,
}

impl Dataset {
    /// Reads `manifest` and its images (paths relative to the manifest's
    /// directory). The vocabulary is `vocab` if given, else `vocab.txt` next
    /// to the manifest, else the sorted set of words in the captions.
    pub fn load(manifest: &Path, vocab: Option<&Path>, exec: Exec) -> Result<Self> {
        let records = load_manifest(manifest)?;
        if records.is_empty() {
            return Err(Error::Input(format!("{}: manifest is empty", manifest.display())));
        }
        let root = manifest.parent().unwrap_or(Path::new("."));
        let images = load_images(&records, root, exec)?;
        let beside = root.join("vocab.txt");
        let vocab = match vocab {
            Some(p) => Vocab::load(p)?,
            None if beside.exists() => Vocab::load(&beside)?,
            None => {
                let mut words: Vec<String> = records
                    .iter()
                    .flat_map(|r| r.text.split_whitespace().map(str::to_lowercase))
                    .collect();
                words.sort();
                words.dedup();
                Vocab::from_words(&words)
            }
        };
        Ok(Dataset { records, images, vocab })
    }

    pub fn from_corpus(c: &Corpus) -> Self {
        Dataset {
            records: c.records.clone(),
            images: c.images.iter().map(|p| p.to_tensor()).collect(),
            vocab: c.vocab.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn samples<T: Scalar>(&self, cfg: &ModelConfig, augment: Option<&Rng>, exec: Exec) -> Result<Vec<Sample<T>>> {
        build_samples(&self.records, &self.images, &self.vocab, cfg, augment, exec)
    }
}

/// Trains from the run's seed. With augmentation on, epoch `e` is rebuilt
/// from `Rng::new(seed).fork(e)`; otherwise the samples are built once.
pub fn train<T: Scalar>(run: &RunConfig, data: &Dataset, on_step: impl FnMut(&StepStats)) -> Result<Trainer<T>> {
    run.validate()?;
    let mut trainer = Trainer::<T>::new(run)?;
    let fixed = if run.augment {
        None
    } else {
        Some(data.samples::<T>(&run.model, None, run.exec)?)
    };
    let aug = Rng::new(run.seed).fork(0xa06);
    trainer.fit(
        data.len(),
        |epoch| match &fixed {
            Some(s) => Ok(s.clone()),
            None => data.samples(&run.model, Some(&aug.fork(epoch as u64)), run.exec),
        },
        on_step,
    )?;
    Ok(trainer)
}

/// Trains and evaluates on the same (un-augmented) samples.
pub fn train_and_evaluate<T: Scalar>(
    run: &RunConfig,
    data: &Dataset,
    on_step: impl FnMut(&StepStats),
) -> Result<(Trainer<T>, Evaluation)> {
    let trainer = train::<T>(run, data, on_step)?;
    let samples = data.samples::<T>(&run.model, None, run.exec)?;
    let ev = evaluate(&trainer.model, &trainer.store, &samples, run.exec)?;
    Ok((trainer, ev))
}

/// The learnability recipe on the 64-sample synthetic fixture: full-batch
/// steps at lr 1e-3 under a cosine schedule, gradient norm clipped to 2, no
/// weight decay or augmentation, and the token term weighted 5.
pub fn overfit_run() -> RunConfig {
    let mut run = RunConfig {
        model: ModelConfig::default(),
        steps: Some(500),
        base_lr: 1e-3,
        weight_decay: 0.0,
        grad_clip: Some(2.0),
        schedule: Schedule::Cosine,
        batch_size: 64,
        augment: false,
        ..RunConfig::default()
    };
    run.model.loss_weights.token = 5.0;
    run
}

/// One row of the ablation report.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Variants of `base`: full model, no frequency branch, no forgery-aware selection.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut no_freq = base.clone();
    no_freq.model.use_frequency = false;
    let mut no_sel = base.clone();
    no_sel.model.use_selection = false;
    vec![
        ("full".into(), base.clone()),
        ("no-frequency".into(), no_freq),
        ("no-selection".into(), no_sel),
    ]
}

pub fn run_ablations<T: Scalar>(
    variants: &[(String, RunConfig)],
    data: &Dataset,
    mut on_step: impl FnMut(&str, &StepStats),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|(name, run)| {
            let (trainer, ev) = train_and_evaluate::<T>(run, data, |s| on_step(name, s))?;
            let losses = trainer.losses();
            Ok(AblationRow {
                name: name.clone(),
                initial_loss: losses.first().copied().unwrap_or(f64::NAN),
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
                report: ev.report,
            })
        })
        .collect()
}

/// CSV with `variant`, `initial_loss` and `final_loss` columns ahead of the report columns.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,initial_loss,final_loss,{}\n", EvalReport::COLUMNS.join(","));
    for r in rows {
        let cells: Vec<String> = r
            .report
            .values()
            .iter()
            .map(|v| v.map_or(String::new(), |x| format!("{x:.4}")))
            .collect();
        out.push_str(&format!("{},{:.6},{:.6},{}\n", r.name, r.initial_loss, r.final_loss, cells.join(",")));
    }
    out
}

/// Side-by-side table of the headline numbers.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut out = format!(
        "{:<14} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "loss0", "loss", "auc", "acc", "map", "iou_m", "tok_f1"
    );
    for r in rows {
        let p = &r.report;
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>8} {:>8.2} {:>8} {:>8} {:>8.2}\n",
            r.name,
            r.initial_loss,
            r.final_loss,
            cell(p.auc),
            p.acc,
            cell(p.map),
            cell(p.iou_m),
            p.token_f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, synthesize, SyntheticConfig};

    fn tiny() -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 6,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn loading_from_disk_matches_the_in_memory_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_synthetic(&tiny(), dir.path()).unwrap();
        let disk = Dataset::load(&dir.path().join("manifest.jsonl"), None, Exec::Sequential).unwrap();
        let mem = Dataset::from_corpus(&corpus);
        assert_eq!(disk.records, mem.records);
        assert_eq!(disk.vocab, mem.vocab);
        for (a, b) in disk.images.iter().zip(&mem.images) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn empty_manifest_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(Dataset::load(&p, None, Exec::Sequential), Err(Error::Input(_))));
    }

    #[test]
    fn short_ablation_sweep_reports_every_variant() {
        let data = Dataset::from_corpus(&synthesize(&tiny()).unwrap());
        let mut base = overfit_run();
        base.steps = Some(2);
        base.batch_size = 3;
        base.augment = true;
        let rows = run_ablations::<f32>(&ablation_variants(&base), &data, |_, _| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.final_loss.is_finite()));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(ablation_table(&rows).contains("no-selection"));
    }
}
