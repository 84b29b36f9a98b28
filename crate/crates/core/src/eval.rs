//! Deterministic evaluation over a sample set: per-sample predictions plus
//! the aggregate report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::heads::Predictions;
use crate::metrics::EvalReport;
use crate::model::{Model, Sample};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub binary_score: f64,
    pub fg_scores: [f64; 4],
    /// Argmax-confidence grounding box, cxcywh.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub box_conf: f64,
    /// One score per content token of the caption.
    pub token_scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(id: &str, p: &Predictions, content_len: usize) -> Self {
        let (bbox, box_conf) = p.best_box().unwrap_or(([0.0; 4], 0.0));
        let mut token_scores = p.token_scores();
        token_scores.truncate(content_len);
        PredictionRecord {
            id: id.to_string(),
            binary_score: p.binary_score(),
            fg_scores: p.fg_scores(),
            bbox,
            box_conf,
            token_scores,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

impl Evaluation {
    pub fn predictions_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.predictions {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn predict_all<T: Scalar>(model: &Model, store: &ParamStore<T>, samples: &[Sample<T>], exec: Exec) -> Result<Vec<Predictions>> {
    exec.map(samples, |s| model.predict(store, &s.image, &s.tokens))
        .into_iter()
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, samples: &[Sample<T>], exec: Exec) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Input("empty manifest: nothing to evaluate".into()));
    }
    let preds = predict_all(model, store, samples, exec)?;
    let truths: Vec<_> = samples.iter().map(|s| s.truth.clone()).collect();
    let report = EvalReport::from_predictions(&preds, &truths)?;
    let predictions = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| PredictionRecord::new(&s.id, p, s.tokens.content_len()))
        .collect();
    Ok(Evaluation { report, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{build_samples, synthesize, SyntheticConfig};

    fn setup() -> (ModelConfig, Vec<Sample<f64>>) {
        let cfg = ModelConfig {
            dim: 16,
            heads: 2,
            image_depth: 1,
            text_depth: 1,
            freq_depth: 1,
            decoder_depth: 1,
            image_size: 16,
            patch_size: 8,
            max_text_len: 8,
            vocab_size: 24,
            ..ModelConfig::default()
        };
        let corpus = synthesize(&SyntheticConfig {
            n_samples: 10,
            image_size: 16,
            vocab_size: 24,
            max_words: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let images: Vec<_> = corpus.images.iter().map(|p| p.to_tensor()).collect();
        let samples = build_samples(&corpus.records, &images, &corpus.vocab, &cfg, None, Exec::Sequential).unwrap();
        (cfg, samples)
    }

    #[test]
    fn repeated_evaluation_is_identical() {
        let (cfg, samples) = setup();
        let (model, store) = Model::init::<f64>(&cfg, 3).unwrap();
        let a = evaluate(&model, &store, &samples, Exec::Parallel).unwrap();
        let b = evaluate(&model, &store, &samples, Exec::Sequential).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.predictions_jsonl().unwrap(), b.predictions_jsonl().unwrap());
    }

    #[test]
    fn prediction_lines_follow_the_schema() {
        let (cfg, samples) = setup();
        let (model, store) = Model::init::<f64>(&cfg, 4).unwrap();
        let ev = evaluate(&model, &store, &samples, Exec::Sequential).unwrap();
        let text = ev.predictions_jsonl().unwrap();
        assert_eq!(text.lines().count(), samples.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "binary_score", "fg_scores", "box", "box_conf", "token_scores"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(
            first["token_scores"].as_array().unwrap().len(),
            samples[0].tokens.content_len()
        );
    }

    #[test]
    fn empty_set_is_an_error() {
        let (cfg, _) = setup();
        let (model, store) = Model::init::<f64>(&cfg, 5).unwrap();
        assert!(matches!(evaluate(&model, &store, &[], Exec::Sequential), Err(Error::Input(_))));
    }
}
