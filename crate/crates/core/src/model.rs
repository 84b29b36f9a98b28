//! The full detector: encoders → frequency encoder → FAMM → unified decoder → heads.

use crate::backbones::{ImageEncoder, TextEncoder, TokenSequence};
use crate::config::ModelConfig;
use crate::decoder::{DecoderInputs, DecoderOutput, UnifiedDecoder};
use crate::error::{Error, Result};
use crate::famm::{location_encoding, select, Famm, LevelVars, Selection};
use crate::frequency::FrequencyEncoder;
use crate::graph::{Graph, Var};
use crate::heads::{total_loss, GroundTruth, HeadVars, Heads, LossSettings, LossTerms, Predictions};
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// One preprocessed training/evaluation example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    /// `[3, S, S]` in [0, 1]
    pub image: Tensor<T>,
    pub tokens: TokenSequence,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    /// Absent when the frequency branch is switched off.
    pub freq: Option<FrequencyEncoder>,
    pub famm: Famm,
    pub decoder: UnifiedDecoder,
    pub heads: Heads,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub heads: HeadVars,
    pub levels: Vec<LevelVars>,
    pub selection: Selection,
    pub decoder: DecoderOutput,
    pub freq: Option<Var>,
}

/// Values of one sample's loss and parameter gradients.
#[derive(Clone, Debug)]
pub struct SampleGrad<T> {
    pub total: f64,
    pub terms: LossTerms<f64>,
    /// One tensor per parameter, in store order.
    pub grads: Vec<Tensor<T>>,
}

impl Model {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            image: ImageEncoder::new(pb, cfg)?,
            text: TextEncoder::new(pb, cfg)?,
            freq: if cfg.use_frequency {
                Some(FrequencyEncoder::new(pb, cfg)?)
            } else {
                None
            },
            famm: Famm::new(pb, cfg)?,
            decoder: UnifiedDecoder::new(pb, cfg)?,
            heads: Heads::new(pb, cfg.dim),
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let model = Model::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((model, store))
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.cfg.loss_weights,
            matching: self.cfg.match_weights,
            focal_gamma: self.cfg.focal_gamma,
            focal_alpha: self.cfg.focal_alpha,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: Var, tokens: &TokenSequence) -> Result<Forward> {
        let img = self.image.forward(g, image)?;
        let txt = self.text.forward(g, tokens)?;
        let text_feats = g.concat_rows(&[txt.cls, txt.seq])?;
        let text_valid: Vec<bool> = tokens.pad.iter().map(|&p| !p).collect();

        let freq = match &self.freq {
            Some(f) => Some(f.forward(g, image)?),
            None => None,
        };
        let levels = self.famm.pyramid.forward(g, img.seq)?;
        let selection = select(g, &levels, &self.cfg.effective_rates())?;
        let code = g.constant(location_encoding(&selection.locations, self.cfg.grid(), self.cfg.dim)?);
        let gathered = g.add(selection.gathered, code)?;
        let visual = match freq {
            Some(f) => self.famm.mutual.forward(g, f, gathered)?,
            None => gathered,
        };
        let decoder = self.decoder.forward(
            g,
            DecoderInputs {
                visual,
                text: text_feats,
                text_valid: &text_valid,
                img_cls: img.cls,
            },
        )?;
        let heads = self.heads.forward(g, &decoder)?;
        Ok(Forward {
            heads,
            levels,
            selection,
            decoder,
            freq,
        })
    }

    /// Total loss node and its terms for one sample.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, fwd: &Forward, truth: &GroundTruth) -> Result<(Var, LossTerms<Var>)> {
        total_loss(g, &fwd.heads, &fwd.levels, truth, &self.loss_settings())
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>, tokens: &TokenSequence) -> Result<Predictions> {
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let fwd = self.forward(&mut g, x, tokens)?;
        Ok(Predictions::from_graph(&g, &fwd.heads))
    }

    /// Loss values only (no backward sweep).
    pub fn sample_loss<T: Scalar>(&self, store: &ParamStore<T>, s: &Sample<T>) -> Result<(f64, LossTerms<f64>)> {
        let mut g = Graph::new(store);
        let x = g.constant(s.image.clone());
        let fwd = self.forward(&mut g, x, &s.tokens)?;
        let (total, terms) = self.loss(&mut g, &fwd, &s.truth)?;
        Ok((g.value(total).data()[0].f64(), terms.map(|v| g.value(v).data()[0].f64())))
    }

    /// Loss and gradients with respect to every parameter. A non-finite loss
    /// is reported with the first offending term.
    pub fn sample_grad<T: Scalar>(&self, store: &ParamStore<T>, s: &Sample<T>) -> Result<SampleGrad<T>> {
        let mut g = Graph::new(store);
        let x = g.constant(s.image.clone());
        let fwd = self.forward(&mut g, x, &s.tokens)?;
        let (total, terms) = self.loss(&mut g, &fwd, &s.truth)?;
        let terms = terms.map(|v| g.value(v).data()[0].f64());
        let tv = g.value(total).data()[0].f64();
        if !tv.is_finite() {
            let bad = terms
                .named()
                .iter()
                .find(|(_, v)| !v.is_finite())
                .map_or("total", |(n, _)| *n);
            return Err(Error::NonFinite(format!("{bad} loss on sample {}", s.id)));
        }
        let mut grads = g.backward(total)?;
        let grads = (0..store.len())
            .map(|i| {
                let v = Var(i);
                grads.take(v).unwrap_or_else(|| Tensor::zeros(store.get(v).shape()))
            })
            .collect();
        Ok(SampleGrad {
            total: tv,
            terms,
            grads,
        })
    }

    /// Gradient of the binary-fake logit with respect to the input pixels, `[3, S, S]`.
    pub fn input_gradient<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>, tokens: &TokenSequence) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, x, tokens)?;
        let logit = g.sum(fwd.heads.binary_logit);
        let grads = g.backward(logit)?;
        Ok(grads.get_or_zeros(x, image.shape()))
    }
}
