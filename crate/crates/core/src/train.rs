//! AdamW with decoupled weight decay, a cosine learning-rate schedule and a
//! batch trainer that computes per-sample gradients in parallel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Schedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::heads::LossTerms;
use crate::model::{Model, Sample};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient {i}: shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (x, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                let xv = x.f64();
                *x = T::c(xv - lr * wd * xv - lr * update);
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` (0-based).
pub fn learning_rate(run: &RunConfig, step: usize, total: usize) -> f64 {
    match run.schedule {
        Schedule::Constant => run.base_lr,
        Schedule::Cosine if total <= 1 => run.base_lr,
        Schedule::Cosine => 0.5 * run.base_lr * (1.0 + (PI * step as f64 / total as f64).cos()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Batch means.
    pub loss: f64,
    pub terms: LossTerms<f64>,
}

/// Batch-mean loss and gradients. Per-sample work runs under `exec`; the
/// reduction is always in sample order.
pub fn batch_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &[Sample<T>],
    exec: Exec,
) -> Result<(f64, LossTerms<f64>, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_sample = exec.map(batch, |s| model.sample_grad(store, s));
    let mut grads: Vec<Tensor<T>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    let mut terms = LossTerms::<f64>::default();
    for r in per_sample {
        let r = r?;
        loss += r.total;
        terms = terms.zip(&r.terms, |a, b| a + b);
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.add_assign(g);
        }
    }
    let b = batch.len() as f64;
    for g in &mut grads {
        g.scale_assign(T::c(1.0 / b));
    }
    Ok((loss / b, terms.map(|x| x / b), grads))
}

/// Scales `grads` down so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// One optimizer step on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut AdamW,
    batch: &[Sample<T>],
    lr: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
    exec: Exec,
) -> Result<(f64, LossTerms<f64>)> {
    let (loss, terms, mut grads) = batch_gradients(model, store, batch, exec)?;
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.step(store, &grads, lr, weight_decay)?;
    Ok((loss, terms))
}

/// Owns parameters and optimizer state for one run.
pub struct Trainer<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub opt: AdamW,
    pub run: RunConfig,
    pub history: Vec<StepStats>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let (model, store) = Model::init::<T>(&run.model, run.seed)?;
        Ok(Self::from_parts(model, store, run))
    }

    pub fn from_parts(model: Model, store: ParamStore<T>, run: &RunConfig) -> Self {
        Trainer {
            opt: AdamW::new(&store),
            model,
            store,
            run: run.clone(),
            history: Vec::new(),
        }
    }

    /// Runs the configured number of steps. `epoch_data(e)` supplies the
    /// samples for epoch `e` (so callers can re-augment); each epoch is
    /// shuffled from the run seed and cut into batches.
    pub fn fit(
        &mut self,
        n_samples: usize,
        mut epoch_data: impl FnMut(usize) -> Result<Vec<Sample<T>>>,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<()> {
        if n_samples == 0 {
            return Err(Error::Input("no training samples".into()));
        }
        let total = self.run.total_steps(n_samples);
        let bs = self.run.batch_size.min(n_samples);
        let shuffle = Rng::new(self.run.seed).fork(0x5eed);
        let mut step = 0;
        let mut epoch = 0;
        while step < total {
            let data = epoch_data(epoch)?;
            if data.len() != n_samples {
                return Err(Error::Input(format!("epoch {epoch}: {} samples, expected {n_samples}", data.len())));
            }
            let mut order: Vec<usize> = (0..n_samples).collect();
            shuffle.fork(epoch as u64).shuffle(&mut order);
            for chunk in order.chunks(bs) {
                if step >= total {
                    break;
                }
                let batch: Vec<Sample<T>> = chunk.iter().map(|&i| data[i].clone()).collect();
                let lr = learning_rate(&self.run, step, total);
                let (loss, terms) = train_step(
                    &self.model,
                    &mut self.store,
                    &mut self.opt,
                    &batch,
                    lr,
                    self.run.weight_decay,
                    self.run.grad_clip,
                    self.run.exec,
                )
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                    e => e,
                })?;
                let stats = StepStats { step, lr, loss, terms };
                on_step(&stats);
                self.history.push(stats);
                step += 1;
            }
            epoch += 1;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.loss).collect()
    }
}

/// Means of consecutive non-overlapping windows (a trailing partial window is dropped).
pub fn window_means(xs: &[f64], window: usize) -> Vec<f64> {
    xs.chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{build_samples, synthesize, SyntheticConfig};

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![
            Tensor::<f64>::new(&[2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(&[1], vec![4.0]).unwrap(),
        ];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // loss = ½‖θ − c‖², gradient θ − c
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store);
        let c = [0.5, 0.0];
        let g: Vec<f64> = store.get(w).data().iter().zip(c).map(|(x, c)| x - c).collect();
        opt.step(&mut store, &[Tensor::new(&[2], g.clone()).unwrap()], 0.1, 0.0).unwrap();
        for (k, &x0) in [1.0, -2.0].iter().enumerate() {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let m = 0.1 * g[k];
            let v = 0.001 * g[k] * g[k];
            let expected = x0 - 0.1 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
            assert!((store.get(w).data()[k] - expected).abs() < 1e-15);
        }
        // second step with the same gradient
        let x1 = store.get(w).data().to_vec();
        let g2: Vec<f64> = x1.iter().zip(c).map(|(x, c)| x - c).collect();
        opt.step(&mut store, &[Tensor::new(&[2], g2.clone()).unwrap()], 0.1, 0.0).unwrap();
        for k in 0..2 {
            let m = 0.9 * 0.1 * g[k] + 0.1 * g2[k];
            let v = 0.999 * 0.001 * g[k] * g[k] + 0.001 * g2[k] * g2[k];
            let mh = m / (1.0 - 0.81);
            let vh = v / (1.0 - 0.999f64.powi(2));
            let expected = x1[k] - 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(w).data()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn decoupled_decay_and_zero_lr() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store);
        let zero = [Tensor::new(&[1], vec![0.0]).unwrap()];
        opt.step(&mut store, &zero, 0.1, 0.5).unwrap();
        assert!((store.tensors()[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let before = store.clone();
        opt.step(&mut store, &[Tensor::new(&[1], vec![3.0]).unwrap()], 0.0, 0.0).unwrap();
        assert_eq!(store.tensors(), before.tensors());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let run = RunConfig {
            base_lr: 1.0,
            ..RunConfig::default()
        };
        assert_eq!(learning_rate(&run, 0, 10), 1.0);
        assert!((learning_rate(&run, 5, 10) - 0.5).abs() < 1e-15);
        assert!(learning_rate(&run, 9, 10) < 0.03);
    }

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                dim: 16,
                heads: 2,
                image_depth: 1,
                text_depth: 1,
                freq_depth: 1,
                decoder_depth: 1,
                image_size: 16,
                patch_size: 8,
                grounding_queries: 2,
                max_text_len: 8,
                vocab_size: 24,
                ..ModelConfig::default()
            },
            steps: Some(50),
            base_lr: 1e-3,
            batch_size: 4,
            augment: false,
            ..RunConfig::default()
        }
    }

    fn tiny_samples(run: &RunConfig) -> Vec<Sample<f64>> {
        let corpus = synthesize(&SyntheticConfig {
            n_samples: 4,
            image_size: 16,
            vocab_size: 24,
            max_words: 8,
            seed: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let images: Vec<_> = corpus.images.iter().map(|p| p.to_tensor()).collect();
        build_samples(&corpus.records, &images, &corpus.vocab, &run.model, None, Exec::Sequential).unwrap()
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let run = tiny_run();
        let samples = tiny_samples(&run);
        let mut tr = Trainer::<f64>::new(&run).unwrap();
        tr.fit(samples.len(), |_| Ok(samples.clone()), |_| {}).unwrap();
        let l = tr.losses();
        assert_eq!(l.len(), 50);
        let w = window_means(&l, 10);
        assert!(w.windows(2).all(|p| p[1] < p[0]), "{w:?}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let run = tiny_run();
        let samples = tiny_samples(&run);
        let (model, store) = Model::init::<f64>(&run.model, 1).unwrap();
        let a = batch_gradients(&model, &store, &samples, Exec::Sequential).unwrap();
        let b = batch_gradients(&model, &store, &samples, Exec::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.2, b.2);
        assert!(batch_gradients(&model, &store, &[], Exec::Sequential).is_err());
    }
}
