//! Training loop: seeded shuffling and augmentation, multi-task loss,
//! momentum SGD on a stepwise learning-rate schedule.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_augmentation, AugmentParams};
use crate::config::RunConfig;
use crate::dataio::{subsample_mask, Scene};
use crate::detect::{PostprocessConfig, PriorBox};
use crate::error::{Error, Result};
use crate::evalkit::{EvalAccumulator, MetricsReport};
use crate::losses::LossReport;
use crate::model::{batch_targets, image_tensor, predict, Model, ModelConfig, SEG_STRIDE};
use crate::ndgrad::{ParamStore, SgdMomentum};
use crate::nn::Forward;

/// Model, parameters and optimizer state of one run. Training is in `f32`.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    optimizer: SgdMomentum<f32>,
    priors: Vec<PriorBox>,
    step: usize,
}

/// What the loop reports after every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::build(&ModelConfig::for_preset(config.preset), &mut store, config.seed)?;
        let (w, h) = config.input_size;
        let priors = model.priors(w, h)?;
        Ok(Self {
            optimizer: SgdMomentum::new(config.momentum as f32),
            config,
            model,
            store,
            priors,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One forward/backward/update on `batch`; fails before updating if any
    /// loss component is not finite.
    pub fn train_step(&mut self, batch: &[&Scene], lr: f64) -> Result<LossReport> {
        let (w, h) = self.config.input_size;
        for s in batch {
            if (s.width(), s.height()) != (w, h) {
                return Err(Error::ShapeMismatch {
                    op: "train_step input",
                    lhs: vec![h, w],
                    rhs: vec![s.height(), s.width()],
                });
            }
        }
        let targets = batch_targets(batch, &self.priors)?;
        let images: Vec<&RgbImage> = batch.iter().map(|s| &s.image).collect();
        let tensor = image_tensor::<f32>(&images)?;
        let mut f = Forward::new(&self.store, true);
        let (_, losses) = self
            .model
            .losses(&mut f, tensor, &targets, self.config.w_seg, self.config.block_gradients)?;
        let report = losses.report(&f, self.config.w_seg);
        report.check_finite()?;
        let (graph, norm_stats) = f.finish();
        let grads = graph.backward(losses.total)?;
        let param_grads = graph.param_grads(&grads);
        norm_stats.commit(&mut self.store);
        self.optimizer.step(&mut self.store, &param_grads, lr as f32);
        self.step += 1;
        Ok(report)
    }

    /// Runs the configured epochs over `scenes`. `on_step` sees every step;
    /// `checkpoint` is called every `save_every` steps and at the end.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        mut on_step: impl FnMut(&StepInfo) -> Result<()>,
        mut checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        'epochs: for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let lr = self.config.lr_at(epoch);
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break 'epochs;
                }
                let augmented: Vec<Scene>;
                let batch: Vec<&Scene> = if self.config.augment {
                    augmented = chunk
                        .iter()
                        .map(|&i| apply_augmentation(&scenes[i], &AugmentParams::draw(rng.random())))
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                } else {
                    chunk.iter().map(|&i| &scenes[i]).collect()
                };
                let loss = self.train_step(&batch, lr)?;
                on_step(&StepInfo {
                    step: self.step,
                    epoch,
                    lr,
                    loss,
                })?;
                if self.config.save_every > 0 && self.step.is_multiple_of(self.config.save_every) {
                    checkpoint(self)?;
                }
            }
        }
        checkpoint(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }
}

/// Eval-mode metrics of `model` over `scenes`, processed in batches.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, scenes: &[Scene], batch_size: usize) -> Result<MetricsReport> {
    let mut acc = EvalAccumulator::new(model.config.detect.num_classes, model.config.seg.num_classes);
    let post = PostprocessConfig::default();
    for (b, chunk) in scenes.chunks(batch_size.max(1)).enumerate() {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let preds = predict(model, store, &images, &post)?;
        for (k, (scene, pred)) in chunk.iter().zip(preds).enumerate() {
            let gt_mask = subsample_mask(&scene.mask, SEG_STRIDE)?;
            acc.add_image(
                b * batch_size.max(1) + k,
                &pred.detections,
                &scene.boxes,
                Some((pred.mask.as_raw(), gt_mask.as_raw())),
            )?;
        }
    }
    Ok(acc.finish())
}
