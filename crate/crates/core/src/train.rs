//! Training step, epoch loop and evaluation over any [`Segmenter`].

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::decoder::{DadModel, ModelConfig};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{evaluate_pair, GrayMap, MetricReport};
use crate::nn::{Mode, ParamId, ParamStore, Session};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::{math, Error, Result, Tensor};

/// One image `[1, 3, H, W]` with its binary mask `[1, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

/// Anything that maps an image batch to a list of logit maps, coarse to fine.
/// The last map is the prediction.
pub trait Segmenter {
    fn predict_maps(&self, image: &Tensor, mode: Mode) -> Result<Vec<Tensor>>;
}

/// A model with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub model: DadModel,
    pub store: ParamStore,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = DadModel::new(config, &mut store)?;
        Ok(Self { model, store })
    }
}

impl Segmenter for Network {
    fn predict_maps(&self, image: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let s = Session::new(&self.store, mode, false);
        let out = self.model.forward(&s, &Var::constant(image.clone()))?;
        Ok(out.maps.iter().map(|m| m.value().clone()).collect())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub per_map: Vec<f64>,
    /// Learnable tensors that received a gradient with a nonzero entry, out of `learnable`.
    pub nonzero_grads: usize,
    pub learnable: usize,
    /// The same count taken over individual scalars.
    pub nonzero_grad_scalars: usize,
    pub learnable_scalars: usize,
    pub grads_finite: bool,
}

/// Forward, backward and gradients without touching the parameters.
pub fn compute_gradients(
    net: &Network,
    images: &Tensor,
    masks: &Tensor,
    loss: &LossConfig,
) -> Result<(StepReport, Vec<(ParamId, Tensor)>, Vec<(ParamId, Tensor)>)> {
    let s = Session::train(&net.store);
    let out = net.model.forward(&s, &Var::constant(images.clone()))?;
    let l = total_loss(&out, masks, loss)?;
    let grads = l.total.backward();
    let pg = s.param_grads(&grads);
    let updates = s.take_updates();
    let report = StepReport {
        loss: l.total.value().item(),
        per_map: l.per_map,
        nonzero_grads: pg.iter().filter(|(_, g)| g.data().iter().any(|&v| v != 0.0)).count(),
        learnable: net.store.learnable().count(),
        nonzero_grad_scalars: pg.iter().map(|(_, g)| g.data().iter().filter(|&&v| v != 0.0).count()).sum(),
        learnable_scalars: net.store.learnable_count(),
        grads_finite: pg.iter().all(|(_, g)| g.is_finite()),
    };
    Ok((report, pg, updates))
}

/// One Adam step on a batch; running statistics are written back as well.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    images: &Tensor,
    masks: &Tensor,
    loss: &LossConfig,
    lr: f64,
) -> Result<StepReport> {
    let (report, grads, updates) = compute_gradients(net, images, masks, loss)?;
    if !report.loss.is_finite() || !report.grads_finite {
        return Err(Error::Validation("non-finite loss or gradient".into()));
    }
    adam.step(&mut net.store, &grads, lr)?;
    for (id, v) in updates {
        *net.store.get_mut(id) = v;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 5,
            lr: 1e-4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

/// Epoch loop with per-epoch shuffling and the step schedule.
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub adam: Adam,
    pub schedule: LrSchedule,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: Vec<StepReport>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        config.loss.validate()?;
        Ok(Self {
            adam: Adam::new(config.adam),
            schedule: LrSchedule::new(config.lr),
            net,
            config,
        })
    }

    pub fn train_epoch(&mut self, samples: &[Sample], epoch: usize) -> Result<EpochReport> {
        if samples.is_empty() {
            return Err(Error::Validation("no training samples".into()));
        }
        let lr = self.schedule.lr(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        // seeded per epoch so a resumed run sees the same order
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| samples[i].image.clone()).collect();
            let masks: Vec<Tensor> = chunk.iter().map(|&i| samples[i].mask.clone()).collect();
            let (images, masks) = (Tensor::cat_batch(&images)?, Tensor::cat_batch(&masks)?);
            steps.push(train_step(
                &mut self.net,
                &mut self.adam,
                &images,
                &masks,
                &self.config.loss,
                lr,
            )?);
        }
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        Ok(EpochReport {
            epoch,
            lr,
            mean_loss,
            steps,
        })
    }
}

/// Sigmoid of the last map of a `[1, 1, H, W]` prediction as a gray map.
pub fn probability_map(logits: &Tensor) -> Result<GrayMap> {
    let (b, c, h, w) = logits.dims4()?;
    if b != 1 || c != 1 {
        return Err(crate::error::shape_err!("expected a [1, 1, H, W] map, got {:?}", logits.shape()));
    }
    GrayMap::new(h, w, logits.data().iter().map(|&v| math::sigmoid(v)).collect())
}

/// Evaluate in inference mode, one image at a time.
pub fn evaluate(model: &dyn Segmenter, samples: &[Sample]) -> Result<MetricReport> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let maps = model.predict_maps(&s.image, Mode::Eval)?;
        let last = maps
            .last()
            .ok_or_else(|| Error::Validation("segmenter returned no maps".into()))?;
        let pred = probability_map(last)?;
        let (_, _, h, w) = s.mask.dims4()?;
        let gt = GrayMap::new(h, w, s.mask.data().to_vec())?;
        records.push(evaluate_pair(&s.id, &pred, &gt)?);
    }
    MetricReport::from_records(records)
}
