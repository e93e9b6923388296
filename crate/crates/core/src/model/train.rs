use rand::seq::SliceRandom;
use rand::Rng;

use crate::datastore::GroundingSample;
use crate::error::{Error, Result};
use crate::moment_map::Proposal;
use crate::numerics::Real;
use crate::rca::{frame_rate_compatible, rca_augment, AugmentedSample, RcaConfig};
use crate::rng::{stream, SeededRng};

use super::loss::{bce_loss_and_grad, scaled_iou_targets};
use super::net::{GroundingModel, ModelConfig};

const SHUFFLE_STREAM: u64 = 2;
const RCA_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps (one sample each) whose gradients are averaged per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub rca_probability: f64,
    pub rca: RcaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 1,
            learning_rate: 0.05,
            momentum: 0.9,
            t_min: 0.3,
            t_max: 0.7,
            rca_probability: 0.5,
            rca: RcaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..=1.0).contains(&self.t_min)
            && (0.0..=1.0).contains(&self.t_max)
            && self.t_min < self.t_max
            && (0.0..=1.0).contains(&self.rca_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("train config {self:?}")))
        }
    }
}

/// What the loop is about to train on.
pub struct StepInput<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Index into the training set of the scheduled sample.
    pub index: usize,
    pub samples: &'a [GroundingSample],
}

/// Reported to the observer after every step.
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    pub index: usize,
    pub loss: f64,
    pub augmented: Option<&'a AugmentedSample>,
}

/// Decides, per step, whether the scheduled sample is replaced by an
/// augmented one.
pub trait StepSampler {
    fn augment(&mut self, input: &StepInput) -> Result<Option<AugmentedSample>>;
}

/// Never augments and never touches an rng.
pub struct PlainSampler;

impl StepSampler for PlainSampler {
    fn augment(&mut self, _: &StepInput) -> Result<Option<AugmentedSample>> {
        Ok(None)
    }
}

/// Random concatenation with probability `probability`, partner drawn
/// uniformly among the other frame-rate-compatible samples. When no
/// partner exists or no offsets fit, the plain sample is used and counted.
pub struct RcaSampler {
    pub probability: f64,
    pub config: RcaConfig,
    pub fallbacks: usize,
    rng: SeededRng,
}

impl RcaSampler {
    pub fn new(probability: f64, config: RcaConfig, rng: SeededRng) -> Self {
        RcaSampler {
            probability,
            config,
            fallbacks: 0,
            rng,
        }
    }
}

impl RcaSampler {
    /// The sampler's random stream in its current state.
    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }
}

impl StepSampler for RcaSampler {
    fn augment(&mut self, input: &StepInput) -> Result<Option<AugmentedSample>> {
        // p = 0 must not consume randomness so it matches the plain path.
        if self.probability <= 0.0 || !self.rng.gen_bool(self.probability) {
            return Ok(None);
        }
        let a = &input.samples[input.index];
        let partners: Vec<usize> = (0..input.samples.len())
            .filter(|&k| k != input.index && frame_rate_compatible(a, &input.samples[k], self.config.frame_rate_tol))
            .collect();
        let Some(&k) = partners.choose(&mut self.rng) else {
            self.fallbacks += 1;
            return Ok(None);
        };
        match rca_augment(a, &input.samples[k], &mut self.rng, &self.config) {
            Ok(aug) => Ok(Some(aug)),
            Err(Error::InfeasibleLengths { .. }) => {
                self.fallbacks += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

pub struct TrainOutcome {
    pub model: GroundingModel<f32>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub augmented_steps: usize,
}

/// Trains with the sampler implied by `config.rca_probability`.
pub fn train(samples: &[GroundingSample], model_config: ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut sampler = RcaSampler::new(config.rca_probability, config.rca, stream(config.seed, RCA_STREAM));
    train_with(samples, model_config, config, &mut sampler, |_| {})
}

pub fn train_with<S, F>(
    samples: &[GroundingSample],
    model_config: ModelConfig,
    config: &TrainConfig,
    sampler: &mut S,
    mut observer: F,
) -> Result<TrainOutcome>
where
    S: StepSampler + ?Sized,
    F: FnMut(&StepRecord),
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set is empty"));
    }
    let mut model = GroundingModel::<f32>::init(model_config, config.seed)?;
    let mut velocity = model.zeros_like();
    let mut accum = model.zeros_like();
    let mut pending = 0usize;
    let mut order_rng = stream(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut augmented_steps = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (step, &index) in order.iter().enumerate() {
            let input = StepInput {
                epoch,
                step,
                index,
                samples,
            };
            let aug = sampler.augment(&input)?;
            let owned;
            let sample = match &aug {
                Some(a) => {
                    augmented_steps += 1;
                    owned = a.to_sample();
                    &owned
                }
                None => &samples[index],
            };
            let pass = model.forward(&sample.features, &sample.query.embedding)?;
            let n = sample.n_clips();
            let targets: Vec<f32> = scaled_iou_targets(
                n,
                Proposal::new(sample.gt_start, sample.gt_end)?,
                config.t_min,
                config.t_max,
            )?
            .into_iter()
            .map(|t| t as f32)
            .collect();
            let (loss, dlogits) = bce_loss_and_grad(&pass.scores, &targets, &pass.map.mask)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("sample {}", sample.id()),
                });
            }
            total += loss;
            let grads = model.backward(&pass, &dlogits)?;
            for (a, g) in accum.tensors_mut().into_iter().zip(grads.tensors()) {
                a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += *g);
            }
            pending += 1;
            observer(&StepRecord {
                epoch,
                step,
                index,
                loss,
                augmented: aug.as_ref(),
            });
            let last = epoch + 1 == config.epochs && step + 1 == order.len();
            if pending == config.batch_size || last {
                apply_update(&mut model, &mut velocity, &mut accum, pending, config)?;
                pending = 0;
            }
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        augmented_steps,
    })
}

/// `v = μ v + g / count; p -= lr v`, then clears the accumulator.
fn apply_update(
    model: &mut GroundingModel<f32>,
    velocity: &mut GroundingModel<f32>,
    accum: &mut GroundingModel<f32>,
    count: usize,
    config: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = model.to_param_set().iter().map(|(n, _)| n.to_string()).collect();
    let (mu, lr, inv) = (config.momentum as f32, config.learning_rate as f32, 1.0 / count as f32);
    let tensors = model.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(accum.tensors_mut());
    for (k, ((p, v), g)) in tensors.enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(names[k].clone()));
        }
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data_mut()) {
            *v = mu * *v + *g * inv;
            *p -= lr * *v;
            *g = 0.0;
        }
    }
    Ok(())
}
