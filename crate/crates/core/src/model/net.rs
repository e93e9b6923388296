use rand::Rng;

use crate::aggregators::{aggregate_map, aggregate_map_backward, Aggregator, AggregatorCache, AggregatorKind};
use crate::datastore::{ClipFeatureSequence, GroundingSample};
use crate::error::{Error, Result};
use crate::moment_map::{MomentMap, Proposal};
use crate::numerics::{
    conv2d_masked, conv2d_masked_backward, grad_check_piecewise, GradCheckReport, dense_backward, l2_normalize, l2_normalize_backward,
    matvec_acc, sigmoid, ParamSet, Real, Tensor,
};
use crate::rng::stream;

use super::loss::{bce_loss_and_grad, scaled_iou_targets};
use super::ScoreMap;

/// Architecture of a [`GroundingModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub aggregator: AggregatorKind,
    /// Clip feature dimension `d`.
    pub clip_dim: usize,
    /// Query embedding dimension.
    pub query_dim: usize,
    /// Bi-LSTM hidden size (ignored for max-pool).
    pub hidden: usize,
    /// Channels of the fused map and of the hidden conv layers.
    pub channels: usize,
    /// Number of `kernel × kernel` conv layers before the 1×1 scoring layer.
    pub conv_layers: usize,
    pub kernel: usize,
}

impl ModelConfig {
    /// Defaults: `d_h = d`, and `c` equal to the aggregator output size.
    pub fn new(aggregator: AggregatorKind, clip_dim: usize, query_dim: usize) -> Self {
        let hidden = clip_dim;
        let channels = match aggregator {
            AggregatorKind::MaxPool => clip_dim,
            AggregatorKind::BiLstm => 2 * hidden,
        };
        ModelConfig {
            aggregator,
            clip_dim,
            query_dim,
            hidden,
            channels,
            conv_layers: 2,
            kernel: 3,
        }
    }

    pub fn aggregator_dim(&self) -> usize {
        match self.aggregator {
            AggregatorKind::MaxPool => self.clip_dim,
            AggregatorKind::BiLstm => 2 * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.clip_dim, self.query_dim, self.hidden, self.channels, self.kernel];
        if dims.contains(&0) || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("model config {self:?}")));
        }
        Ok(())
    }
}

/// `y = W x + b`, `W` of shape `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Dense<T> {
    fn xavier<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let mut w = Tensor::zeros(&[output, input]);
        w.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-a..a)));
        Dense {
            w,
            b: Tensor::zeros(&[output]),
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = self.b.data().to_vec();
        matvec_acc(&mut y, self.w.data(), x);
        y
    }
}

/// Masked convolution, kernel `[k, k, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    fn xavier<R: Rng>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let a = (6.0 / (k * k * (cin + cout)) as f64).sqrt();
        let mut kernel = Tensor::zeros(&[k, k, cin, cout]);
        kernel
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::lit(rng.gen_range(-a..a)));
        ConvLayer {
            kernel,
            bias: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingModel<T> {
    pub config: ModelConfig,
    pub aggregator: Aggregator<T>,
    pub query_proj: Dense<T>,
    pub moment_proj: Dense<T>,
    /// Hidden conv layers followed by the 1×1 scoring layer.
    pub convs: Vec<ConvLayer<T>>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct ForwardPass<T> {
    features: Vec<T>,
    query: Vec<T>,
    agg_cache: AggregatorCache<T>,
    pub map: MomentMap<T>,
    q_unit: Vec<T>,
    q_norm: T,
    m_units: Vec<T>,
    m_norms: Vec<T>,
    /// Input of every conv layer; `layer_inputs[0]` is the fused map.
    layer_inputs: Vec<Tensor<T>>,
    /// Sigmoid scores, zero at invalid cells.
    pub scores: Vec<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Fingerprint of the linear piece the pass landed on: ReLU signs,
    /// max-pool winners and which scores sit at the loss clamp.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for layer in &self.layer_inputs[1..] {
            layer.data().iter().for_each(|x| feed((*x > T::zero()) as u64));
        }
        if let AggregatorCache::MaxPool { argmax } = &self.agg_cache {
            argmax.iter().for_each(|a| feed(*a as u64));
        }
        let lo = T::lit(super::BCE_CLAMP);
        for s in &self.scores {
            feed((*s <= lo) as u64 * 2 + (*s >= T::one() - lo) as u64);
        }
        h
    }

    pub fn score_map(&self) -> Result<ScoreMap> {
        ScoreMap::new(
            self.map.mask.clone(),
            self.scores.iter().map(|v| v.as_f64()).collect(),
        )
    }
}

impl<T: Real> GroundingModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x1417);
        let aggregator = match config.aggregator {
            AggregatorKind::MaxPool => Aggregator::maxpool(config.clip_dim),
            AggregatorKind::BiLstm => Aggregator::bilstm(config.clip_dim, config.hidden, &mut rng),
        };
        let c = config.channels;
        let query_proj = Dense::xavier(config.query_dim, c, &mut rng);
        let moment_proj = Dense::xavier(config.aggregator_dim(), c, &mut rng);
        let mut convs: Vec<ConvLayer<T>> = (0..config.conv_layers)
            .map(|_| ConvLayer::xavier(config.kernel, c, c, &mut rng))
            .collect();
        convs.push(ConvLayer::xavier(1, c, 1, &mut rng));
        Ok(GroundingModel {
            config,
            aggregator,
            query_proj,
            moment_proj,
            convs,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |t: &Tensor<T>| t.zeros_like();
        GroundingModel {
            config: self.config.clone(),
            aggregator: self.aggregator.zeros_like(),
            query_proj: Dense {
                w: zero(&self.query_proj.w),
                b: zero(&self.query_proj.b),
            },
            moment_proj: Dense {
                w: zero(&self.moment_proj.w),
                b: zero(&self.moment_proj.b),
            },
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer {
                    kernel: zero(&l.kernel),
                    bias: zero(&l.bias),
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> GroundingModel<U> {
        GroundingModel {
            config: self.config.clone(),
            aggregator: self.aggregator.cast(),
            query_proj: Dense {
                w: self.query_proj.w.cast(),
                b: self.query_proj.b.cast(),
            },
            moment_proj: Dense {
                w: self.moment_proj.w.cast(),
                b: self.moment_proj.b.cast(),
            },
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// All parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.aggregator.tensors();
        v.extend([&self.query_proj.w, &self.query_proj.b, &self.moment_proj.w, &self.moment_proj.b]);
        for l in &self.convs {
            v.extend([&l.kernel, &l.bias]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.aggregator.tensors_mut();
        v.extend([
            &mut self.query_proj.w,
            &mut self.query_proj.b,
            &mut self.moment_proj.w,
            &mut self.moment_proj.b,
        ]);
        for l in &mut self.convs {
            v.extend([&mut l.kernel, &mut l.bias]);
        }
        v
    }

    pub fn to_param_set(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        // Names are unique by construction.
        self.aggregator.export("agg", &mut p).unwrap();
        p.insert("query_proj.w", self.query_proj.w.clone()).unwrap();
        p.insert("query_proj.b", self.query_proj.b.clone()).unwrap();
        p.insert("moment_proj.w", self.moment_proj.w.clone()).unwrap();
        p.insert("moment_proj.b", self.moment_proj.b.clone()).unwrap();
        for (k, l) in self.convs.iter().enumerate() {
            p.insert(format!("conv{k}.kernel"), l.kernel.clone()).unwrap();
            p.insert(format!("conv{k}.bias"), l.bias.clone()).unwrap();
        }
        p
    }

    pub fn from_param_set(config: ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let aggregator = Aggregator::import(config.aggregator, config.clip_dim, config.hidden, "agg", params)?;
        let dense = |name: &str, input: usize, output: usize| -> Result<Dense<T>> {
            Ok(Dense {
                w: params.expect(&format!("{name}.w"), &[output, input])?.clone(),
                b: params.expect(&format!("{name}.b"), &[output])?.clone(),
            })
        };
        let query_proj = dense("query_proj", config.query_dim, c)?;
        let moment_proj = dense("moment_proj", config.aggregator_dim(), c)?;
        let mut convs = Vec::new();
        for k in 0..=config.conv_layers {
            let (ks, cout) = if k < config.conv_layers { (config.kernel, c) } else { (1, 1) };
            convs.push(ConvLayer {
                kernel: params.expect(&format!("conv{k}.kernel"), &[ks, ks, c, cout])?.clone(),
                bias: params.expect(&format!("conv{k}.bias"), &[cout])?.clone(),
            });
        }
        let expected = 6 * usize::from(config.aggregator == AggregatorKind::BiLstm) + 4 + 2 * convs.len();
        if params.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors in parameter set, architecture has {expected}",
                params.len()
            )));
        }
        Ok(GroundingModel {
            config,
            aggregator,
            query_proj,
            moment_proj,
            convs,
        })
    }

    /// Full forward pass from clip features to scores.
    pub fn forward(&self, features: &ClipFeatureSequence, query: &[f32]) -> Result<ForwardPass<T>> {
        if features.dim() != self.config.clip_dim {
            return Err(Error::ShapeMismatch(format!(
                "clip dim {}, model expects {}",
                features.dim(),
                self.config.clip_dim
            )));
        }
        let feats: Vec<T> = features.data().iter().map(|v| T::lit(*v as f64)).collect();
        let (map, agg_cache) = aggregate_map(&feats, features.n_clips(), &self.aggregator)?;
        self.forward_map(feats, map, agg_cache, query)
    }

    fn forward_map(
        &self,
        features: Vec<T>,
        map: MomentMap<T>,
        agg_cache: AggregatorCache<T>,
        query: &[f32],
    ) -> Result<ForwardPass<T>> {
        let n = map.n();
        let c = self.config.channels;
        let a = self.config.aggregator_dim();
        if query.len() != self.config.query_dim {
            return Err(Error::ShapeMismatch(format!(
                "query dim {}, model expects {}",
                query.len(),
                self.config.query_dim
            )));
        }
        if map.channels() != a || map.data.shape()[..2] != [n, n] {
            return Err(Error::ShapeMismatch(format!(
                "moment map {:?}, model expects {a} channels",
                map.data.shape()
            )));
        }
        let q: Vec<T> = query.iter().map(|v| T::lit(*v as f64)).collect();
        let (q_unit, q_norm) = l2_normalize(&self.query_proj.apply(&q));

        let mut m_units = vec![T::zero(); n * n * c];
        let mut m_norms = vec![T::zero(); n * n];
        let mut fused = Tensor::zeros(&[n, n, c]);
        for cell in 0..n * n {
            if !map.mask.cells()[cell] {
                continue;
            }
            let m = &map.data.data()[cell * a..(cell + 1) * a];
            let (unit, norm) = l2_normalize(&self.moment_proj.apply(m));
            let f = &mut fused.data_mut()[cell * c..(cell + 1) * c];
            for k in 0..c {
                f[k] = q_unit[k] * unit[k];
            }
            m_units[cell * c..(cell + 1) * c].copy_from_slice(&unit);
            m_norms[cell] = norm;
        }

        let mut layer_inputs = vec![fused];
        let last = self.convs.len() - 1;
        for layer in &self.convs[..last] {
            let mut z = conv2d_masked(layer_inputs.last().unwrap(), &layer.kernel, &layer.bias, &map.mask)?;
            z.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
            layer_inputs.push(z);
        }
        let head = &self.convs[last];
        let logits = conv2d_masked(layer_inputs.last().unwrap(), &head.kernel, &head.bias, &map.mask)?;
        let scores = logits
            .data()
            .iter()
            .zip(map.mask.cells())
            .map(|(z, valid)| if *valid { sigmoid(*z) } else { T::zero() })
            .collect();
        Ok(ForwardPass {
            features,
            query: q,
            agg_cache,
            map,
            q_unit,
            q_norm,
            m_units,
            m_norms,
            layer_inputs,
            scores,
        })
    }

    /// Backpropagates `grad_logits` (gradient w.r.t. the pre-sigmoid scores)
    /// and returns parameter gradients shaped like `self`.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &[T]) -> Result<GroundingModel<T>> {
        let n = pass.map.n();
        let c = self.config.channels;
        let a = self.config.aggregator_dim();
        let mask = &pass.map.mask;
        let mut grads = self.zeros_like();

        let last = self.convs.len() - 1;
        let mut g = Tensor::from_vec(&[n, n, 1], grad_logits.to_vec())?;
        for k in (0..=last).rev() {
            let layer = &self.convs[k];
            let input = &pass.layer_inputs[k];
            let gl = &mut grads.convs[k];
            let mut gin = conv2d_masked_backward(input, &layer.kernel, mask, &g, &mut gl.kernel, &mut gl.bias)?;
            if k > 0 {
                // ReLU: the layer input is the previous layer's activation.
                for (gv, x) in gin.data_mut().iter_mut().zip(input.data()) {
                    if *x <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            g = gin;
        }

        let gf = g.data();
        let mut d_qunit = vec![T::zero(); c];
        let mut grad_map = Tensor::zeros(&[n, n, a]);
        for cell in 0..n * n {
            if !mask.cells()[cell] {
                continue;
            }
            let gcell = &gf[cell * c..(cell + 1) * c];
            let unit = &pass.m_units[cell * c..(cell + 1) * c];
            let mut d_unit = vec![T::zero(); c];
            for k in 0..c {
                d_qunit[k] += gcell[k] * unit[k];
                d_unit[k] = gcell[k] * pass.q_unit[k];
            }
            let d_proj = l2_normalize_backward(unit, pass.m_norms[cell], &d_unit);
            let m = &pass.map.data.data()[cell * a..(cell + 1) * a];
            let dm = dense_backward(
                m,
                self.moment_proj.w.data(),
                &d_proj,
                grads.moment_proj.w.data_mut(),
                grads.moment_proj.b.data_mut(),
            );
            grad_map.data_mut()[cell * a..(cell + 1) * a].copy_from_slice(&dm);
        }
        let d_qproj = l2_normalize_backward(&pass.q_unit, pass.q_norm, &d_qunit);
        dense_backward(
            &pass.query,
            self.query_proj.w.data(),
            &d_qproj,
            grads.query_proj.w.data_mut(),
            grads.query_proj.b.data_mut(),
        );
        aggregate_map_backward(
            &pass.features,
            n,
            &self.aggregator,
            &pass.agg_cache,
            &grad_map,
            &mut grads.aggregator,
        )?;
        Ok(grads)
    }

    /// Scaled-IoU BCE loss on one sample and its parameter gradients.
    pub fn loss_and_grad(&self, sample: &GroundingSample, t_min: f64, t_max: f64) -> Result<SampleGradient<T>> {
        let pass = self.forward(&sample.features, &sample.query.embedding)?;
        let targets: Vec<T> = scaled_iou_targets(
            sample.n_clips(),
            Proposal::new(sample.gt_start, sample.gt_end)?,
            t_min,
            t_max,
        )?
        .into_iter()
        .map(T::lit)
        .collect();
        let (loss, dlogits) = bce_loss_and_grad(&pass.scores, &targets, &pass.map.mask)?;
        Ok(SampleGradient {
            loss: loss.as_f64(),
            grads: self.backward(&pass, &dlogits)?,
            pattern: pass.activation_pattern(),
        })
    }

    pub fn score(&self, features: &ClipFeatureSequence, query: &[f32]) -> Result<ScoreMap> {
        self.forward(features, query)?.score_map()
    }

    /// Scores a single moment in isolation: a 1×1 map holding the aggregate
    /// of `clips`, so the conv stack sees no neighbouring proposals.
    pub fn score_moment(&self, clips: &[&[f32]], query: &[f32]) -> Result<f64> {
        let feats = ClipFeatureSequence::from_rows("moment", clips)?;
        let v = crate::aggregators::aggregate(clips, &self.aggregator)?;
        let map = MomentMap {
            data: Tensor::from_vec(&[1, 1, v.len()], v)?,
            mask: crate::moment_map::validity_mask(1)?,
        };
        let feats: Vec<T> = feats.data().iter().map(|v| T::lit(*v as f64)).collect();
        let cache = match &self.aggregator {
            Aggregator::MaxPool { .. } => AggregatorCache::MaxPool { argmax: Vec::new() },
            Aggregator::BiLstm { .. } => AggregatorCache::BiLstm {
                forward: Vec::new(),
                backward: Vec::new(),
            },
        };
        let pass = self.forward_map(feats, map, cache, query)?;
        Ok(pass.scores[0].as_f64())
    }
}

pub struct SampleGradient<T> {
    pub loss: f64,
    pub grads: GroundingModel<T>,
    /// See [`ForwardPass::activation_pattern`].
    pub pattern: u64,
}

/// Full-model gradient check of `model` (cast to f64) on one sample.
pub fn check_model_gradients(
    model: &GroundingModel<f64>,
    sample: &GroundingSample,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_piecewise(&model.to_param_set(), eps, tol, 6, |p| {
        let m = GroundingModel::from_param_set(model.config.clone(), p)?;
        let g = m.loss_and_grad(sample, 0.3, 0.7)?;
        Ok((g.loss, g.grads.to_param_set(), g.pattern))
    })
}

/// Fuses a prebuilt moment map with a query and scores every moment.
pub fn fuse_and_score<T: Real>(map: &MomentMap<T>, query: &[f32], model: &GroundingModel<T>) -> Result<ScoreMap> {
    let cache = match &model.aggregator {
        Aggregator::MaxPool { .. } => AggregatorCache::MaxPool { argmax: Vec::new() },
        Aggregator::BiLstm { .. } => AggregatorCache::BiLstm {
            forward: Vec::new(),
            backward: Vec::new(),
        },
    };
    model.forward_map(Vec::new(), map.clone(), cache, query)?.score_map()
}
