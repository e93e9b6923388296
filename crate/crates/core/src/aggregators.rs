//! Moment feature aggregation: collapse the clip features of one proposal
//! into a fixed-size vector. Two implementations: coordinate-wise max-pooling
//! and a bidirectional LSTM whose readout is `[h_fwd_final ‖ h_bwd_final]`.
//!
//! The batched builders exploit prefix sharing: the forward LSTM state for
//! `(i, j)` is one step past the state for `(i, j - 1)`, so one pass per start
//! clip (and, mirrored, one backward pass per end clip) yields every moment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::moment_map::{validity_mask, MomentMap};
use crate::numerics::{
    elementwise_max_with_argmax, lstm_cell_backward, lstm_cell_forward, LstmCellParams, LstmStep,
    ParamSet, Real, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorKind {
    MaxPool,
    BiLstm,
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregatorKind::MaxPool => "maxpool",
            AggregatorKind::BiLstm => "bilstm",
        })
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxpool" => Ok(AggregatorKind::MaxPool),
            "bilstm" => Ok(AggregatorKind::BiLstm),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregator {other:?} (expected maxpool or bilstm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator<T> {
    MaxPool { dim: usize },
    BiLstm {
        forward: LstmCellParams<T>,
        backward: LstmCellParams<T>,
    },
}

impl<T: Real> Aggregator<T> {
    pub fn maxpool(dim: usize) -> Self {
        Aggregator::MaxPool { dim }
    }

    pub fn bilstm<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = LstmCellParams::xavier(input_dim, hidden, rng);
        let backward = LstmCellParams::xavier(input_dim, hidden, rng);
        Aggregator::BiLstm { forward, backward }
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::MaxPool { .. } => AggregatorKind::MaxPool,
            Aggregator::BiLstm { .. } => AggregatorKind::BiLstm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Aggregator::MaxPool { dim } => *dim,
            Aggregator::BiLstm { forward, .. } => forward.input_dim(),
        }
    }

    /// Output channels: `d` for max-pool, `2·d_h` for the Bi-LSTM.
    pub fn output_dim(&self) -> usize {
        match self {
            Aggregator::MaxPool { dim } => *dim,
            Aggregator::BiLstm { forward, .. } => 2 * forward.hidden(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Aggregator::MaxPool { dim } => Aggregator::MaxPool { dim: *dim },
            Aggregator::BiLstm { forward, backward } => Aggregator::BiLstm {
                forward: forward.zeros_like(),
                backward: backward.zeros_like(),
            },
        }
    }

    pub fn cast<U: Real>(&self) -> Aggregator<U> {
        match self {
            Aggregator::MaxPool { dim } => Aggregator::MaxPool { dim: *dim },
            Aggregator::BiLstm { forward, backward } => Aggregator::BiLstm {
                forward: cast_cell(forward),
                backward: cast_cell(backward),
            },
        }
    }

    pub fn export(&self, prefix: &str, out: &mut ParamSet<T>) -> Result<()> {
        if let Aggregator::BiLstm { forward, backward } = self {
            for (dir, cell) in [("fwd", forward), ("bwd", backward)] {
                out.insert(format!("{prefix}.{dir}.w"), cell.w.clone())?;
                out.insert(format!("{prefix}.{dir}.u"), cell.u.clone())?;
                out.insert(format!("{prefix}.{dir}.b"), cell.b.clone())?;
            }
        }
        Ok(())
    }

    /// Rebuilds an aggregator of the given shape from named tensors.
    pub fn import(
        kind: AggregatorKind,
        input_dim: usize,
        hidden: usize,
        prefix: &str,
        params: &ParamSet<T>,
    ) -> Result<Self> {
        match kind {
            AggregatorKind::MaxPool => Ok(Aggregator::MaxPool { dim: input_dim }),
            AggregatorKind::BiLstm => {
                let cell = |dir: &str| -> Result<LstmCellParams<T>> {
                    Ok(LstmCellParams {
                        w: params.expect(&format!("{prefix}.{dir}.w"), &[4 * hidden, input_dim])?.clone(),
                        u: params.expect(&format!("{prefix}.{dir}.u"), &[4 * hidden, hidden])?.clone(),
                        b: params.expect(&format!("{prefix}.{dir}.b"), &[4 * hidden])?.clone(),
                    })
                };
                Ok(Aggregator::BiLstm {
                    forward: cell("fwd")?,
                    backward: cell("bwd")?,
                })
            }
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Aggregator::MaxPool { .. } => Vec::new(),
            Aggregator::BiLstm { forward, backward } => vec![
                &mut forward.w,
                &mut forward.u,
                &mut forward.b,
                &mut backward.w,
                &mut backward.u,
                &mut backward.b,
            ],
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Aggregator::MaxPool { .. } => Vec::new(),
            Aggregator::BiLstm { forward, backward } => vec![
                &forward.w,
                &forward.u,
                &forward.b,
                &backward.w,
                &backward.u,
                &backward.b,
            ],
        }
    }
}

fn cast_cell<T: Real, U: Real>(c: &LstmCellParams<T>) -> LstmCellParams<U> {
    LstmCellParams {
        w: c.w.cast(),
        u: c.u.cast(),
        b: c.b.cast(),
    }
}

fn to_real<T: Real>(rows: &[&[f32]]) -> Vec<Vec<T>> {
    rows.iter()
        .map(|r| r.iter().map(|v| T::lit(*v as f64)).collect())
        .collect()
}

/// Coordinate-wise maximum over the clips of one moment.
pub fn mfa_maxpool<T: Real>(clips: &[&[f32]]) -> Result<Vec<T>> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("moment has no clips"));
    }
    let rows = to_real::<T>(clips);
    let refs: Vec<&[T]> = rows.iter().map(|r| r.as_slice()).collect();
    elementwise_max_with_argmax(&refs).map(|(v, _)| v)
}

/// Forward LSTM over clips `1..L`, backward LSTM over `L..1`, both from zero
/// state; returns the concatenated final hidden states.
pub fn mfa_bilstm<T: Real>(clips: &[&[f32]], agg: &Aggregator<T>) -> Result<Vec<T>> {
    let Aggregator::BiLstm { forward, backward } = agg else {
        return Err(Error::InvalidConfig("mfa_bilstm needs a Bi-LSTM aggregator".into()));
    };
    if clips.is_empty() {
        return Err(Error::EmptyInput("moment has no clips"));
    }
    let rows = to_real::<T>(clips);
    let run = |cell: &LstmCellParams<T>, order: &mut dyn Iterator<Item = &Vec<T>>| -> Result<Vec<T>> {
        let h = cell.hidden();
        let (mut hs, mut cs) = (vec![T::zero(); h], vec![T::zero(); h]);
        for x in order {
            let step = lstm_cell_forward(x, &hs, &cs, cell)?;
            hs = step.h;
            cs = step.c;
        }
        Ok(hs)
    };
    let mut out = run(forward, &mut rows.iter())?;
    out.extend(run(backward, &mut rows.iter().rev())?);
    Ok(out)
}

/// Single-moment aggregation through whichever implementation `agg` is.
pub fn aggregate<T: Real>(clips: &[&[f32]], agg: &Aggregator<T>) -> Result<Vec<T>> {
    match agg {
        Aggregator::MaxPool { dim } => {
            if clips.iter().any(|c| c.len() != *dim) {
                return Err(Error::ShapeMismatch(format!("max-pool expects {dim}-d clips")));
            }
            mfa_maxpool(clips)
        }
        Aggregator::BiLstm { .. } => mfa_bilstm(clips, agg),
    }
}

/// Saved forward state for [`aggregate_map_backward`].
pub enum AggregatorCache<T> {
    /// For every valid cell and channel, the 0-based clip index that won the max.
    MaxPool { argmax: Vec<usize> },
    /// `forward[i]` holds the steps for clips `i..N` (0-based start `i`);
    /// `backward[j]` the steps for clips `j, j-1, ..., 0`.
    BiLstm {
        forward: Vec<Vec<LstmStep<T>>>,
        backward: Vec<Vec<LstmStep<T>>>,
    },
}

/// Builds the full moment map in one batched pass. `features` is the
/// row-major `N × d` clip matrix.
pub fn aggregate_map<T: Real>(
    features: &[T],
    n: usize,
    agg: &Aggregator<T>,
) -> Result<(MomentMap<T>, AggregatorCache<T>)> {
    let d = agg.input_dim();
    if n == 0 || features.len() != n * d {
        return Err(Error::ShapeMismatch(format!(
            "aggregate_map: {} values for N={n}, d={d}",
            features.len()
        )));
    }
    let c = agg.output_dim();
    let mut data = Tensor::zeros(&[n, n, c]);
    let row = |t: usize| &features[t * d..(t + 1) * d];
    let cache = match agg {
        Aggregator::MaxPool { .. } => {
            let mut argmax = vec![0usize; n * n * c];
            let out = data.data_mut();
            for i in 0..n {
                let mut cur = row(i).to_vec();
                let mut arg = vec![i; c];
                for j in i..n {
                    if j > i {
                        for (k, v) in row(j).iter().enumerate() {
                            if *v > cur[k] {
                                cur[k] = *v;
                                arg[k] = j;
                            }
                        }
                    }
                    let off = (i * n + j) * c;
                    out[off..off + c].copy_from_slice(&cur);
                    argmax[off..off + c].copy_from_slice(&arg);
                }
            }
            AggregatorCache::MaxPool { argmax }
        }
        Aggregator::BiLstm { forward, backward } => {
            let h = forward.hidden();
            let out = data.data_mut();
            let mut fwd_chains = Vec::with_capacity(n);
            for i in 0..n {
                let mut steps: Vec<LstmStep<T>> = Vec::with_capacity(n - i);
                for j in i..n {
                    let step = match steps.last() {
                        Some(prev) => lstm_cell_forward(row(j), &prev.h, &prev.c, forward)?,
                        None => lstm_cell_forward(row(j), &vec![T::zero(); h], &vec![T::zero(); h], forward)?,
                    };
                    let off = (i * n + j) * c;
                    out[off..off + h].copy_from_slice(&step.h);
                    steps.push(step);
                }
                fwd_chains.push(steps);
            }
            let mut bwd_chains = Vec::with_capacity(n);
            for j in 0..n {
                let mut steps: Vec<LstmStep<T>> = Vec::with_capacity(j + 1);
                for i in (0..=j).rev() {
                    let step = match steps.last() {
                        Some(prev) => lstm_cell_forward(row(i), &prev.h, &prev.c, backward)?,
                        None => lstm_cell_forward(row(i), &vec![T::zero(); h], &vec![T::zero(); h], backward)?,
                    };
                    let off = (i * n + j) * c + h;
                    out[off..off + h].copy_from_slice(&step.h);
                    steps.push(step);
                }
                bwd_chains.push(steps);
            }
            AggregatorCache::BiLstm {
                forward: fwd_chains,
                backward: bwd_chains,
            }
        }
    };
    Ok((
        MomentMap {
            data,
            mask: validity_mask(n)?,
        },
        cache,
    ))
}

/// Accumulates parameter gradients given the gradient of the loss w.r.t. the
/// moment map. Gradients at invalid cells are ignored.
pub fn aggregate_map_backward<T: Real>(
    features: &[T],
    n: usize,
    agg: &Aggregator<T>,
    cache: &AggregatorCache<T>,
    grad_map: &Tensor<T>,
    grads: &mut Aggregator<T>,
) -> Result<()> {
    let d = agg.input_dim();
    let c = agg.output_dim();
    if grad_map.shape() != [n, n, c] {
        return Err(Error::ShapeMismatch(format!(
            "grad map {:?}, expected [{n}, {n}, {c}]",
            grad_map.shape()
        )));
    }
    let (
        Aggregator::BiLstm { forward, backward },
        AggregatorCache::BiLstm {
            forward: fwd_chains,
            backward: bwd_chains,
        },
        Aggregator::BiLstm {
            forward: g_fwd,
            backward: g_bwd,
        },
    ) = (agg, cache, grads)
    else {
        // Max-pool has no parameters and features are data.
        return Ok(());
    };
    let h = forward.hidden();
    let gm = grad_map.data();
    let row = |t: usize| &features[t * d..(t + 1) * d];
    let mut dx = vec![T::zero(); d];
    for (i, steps) in fwd_chains.iter().enumerate() {
        let (mut dh, mut dc) = (vec![T::zero(); h], vec![T::zero(); h]);
        for (k, step) in steps.iter().enumerate().rev() {
            let j = i + k;
            let off = (i * n + j) * c;
            for (a, g) in dh.iter_mut().zip(&gm[off..off + h]) {
                *a += *g;
            }
            let (ph, pc) = lstm_cell_backward(step, row(j), &dh, &dc, forward, g_fwd, &mut dx);
            dh = ph;
            dc = pc;
        }
    }
    for (j, steps) in bwd_chains.iter().enumerate() {
        let (mut dh, mut dc) = (vec![T::zero(); h], vec![T::zero(); h]);
        for (k, step) in steps.iter().enumerate().rev() {
            let i = j - k;
            let off = (i * n + j) * c + h;
            for (a, g) in dh.iter_mut().zip(&gm[off..off + h]) {
                *a += *g;
            }
            let (ph, pc) = lstm_cell_backward(step, row(i), &dh, &dc, backward, g_bwd, &mut dx);
            dh = ph;
            dc = pc;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::lstm_cell;
    use crate::rng::seeded;

    fn clips(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn maxpool_examples() {
        let v: [&[f32]; 1] = [&[0.5, -1.0]];
        assert_eq!(mfa_maxpool::<f64>(&v).unwrap(), vec![0.5, -1.0]);
        let rows: [&[f32]; 3] = [&[1.0, 4.0], &[3.0, 2.0], &[2.0, 5.0]];
        assert_eq!(mfa_maxpool::<f64>(&rows).unwrap(), vec![3.0, 5.0]);
        let rev: Vec<&[f32]> = rows.iter().rev().copied().collect();
        assert_eq!(mfa_maxpool::<f64>(&rev).unwrap(), vec![3.0, 5.0]);
        let empty: [&[f32]; 0] = [];
        assert!(matches!(mfa_maxpool::<f64>(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_bilstm_gives_zero_vector() {
        let agg = Aggregator::<f64>::BiLstm {
            forward: LstmCellParams::zeros(3, 4),
            backward: LstmCellParams::zeros(3, 4),
        };
        let x: [&[f32]; 1] = [&[0.3, 0.2, -0.9]];
        let out = mfa_bilstm(&x, &agg).unwrap();
        assert_eq!(out, vec![0.0; 8]);
        assert_eq!(agg.output_dim(), 8);
    }

    #[test]
    fn bilstm_matches_hand_composed_steps() {
        let agg = Aggregator::<f64>::bilstm(3, 4, &mut seeded(2));
        let Aggregator::BiLstm { forward, backward } = &agg else { unreachable!() };
        let xs = clips(3, 3, 3);
        let x64: Vec<Vec<f64>> = xs.iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect();
        let z = vec![0.0; 4];
        let (h1, c1) = lstm_cell(&x64[0], &z, &z, forward).unwrap();
        let (h2, c2) = lstm_cell(&x64[1], &h1, &c1, forward).unwrap();
        let (h3, _) = lstm_cell(&x64[2], &h2, &c2, forward).unwrap();
        let (b1, d1) = lstm_cell(&x64[2], &z, &z, backward).unwrap();
        let (b2, d2) = lstm_cell(&x64[1], &b1, &d1, backward).unwrap();
        let (b3, _) = lstm_cell(&x64[0], &b2, &d2, backward).unwrap();
        let refs: Vec<&[f32]> = xs.iter().map(|r| r.as_slice()).collect();
        let got = mfa_bilstm(&refs, &agg).unwrap();
        assert_eq!(got, [h3, b3].concat());
    }

    #[test]
    fn bilstm_rejects_maxpool_spec_and_empty_moments() {
        let x: [&[f32]; 1] = [&[0.3, 0.2]];
        assert!(mfa_bilstm(&x, &Aggregator::<f64>::maxpool(2)).is_err());
        let agg = Aggregator::<f64>::bilstm(2, 2, &mut seeded(1));
        let empty: [&[f32]; 0] = [];
        assert!(matches!(mfa_bilstm(&empty, &agg), Err(Error::EmptyInput(_))));
        let wrong: [&[f32]; 1] = [&[0.3, 0.2, 0.1]];
        assert!(matches!(mfa_bilstm(&wrong, &agg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn batched_map_equals_cell_by_cell() {
        let n = 6;
        let xs = clips(4, n, 3);
        let flat: Vec<f64> = xs.iter().flatten().map(|v| *v as f64).collect();
        for agg in [Aggregator::<f64>::maxpool(3), Aggregator::bilstm(3, 2, &mut seeded(5))] {
            let (map, _) = aggregate_map(&flat, n, &agg).unwrap();
            for i in 1..=n {
                for j in i..=n {
                    let refs: Vec<&[f32]> = xs[i - 1..j].iter().map(|r| r.as_slice()).collect();
                    let single = aggregate(&refs, &agg).unwrap();
                    for (a, b) in map.cell(i, j).iter().zip(&single) {
                        assert!((a - b).abs() < 1e-12, "{:?} ({i},{j})", agg.kind());
                    }
                }
            }
        }
    }

    #[test]
    fn kind_parses() {
        assert_eq!("bilstm".parse::<AggregatorKind>().unwrap(), AggregatorKind::BiLstm);
        assert_eq!("maxpool".parse::<AggregatorKind>().unwrap(), AggregatorKind::MaxPool);
        assert!("mean".parse::<AggregatorKind>().is_err());
    }
}
