//! Seeded synthetic datasets standing in for precomputed video features.
//!
//! All generators are pure functions of their config: the same config always
//! yields byte-identical output.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::moment_map::Proposal;
use crate::rng::{seeded, stream, SeededRng};
use crate::spatial::{clip_segment_to_frames, BBox, ClipFrameMap, Detection, FrameDetections, Tube};

use super::{ClipFeatureSequence, DatasetManifest, GroundingSample, QueryRecord, Split};

/// Constant frame rate of every synthetic video.
pub const SYNTH_FRAME_RATE: f64 = 25.0;

fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| normal(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationConfig {
    pub n_samples: usize,
    pub n_clips: usize,
    pub dim: usize,
    pub snr: f64,
    pub seed: u64,
    pub split: Split,
}

/// Each sample draws a unit-normal query `q` and a uniformly random valid
/// interval; clips inside the interval are `snr·q + noise`, clips outside are
/// pure unit-normal noise.
pub fn synth_localization(cfg: &LocalizationConfig) -> Result<DatasetManifest> {
    let (n, d) = (cfg.n_clips, cfg.dim);
    if n < 2 || d < 2 || !(cfg.snr > 0.0 && cfg.snr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "synth_localization needs N >= 2, d >= 2, snr > 0 (got N={n}, d={d}, snr={})",
            cfg.snr
        )));
    }
    let mut rng = seeded(cfg.seed);
    let n_props = n * (n + 1) / 2;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for k in 0..cfg.n_samples {
        let q = normal_vec(&mut rng, d);
        let (s, e) = Proposal::nth(n, rng.gen_range(0..n_props)).bounds();
        let mut data = Vec::with_capacity(n * d);
        for t in 1..=n {
            let signal = if (s..=e).contains(&t) { cfg.snr } else { 0.0 };
            for qi in &q {
                data.push((signal * qi + normal(&mut rng)) as f32);
            }
        }
        let vid = format!("{}-loc{k:05}", cfg.split);
        let features = Arc::new(ClipFeatureSequence::new(vid.clone(), n, d, data)?);
        let query = QueryRecord {
            query_id: format!("{vid}-q"),
            embedding: q.iter().map(|v| *v as f32).collect(),
            text: "The man walks over and picks up the cup".into(),
            subject_override: None,
        };
        samples.push(GroundingSample::new(features, query, s, e, SYNTH_FRAME_RATE)?);
    }
    DatasetManifest::new(samples, cfg.split, cfg.seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderTaskConfig {
    pub n_pairs: usize,
    pub n_clips: usize,
    pub dim: usize,
    pub seed: u64,
    pub split: Split,
    /// Seeds the task-level vectors (pattern direction, segment marker, the
    /// two query embeddings); splits meant to be used together must share it.
    pub task_seed: u64,
}

pub const ORDER_TASK_SEED: u64 = 0x5EED_0D3E;

impl OrderTaskConfig {
    pub fn new(n_pairs: usize, n_clips: usize, dim: usize, seed: u64, split: Split) -> Self {
        OrderTaskConfig {
            n_pairs,
            n_clips,
            dim,
            seed,
            split,
            task_seed: ORDER_TASK_SEED,
        }
    }
}

struct OrderTask {
    marker: Vec<f64>,
    direction: Vec<f64>,
    q_rise: Vec<f32>,
    q_fall: Vec<f32>,
}

impl OrderTask {
    fn new(d: usize, task_seed: u64) -> Self {
        let mut rng = stream(task_seed, 1);
        let marker: Vec<f64> = unit(normal_vec(&mut rng, d)).into_iter().map(|v| 2.0 * v).collect();
        let raw = normal_vec(&mut rng, d);
        let along = dot(&raw, &marker) / dot(&marker, &marker);
        let direction = unit(raw.iter().zip(&marker).map(|(r, m)| r - along * m).collect());
        let q_rise = normal_vec(&mut rng, d).into_iter().map(|v| v as f32).collect();
        let q_fall = normal_vec(&mut rng, d).into_iter().map(|v| v as f32).collect();
        OrderTask {
            marker,
            direction,
            q_rise,
            q_fall,
        }
    }
}

/// Order-discrimination task. Every pair is one video holding two disjoint
/// segments of equal even length: one whose rows rise monotonically along a
/// fixed direction, and one holding the very same rows in reverse order.
/// The pair's two samples query the rising segment with the "rising" query
/// embedding and the falling segment with the "falling" one; samples `2k` and
/// `2k + 1` form pair `k`.
pub fn synth_order_task(cfg: &OrderTaskConfig) -> Result<DatasetManifest> {
    let (n, d) = (cfg.n_clips, cfg.dim);
    if n < 4 || d < 2 {
        return Err(Error::InvalidConfig(format!(
            "synth_order_task needs N >= 4 and d >= 2 (got N={n}, d={d})"
        )));
    }
    let task = OrderTask::new(d, cfg.task_seed);
    let mut rng = seeded(cfg.seed);
    let max_half = n / 4;
    let mut samples = Vec::with_capacity(2 * cfg.n_pairs);
    for k in 0..cfg.n_pairs {
        let len = 2 * rng.gen_range(1..=max_half);
        let (rise_start, fall_start) = loop {
            let a = rng.gen_range(1..=n - len + 1);
            let b = rng.gen_range(1..=n - len + 1);
            if a + len <= b || b + len <= a {
                break (a, b);
            }
        };
        let mut pattern = Vec::with_capacity(len);
        for t in 0..len {
            let level = -1.0 + 2.0 * t as f64 / (len - 1) as f64;
            let mut noise: Vec<f64> = normal_vec(&mut rng, d).into_iter().map(|v| 0.3 * v).collect();
            let off = dot(&noise, &task.direction);
            noise.iter_mut().zip(&task.direction).for_each(|(x, u)| *x -= off * u);
            let row: Vec<f32> = (0..d)
                .map(|i| (task.marker[i] + 1.5 * level * task.direction[i] + noise[i]) as f32)
                .collect();
            pattern.push(row);
        }
        let mut rows: Vec<Vec<f32>> = (0..n)
            .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| (0.5 * v) as f32).collect())
            .collect();
        for t in 0..len {
            rows[rise_start - 1 + t] = pattern[t].clone();
            rows[fall_start - 1 + t] = pattern[len - 1 - t].clone();
        }
        let vid = format!("{}-ord{k:05}", cfg.split);
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let features = Arc::new(ClipFeatureSequence::from_rows(vid.clone(), &refs)?);
        for (tag, q, start, text) in [
            ("rise", &task.q_rise, rise_start, "The man raises the object"),
            ("fall", &task.q_fall, fall_start, "The man lowers the object"),
        ] {
            let query = QueryRecord {
                query_id: format!("{vid}-{tag}"),
                embedding: q.clone(),
                text: text.into(),
                subject_override: None,
            };
            samples.push(GroundingSample::new(
                features.clone(),
                query,
                start,
                start + len - 1,
                SYNTH_FRAME_RATE,
            )?);
        }
    }
    DatasetManifest::new(samples, cfg.split, cfg.seed)
}

/// Synthetic referring-detector output and ground-truth tubes for a dataset.
///
/// Each video has a target person drifting across the frame. Every frame
/// carries a distractor ("a woman") and a group box ("a man and a woman");
/// the target's own detection ("the man") is missing in about one frame in
/// eight so gap filling gets exercised.
pub fn synth_tubes(
    manifest: &DatasetManifest,
    frames_per_clip: usize,
    seed: u64,
) -> Result<(Vec<FrameDetections>, Vec<Tube>)> {
    let mut rng = seeded(seed);
    let mut frames = Vec::new();
    let mut tubes = Vec::new();
    let mut targets: std::collections::HashMap<String, Vec<BBox>> = Default::default();
    for s in &manifest.samples {
        let map = ClipFrameMap::uniform(s.n_clips(), frames_per_clip)?;
        if !targets.contains_key(s.video_id()) {
            let n_frames = s.n_clips() * frames_per_clip;
            let (mut x, mut y) = (rng.gen_range(40.0..400.0), rng.gen_range(40.0..200.0));
            let (vx, vy) = (rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5));
            let mut boxes = Vec::with_capacity(n_frames);
            for f in 0..n_frames {
                let target = BBox::new(x, y, x + 60.0, y + 140.0)?;
                boxes.push(target);
                let other = BBox::new(x + 150.0, y + 10.0, x + 210.0, y + 150.0)?;
                let mut dets = vec![
                    Detection {
                        bbox: other,
                        score: 0.95,
                        text: "a woman".into(),
                    },
                    Detection {
                        bbox: BBox::new(x, y, x + 210.0, y + 150.0)?,
                        score: 0.7,
                        text: "a man and a woman".into(),
                    },
                ];
                if rng.gen_range(0..8) != 0 {
                    dets.push(Detection {
                        bbox: target,
                        score: 0.8,
                        text: "the man".into(),
                    });
                }
                frames.push(FrameDetections {
                    video_id: s.video_id().to_string(),
                    frame_idx: f,
                    detections: dets,
                });
                x += vx;
                y += vy;
            }
            targets.insert(s.video_id().to_string(), boxes);
        }
        let (start, end) = clip_segment_to_frames(Proposal::new(s.gt_start, s.gt_end)?, &map)?;
        tubes.push(Tube {
            video_id: s.video_id().to_string(),
            query_id: s.id().to_string(),
            start_frame: start,
            end_frame: end,
            boxes: targets[s.video_id()][start..=end].to_vec(),
        });
    }
    Ok((frames, tubes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::encode_features;

    fn loc(seed: u64) -> LocalizationConfig {
        LocalizationConfig {
            n_samples: 20,
            n_clips: 16,
            dim: 16,
            snr: 4.0,
            seed,
            split: Split::Train,
        }
    }

    fn bytes(m: &DatasetManifest) -> Vec<u8> {
        m.samples
            .iter()
            .flat_map(|s| {
                let mut b = encode_features(&s.features);
                b.extend(s.query.embedding.iter().flat_map(|v| v.to_le_bytes()));
                b.extend((s.gt_start as u32).to_le_bytes());
                b.extend((s.gt_end as u32).to_le_bytes());
                b
            })
            .collect()
    }

    #[test]
    fn localization_is_deterministic() {
        assert_eq!(bytes(&synth_localization(&loc(3)).unwrap()), bytes(&synth_localization(&loc(3)).unwrap()));
        assert_ne!(bytes(&synth_localization(&loc(3)).unwrap()), bytes(&synth_localization(&loc(4)).unwrap()));
    }

    #[test]
    fn localization_rejects_bad_config() {
        let mut c = loc(1);
        c.snr = 0.0;
        assert!(matches!(synth_localization(&c), Err(Error::InvalidConfig(_))));
        let mut c = loc(1);
        c.n_clips = 1;
        assert!(matches!(synth_localization(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn signal_clips_project_higher_than_noise() {
        let mut c = loc(11);
        c.n_samples = 1000;
        let m = synth_localization(&c).unwrap();
        let mut wins = 0;
        let mut usable = 0;
        for s in &m.samples {
            let q: Vec<f64> = s.query.embedding.iter().map(|v| *v as f64).collect();
            let qq = dot(&q, &q);
            let proj = |t: usize| {
                let row: Vec<f64> = s.features.clip(t).iter().map(|v| *v as f64).collect();
                dot(&row, &q) / qq
            };
            let inside: Vec<f64> = (s.gt_start..=s.gt_end).map(proj).collect();
            let outside: Vec<f64> = (1..=s.n_clips())
                .filter(|t| !(s.gt_start..=s.gt_end).contains(t))
                .map(proj)
                .collect();
            if outside.is_empty() {
                continue;
            }
            usable += 1;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            if mean(&inside) > mean(&outside) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.99 * usable as f64, "{wins}/{usable}");
    }

    #[test]
    fn order_pairs_share_rows_in_reverse() {
        let m = synth_order_task(&OrderTaskConfig::new(50, 16, 8, 5, Split::Train)).unwrap();
        assert_eq!(m.samples.len(), 100);
        for pair in m.samples.chunks(2) {
            let (r, f) = (&pair[0], &pair[1]);
            assert!(Arc::ptr_eq(&r.features, &f.features));
            let len = r.gt_end - r.gt_start + 1;
            assert_eq!(len, f.gt_end - f.gt_start + 1);
            assert_eq!(len % 2, 0);
            for t in 0..len {
                assert_eq!(r.features.clip(r.gt_start + t), f.features.clip(f.gt_end - t));
            }
            assert!(r.gt_end < f.gt_start || f.gt_end < r.gt_start);
        }
    }

    #[test]
    fn order_rows_rise_along_direction() {
        let task = OrderTask::new(8, ORDER_TASK_SEED);
        let m = synth_order_task(&OrderTaskConfig::new(10, 16, 8, 1, Split::Train)).unwrap();
        for s in m.samples.iter().step_by(2) {
            let proj: Vec<f64> = (s.gt_start..=s.gt_end)
                .map(|t| {
                    let row: Vec<f64> = s.features.clip(t).iter().map(|v| *v as f64).collect();
                    dot(&row, &task.direction)
                })
                .collect();
            assert!(proj.windows(2).all(|w| w[0] < w[1]), "{proj:?}");
        }
    }

    #[test]
    fn order_task_rejects_small_maps() {
        let err = synth_order_task(&OrderTaskConfig::new(1, 3, 8, 1, Split::Train)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }
}
