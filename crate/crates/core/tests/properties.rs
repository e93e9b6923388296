use std::sync::Arc;

use grounding::aggregators::{aggregate, mfa_maxpool, Aggregator, AggregatorKind};
use grounding::datastore::{
    decode_features, encode_features, parse_annotations, render_annotations, synth_localization,
    AnnotationRecord, ClipFeatureSequence, GroundingSample, LocalizationConfig, QueryRecord, Split,
};
use grounding::inference::{decode_best_moment, ensemble_scores, parse_predictions, render_predictions, MomentPrediction, PredictionRecord};
use grounding::metrics::{box_iou, temporal_iou, viou};
use grounding::model::{scaled_iou_targets, train, GroundingModel, ModelConfig, ScoreMap, TrainConfig};
use grounding::moment_map::{enumerate_proposals, validity_mask, Proposal};
use grounding::rca::{rca_augment, RcaConfig};
use grounding::rng::seeded;
use grounding::spatial::{
    assemble_tube, filter_detections, BBox, Detection, FrameChoice, FrameDetections, PersonLexicon, Tube,
};
use grounding::Error;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn tube(qid: &'static str) -> impl Strategy<Value = Tube> {
    (0usize..20, 0usize..12).prop_flat_map(move |(start, len)| {
        prop::collection::vec(bbox(), len + 1).prop_map(move |boxes| Tube {
            video_id: "v".into(),
            query_id: qid.into(),
            start_frame: start,
            end_frame: start + len,
            boxes,
        })
    })
}

fn interval(n: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=n).prop_flat_map(move |s| (Just(s), s..=n))
}

fn sequence(max_n: usize, dim: usize) -> impl Strategy<Value = ClipFeatureSequence> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-5.0f32..5.0, n * dim)
            .prop_map(move |data| ClipFeatureSequence::new("v", n, dim, data).unwrap())
    })
}

fn score_map(n: usize, scores: Vec<f64>) -> ScoreMap {
    let mask = validity_mask(n).unwrap();
    let scores = scores.iter().zip(mask.cells()).map(|(s, m)| if *m { *s } else { 0.0 }).collect();
    ScoreMap::new(mask, scores).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn maxpool_ignores_clip_order(seq in sequence(10, 4), seed in any::<u64>()) {
        let mut rows: Vec<&[f32]> = seq.rows().collect();
        let a = mfa_maxpool::<f64>(&rows).unwrap();
        use rand::seq::SliceRandom;
        rows.shuffle(&mut seeded(seed));
        let b = mfa_maxpool::<f64>(&rows).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn aggregates_have_declared_width(seq in sequence(8, 3), hidden in 1usize..5) {
        let rows: Vec<&[f32]> = seq.rows().collect();
        let lstm = Aggregator::<f64>::bilstm(3, hidden, &mut seeded(1));
        prop_assert_eq!(aggregate(&rows, &lstm).unwrap().len(), 2 * hidden);
        prop_assert_eq!(aggregate(&rows, &Aggregator::<f64>::maxpool(3)).unwrap().len(), 3);
        prop_assert_eq!(lstm.kind(), AggregatorKind::BiLstm);
    }

    #[test]
    fn proposal_count_is_triangular(n in 1usize..80) {
        let props = enumerate_proposals(n).unwrap();
        prop_assert_eq!(props.len(), n * (n + 1) / 2);
        prop_assert!(props.iter().all(|p| p.start() >= 1 && p.start() <= p.end() && p.end() <= n));
        prop_assert_eq!(validity_mask(n).unwrap().cells().iter().filter(|c| **c).count(), props.len());
    }

    #[test]
    fn decode_is_valid_and_scale_invariant(
        n in 1usize..16,
        raw in prop::collection::vec(0.0..1.0f64, 256),
        scale in 0.1..10.0f64,
    ) {
        let map = score_map(n, raw[..n * n].to_vec());
        let best = decode_best_moment(&map).unwrap();
        prop_assert!(best.proposal.start() <= best.proposal.end() && best.proposal.end() <= n);
        let scaled = score_map(n, raw[..n * n].iter().map(|s| s * scale).collect());
        prop_assert_eq!(decode_best_moment(&scaled).unwrap().proposal, best.proposal);
    }

    #[test]
    fn ensemble_ignores_member_order(
        n in 1usize..10,
        raw in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 100), 2..5),
        seed in any::<u64>(),
    ) {
        let mut maps: Vec<ScoreMap> = raw.iter().map(|r| score_map(n, r[..n * n].to_vec())).collect();
        let a = decode_best_moment(&ensemble_scores(&maps).unwrap()).unwrap();
        use rand::seq::SliceRandom;
        maps.shuffle(&mut seeded(seed));
        let b = decode_best_moment(&ensemble_scores(&maps).unwrap()).unwrap();
        prop_assert_eq!(a.proposal, b.proposal);
    }

    #[test]
    fn box_iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = box_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, box_iou(&b, &a).unwrap());
        prop_assert!((box_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiou_symmetric_and_bounded(a in interval(30), b in interval(30)) {
        let ab = temporal_iou(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, temporal_iou(b, a).unwrap());
        prop_assert_eq!(temporal_iou(a, a).unwrap(), 1.0);
    }

    #[test]
    fn viou_never_exceeds_tiou(p in tube("q"), g in tube("q")) {
        let v = viou(&p, &g).unwrap();
        let t = temporal_iou((p.start_frame, p.end_frame), (g.start_frame, g.end_frame)).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= t + 1e-12);
        prop_assert!((v - viou(&g, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn targets_monotone_in_overlap(n in 1usize..20, gt_seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(gt_seed);
        let s = rng.gen_range(1..=n);
        let gt = Proposal::new(s, rng.gen_range(s..=n)).unwrap();
        let targets = scaled_iou_targets(n, gt, 0.3, 0.7).unwrap();
        let mask = validity_mask(n).unwrap();
        let mut pairs = Vec::new();
        for p in enumerate_proposals(n).unwrap() {
            let cell = (p.start() - 1) * n + p.end() - 1;
            pairs.push((temporal_iou(p.bounds(), gt.bounds()).unwrap(), targets[cell]));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert!(targets.iter().zip(mask.cells()).all(|(t, m)| *m || *t == 0.0));
        prop_assert_eq!(targets[(gt.start() - 1) * n + gt.end() - 1], 1.0);
    }

    #[test]
    fn features_roundtrip(seq in sequence(12, 5)) {
        let back = decode_features(&encode_features(&seq), "v").unwrap();
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn truncated_features_rejected(seq in sequence(6, 3), cut in 1usize..8) {
        let bytes = encode_features(&seq);
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        let rejected = matches!(decode_features(short, "v"), Err(Error::TruncatedPayload { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn predictions_roundtrip(rows in prop::collection::vec((interval(40), any::<f64>()), 1..20)) {
        let records: Vec<PredictionRecord> = rows
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.is_finite())
            .map(|(k, ((s, e), score))| PredictionRecord {
                video_id: format!("v{k}"),
                query_id: format!("v{k}-q"),
                prediction: MomentPrediction { proposal: Proposal::new(*s, *e).unwrap(), score: *score },
            })
            .collect();
        prop_assert_eq!(parse_predictions(&render_predictions(&records)).unwrap(), records);
    }

    #[test]
    fn annotations_roundtrip(gts in prop::collection::vec(interval(30), 1..10), fps in 1.0..60.0f64) {
        let records: Vec<AnnotationRecord> = gts
            .iter()
            .enumerate()
            .map(|(k, (s, e))| AnnotationRecord {
                video_id: format!("v{k}"),
                query_id: format!("v{k}-q"),
                tau_s: *s,
                tau_e: *e,
                frame_rate: fps,
                subject: (k % 2 == 0).then(|| "person".to_string()),
                text: format!("a person \"{k}\" walks"),
            })
            .collect();
        prop_assert_eq!(parse_annotations(&render_annotations(&records).unwrap()).unwrap(), records);
    }

    #[test]
    fn filter_keeps_order_and_subset(picks in prop::collection::vec(0usize..6, 0..12)) {
        const TEXTS: [&str; 6] = ["man", "a man in red", "man and woman", "woman", "the tall man", "dog"];
        let frame = FrameDetections {
            video_id: "v".into(),
            frame_idx: 0,
            detections: picks
                .iter()
                .map(|&k| Detection { bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), score: k as f64, text: TEXTS[k].into() })
                .collect(),
        };
        let kept = filter_detections(&frame, "man", &PersonLexicon::default());
        let positions: Vec<usize> = kept
            .iter()
            .map(|d| frame.detections.iter().position(|x| std::ptr::eq(x, *d)).unwrap())
            .collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let expected = picks.iter().filter(|&&k| k == 0 || k == 1 || k == 4).count();
        prop_assert_eq!(kept.len(), expected);
    }

    #[test]
    fn assembled_tube_has_one_box_per_frame(
        start in 0usize..50,
        choices in prop::collection::vec((prop::option::of(bbox()), prop::option::of(bbox())), 1..20),
    ) {
        let choices: Vec<FrameChoice> = choices
            .into_iter()
            .map(|(selected, best_unfiltered)| FrameChoice { selected, best_unfiltered })
            .collect();
        let end = start + choices.len() - 1;
        match assemble_tube("v", "q", (start, end), &choices) {
            Ok(t) => {
                prop_assert_eq!(t.boxes.len(), end - start + 1);
                for (c, b) in choices.iter().zip(&t.boxes) {
                    if let Some(s) = c.selected {
                        prop_assert_eq!(*b, s);
                    }
                }
            }
            Err(Error::NoDetectionsInSegment { .. }) => {
                prop_assert!(choices.iter().all(|c| c.selected.is_none() && c.best_unfiltered.is_none()));
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn rca_preserves_gt_length(
        na in 4usize..20,
        nb in 4usize..20,
        ga in interval(4),
        gb in interval(4),
        seed in any::<u64>(),
    ) {
        let make = |n: usize, gt: (usize, usize), tag: f32| {
            let data = (0..n * 2).map(|k| tag + k as f32).collect();
            GroundingSample::new(
                Arc::new(ClipFeatureSequence::new(format!("s{tag}"), n, 2, data).unwrap()),
                QueryRecord { query_id: format!("q{tag}"), embedding: vec![tag], text: String::new(), subject_override: None },
                gt.0,
                gt.1,
                30.0,
            )
            .unwrap()
        };
        let (a, b) = (make(na, ga, 0.0), make(nb, gb, 1000.0));
        match rca_augment(&a, &b, &mut seeded(seed), &RcaConfig::default()) {
            Ok(aug) => {
                let src = if aug.query == a.query { &a } else { &b };
                prop_assert_eq!(aug.gt_end - aug.gt_start, src.gt_end - src.gt_start);
                prop_assert!(aug.gt_start >= 1 && aug.gt_end <= aug.features.n_clips());
                for (k, t) in (src.gt_start..=src.gt_end).enumerate() {
                    prop_assert_eq!(aug.features.clip(aug.gt_start + k), src.features.clip(t));
                }
            }
            Err(Error::InfeasibleLengths { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn training_is_deterministic(seed in any::<u64>(), kind in prop_oneof![Just(AggregatorKind::MaxPool), Just(AggregatorKind::BiLstm)]) {
        let data = synth_localization(&LocalizationConfig { n_samples: 6, n_clips: 6, dim: 4, snr: 4.0, seed, split: Split::Train }).unwrap();
        let cfg = TrainConfig { epochs: 2, seed, ..TrainConfig::default() };
        let a = train(&data.samples, ModelConfig::new(kind, 4, 4), &cfg).unwrap();
        let b = train(&data.samples, ModelConfig::new(kind, 4, 4), &cfg).unwrap();
        prop_assert!(a.model == b.model);
        prop_assert_eq!(a.epoch_losses, b.epoch_losses);
        let fresh = GroundingModel::<f32>::init(ModelConfig::new(kind, 4, 4), seed).unwrap();
        prop_assert!(fresh != a.model);
    }
}
