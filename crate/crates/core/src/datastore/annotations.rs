//! Annotation file: UTF-8, one record per line, tab-separated
//! `video_id  query_id  tau_s  tau_e  frame_rate  subject  text`, with `-`
//! standing for an absent subject. `text` is the last field and may itself
//! contain tabs.
//!
//! A dataset directory holds `annotations.tsv`, `manifest.txt`
//! (`split=...`/`seed=...` lines), `features/<video_id>.m2dt` and
//! `queries/<query_id>.m2dt`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{
    check_id, load_features, load_query_embedding, write_features, write_query_embedding,
    ClipFeatureSequence, DatasetManifest, GroundingSample, QueryRecord, Split,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub query_id: String,
    pub tau_s: usize,
    pub tau_e: usize,
    pub frame_rate: f64,
    pub subject: Option<String>,
    pub text: String,
}

impl AnnotationRecord {
    pub fn from_sample(s: &GroundingSample) -> Self {
        AnnotationRecord {
            video_id: s.video_id().to_string(),
            query_id: s.query.query_id.clone(),
            tau_s: s.gt_start,
            tau_e: s.gt_end,
            frame_rate: s.frame_rate,
            subject: s.query.subject_override.clone(),
            text: s.query.text.clone(),
        }
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<AnnotationRecord> {
    let err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.splitn(7, '\t').collect();
    if fields.len() != 7 {
        return Err(err(format!("expected 7 tab-separated fields, found {}", fields.len())));
    }
    let index = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|e| err(format!("{what} {s:?}: {e}")))
    };
    let tau_s = index(fields[2], "tau_s")?;
    let tau_e = index(fields[3], "tau_e")?;
    let frame_rate: f64 = fields[4]
        .parse()
        .map_err(|e| err(format!("frame_rate {:?}: {e}", fields[4])))?;
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(err(format!("frame_rate {frame_rate} is not positive")));
    }
    for id in &fields[..2] {
        check_id(id).map_err(|e| err(e.to_string()))?;
    }
    if tau_s < 1 || tau_s > tau_e {
        return Err(Error::GtOutOfRange {
            id: fields[1].to_string(),
            start: tau_s,
            end: tau_e,
            n_clips: 0,
        });
    }
    let subject = match fields[5] {
        "-" => None,
        "" => return Err(err("empty subject; use '-' for none".into())),
        s => Some(s.to_string()),
    };
    Ok(AnnotationRecord {
        video_id: fields[0].to_string(),
        query_id: fields[1].to_string(),
        tau_s,
        tau_e,
        frame_rate,
        subject,
        text: fields[6].to_string(),
    })
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_line(l.strip_suffix('\r').unwrap_or(l), i + 1))
        .collect()
}

pub fn render_annotations(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        check_id(&r.video_id)?;
        check_id(&r.query_id)?;
        if r.text.contains(['\n', '\r']) {
            return Err(Error::InvariantViolation(format!("{}: newline in text", r.query_id)));
        }
        let subject = match &r.subject {
            Some(s) if s.is_empty() || s == "-" || s.contains(['\t', '\n', '\r']) => {
                return Err(Error::InvariantViolation(format!(
                    "{}: unrepresentable subject {s:?}",
                    r.query_id
                )))
            }
            Some(s) => s.as_str(),
            None => "-",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.video_id, r.query_id, r.tau_s, r.tau_e, r.frame_rate, subject, r.text
        ));
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let text = render_annotations(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let (fdir, qdir) = (dir.join("features"), dir.join("queries"));
    create_dir(&fdir)?;
    create_dir(&qdir)?;
    let mut written: HashMap<&str, &Arc<ClipFeatureSequence>> = HashMap::new();
    for s in &manifest.samples {
        match written.get(s.video_id()) {
            Some(prev) if Arc::ptr_eq(prev, &s.features) || ***prev == *s.features => {}
            Some(_) => {
                return Err(Error::InvariantViolation(format!(
                    "video {} appears with different features",
                    s.video_id()
                )))
            }
            None => {
                check_id(s.video_id())?;
                write_features(&s.features, &fdir.join(format!("{}.m2dt", s.video_id())))?;
                written.insert(s.video_id(), &s.features);
            }
        }
        check_id(s.id())?;
        write_query_embedding(&s.query.embedding, &qdir.join(format!("{}.m2dt", s.id())))?;
    }
    let records: Vec<_> = manifest.samples.iter().map(AnnotationRecord::from_sample).collect();
    write_annotations(&records, &dir.join("annotations.tsv"))?;
    let meta = format!("split={}\nseed={}\n", manifest.split, manifest.seed);
    let path = dir.join("manifest.txt");
    fs::write(&path, meta).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join("manifest.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let (mut split, mut seed) = (None, None);
    for (i, line) in meta.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        match k.trim() {
            "split" => split = Some(v.trim().parse::<Split>()?),
            "seed" => {
                seed = Some(v.trim().parse::<u64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("seed: {e}"),
                })?)
            }
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown manifest key {other:?}"),
                })
            }
        }
    }
    let split = split.ok_or_else(|| Error::Missing("split in manifest.txt".into()))?;
    let seed = seed.ok_or_else(|| Error::Missing("seed in manifest.txt".into()))?;

    let records = load_annotations(&dir.join("annotations.tsv"))?;
    let mut videos: HashMap<String, Arc<ClipFeatureSequence>> = HashMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let features = match videos.get(&r.video_id) {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(load_features(
                    &dir.join("features").join(format!("{}.m2dt", r.video_id)),
                )?);
                videos.insert(r.video_id.clone(), f.clone());
                f
            }
        };
        let embedding =
            load_query_embedding(&dir.join("queries").join(format!("{}.m2dt", r.query_id)))?;
        let query = QueryRecord {
            query_id: r.query_id,
            embedding,
            text: r.text,
            subject_override: r.subject,
        };
        samples.push(GroundingSample::new(features, query, r.tau_s, r.tau_e, r.frame_rate)?);
    }
    DatasetManifest::new(samples, split, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(tau_s: usize, tau_e: usize) -> AnnotationRecord {
        AnnotationRecord {
            video_id: "vid_1".into(),
            query_id: "q1".into(),
            tau_s,
            tau_e,
            frame_rate: 29.97,
            subject: None,
            text: "The man\tpicks up a cup".into(),
        }
    }

    #[test]
    fn renders_and_parses_back() {
        let recs = vec![
            record(3, 6),
            AnnotationRecord {
                subject: Some("woman".into()),
                query_id: "q2".into(),
                text: String::new(),
                ..record(1, 1)
            },
        ];
        let text = render_annotations(&recs).unwrap();
        assert!(text.starts_with("vid_1\tq1\t3\t6\t29.97\t-\tThe man\tpicks up a cup\n"));
        assert_eq!(parse_annotations(&text).unwrap(), recs);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "v\tq\t1\t2\t25\t-\tok\nv\tq2\tx\t2\t25\t-\tbad\n";
        match parse_annotations(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_annotations("v\tq\t1\t2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn reversed_interval_is_out_of_range() {
        assert!(matches!(
            parse_annotations("v\tq\t5\t2\t25\t-\tt\n"),
            Err(Error::GtOutOfRange { .. })
        ));
    }

    #[test]
    fn gt_beyond_clip_count_fails_on_dataset_load() {
        let dir = tempfile::tempdir().unwrap();
        let feats = Arc::new(ClipFeatureSequence::new("vid_1", 10, 2, vec![0.5; 20]).unwrap());
        let q = QueryRecord {
            query_id: "q1".into(),
            embedding: vec![1.0, 0.0],
            text: "a man".into(),
            subject_override: None,
        };
        let ok = GroundingSample::new(feats.clone(), q.clone(), 3, 6, 25.0).unwrap();
        let manifest = DatasetManifest::new(vec![ok], Split::Val, 9).unwrap();
        write_dataset(&manifest, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), manifest);

        let mut recs = load_annotations(&dir.path().join("annotations.tsv")).unwrap();
        recs[0].tau_e = 11;
        write_annotations(&recs, &dir.path().join("annotations.tsv")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::GtOutOfRange { end, n_clips, .. }) => assert_eq!((end, n_clips), (11, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
