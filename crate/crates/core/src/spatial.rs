//! Per-frame box selection inside a grounded segment.
//!
//! The referring detector's output is ingested as data: for each frame a list
//! of boxes, each with the phrase it was grounded to. A box survives filtering
//! when its phrase contains the query's subject as a whole token and mentions
//! at most one person; among survivors the one with the longest phrase wins.
//! Frames with no survivor are filled from neighbouring selections.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::QueryRecord;
use crate::error::{Error, Result};
use crate::inference::MomentPrediction;
use crate::moment_map::Proposal;

/// Axis-aligned box in pixels, `x1 < x2`, `y1 < y2`. Serialized as
/// `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2;
        if ok {
            Ok(BBox { x1, y1, x2, y2 })
        } else {
            Err(Error::DegenerateBox([x1, y1, x2, y2]))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    fn lerp(a: &BBox, b: &BBox, t: f64) -> BBox {
        let l = |p: f64, q: f64| p + (q - p) * t;
        BBox {
            x1: l(a.x1, b.x1),
            y1: l(a.y1, b.y1),
            x2: l(a.x2, b.x2),
            y2: l(a.y2, b.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub video_id: String,
    pub frame_idx: usize,
    pub detections: Vec<Detection>,
}

/// Temporal segment plus one box per frame of `[start_frame, end_frame]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub video_id: String,
    pub query_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub boxes: Vec<BBox>,
}

impl Tube {
    pub fn validate(&self) -> Result<()> {
        if self.start_frame > self.end_frame {
            return Err(Error::InvalidTube(format!(
                "{}: start {} after end {}",
                self.query_id, self.start_frame, self.end_frame
            )));
        }
        if self.boxes.len() != self.end_frame - self.start_frame + 1 {
            return Err(Error::InvalidTube(format!(
                "{}: {} boxes for frames {}..={}",
                self.query_id,
                self.boxes.len(),
                self.start_frame,
                self.end_frame
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_well_ordered()) {
            return Err(Error::DegenerateBox((*b).into()));
        }
        Ok(())
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|k| self.boxes.get(k))
    }
}

/// Nouns that denote a person.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonLexicon {
    nouns: BTreeSet<String>,
}

const DEFAULT_PERSON_NOUNS: &[&str] = &[
    "adult", "baby", "boy", "child", "dad", "daughter", "father", "female", "gentleman", "girl",
    "guy", "husband", "kid", "lady", "male", "man", "mother", "mom", "person", "policeman",
    "son", "teenager", "wife", "woman",
];

impl Default for PersonLexicon {
    fn default() -> Self {
        PersonLexicon {
            nouns: DEFAULT_PERSON_NOUNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PersonLexicon {
    pub fn new<I, S>(nouns: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for n in nouns {
            let n = n.as_ref().trim();
            if n.is_empty() {
                continue;
            }
            if n.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::InvariantViolation(format!(
                    "lexicon entries must be single lowercase words: {n:?}"
                )));
            }
            set.insert(n.to_string());
        }
        if set.is_empty() {
            return Err(Error::InvariantViolation("empty person lexicon".into()));
        }
        Ok(PersonLexicon { nouns: set })
    }

    /// One lowercase noun per line; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.nouns.contains(token)
    }
}

/// Whitespace split, lowercased, with leading/trailing punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// The override when present, else the first lexicon token of the text.
pub fn extract_subject(query: &QueryRecord, lexicon: &PersonLexicon) -> Result<String> {
    if let Some(s) = &query.subject_override {
        return Ok(s.to_lowercase());
    }
    tokenize(&query.text)
        .into_iter()
        .find(|t| lexicon.contains(t))
        .ok_or_else(|| Error::NoSubjectFound(query.text.clone()))
}

pub fn count_persons(text: &str, lexicon: &PersonLexicon) -> usize {
    tokenize(text).iter().filter(|t| lexicon.contains(t)).count()
}

/// Keeps detections whose text contains `subject` as a token and mentions at
/// most one person, preserving order.
pub fn filter_detections<'a>(
    frame: &'a FrameDetections,
    subject: &str,
    lexicon: &PersonLexicon,
) -> Vec<&'a Detection> {
    frame
        .detections
        .iter()
        .filter(|d| {
            tokenize(&d.text).iter().any(|t| t == subject) && count_persons(&d.text, lexicon) <= 1
        })
        .collect()
}

/// Longest grounding text (in characters); ties go to the higher score,
/// then to the earlier candidate.
pub fn select_box<'a>(candidates: &[&'a Detection]) -> Option<&'a Detection> {
    let mut best: Option<&Detection> = None;
    for d in candidates {
        let better = match best {
            None => true,
            Some(b) => {
                let (dl, bl) = (d.text.chars().count(), b.text.chars().count());
                dl > bl || (dl == bl && d.score > b.score)
            }
        };
        if better {
            best = Some(d);
        }
    }
    best
}

fn highest_score(frame: &FrameDetections) -> Option<&Detection> {
    frame
        .detections
        .iter()
        .fold(None, |best: Option<&Detection>, d| match best {
            Some(b) if b.score >= d.score => Some(b),
            _ => Some(d),
        })
}

/// What stage two knows about one frame of the segment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameChoice {
    /// Box that passed the rules, if any.
    pub selected: Option<BBox>,
    /// Highest-scoring box of the frame ignoring the rules.
    pub best_unfiltered: Option<BBox>,
}

/// Fills a tube over `[start, end]` from per-frame choices.
///
/// Gaps between selected frames are linearly interpolated; frames before the
/// first or after the last selection copy the nearest one. When nothing in
/// the segment was selected, the per-frame highest-score boxes take the role
/// of selections.
pub fn assemble_tube(
    video_id: &str,
    query_id: &str,
    segment: (usize, usize),
    choices: &[FrameChoice],
) -> Result<Tube> {
    let (start, end) = segment;
    if start > end || choices.len() != end - start + 1 {
        return Err(Error::InvalidInterval(start, end));
    }
    let mut anchors: Vec<Option<BBox>> = choices.iter().map(|c| c.selected).collect();
    if anchors.iter().all(Option::is_none) {
        anchors = choices.iter().map(|c| c.best_unfiltered).collect();
    }
    let known: Vec<(usize, BBox)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(k, b)| b.map(|b| (k, b)))
        .collect();
    if known.is_empty() {
        return Err(Error::NoDetectionsInSegment {
            video_id: video_id.to_string(),
            start,
            end,
        });
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut next = 0;
    for k in 0..anchors.len() {
        while next < known.len() && known[next].0 < k {
            next += 1;
        }
        let b = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (_, Some(&(kb, b))) if kb == k => b,
            (Some((ka, a)), Some(&(kb, b))) => BBox::lerp(&a, &b, (k - ka) as f64 / (kb - ka) as f64),
            (Some((_, a)), None) => a,
            (None, Some(&(_, b))) => b,
            (None, None) => unreachable!(),
        };
        boxes.push(b);
    }
    let tube = Tube {
        video_id: video_id.to_string(),
        query_id: query_id.to_string(),
        start_frame: start,
        end_frame: end,
        boxes,
    };
    tube.validate()?;
    Ok(tube)
}

/// Monotone mapping from clips (1-based) to 0-based frame ranges: clip `k`
/// covers frames `starts[k-1] .. starts[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFrameMap {
    starts: Vec<usize>,
}

impl ClipFrameMap {
    /// `boundaries` has one entry per clip (its first frame) plus the total
    /// frame count; it must be strictly increasing and start at 0.
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(Error::MappingMissing(format!(
                "need at least one clip starting at frame 0, got {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MappingMissing(format!("non-monotone boundaries {boundaries:?}")));
        }
        Ok(ClipFrameMap { starts: boundaries })
    }

    pub fn uniform(n_clips: usize, frames_per_clip: usize) -> Result<Self> {
        if frames_per_clip == 0 {
            return Err(Error::MappingMissing("zero frames per clip".into()));
        }
        Self::new((0..=n_clips).map(|k| k * frames_per_clip).collect())
    }

    pub fn n_clips(&self) -> usize {
        self.starts.len() - 1
    }
}

/// First frame of the start clip to the last frame of the end clip.
pub fn clip_segment_to_frames(p: Proposal, map: &ClipFrameMap) -> Result<(usize, usize)> {
    if p.end() > map.n_clips() {
        return Err(Error::MappingMissing(format!(
            "clip {} beyond the {} mapped clips",
            p.end(),
            map.n_clips()
        )));
    }
    Ok((map.starts[p.start() - 1], map.starts[p.end()] - 1))
}

/// Runs the whole rule set for one query over its predicted segment.
pub fn select_tube(
    query: &QueryRecord,
    video_id: &str,
    prediction: &MomentPrediction,
    map: &ClipFrameMap,
    frames: &HashMap<usize, &FrameDetections>,
    lexicon: &PersonLexicon,
) -> Result<Tube> {
    let subject = extract_subject(query, lexicon)?;
    let (start, end) = clip_segment_to_frames(prediction.proposal, map)?;
    let choices: Vec<FrameChoice> = (start..=end)
        .map(|f| match frames.get(&f) {
            Some(frame) => FrameChoice {
                selected: select_box(&filter_detections(frame, &subject, lexicon)).map(|d| d.bbox),
                best_unfiltered: highest_score(frame).map(|d| d.bbox),
            },
            None => FrameChoice::default(),
        })
        .collect();
    assemble_tube(video_id, &query.query_id, (start, end), &choices)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| Error::Json { line: i + 1, source }))
        .collect()
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|source| Error::Json { line: 0, source })?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<FrameDetections>> {
    read_jsonl(path)
}

pub fn write_detections(frames: &[FrameDetections], path: &Path) -> Result<()> {
    write_jsonl(frames, path)
}

pub fn load_tubes(path: &Path) -> Result<Vec<Tube>> {
    let tubes: Vec<Tube> = read_jsonl(path)?;
    for t in &tubes {
        t.validate()?;
    }
    Ok(tubes)
}

pub fn write_tubes(tubes: &[Tube], path: &Path) -> Result<()> {
    for t in tubes {
        t.validate()?;
    }
    write_jsonl(tubes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(text: &str, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            score,
            text: text.into(),
        }
    }

    fn query(text: &str, subject: Option<&str>) -> QueryRecord {
        QueryRecord {
            query_id: "q".into(),
            embedding: vec![1.0],
            text: text.into(),
            subject_override: subject.map(String::from),
        }
    }

    #[test]
    fn subject_extraction() {
        let lex = PersonLexicon::default();
        assert_eq!(extract_subject(&query("The man in red picks up a cup", None), &lex).unwrap(), "man");
        assert_eq!(extract_subject(&query("The man in red", Some("woman")), &lex).unwrap(), "woman");
        assert!(matches!(
            extract_subject(&query("A cup falls", None), &lex),
            Err(Error::NoSubjectFound(_))
        ));
    }

    #[test]
    fn person_counting() {
        let lex = PersonLexicon::default();
        assert_eq!(count_persons("a man next to a woman", &lex), 2);
        assert_eq!(count_persons("", &lex), 0);
        assert_eq!(count_persons("the man and the man", &lex), 2);
        assert_eq!(count_persons("The Woman, smiling.", &lex), 1);
    }

    #[test]
    fn filtering_rules() {
        let lex = PersonLexicon::default();
        let frame = FrameDetections {
            video_id: "v".into(),
            frame_idx: 0,
            detections: vec![
                det("a man", 0.5),
                det("a man and a woman", 0.9),
                det("the dog", 0.8),
                det("a woman", 0.7),
                det("a manly gesture by a man", 0.1),
            ],
        };
        let kept: Vec<&str> = filter_detections(&frame, "man", &lex)
            .iter()
            .map(|d| d.text.as_str())
            .collect();
        assert_eq!(kept, vec!["a man", "a manly gesture by a man"]);
    }

    #[test]
    fn selection_rules() {
        let short = det("a man", 0.9);
        let long = det("a man in red shirt holding a cup", 0.1);
        assert_eq!(select_box(&[&short, &long]).unwrap().text, long.text);
        assert!(select_box(&[]).is_none());
        let (lo, hi) = (det("a man", 0.4), det("the guy", 0.9));
        assert_eq!(select_box(&[&lo, &hi]).unwrap().score, 0.9);
        let (first, second) = (det("a man", 0.4), det("a guy", 0.4));
        assert_eq!(select_box(&[&first, &second]).unwrap().text, "a man");
        assert_eq!(select_box(&[&first]).unwrap(), &first);
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sel(bx: Option<BBox>) -> FrameChoice {
        FrameChoice {
            selected: bx,
            best_unfiltered: None,
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let t = assemble_tube(
            "v",
            "q",
            (0, 2),
            &[sel(Some(b(0.0, 0.0, 10.0, 10.0))), sel(None), sel(Some(b(20.0, 20.0, 30.0, 30.0)))],
        )
        .unwrap();
        assert_eq!(t.boxes[1], b(10.0, 10.0, 20.0, 20.0));
    }

    #[test]
    fn edges_copy_nearest_selection() {
        let one = b(1.0, 2.0, 3.0, 4.0);
        let choices = [sel(None), sel(None), sel(Some(one)), sel(None), sel(None)];
        let t = assemble_tube("v", "q", (1, 5), &choices).unwrap();
        assert_eq!(t.boxes, vec![one; 5]);
    }

    #[test]
    fn unfiltered_fallback_and_empty_segment() {
        let fb = b(5.0, 5.0, 6.0, 6.0);
        let choices = [
            FrameChoice {
                selected: None,
                best_unfiltered: Some(fb),
            },
            FrameChoice::default(),
        ];
        let t = assemble_tube("v", "q", (0, 1), &choices).unwrap();
        assert_eq!(t.boxes, vec![fb, fb]);
        assert!(matches!(
            assemble_tube("v", "q", (0, 1), &[FrameChoice::default(); 2]),
            Err(Error::NoDetectionsInSegment { .. })
        ));
    }

    #[test]
    fn clip_to_frame_mapping() {
        let m = ClipFrameMap::uniform(4, 8).unwrap();
        assert_eq!(clip_segment_to_frames(Proposal::new(2, 3).unwrap(), &m).unwrap(), (8, 23));
        assert_eq!(clip_segment_to_frames(Proposal::new(1, 1).unwrap(), &m).unwrap(), (0, 7));
        assert!(matches!(ClipFrameMap::new(vec![0, 8, 4, 12]), Err(Error::MappingMissing(_))));
        assert!(clip_segment_to_frames(Proposal::new(1, 5).unwrap(), &m).is_err());
    }

    #[test]
    fn box_json_shape() {
        let d = det("a man", 0.5);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"box":[0.0,0.0,1.0,1.0],"score":0.5,"text":"a man"}"#);
        assert!(serde_json::from_str::<Detection>(r#"{"box":[2,0,1,1],"score":0.5,"text":""}"#).is_err());
    }

    #[test]
    fn lexicon_validation() {
        assert!(PersonLexicon::new(["Man"]).is_err());
        assert!(PersonLexicon::new(Vec::<String>::new()).is_err());
        assert!(PersonLexicon::new(["man", "", "woman"]).unwrap().contains("woman"));
    }
}
