//! Conversation-thread files, validation, fold splitting and checkpoint
//! truncation.
//!
//! Event files are UTF-8 JSONL with one event per line:
//!
//! ```text
//! {"event_id": "e1", "label": "rumor",
//!  "claim": {"post_id": "c", "text": "...", "timestamp": 0},
//!  "posts": [{"post_id": "r1", "parent_id": "c", "text": "...", "timestamp": 60}]}
//! ```
//!
//! Timestamps are seconds. Absolute times are accepted and rebased so the
//! claim sits at 0.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStreams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "non-rumor")]
    NonRumor,
    #[serde(rename = "rumor")]
    Rumor,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonRumor, Label::Rumor];

    /// Class index used by the classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::NonRumor => 0,
            Label::Rumor => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NonRumor => "non-rumor",
            Label::Rumor => "rumor",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Post {
    pub post_id: String,
    /// `None` only for the claim.
    pub parent_id: Option<String>,
    pub text: String,
    /// Seconds since the claim was posted.
    pub timestamp: i64,
}

/// A claim with its reply tree.
///
/// `posts[0]` is the claim; replies follow in chronological order with ties
/// broken by `post_id`, and every reply comes after its parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub event_id: String,
    pub label: Label,
    posts: Vec<Post>,
    parents: Vec<Option<usize>>,
}

impl Event {
    /// Validates the thread and puts replies in canonical order.
    pub fn new(event_id: impl Into<String>, label: Label, claim: Post, replies: Vec<Post>) -> Result<Self> {
        let event_id = event_id.into();
        if claim.post_id.is_empty() {
            return Err(Error::structure(&event_id, "claim post_id is empty"));
        }
        let base = claim.timestamp;
        let claim = Post {
            parent_id: None,
            timestamp: 0,
            ..claim
        };

        let claim_id = claim.post_id.clone();
        let mut ids: HashSet<&str> = HashSet::new();
        ids.insert(&claim_id);
        for p in &replies {
            if p.post_id.is_empty() {
                return Err(Error::structure(&event_id, "reply with empty post_id"));
            }
            if !ids.insert(&p.post_id) {
                return Err(Error::structure(
                    &event_id,
                    format!("duplicate post_id {:?}", p.post_id),
                ));
            }
        }

        let mut by_id: HashMap<&str, (i64, Option<usize>)> = HashMap::new();
        by_id.insert(&claim_id, (0, None));
        for (i, p) in replies.iter().enumerate() {
            by_id.insert(&p.post_id, (p.timestamp - base, Some(i)));
        }

        // children[None] are the claim's children, children[Some(i)] reply i's
        let mut children: HashMap<Option<usize>, Vec<usize>> = HashMap::new();
        for (i, p) in replies.iter().enumerate() {
            let parent = p
                .parent_id
                .as_deref()
                .ok_or_else(|| Error::structure(&event_id, format!("reply {:?} has no parent_id", p.post_id)))?;
            let &(parent_ts, parent_idx) = by_id.get(parent).ok_or_else(|| {
                Error::structure(
                    &event_id,
                    format!("post {:?} replies to unknown parent {:?}", p.post_id, parent),
                )
            })?;
            if parent_idx == Some(i) {
                return Err(Error::structure(
                    &event_id,
                    format!("post {:?} replies to itself", p.post_id),
                ));
            }
            let ts = p.timestamp - base;
            if parent_ts > ts {
                return Err(Error::structure(
                    &event_id,
                    format!(
                        "post {:?} (t={ts}) is earlier than its parent {:?} (t={parent_ts})",
                        p.post_id, parent
                    ),
                ));
            }
            children.entry(parent_idx).or_default().push(i);
        }

        // Chronological order that never places a reply before its parent.
        let mut posts = vec![claim];
        let mut parents = vec![None];
        let mut position: HashMap<usize, usize> = HashMap::new();
        let mut ready = BinaryHeap::new();
        let push_children = |heap: &mut BinaryHeap<_>, parent: Option<usize>| {
            for &c in children.get(&parent).into_iter().flatten() {
                let p: &Post = &replies[c];
                heap.push(Reverse((p.timestamp - base, p.post_id.clone(), c)));
            }
        };
        push_children(&mut ready, None);
        while let Some(Reverse((ts, _, i))) = ready.pop() {
            let p = &replies[i];
            let parent_pos = match by_id[p.parent_id.as_deref().unwrap()].1 {
                None => 0,
                Some(j) => position[&j],
            };
            position.insert(i, posts.len());
            parents.push(Some(parent_pos));
            posts.push(Post {
                timestamp: ts,
                ..p.clone()
            });
            push_children(&mut ready, Some(i));
        }
        if posts.len() != replies.len() + 1 {
            return Err(Error::structure(
                &event_id,
                "reply links do not form a tree rooted at the claim",
            ));
        }
        Ok(Self {
            event_id,
            label,
            posts,
            parents,
        })
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn claim(&self) -> &Post {
        &self.posts[0]
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position of each post's parent in [`Event::posts`] (`None` for the claim).
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Longest reply chain below the claim, in edges.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.posts.len()];
        for i in 1..self.posts.len() {
            depth[i] = depth[self.parents[i].unwrap()] + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }

    pub fn duration(&self) -> i64 {
        self.posts.last().map_or(0, |p| p.timestamp)
    }

    /// Keeps the prefix of posts available at checkpoint `value`.
    ///
    /// The claim always survives. Because parents precede children in the
    /// canonical order, any prefix is itself a valid tree.
    pub fn truncate(&self, mode: CheckpointMode, value: u64) -> Event {
        let keep = match mode {
            CheckpointMode::PostCount => (value.max(1) as usize).min(self.posts.len()),
            CheckpointMode::ElapsedTime => {
                1 + self.posts[1..]
                    .iter()
                    .take_while(|p| p.timestamp as i128 <= value as i128)
                    .count()
            }
        };
        Event {
            event_id: self.event_id.clone(),
            label: self.label,
            posts: self.posts[..keep].to_vec(),
            parents: self.parents[..keep].to_vec(),
        }
    }

    fn to_raw(&self) -> RawEvent {
        let claim = self.claim();
        RawEvent {
            event_id: self.event_id.clone(),
            label: Some(self.label),
            claim: RawClaim {
                post_id: claim.post_id.clone(),
                text: claim.text.clone(),
                timestamp: 0,
            },
            posts: self.posts[1..]
                .iter()
                .map(|p| RawPost {
                    post_id: p.post_id.clone(),
                    parent_id: p.parent_id.clone(),
                    text: p.text.clone(),
                    timestamp: p.timestamp,
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    event_id: String,
    #[serde(default)]
    label: Option<Label>,
    claim: RawClaim,
    #[serde(default)]
    posts: Vec<RawPost>,
}

#[derive(Serialize, Deserialize)]
struct RawClaim {
    post_id: String,
    #[serde(default)]
    text: String,
    timestamp: i64,
}

#[derive(Serialize, Deserialize)]
struct RawPost {
    post_id: String,
    #[serde(default)]
    parent_id: Option<String>,
    #[serde(default)]
    text: String,
    timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub role: Option<Role>,
    pub language: String,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub events: usize,
    pub tree_nodes: usize,
    pub rumors: usize,
    pub non_rumors: usize,
    pub avg_depth: f64,
    pub avg_duration_hours: f64,
}

impl Dataset {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &events {
            if !seen.insert(e.event_id.as_str()) {
                return Err(Error::structure(&e.event_id, "duplicate event_id"));
            }
        }
        let ds = Self {
            events,
            ..Default::default()
        };
        if !ds.events.is_empty() && ds.label_counts().values().filter(|&&c| c > 0).count() < 2 {
            log::warn!("dataset holds a single label");
        }
        Ok(ds)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
        for e in &self.events {
            *counts.entry(e.label).or_default() += 1;
        }
        counts
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.events.len().max(1) as f64;
        let counts = self.label_counts();
        DatasetStats {
            events: self.events.len(),
            tree_nodes: self.events.iter().map(Event::len).sum(),
            rumors: counts[&Label::Rumor],
            non_rumors: counts[&Label::NonRumor],
            avg_depth: self.events.iter().map(|e| e.depth() as f64).sum::<f64>() / n,
            avg_duration_hours: self.events.iter().map(|e| e.duration() as f64 / 3600.0).sum::<f64>() / n,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            events: indices.iter().map(|&i| self.events[i].clone()).collect(),
            role: self.role,
            language: self.language.clone(),
            domain: self.domain.clone(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(&e.to_raw())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates an event file.
pub fn parse_events(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events_str(&text, path)
}

/// Parses JSONL event text; `origin` is only used in error messages.
pub fn parse_events_str(text: &str, origin: &Path) -> Result<Dataset> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| Error::Format {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let raw: RawEvent = serde_json::from_str(line).map_err(|e| format_err(e.to_string()))?;
        let label = raw
            .label
            .ok_or_else(|| Error::structure(&raw.event_id, "missing label"))?;
        let claim = Post {
            post_id: raw.claim.post_id,
            parent_id: None,
            text: raw.claim.text,
            timestamp: raw.claim.timestamp,
        };
        let replies = raw
            .posts
            .into_iter()
            .map(|p| Post {
                post_id: p.post_id,
                parent_id: p.parent_id,
                text: p.text,
                timestamp: p.timestamp,
            })
            .collect();
        events.push(Event::new(raw.event_id, label, claim, replies)?);
    }
    Dataset::new(events)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// event_id → fold index
    pub assignment: BTreeMap<String, usize>,
    pub stratified: bool,
    pub seed: u64,
}

impl FoldPlan {
    /// Dataset indices per fold, in dataset order.
    pub fn fold_indices(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, e) in dataset.events.iter().enumerate() {
            if let Some(&f) = self.assignment.get(&e.event_id) {
                folds[f].push(i);
            }
        }
        folds
    }
}

pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    split_folds_with(dataset, k, seed, true)
}

/// Shuffles with the `shuffle` stream and deals events round-robin into `k`
/// folds, per label when `stratified`.
pub fn split_folds_with(dataset: &Dataset, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Stratification(format!("need k >= 2, got {k}")));
    }
    if dataset.len() < k {
        return Err(Error::Stratification(format!(
            "{} events cannot fill {k} folds",
            dataset.len()
        )));
    }
    let mut streams = RngStreams::new(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        Label::ALL
            .iter()
            .map(|&l| {
                (0..dataset.len())
                    .filter(|&i| dataset.events[i].label == l)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };
    for g in &groups {
        if g.len() < k {
            let label = dataset.events[g[0]].label;
            log::warn!(
                "class {label} has {} events, fewer than k = {k}; some folds lack it",
                g.len()
            );
        }
    }
    let mut assignment = BTreeMap::new();
    let mut offset = 0;
    for mut group in groups {
        streams.shuffle(Stream::Shuffle, &mut group);
        for (pos, &i) in group.iter().enumerate() {
            assignment.insert(dataset.events[i].event_id.clone(), (offset + pos) % k);
        }
        offset = (offset + group.len()) % k;
    }
    Ok(FoldPlan {
        k,
        assignment,
        stratified,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    ElapsedTime,
    PostCount,
}

/// `u64::MAX` stands for an unbounded checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    pub mode: CheckpointMode,
    pub values: Vec<u64>,
}

impl CheckpointSpec {
    pub fn new(mode: CheckpointMode, values: Vec<u64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("checkpoint list is empty".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("checkpoints must be strictly ascending".into()));
        }
        if values[0] == 0 {
            return Err(Error::Config("checkpoints must be positive".into()));
        }
        Ok(Self { mode, values })
    }

    /// Parses a comma-separated list; `inf` is the unbounded checkpoint.
    pub fn parse(mode: CheckpointMode, list: &str) -> Result<Self> {
        let values = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                if s.eq_ignore_ascii_case("inf") {
                    Ok(u64::MAX)
                } else {
                    s.parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad checkpoint value {s:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mode, values)
    }
}

pub fn format_checkpoint(value: u64) -> String {
    if value == u64::MAX {
        "inf".to_string()
    } else {
        value.to_string()
    }
}

pub fn truncate_event(event: &Event, mode: CheckpointMode, value: u64) -> Event {
    event.truncate(mode, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, parent: Option<&str>, ts: i64) -> Post {
        Post {
            post_id: id.into(),
            parent_id: parent.map(Into::into),
            text: format!("text {id}"),
            timestamp: ts,
        }
    }

    fn chain() -> Event {
        Event::new(
            "e",
            Label::Rumor,
            post("c", None, 0),
            vec![post("b", Some("a"), 120), post("a", Some("c"), 60)],
        )
        .unwrap()
    }

    #[test]
    fn claim_only_event() {
        let ds = parse_events_str(
            r#"{"event_id":"e1","label":"rumor","claim":{"post_id":"c","text":"hi","timestamp":0},"posts":[]}"#,
            Path::new("mem"),
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.events[0].len(), 1);
        assert_eq!(ds.events[0].depth(), 0);
    }

    #[test]
    fn chain_depth_and_order() {
        let e = chain();
        assert_eq!(e.depth(), 2);
        let ids: Vec<_> = e.posts().iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(e.parents(), &[None, Some(0), Some(1)]);
    }

    #[test]
    fn unknown_parent_is_structural_error() {
        let err = Event::new(
            "e9",
            Label::NonRumor,
            post("c", None, 0),
            vec![post("r", Some("ghost"), 5)],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("e9") && msg.contains("ghost"), "{msg}");
    }

    #[test]
    fn duplicate_post_is_error() {
        assert!(Event::new(
            "e",
            Label::Rumor,
            post("c", None, 0),
            vec![post("r", Some("c"), 1), post("r", Some("c"), 2)],
        )
        .is_err());
    }

    #[test]
    fn missing_label_is_error() {
        let err = parse_events_str(
            r#"{"event_id":"e1","claim":{"post_id":"c","text":"","timestamp":0}}"#,
            Path::new("mem"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing label"));
    }

    #[test]
    fn parent_later_than_child_is_error() {
        assert!(Event::new(
            "e",
            Label::Rumor,
            post("c", None, 0),
            vec![post("a", Some("c"), 50), post("b", Some("a"), 40)],
        )
        .is_err());
    }

    #[test]
    fn cycle_is_error() {
        assert!(Event::new(
            "e",
            Label::Rumor,
            post("c", None, 0),
            vec![post("a", Some("b"), 5), post("b", Some("a"), 5)],
        )
        .is_err());
    }

    #[test]
    fn absolute_timestamps_are_rebased() {
        let e = Event::new(
            "e",
            Label::Rumor,
            post("c", None, 1_600_000_000),
            vec![post("a", Some("c"), 1_600_000_060)],
        )
        .unwrap();
        assert_eq!(e.posts()[0].timestamp, 0);
        assert_eq!(e.posts()[1].timestamp, 60);
    }

    #[test]
    fn equal_timestamps_keep_parent_first() {
        // "a" sorts after "0" lexicographically but is its parent
        let e = Event::new(
            "e",
            Label::Rumor,
            post("c", None, 0),
            vec![
                post("a", Some("c"), 10),
                post("0", Some("a"), 10),
                post("1", Some("c"), 10),
            ],
        )
        .unwrap();
        let ids: Vec<_> = e.posts().iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, ["c", "1", "a", "0"]);
    }

    #[test]
    fn truncation_cases() {
        let e = chain();
        assert_eq!(e.truncate(CheckpointMode::PostCount, 1).len(), 1);
        assert_eq!(e.truncate(CheckpointMode::ElapsedTime, 90).len(), 2);
        assert_eq!(e.truncate(CheckpointMode::ElapsedTime, 10_000), e);
        assert_eq!(e.truncate(CheckpointMode::PostCount, u64::MAX), e);
    }

    fn balanced(n_each: usize) -> Dataset {
        let mut events = Vec::new();
        for i in 0..2 * n_each {
            let label = if i % 2 == 0 { Label::Rumor } else { Label::NonRumor };
            events.push(Event::new(format!("e{i}"), label, post("c", None, 0), vec![]).unwrap());
        }
        Dataset::new(events).unwrap()
    }

    #[test]
    fn stratified_ten_into_five() {
        let ds = balanced(5);
        let plan = split_folds(&ds, 5, 1).unwrap();
        for fold in plan.fold_indices(&ds) {
            let rumors = fold.iter().filter(|&&i| ds.events[i].label == Label::Rumor).count();
            assert_eq!(fold.len(), 2);
            assert_eq!(rumors, 1);
        }
    }

    #[test]
    fn two_events_two_folds() {
        let ds = balanced(1);
        let plan = split_folds(&ds, 2, 3).unwrap();
        let folds = plan.fold_indices(&ds);
        assert_eq!(folds[0].len(), 1);
        assert_eq!(folds[1].len(), 1);
    }

    #[test]
    fn folds_are_deterministic() {
        let ds = balanced(7);
        assert_eq!(split_folds(&ds, 3, 9).unwrap(), split_folds(&ds, 3, 9).unwrap());
    }

    #[test]
    fn too_few_events_fail_stratification() {
        let ds = balanced(2);
        assert!(matches!(split_folds(&ds, 5, 0), Err(Error::Stratification(_))));
        assert!(matches!(split_folds(&ds, 1, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn checkpoint_spec_validation() {
        assert!(CheckpointSpec::new(CheckpointMode::PostCount, vec![1, 1]).is_err());
        assert!(CheckpointSpec::new(CheckpointMode::PostCount, vec![0, 3]).is_err());
        let cp = CheckpointSpec::parse(CheckpointMode::ElapsedTime, "60, 600,inf").unwrap();
        assert_eq!(cp.values, vec![60, 600, u64::MAX]);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = Dataset::new(vec![chain()]).unwrap();
        let text = ds.to_jsonl().unwrap();
        assert_eq!(parse_events_str(&text, Path::new("mem")).unwrap(), ds);
    }
}
