//! Synthetic two-domain rumor benchmark.
//!
//! Both domains draw claims and replies from the same class-conditional
//! process. In the target domain a fraction `shift` of the class cue words
//! is swapped for domain-specific replacements, and the neutral filler comes
//! from a separate vocabulary, so a hashed embedding sees a partially
//! disjoint feature space.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Event, Label, Post, Role};
use crate::error::{Error, Result};
use crate::numcore::{RngStreams, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub source_events: usize,
    pub target_events: usize,
    /// Fraction of rumor events in each domain.
    pub rumor_fraction: f64,
    /// Neutral filler words per domain.
    pub vocab_size: usize,
    /// Cue words per class.
    pub cue_words: usize,
    /// Probability that a claim word is a class cue.
    pub cue_rate: f64,
    /// Fraction of cue words replaced in the target domain.
    pub shift: f64,
    /// Whether target filler words differ from the source ones.
    pub shift_filler: bool,
    pub min_replies: usize,
    pub max_replies: usize,
    /// Maximum children per post.
    pub max_children: usize,
    /// Probability that an event's reply pattern follows its class.
    pub structural_signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            source_events: 200,
            target_events: 100,
            rumor_fraction: 0.5,
            vocab_size: 300,
            cue_words: 12,
            cue_rate: 0.3,
            shift: 0.5,
            shift_filler: true,
            min_replies: 3,
            max_replies: 12,
            max_children: 4,
            structural_signal: 0.9,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("rumor_fraction", self.rumor_fraction),
            ("cue_rate", self.cue_rate),
            ("shift", self.shift),
            ("structural_signal", self.structural_signal),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, n) in [
            ("source_events", self.source_events),
            ("target_events", self.target_events),
        ] {
            let rumors = class_count(n, self.rumor_fraction);
            if rumors < 2 || n - rumors < 2 {
                return Err(Error::Config(format!("{name} must give at least 2 events per class")));
            }
        }
        if self.vocab_size == 0 || self.cue_words == 0 || self.max_children == 0 {
            return Err(Error::Config(
                "vocab_size, cue_words and max_children must be >= 1".into(),
            ));
        }
        if self.min_replies > self.max_replies {
            return Err(Error::Config("min_replies exceeds max_replies".into()));
        }
        Ok(())
    }
}

fn class_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

struct Vocab {
    filler: &'static str,
    /// Prefix of the target-only replacement cue words, if any.
    shifted: Option<usize>,
}

fn cue_word(label: Label, pattern: &str, i: usize, vocab: &Vocab) -> String {
    let class = match label {
        Label::Rumor => "r",
        Label::NonRumor => "n",
    };
    match vocab.shifted {
        Some(k) if i < k => format!("t{class}{pattern}{i}"),
        _ => format!("{class}{pattern}{i}"),
    }
}

fn pick(streams: &mut RngStreams, n: usize) -> usize {
    ((streams.uniform(Stream::Synth) * n as f64) as usize).min(n - 1)
}

fn words(
    streams: &mut RngStreams,
    spec: &SynthSpec,
    vocab: &Vocab,
    label: Label,
    pattern: &str,
    count: usize,
    cue_rate: f64,
) -> String {
    (0..count)
        .map(|_| {
            if streams.uniform(Stream::Synth) < cue_rate {
                cue_word(label, pattern, pick(streams, spec.cue_words), vocab)
            } else {
                format!("{}{}", vocab.filler, pick(streams, spec.vocab_size))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn event(streams: &mut RngStreams, spec: &SynthSpec, vocab: &Vocab, id: String, label: Label) -> Result<Event> {
    let claim = Post {
        post_id: format!("{id}-0"),
        parent_id: None,
        text: words(streams, spec, vocab, label, "c", 10, spec.cue_rate),
        timestamp: 0,
    };
    // The reply pattern follows the class with probability structural_signal.
    let follows = streams.uniform(Stream::Synth) < spec.structural_signal;
    let pattern = if follows {
        label
    } else if label == Label::Rumor {
        Label::NonRumor
    } else {
        Label::Rumor
    };
    let span = spec.max_replies - spec.min_replies + 1;
    let n = spec.min_replies + pick(streams, span);
    let mut children = vec![0usize; n + 1];
    let mut timestamps = vec![0i64; n + 1];
    let mut replies = Vec::with_capacity(n);
    for i in 1..=n {
        // Rumor-style threads grow deep denial chains; the others fan out
        // from the claim.
        let deep = pattern == Label::Rumor;
        let mut parent = if deep && streams.uniform(Stream::Synth) < 0.7 {
            i - 1
        } else if !deep && streams.uniform(Stream::Synth) < 0.8 {
            0
        } else {
            pick(streams, i)
        };
        while children[parent] >= spec.max_children {
            parent = (parent + 1) % i;
        }
        children[parent] += 1;
        timestamps[i] = timestamps[parent].max(timestamps[i - 1]) + 1 + pick(streams, 1800) as i64;
        replies.push(Post {
            post_id: format!("{id}-{i}"),
            parent_id: Some(format!("{id}-{parent}")),
            text: words(streams, spec, vocab, pattern, "s", 5, 0.5),
            timestamp: timestamps[i],
        });
    }
    Event::new(id, label, claim, replies)
}

fn domain(streams: &mut RngStreams, spec: &SynthSpec, role: Role) -> Result<Dataset> {
    let (n, prefix) = match role {
        Role::Source => (spec.source_events, "src"),
        Role::Target => (spec.target_events, "tgt"),
    };
    let vocab = match role {
        Role::Source => Vocab {
            filler: "w",
            shifted: None,
        },
        Role::Target => Vocab {
            filler: if spec.shift_filler { "x" } else { "w" },
            shifted: Some((spec.shift * spec.cue_words as f64).round() as usize),
        },
    };
    let rumors = class_count(n, spec.rumor_fraction);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < rumors { Label::Rumor } else { Label::NonRumor })
        .collect();
    streams.shuffle(Stream::Synth, &mut labels);
    let events = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| event(streams, spec, &vocab, format!("{prefix}{i:04}"), label))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(events)?.with_role(role);
    ds.domain = prefix.to_string();
    Ok(ds)
}

/// Generates the (source, target) pair.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut streams = RngStreams::new(spec.seed);
    let source = domain(&mut streams, spec, Role::Source)?;
    let target = domain(&mut streams, spec, Role::Target)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small() -> SynthSpec {
        SynthSpec {
            source_events: 20,
            target_events: 10,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn class_balance_and_sizes() {
        let (s, t) = generate(&small()).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(t.len(), 10);
        assert_eq!(s.label_counts()[&Label::Rumor], 10);
        for e in s.events.iter().chain(&t.events) {
            assert!(e.len() > small().min_replies && e.len() <= small().max_replies + 1);
        }
    }

    #[test]
    fn no_shift_shares_vocabulary() {
        let spec = SynthSpec {
            shift: 0.0,
            shift_filler: false,
            source_events: 200,
            target_events: 200,
            ..Default::default()
        };
        let (s, t) = generate(&spec).unwrap();
        let vocab = |d: &Dataset, label: Label| {
            let mut m = BTreeMap::new();
            for e in d.events.iter().filter(|e| e.label == label) {
                for p in e.posts() {
                    for w in p.text.split(' ') {
                        *m.entry(w.to_string()).or_insert(0usize) += 1;
                    }
                }
            }
            m.into_keys().collect::<Vec<_>>()
        };
        assert_eq!(vocab(&s, Label::Rumor), vocab(&t, Label::Rumor));
    }

    #[test]
    fn full_shift_replaces_every_cue() {
        let spec = SynthSpec { shift: 1.0, ..small() };
        let (_, t) = generate(&spec).unwrap();
        for e in &t.events {
            for w in e.posts().iter().flat_map(|p| p.text.split(' ')) {
                assert!(w.starts_with('t') || w.starts_with('x'), "{w}");
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&SynthSpec { shift: 1.5, ..small() }).is_err());
        assert!(generate(&SynthSpec {
            target_events: 3,
            ..small()
        })
        .is_err());
    }
}
