//! Sample materialization, few-shot subsetting, and the textual sample store.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{HistoryEvent, InteractionEvent, InteractionSample, LabelRule, Split};
use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Preprocessing rules applied when turning raw events into samples.
#[derive(Debug, Clone, Copy)]
pub struct SampleRules {
    pub label_rule: LabelRule,
    /// Samples whose lifelong history is shorter than this are filtered out.
    pub min_history: usize,
    /// Train:test ratio applied at the global-timestamp cut.
    pub train_parts: u32,
    pub test_parts: u32,
}

impl Default for SampleRules {
    fn default() -> Self {
        SampleRules {
            label_rule: LabelRule::MovieLens1M,
            min_history: 5,
            train_parts: 8,
            test_parts: 1,
        }
    }
}

/// Materialize CTR samples with lifelong histories.
///
/// Each event becomes a candidate target whose history is every event of the
/// same user strictly before the target timestamp, in chronological order
/// (file order as a stable secondary key). Targets sharing a timestamp share
/// one history allocation. The train/test assignment is a sample-count cut at
/// the global target timestamp, with ties at the boundary going to train.
pub fn build_samples(events: &[InteractionEvent], rules: &SampleRules) -> Result<Vec<InteractionSample>> {
    if events.is_empty() {
        return Err(Error::EmptyEvents);
    }

    let mut by_user: BTreeMap<u32, Vec<&InteractionEvent>> = BTreeMap::new();
    for event in events {
        by_user.entry(event.user_id).or_default().push(event);
    }

    let mut samples = Vec::new();
    for (user_id, mut user_events) in by_user {
        user_events.sort_by_key(|e| (e.timestamp, e.seq));

        // prefix history shared across all targets at the same timestamp
        let mut prefix: Vec<HistoryEvent> = Vec::new();
        let mut idx = 0;
        while idx < user_events.len() {
            let ts = user_events[idx].timestamp;
            let mut group_end = idx;
            while group_end < user_events.len() && user_events[group_end].timestamp == ts {
                group_end += 1;
            }
            let history = Arc::new(prefix.clone());
            for event in &user_events[idx..group_end] {
                if history.len() >= rules.min_history {
                    samples.push(InteractionSample {
                        user_id,
                        history: Arc::clone(&history),
                        target_item: event.item_id,
                        label: rules.label_rule.label(event.rating),
                        timestamp: event.timestamp,
                        split: Split::Train, // assigned below
                    });
                }
                prefix.push(HistoryEvent {
                    item_id: event.item_id,
                    label: rules.label_rule.label(event.rating),
                    timestamp: event.timestamp,
                });
            }
            idx = group_end;
        }
    }

    if samples.is_empty() {
        return Ok(samples);
    }

    samples.sort_by_key(|s| (s.timestamp, s.user_id, s.target_item));
    let n = samples.len() as u64;
    let parts = u64::from(rules.train_parts + rules.test_parts);
    let train_target = ((n * u64::from(rules.train_parts) + parts / 2) / parts).max(1) as usize;
    let boundary_ts = samples[train_target - 1].timestamp;
    for sample in &mut samples {
        sample.split = if sample.timestamp <= boundary_ts {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(samples)
}

/// Uniform sample of `count` training samples without replacement,
/// deterministic under `seed`. The result preserves the input's relative
/// order, so `count == population` returns the whole set unchanged.
pub fn sample_few_shot(samples: &[InteractionSample], count: usize, seed: u64) -> Result<Vec<InteractionSample>> {
    if count > samples.len() {
        return Err(Error::ShotCount {
            requested: count,
            population: samples.len(),
        });
    }
    let mut rng = DetRng::new(seed).split("few-shot");
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    for i in 0..count {
        let j = i + rng.next_below(samples.len() - i);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| samples[i].clone()).collect())
}

/// Serialize samples, one per line, in a stable field order:
/// `user<TAB>split<TAB>label<TAB>target<TAB>timestamp<TAB>item:label:ts,...`
pub fn serialize_samples(samples: &[InteractionSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let history: Vec<String> = s
            .history
            .iter()
            .map(|h| format!("{}:{}:{}", h.item_id, h.label, h.timestamp))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.user_id,
            s.split.as_str(),
            s.label,
            s.target_item,
            s.timestamp,
            history.join(",")
        ));
    }
    out
}

pub fn parse_samples(text: &str) -> Result<Vec<InteractionSample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Load {
            file: "<sample store>".into(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", fields.len())));
        }
        let user_id = fields[0].parse().map_err(|_| err("bad user id".into()))?;
        let split = match fields[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("bad split `{other}`"))),
        };
        let label = fields[2].parse().map_err(|_| err("bad label".into()))?;
        let target_item = fields[3].parse().map_err(|_| err("bad target".into()))?;
        let timestamp = fields[4].parse().map_err(|_| err("bad timestamp".into()))?;
        let mut history = Vec::new();
        if !fields[5].is_empty() {
            for entry in fields[5].split(',') {
                let parts: Vec<&str> = entry.split(':').collect();
                if parts.len() != 3 {
                    return Err(err(format!("bad history entry `{entry}`")));
                }
                history.push(HistoryEvent {
                    item_id: parts[0].parse().map_err(|_| err("bad history item".into()))?,
                    label: parts[1].parse().map_err(|_| err("bad history label".into()))?,
                    timestamp: parts[2].parse().map_err(|_| err("bad history ts".into()))?,
                });
            }
        }
        out.push(InteractionSample {
            user_id,
            history: Arc::new(history),
            target_item,
            label,
            timestamp,
            split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(user: u32, item: u32, rating: f64, ts: i64, seq: usize) -> InteractionEvent {
        InteractionEvent {
            user_id: user,
            item_id: item,
            rating,
            timestamp: ts,
            seq,
        }
    }

    fn chain(user: u32, n: usize, start_ts: i64) -> Vec<InteractionEvent> {
        (0..n)
            .map(|i| event(user, 100 + i as u32, if i % 2 == 0 { 5.0 } else { 2.0 }, start_ts + i as i64, i))
            .collect()
    }

    #[test]
    fn short_histories_are_filtered() {
        // 5 events: targets at positions 0..=4 have history lengths 0..=4, all below 5
        let events = chain(1, 5, 100);
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert!(samples.is_empty());
        // 6 events: exactly one target (the last) has history length 5
        let events = chain(1, 6, 100);
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].history.len(), 5);
    }

    #[test]
    fn rating_three_is_negative_under_ml1m_rule() {
        let mut events = chain(1, 5, 100);
        events.push(event(1, 200, 3.0, 200, 5));
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 0);
    }

    #[test]
    fn histories_are_strictly_chronological_and_before_target() {
        let events = chain(1, 12, 100);
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        for s in &samples {
            for pair in s.history.windows(2) {
                assert!(pair[0].timestamp <= pair[1].timestamp);
            }
            for h in s.history.iter() {
                assert!(h.timestamp < s.timestamp);
            }
        }
    }

    #[test]
    fn same_timestamp_targets_share_history_object() {
        let mut events = chain(1, 5, 100);
        events.push(event(1, 201, 5.0, 500, 5));
        events.push(event(1, 202, 2.0, 500, 6));
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert_eq!(samples.len(), 2);
        assert!(Arc::ptr_eq(&samples[0].history, &samples[1].history));
        assert_ne!(samples[0].target_item, samples[1].target_item);
        // events at the target timestamp are excluded from the history
        assert_eq!(samples[0].history.len(), 5);
    }

    #[test]
    fn split_is_temporally_consistent() {
        let mut events = Vec::new();
        for user in 1..=6 {
            for (i, e) in chain(user, 20, 100).into_iter().enumerate() {
                let mut e = e;
                // interleave users over time
                e.timestamp = 100 + (i as i64) * 10 + i64::from(user);
                e.seq = events.len();
                events.push(e);
            }
        }
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        let max_train = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.timestamp)
            .max()
            .unwrap();
        let min_test = samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.timestamp)
            .min()
            .unwrap();
        assert!(max_train <= min_test);
        let train = samples.iter().filter(|s| s.split == Split::Train).count();
        let frac = train as f64 / samples.len() as f64;
        assert!((frac - 8.0 / 9.0).abs() < 0.05, "train fraction {frac}");
    }

    #[test]
    fn boundary_ties_go_to_train() {
        // 9 samples all at the same timestamp: everything lands in train
        let mut events = chain(1, 5, 100);
        for k in 0..9 {
            events.push(event(1, 300 + k, 5.0, 999, 5 + k as usize));
        }
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert_eq!(samples.len(), 9);
        assert!(samples.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn empty_events_is_an_error() {
        assert!(matches!(build_samples(&[], &SampleRules::default()), Err(Error::EmptyEvents)));
    }

    #[test]
    fn few_shot_full_population_in_original_order() {
        let mut events = chain(1, 10, 100);
        for e in chain(2, 10, 100) {
            events.push(e);
        }
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        let all = sample_few_shot(&samples, samples.len(), 7).unwrap();
        for (a, b) in all.iter().zip(&samples) {
            assert_eq!(a.target_item, b.target_item);
            assert_eq!(a.user_id, b.user_id);
        }
    }

    #[test]
    fn few_shot_is_deterministic_and_bounded() {
        let events = chain(1, 30, 100);
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        let a = sample_few_shot(&samples, 5, 42).unwrap();
        let b = sample_few_shot(&samples, 5, 42).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target_item, y.target_item);
        }
        assert!(sample_few_shot(&samples, samples.len() + 1, 42).is_err());
    }

    #[test]
    fn few_shot_inclusion_is_uniform_over_seeds() {
        // 100 seeded draws of 10 from 1000: every element's inclusion count
        // is Binomial(100, 0.01). A literal per-element 3-sigma gate would
        // reject ~2% of elements for any correct sampler, so the deterministic
        // pin here is: exact total, at least 96% of elements within 3 sigma,
        // and no element wildly outside it.
        let mut events = Vec::new();
        for user in 1..=50u32 {
            for e in chain(user, 26, 100) {
                let mut e = e;
                e.seq = events.len();
                events.push(e);
            }
        }
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        assert!(samples.len() >= 1000);
        let population: Vec<InteractionSample> = samples.into_iter().take(1000).collect();

        let mut counts = vec![0usize; 1000];
        for seed in 0..100u64 {
            let draw = sample_few_shot(&population, 10, seed).unwrap();
            assert_eq!(draw.len(), 10);
            for sample in &draw {
                let idx = population
                    .iter()
                    .position(|p| {
                        p.user_id == sample.user_id && p.target_item == sample.target_item && p.timestamp == sample.timestamp
                    })
                    .unwrap();
                counts[idx] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 1000);
        // 3 sigma around the mean of 1: counts 0..=3
        let within = counts.iter().filter(|&&c| c <= 3).count();
        assert!(within >= 960, "only {within}/1000 within 3 sigma");
        assert!(counts.iter().all(|&c| c <= 8), "max count {}", counts.iter().max().unwrap());
    }

    #[test]
    fn store_round_trips_byte_identically() {
        let mut events = chain(1, 8, 100);
        for e in chain(2, 8, 150) {
            events.push(e);
        }
        let samples = build_samples(&events, &SampleRules::default()).unwrap();
        let text = serialize_samples(&samples);
        let reparsed = parse_samples(&text).unwrap();
        assert_eq!(serialize_samples(&reparsed), text);
    }
}
