//! Synthetic clustered corpus with planted user preferences.
//!
//! Items live in genre clusters; every user has one latent preferred cluster
//! and rates same-cluster items high. That makes "more relevant history
//! helps" literally true, so directional claims (retrieval lowers sequence
//! heterogeneity, longer histories help) are testable without downloads.
//! The generator also plants per-item semantic vectors (cluster center plus
//! noise) usable through the import encoder.

use std::collections::BTreeMap;

use super::{Catalog, InteractionEvent, Item, User};
use crate::rng::DetRng;

const GENRES: [&str; 24] = [
    "Action", "Thriller", "Crime", "Comedy", "Romance", "Family", "SciFi", "Fantasy", "Horror", "Documentary",
    "History", "War", "Animation", "Musical", "Adventure", "Mystery", "Western", "Noir", "Drama", "Sport",
    "Biography", "Nature", "Travel", "Short",
];

const ADJECTIVES: [&str; 16] = [
    "Silent", "Crimson", "Golden", "Hidden", "Broken", "Distant", "Electric", "Frozen", "Midnight", "Scarlet",
    "Shining", "Lonely", "Savage", "Gentle", "Burning", "Secret",
];

const NOUNS: [&str; 16] = [
    "Harbor", "Garden", "River", "Mountain", "Empire", "Voyage", "Shadow", "Dream", "Castle", "Horizon", "Legacy",
    "Whisper", "Storm", "Canyon", "Mirror", "Promise",
];

const OCCUPATIONS: [&str; 4] = ["engineer", "teacher", "artist", "student"];
const AGES: [&str; 3] = ["18-24", "25-34", "35-44"];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub events_per_user: usize,
    /// Probability an interaction draws from the user's preferred cluster.
    pub preferred_mix: f64,
    /// Probability a rating flips against the planted preference.
    pub label_noise: f64,
    /// Dimension of the planted raw semantic vectors.
    pub vector_dim: usize,
    /// Per-coordinate Gaussian noise around the cluster center.
    pub vector_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 150,
            n_items: 240,
            n_clusters: 6,
            events_per_user: 40,
            preferred_mix: 0.5,
            label_noise: 0.1,
            vector_dim: 16,
            vector_noise: 0.25,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub catalog: Catalog,
    pub events: Vec<InteractionEvent>,
    /// Planted raw semantic vectors, keyed by item id.
    pub vectors: BTreeMap<u32, Vec<f64>>,
    /// Planted preferred cluster per user (diagnostics only).
    pub preferred: BTreeMap<u32, usize>,
    /// Cluster per item (diagnostics only).
    pub item_cluster: BTreeMap<u32, usize>,
}

/// Genres assigned to a cluster: three consecutive entries of the pool.
pub fn cluster_genres(cluster: usize) -> [&'static str; 3] {
    let base = (cluster * 3) % GENRES.len();
    [GENRES[base], GENRES[(base + 1) % GENRES.len()], GENRES[(base + 2) % GENRES.len()]]
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.n_clusters >= 2, "need at least two clusters");
    assert!(spec.n_clusters * 3 <= GENRES.len(), "genre pool exhausted");
    let root = DetRng::new(spec.seed).split("synthetic");

    let mut catalog = Catalog::default();
    let mut item_cluster = BTreeMap::new();
    let mut vectors = BTreeMap::new();

    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|c| {
            let mut rng = root.split(&format!("center-{c}"));
            (0..spec.vector_dim).map(|_| rng.next_normal()).collect()
        })
        .collect();

    let mut item_rng = root.split("items");
    for i in 0..spec.n_items {
        let item_id = i as u32 + 1;
        let cluster = i % spec.n_clusters;
        let pool = cluster_genres(cluster);
        let n_genres = 1 + item_rng.next_below(2);
        let first = item_rng.next_below(3);
        let mut genres = vec![pool[first].to_string()];
        if n_genres == 2 {
            let second = (first + 1 + item_rng.next_below(2)) % 3;
            genres.push(pool[second].to_string());
        }
        let title = format!("{} {}", ADJECTIVES[(i / NOUNS.len()) % ADJECTIVES.len()], NOUNS[i % NOUNS.len()]);
        catalog.items.insert(
            item_id,
            Item {
                item_id,
                title,
                attributes: vec![("genres".to_string(), genres)],
            },
        );
        item_cluster.insert(item_id, cluster);
        let center = &centers[cluster];
        let v: Vec<f64> = center
            .iter()
            .map(|c| c + spec.vector_noise * item_rng.next_normal())
            .collect();
        vectors.insert(item_id, v);
    }

    let mut preferred = BTreeMap::new();
    let mut user_rng = root.split("users");
    for u in 0..spec.n_users {
        let user_id = u as u32 + 1;
        let cluster = user_rng.next_below(spec.n_clusters);
        preferred.insert(user_id, cluster);
        catalog.users.insert(
            user_id,
            User {
                user_id,
                profile: vec![
                    ("gender".to_string(), if user_rng.next_below(2) == 0 { "female" } else { "male" }.to_string()),
                    ("age".to_string(), AGES[user_rng.next_below(AGES.len())].to_string()),
                    ("occupation".to_string(), OCCUPATIONS[user_rng.next_below(OCCUPATIONS.len())].to_string()),
                ],
            },
        );
    }

    // one global clock, users interleaved round-robin, so the temporal split
    // cuts every user's stream at the same instant
    let mut event_rng = root.split("events");
    let mut events = Vec::with_capacity(spec.n_users * spec.events_per_user);
    let total = spec.n_users * spec.events_per_user;
    let items_per_cluster = spec.n_items / spec.n_clusters;
    for tick in 0..total {
        let user_id = (tick % spec.n_users) as u32 + 1;
        let pref = preferred[&user_id];
        let cluster = if event_rng.next_f64() < spec.preferred_mix {
            pref
        } else {
            // uniform over the other clusters
            let mut c = event_rng.next_below(spec.n_clusters - 1);
            if c >= pref {
                c += 1;
            }
            c
        };
        // item ids of cluster c are c+1, c+1+n_clusters, ...
        let slot = event_rng.next_below(items_per_cluster);
        let item_id = (cluster + slot * spec.n_clusters) as u32 + 1;
        let likes = (item_cluster[&item_id] == pref) != (event_rng.next_f64() < spec.label_noise);
        events.push(InteractionEvent {
            user_id,
            item_id,
            rating: if likes { 5.0 } else { 2.0 },
            timestamp: 1_000_000 + tick as i64,
            seq: tick,
        });
    }

    SyntheticCorpus {
        catalog,
        events,
        vectors,
        preferred,
        item_cluster,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::samples::{build_samples, SampleRules};
    use crate::data::Split;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.events, b.events);
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.catalog.items, b.catalog.items);
    }

    #[test]
    fn labels_follow_planted_preference_without_noise() {
        let corpus = generate(&SyntheticSpec {
            label_noise: 0.0,
            ..SyntheticSpec::default()
        });
        for e in &corpus.events {
            let pref = corpus.preferred[&e.user_id];
            let cluster = corpus.item_cluster[&e.item_id];
            let expected = if cluster == pref { 5.0 } else { 2.0 };
            assert_eq!(e.rating, expected);
        }
    }

    #[test]
    fn item_genres_come_from_cluster_pool() {
        let corpus = generate(&SyntheticSpec::default());
        for (id, item) in &corpus.catalog.items {
            let pool = cluster_genres(corpus.item_cluster[id]);
            for g in item.attribute("genres").unwrap() {
                assert!(pool.contains(&g.as_str()), "genre {g} outside pool {pool:?}");
            }
        }
    }

    #[test]
    fn corpus_yields_enough_split_samples() {
        let corpus = generate(&SyntheticSpec::default());
        let samples = build_samples(&corpus.events, &SampleRules::default()).unwrap();
        let train = samples.iter().filter(|s| s.split == Split::Train).count();
        let test = samples.len() - train;
        assert!(train >= 2000, "train {train}");
        assert!(test >= 500, "test {test}");
        let positives = samples.iter().filter(|s| s.label == 1).count();
        let rate = positives as f64 / samples.len() as f64;
        assert!((0.35..0.75).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn same_cluster_vectors_are_more_similar() {
        let corpus = generate(&SyntheticSpec::default());
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut same = Vec::new();
        let mut cross = Vec::new();
        let ids: Vec<u32> = corpus.vectors.keys().copied().take(60).collect();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let c = cos(&corpus.vectors[&a], &corpus.vectors[&b]);
                if corpus.item_cluster[&a] == corpus.item_cluster[&b] {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&cross) + 0.3, "same {} cross {}", mean(&same), mean(&cross));
    }
}
