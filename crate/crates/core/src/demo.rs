//! Template-grammar sentences and an edit-similarity rating task, used for
//! the bundled demo data and for end-to-end experiments.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::derived_rng;
use crate::textcore::RatingRecord;

const DET: &[&str] = &["the", "a", "this", "that", "every", "one"];
const ADJ: &[&str] = &[
    "big", "small", "old", "new", "famous", "quiet", "happy", "sad", "quick", "slow", "large", "little", "ancient",
    "recent", "bright", "dark", "cold", "hot", "young", "strong", "weak", "rich", "poor", "early", "late", "long",
    "short", "public", "private", "local",
];
const NOUN: &[&str] = &[
    "car", "city", "house", "road", "child", "man", "woman", "river", "hill", "film", "song", "book", "team",
    "school", "bridge", "market", "village", "station", "garden", "museum", "library", "church", "farmer", "doctor",
    "teacher", "player", "writer", "singer", "company", "airport", "town", "home", "street", "kid", "person", "lady",
    "stream", "movie", "tune", "novel", "club", "island", "forest", "castle", "harbour", "painter", "student",
    "engineer", "captain", "soldier",
];
const VERB: &[&str] = &[
    "visited", "built", "found", "left", "bought", "sold", "painted", "crossed", "watched", "helped", "opened",
    "closed", "wrote", "sang", "joined", "won", "lost", "saw", "liked", "described", "reached", "entered", "showed",
    "started", "ended", "praised", "followed", "owned", "managed", "designed",
];
const PREP: &[&str] = &["near", "in", "behind", "across", "beside", "after", "before", "under", "over", "with"];
const ADV: &[&str] = &["often", "never", "quickly", "slowly", "finally", "maybe", "always", "again"];

fn noun_phrase(rng: &mut crate::rng::Rng, out: &mut Vec<&'static str>) {
    out.push(DET.choose(rng).unwrap());
    if rng.random_bool(0.5) {
        out.push(ADJ.choose(rng).unwrap());
    }
    out.push(NOUN.choose(rng).unwrap());
}

/// `n` sentences of 4 to 14 tokens, ending with a period.
pub fn template_sentences(n: usize, seed: u64) -> Vec<String> {
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(seed, "template", i as u64);
            let mut w = Vec::new();
            noun_phrase(&mut rng, &mut w);
            if rng.random_bool(0.2) {
                w.push(ADV.choose(&mut rng).unwrap());
            }
            w.push(VERB.choose(&mut rng).unwrap());
            noun_phrase(&mut rng, &mut w);
            if rng.random_bool(0.4) {
                w.push(PREP.choose(&mut rng).unwrap());
                noun_phrase(&mut rng, &mut w);
            }
            w.push(".");
            w.join(" ")
        })
        .collect()
}

/// Words the perturbations draw substitutes from.
pub fn word_pool() -> Vec<&'static str> {
    [DET, ADJ, NOUN, VERB, PREP, ADV].concat()
}

/// Token-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)`, in [0, 1].
pub fn edit_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / m as f64
}

/// Applies `k` random substitutions, deletions, insertions or swaps.
pub fn perturb(tokens: &[String], k: usize, rng: &mut crate::rng::Rng) -> Vec<String> {
    let pool = word_pool();
    let mut out = tokens.to_vec();
    for _ in 0..k {
        let op = rng.random_range(0..4);
        if out.is_empty() {
            out.push(pool.choose(rng).unwrap().to_string());
            continue;
        }
        let i = rng.random_range(0..out.len());
        match op {
            0 => out[i] = pool.choose(rng).unwrap().to_string(),
            1 => {
                out.remove(i);
            }
            2 => out.insert(i, pool.choose(rng).unwrap().to_string()),
            _ => {
                let j = rng.random_range(0..out.len());
                out.swap(i, j);
            }
        }
    }
    out
}

/// `per_source` rated candidates per sentence. The rating is `100 * similarity`
/// plus Gaussian noise with standard deviation `noise_sd`, where the
/// similarity is [`edit_similarity`] of the token sequences. Edit counts
/// are uniform in `0..=len`.
pub fn edit_rated_records(sentences: &[String], per_source: usize, noise_sd: f64, seed: u64) -> Vec<RatingRecord> {
    let noise = Normal::new(0.0, noise_sd.max(0.0)).expect("finite sd");
    sentences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..per_source).map(move |c| (i, c, s)))
        .map(|(i, c, s)| {
            let mut rng = derived_rng(seed, "edit_rated", (i * per_source + c) as u64);
            let toks: Vec<String> = s.split_whitespace().map(str::to_string).collect();
            let k = rng.random_range(0..=toks.len());
            let cand = perturb(&toks, k, &mut rng);
            let sim = edit_similarity(&toks, &cand);
            let rating = 100.0 * sim + noise.sample(&mut rng);
            RatingRecord {
                source_id: format!("seg{i:05}"),
                references: vec![s.clone()],
                candidate: cand.join(" "),
                rating: Some(rating),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&a, &b), 3);
        assert_eq!(edit_distance::<char>(&[], &b), 7);
        assert_eq!(edit_similarity::<char>(&[], &[]), 1.0);
    }

    #[test]
    fn sentences_are_seeded_and_bounded() {
        let a = template_sentences(200, 1);
        assert_eq!(a, template_sentences(200, 1));
        assert_ne!(a, template_sentences(200, 2));
        for s in &a {
            let n = s.split_whitespace().count();
            assert!((4..=14).contains(&n), "{s}");
        }
    }

    #[test]
    fn ratings_track_similarity() {
        let s = template_sentences(300, 3);
        let recs = edit_rated_records(&s, 2, 0.0, 4);
        assert_eq!(recs.len(), 600);
        for r in &recs {
            let a: Vec<&str> = r.references[0].split_whitespace().collect();
            let b: Vec<&str> = r.candidate.split_whitespace().collect();
            assert!((r.rating.unwrap() - 100.0 * edit_similarity(&a, &b)).abs() < 1e-9);
        }
    }
}
