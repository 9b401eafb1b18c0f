//! Small generated corpora for smoke runs and capacity checks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tagger::{TaggedDocument, TaggedSentence};

const DETERMINERS: &[&str] = &["le", "la", "vn", "ce", "mon", "ſon"];
const NOUNS: &[&str] = &[
    "roy", "chaſteau", "cheual", "ville", "lettre", "maiſon", "ſeigneur", "riuiere", "femme",
    "pere", "armee", "iardin",
];
const VERBS: &[&str] = &["voit", "aime", "prend", "garde", "eſcrit", "laiſſe", "cherche", "ſuit"];
const ADJECTIVES: &[&str] = &["grand", "beau", "vieil", "noble", "petit", "riche"];
const ADVERBS: &[&str] = &["touſiours", "ſouuent", "bien", "encor"];

/// `n` distinct period-flavoured sentences of five to seven words.
pub fn sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
        let mut words = vec![pick(&mut rng, DETERMINERS)];
        if rng.random_bool(0.4) {
            words.push(pick(&mut rng, ADJECTIVES));
        }
        words.push(pick(&mut rng, NOUNS));
        words.push(pick(&mut rng, VERBS));
        if rng.random_bool(0.3) {
            words.push(pick(&mut rng, ADVERBS));
        }
        words.push(pick(&mut rng, DETERMINERS));
        words.push(pick(&mut rng, NOUNS));
        let s = format!("{}.", words.join(" "));
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

const ONSETS: &[&str] = &["b", "ch", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "ou", "u"];

/// Suffix and tag pairs: the tag of a generated word is a function of its
/// ending alone.
pub const SUFFIX_TAGS: &[(&str, &str)] = &[
    ("ment", "ADV"),
    ("oit", "VER"),
    ("eux", "ADJ"),
    ("ion", "NOM"),
    ("ier", "NOM"),
    ("ant", "VER"),
];

fn stem(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=2);
    (0..n)
        .map(|_| format!("{}{}", ONSETS.choose(rng).expect("non-empty"), NUCLEI.choose(rng).expect("non-empty")))
        .collect()
}

/// Sentences of invented words whose tags are fixed by their suffixes, each
/// ending in a `.` tagged `PONCT`.
pub fn suffix_tagged(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=7);
            let (mut tokens, mut tags) = (Vec::new(), Vec::new());
            for _ in 0..len {
                let (suffix, tag) = *SUFFIX_TAGS.choose(&mut rng).expect("non-empty");
                tokens.push(format!("{}{suffix}", stem(&mut rng)));
                tags.push(tag.to_string());
            }
            tokens.push(".".into());
            tags.push("PONCT".into());
            TaggedSentence { tokens, gold_tags: tags }
        })
        .collect()
}

/// Suffix-tagged documents spread over the evaluation grid: every
/// combination of state, genre and century 16 to 18, plus normalised 19
/// and 20, `per_doc` sentences each.
pub fn suffix_tagged_documents(per_doc: usize, seed: u64) -> Vec<TaggedDocument> {
    let mut cells = Vec::new();
    for state in ["original", "normalised"] {
        for genre in ["theatre", "prose"] {
            for year in [1580, 1650, 1750, 1850, 1950] {
                if state == "original" && year > 1800 {
                    continue;
                }
                cells.push((state, genre, year));
            }
        }
    }
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (state, genre, year))| TaggedDocument {
            meta: [
                ("id".to_string(), format!("doc{i:02}")),
                ("state".to_string(), state.to_string()),
                ("genre".to_string(), genre.to_string()),
                ("year".to_string(), year.to_string()),
            ]
            .into_iter()
            .collect(),
            sentences: suffix_tagged(per_doc, seed.wrapping_add(i as u64)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_deterministic() {
        let a = sentences(100, 1);
        assert_eq!(a, sentences(100, 1));
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
    }

    #[test]
    fn suffix_tags_follow_suffixes() {
        let s = suffix_tagged(20, 3);
        assert_eq!(s, suffix_tagged(20, 3));
        for sent in &s {
            assert_eq!(sent.tokens.len(), sent.gold_tags.len());
            for (w, t) in sent.tokens.iter().zip(&sent.gold_tags) {
                let expected = SUFFIX_TAGS.iter().find(|(suf, _)| w.ends_with(suf)).map_or("PONCT", |p| p.1);
                assert_eq!(t, expected);
            }
        }
        assert_eq!(suffix_tagged_documents(2, 0).len(), 16);
    }
}
