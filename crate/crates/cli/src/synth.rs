//! Synthetic corpora for desk-scale runs.
//!
//! Sentences come from a small grammar whose nouns are either roots or
//! compounds of two roots ("sun", "sunlight"), so whether a word ends often
//! depends on the byte that follows it. Verb endings vary so that subword
//! merges across word gaps stay rare next to that ambiguity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROOTS: &[&str] = &[
    "sun", "moon", "light", "house", "boat", "bed", "room", "flower", "fire", "place", "star",
    "fish", "rain", "bow", "snow", "man", "book", "shelf", "water", "fall", "sea", "shell", "door",
    "bell", "foot", "ball", "tree", "top", "wind", "mill", "gold", "rock", "stone", "wall", "road",
    "side", "yard", "land", "mark", "horse", "shoe", "butter", "fly", "dragon", "bird", "cage",
    "lamp", "post",
];
const ADJECTIVES: &[&str] = &[
    "red", "old", "small", "quiet", "bright", "cold", "green", "tall", "dark", "soft", "heavy",
    "golden", "wet", "broken", "painted", "empty", "round", "silver", "warm", "lost",
];
const VERBS: &[&str] = &[
    "sits",
    "glowed",
    "rested",
    "waits",
    "shone",
    "hid",
    "stood",
    "fell",
    "leaning",
    "slept",
    "turns",
    "rolled",
    "hung",
    "lay",
    "swaying",
    "sang",
    "grew",
    "burning",
    "spun",
    "dreamt",
    "will sit",
    "can glow",
    "may rest",
    "must wait",
];
const PREPS: &[&str] = &[
    "near", "under", "beside", "behind", "over", "by", "inside", "below", "above", "past",
];
const DETERMINERS: &[&str] = &["the", "a", "one", "this", "that", "every", "my", "her"];

/// Roots favoured by the shifted distribution.
const SHIFT_ROOTS: &[&str] = &[
    "sea", "shell", "boat", "house", "fish", "star", "water", "fall", "rock", "bird",
];
const SHIFT_VERBS: &[&str] = &["drifts", "floats", "sinks"];

/// Compound of two roots, chosen by a fixed pairing so compounds recur.
fn compound(rng: &mut ChaCha8Rng, roots: &[&str]) -> String {
    let i = rng.gen_range(0..roots.len());
    let j = (i * 7 + rng.gen_range(0..3) * 5 + 3) % roots.len();
    format!("{}{}", roots[i], roots[j])
}

fn noun(rng: &mut ChaCha8Rng, roots: &[&str]) -> String {
    if rng.gen_bool(0.5) {
        roots.choose(rng).expect("non-empty").to_string()
    } else {
        compound(rng, roots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// The base grammar.
    Base,
    /// A narrower distribution: sea-themed nouns and their own verbs.
    Shifted,
}

fn sentence(rng: &mut ChaCha8Rng, style: Style) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    let (roots, verbs) = match style {
        Style::Base => (ROOTS, VERBS),
        Style::Shifted => (SHIFT_ROOTS, SHIFT_VERBS),
    };
    let subject = noun(rng, roots);
    let object = noun(rng, ROOTS);
    let verb = pick(rng, verbs);
    let prep = pick(rng, PREPS);
    let (d1, d2) = (pick(rng, DETERMINERS), pick(rng, DETERMINERS));
    let tail = if rng.gen_bool(0.5) {
        format!(" and {} {}", pick(rng, DETERMINERS), noun(rng, ROOTS))
    } else {
        String::new()
    };
    if rng.gen_bool(0.5) {
        let adj = pick(rng, ADJECTIVES);
        format!("{d1} {adj} {subject} {verb} {prep} {d2} {object}{tail}.")
    } else {
        format!("{d1} {subject} {verb} {prep} {d2} {object}{tail}.")
    }
}

/// `n` documents of `sentences` sentences each.
pub fn generate(n: usize, sentences: usize, seed: u64, style: Style) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..sentences)
                .map(|_| sentence(&mut rng, style))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        assert_eq!(
            generate(3, 2, 9, Style::Base),
            generate(3, 2, 9, Style::Base)
        );
        assert_ne!(
            generate(3, 2, 9, Style::Base),
            generate(3, 2, 10, Style::Base)
        );
    }

    #[test]
    fn compounds_start_with_a_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = compound(&mut rng, ROOTS);
            assert!(ROOTS.iter().any(|r| c.starts_with(r) && c.len() > r.len()));
        }
    }
}
