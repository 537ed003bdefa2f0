//! Seeded synthetic problems for exercising the pipeline without a dataset.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{OptionSlot, Problem};

const NOUNS: &[&str] = &[
    "trophy", "suitcase", "tuba", "backpack", "home", "house", "box", "bag", "table", "door", "bottle",
    "cup", "car", "garage", "book", "shelf", "river", "bridge", "lamp", "desk",
];
const ADJECTIVES: &[&str] = &["small", "large", "heavy", "light", "old", "new", "wide", "narrow"];
const FRAMES: &[&str] = &[
    "The {a} did not fit in the {b} because the _ was too {adj}.",
    "I moved the {a} next to the {b} since the _ looked {adj}.",
    "She preferred the {a} over the {b} as the _ seemed {adj}.",
];

/// `n` labeled problems with unique qids and unique sentences; gold answers
/// are uniform over the two options.
pub fn synthetic_problems(n: usize, seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pair: Vec<&&str> = NOUNS.choose_multiple(&mut rng, 2).collect();
            let adj = ADJECTIVES.choose(&mut rng).expect("non-empty");
            let frame = FRAMES.choose(&mut rng).expect("non-empty");
            let sentence = format!(
                "{} (case {i})",
                frame.replace("{a}", pair[0]).replace("{b}", pair[1]).replace("{adj}", adj)
            );
            let gold = if rng.random_bool(0.5) { OptionSlot::Option1 } else { OptionSlot::Option2 };
            Problem::new(format!("syn-{seed}-{i}"), sentence, *pair[0], *pair[1], Some(gold))
                .expect("synthetic problems are valid")
        })
        .collect()
}
