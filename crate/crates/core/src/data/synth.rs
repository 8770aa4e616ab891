//! Templated toy corpora with known ground truth.
//!
//! Every sentence fills five slots (subject, verb, adjective, object, place)
//! of one fixed frame. Pair scores count the slots two sentences share, so a
//! duplicated pair scores 5 and a slot-disjoint pair scores 0.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::example::{Example, Schema};

const SLOTS: [&[&str]; 5] = [
    &["chef", "pilot", "farmer", "doctor", "artist", "sailor", "teacher", "baker", "miner", "nurse"],
    &["cooked", "painted", "carried", "found", "built", "sold", "cleaned", "watched", "fixed", "moved"],
    &["red", "small", "old", "bright", "heavy", "quiet", "wooden", "green", "narrow", "golden"],
    &["boat", "house", "lamp", "table", "garden", "bridge", "basket", "window", "wagon", "drum"],
    &["harbor", "village", "market", "forest", "station", "castle", "valley", "desert", "island", "meadow"],
];

/// Sentiment cue words, one list per class from most negative to most positive.
const SENTIMENT: [&[&str]; 5] = [
    &["awful", "terrible", "dreadful", "horrible"],
    &["dull", "weak", "bland", "tiresome"],
    &["fine", "okay", "average", "ordinary"],
    &["good", "pleasant", "solid", "likable"],
    &["brilliant", "superb", "wonderful", "stunning"],
];

pub const NUM_SLOTS: usize = SLOTS.len();

type Frame = [usize; NUM_SLOTS];

fn random_frame(rng: &mut Rng) -> Frame {
    let mut f = [0; NUM_SLOTS];
    for (s, slot) in f.iter_mut().enumerate() {
        *slot = rng.below(SLOTS[s].len());
    }
    f
}

fn render(f: &Frame, negated: bool) -> String {
    let w = |s: usize| SLOTS[s][f[s]];
    let verb = if negated {
        format!("never {}", w(1))
    } else {
        w(1).to_string()
    };
    format!("the {} {verb} a {} {} near the {}", w(0), w(2), w(3), w(4))
}

/// A frame agreeing with `base` on exactly the slots in `keep`.
fn variant(base: &Frame, keep: &[bool; NUM_SLOTS], rng: &mut Rng) -> Frame {
    let mut f = *base;
    for s in 0..NUM_SLOTS {
        if !keep[s] {
            let n = SLOTS[s].len();
            f[s] = (base[s] + 1 + rng.below(n - 1)) % n;
        }
    }
    f
}

fn keep_mask(shared: usize, rng: &mut Rng) -> [bool; NUM_SLOTS] {
    let mut order: Vec<usize> = (0..NUM_SLOTS).collect();
    rng.shuffle(&mut order);
    let mut keep = [false; NUM_SLOTS];
    for &s in &order[..shared] {
        keep[s] = true;
    }
    keep
}

/// A scored pair whose score is the number of shared slots.
pub fn scored_pair(shared: usize, rng: &mut Rng) -> (String, String, f64) {
    let shared = shared.min(NUM_SLOTS);
    let a = random_frame(rng);
    let b = variant(&a, &keep_mask(shared, rng), rng);
    (render(&a, false), render(&b, false), shared as f64)
}

/// Plain templated sentences.
pub fn synth_sentences(size: usize, rng: &mut Rng) -> Vec<String> {
    (0..size).map(|_| render(&random_frame(rng), false)).collect()
}

fn sentiment_sentence(label: usize, rng: &mut Rng) -> String {
    let cues = SENTIMENT[label];
    let f = random_frame(rng);
    format!(
        "the {} near the {} was {} and {}",
        SLOTS[3][f[3]],
        SLOTS[4][f[4]],
        cues[rng.below(cues.len())],
        cues[rng.below(cues.len())]
    )
}

pub fn synth_toy_corpus(schema: Schema, size: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    if size == 0 {
        return Err(Error::invalid("synthetic corpus size must be at least 1"));
    }
    let out = (0..size)
        .map(|i| {
            let id = format!("{}-{i}", schema.name());
            match schema {
                Schema::Classification => {
                    let label = i % SENTIMENT.len();
                    Example::Classification {
                        id,
                        text: sentiment_sentence(label, rng),
                        label,
                    }
                }
                Schema::PairScored => {
                    let (a, b, score) = scored_pair(rng.below(NUM_SLOTS + 1), rng);
                    Example::PairScored { id, a, b, score }
                }
                Schema::PairLabeled => {
                    let label = (i % 2) as u8;
                    let shared = if label == 1 { 4 + rng.below(2) } else { rng.below(3) };
                    let (a, b, _) = scored_pair(shared, rng);
                    Example::PairLabeled { id, a, b, label }
                }
                Schema::Triplet => {
                    let base = random_frame(rng);
                    let pos = variant(&base, &keep_mask(NUM_SLOTS - 1, rng), rng);
                    let neg = variant(&base, &keep_mask(rng.below(2), rng), rng);
                    Example::Triplet {
                        anchor: render(&base, false),
                        positive: render(&pos, false),
                        negative: render(&neg, true),
                    }
                }
            }
        })
        .collect();
    Ok(out)
}
