//! Shared fixture builders for the benchmark targets.

use capeval_core::baseline::tokenize;

pub const CAPTION: &str = "a man riding a wave on top of a white surfboard in the ocean";

pub const REFERENCES: [&str; 5] = [
    "a man riding a wave on a surfboard",
    "a surfer rides a tall breaking wave",
    "someone surfing in the ocean on a white board",
    "a person on a surfboard riding ocean waves",
    "the surfer balances on his board in front of a wave",
];

pub fn tokenized_candidate() -> Vec<String> {
    tokenize(CAPTION)
}

pub fn tokenized_references() -> Vec<Vec<String>> {
    REFERENCES.iter().map(|r| tokenize(r)).collect()
}

/// Deterministic pseudo-random score series for the correlation benchmarks.
pub fn score_series(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 101) as f64
    };
    let human: Vec<f64> = (0..n).map(|_| next() % 5.0).collect();
    let auto: Vec<f64> = (0..n).map(|_| next()).collect();
    (human, auto)
}
