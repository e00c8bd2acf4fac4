//! Shared fixtures for the benchmarks.

use rationale_core::corpus::{Dataset, Example, Task};

const WORDS: &[&str] = &[
    "the", "surgeon", "completed", "training", "at", "a", "large", "hospital", "and", "now",
    "treats", "patients", "with", "care,", "focusing", "on", "minimally", "invasive", "procedures.",
];

/// A bio of `n` words drawn cyclically from a fixed vocabulary.
pub fn bio_text(n: usize) -> String {
    (0..n).map(|i| WORDS[(i * 7 + i / 3) % WORDS.len()]).collect::<Vec<_>>().join(" ")
}

pub fn bio_example(id: usize, n: usize) -> Example {
    Example::new(
        format!("b{id}"),
        Task::Bios,
        [("bio".to_string(), bio_text(n))],
        Task::Bios.default_labels(),
        "surgeon",
        (0..n).step_by(7),
    )
    .expect("valid fixture")
}

/// `size` bios of 40 to 120 words, roughly the shape of real bios.
pub fn bios_dataset(size: usize) -> Dataset {
    let examples = (0..size).map(|i| bio_example(i, 40 + (i * 37) % 80)).collect();
    Dataset::new("bench", examples, Task::Bios.default_top_ratio()).expect("valid dataset")
}

/// A rationale the way chatty models write it.
pub fn verbose_rationale() -> String {
    "Here are the key words:\n- surgeon\n- training\n- hospital\n- minimally invasive procedures\n\nThese words indicate a surgical career.".into()
}
