//! Deterministic synthetic fixture corpus for end-to-end runs.
//!
//! Sixty anxiety memes, ten per class, each built from a class-specific
//! keyword bank that never overlaps another class. OCR text and the
//! scripted reasoning both echo the keywords, so every input
//! configuration is separable and retrieved exemplar labels carry real
//! signal.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::TrainingSpec;
use crate::corpus::{CorpusManifest, LabelSchema, MemeInstance, Split};
use crate::reasoner::ScriptedBackend;

/// Keyword banks per anxiety label, in schema order. Disjoint by
/// construction; see the test below.
const KEYWORD_BANKS: [(&str, [&str; 5]); 6] = [
    ("Nervousness", ["jittery", "trembling", "butterflies", "shaky", "flinching"]),
    ("Lack of Worry Control", ["spiraling", "uncontrollable", "looping", "runaway", "unstoppable"]),
    ("Excessive Worry", ["overthinking", "catastrophizing", "worstcase", "endless", "scenarios"]),
    ("Difficulty Relaxing", ["unwind", "tense", "stiff", "knotted", "clenched"]),
    ("Restlessness", ["pacing", "fidgeting", "wired", "bouncing", "antsy"]),
    ("Impending Doom", ["dread", "looming", "ruin", "collapse", "sirens"]),
];

const FILLERS: [&str; 8] = ["tonight", "again", "always", "every", "morning", "inside", "quietly", "somehow"];

const MEMES_PER_CLASS: usize = 10;
const TRAIN_PER_CLASS: usize = 7;
const VAL_PER_CLASS: usize = 1;

pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    /// Scripted raw reasoning output per meme id.
    pub responses: BTreeMap<String, String>,
}

impl SyntheticCorpus {
    pub fn backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(
            "scripted_fixture",
            self.responses.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        )
    }
}

fn class_slug(label: &str) -> String {
    label
        .split_whitespace()
        .map(|w| w.to_ascii_lowercase().chars().take(4).collect::<String>())
        .collect::<Vec<_>>()
        .join("-")
}

/// Builds the 60-meme fixture. The same seed always yields a byte-equal
/// corpus and response set.
pub fn synthetic_anxiety_corpus(seed: u64) -> SyntheticCorpus {
    let schema = LabelSchema::anxiety();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    let mut responses = BTreeMap::new();
    for (label, bank) in KEYWORD_BANKS {
        let slug = class_slug(label);
        for i in 0..MEMES_PER_CLASS {
            let id = format!("syn-{slug}-{i:02}");
            let k1 = bank[i % bank.len()];
            let k2 = bank[(i + 1) % bank.len()];
            let k3 = bank[(i + 2) % bank.len()];
            let f1 = FILLERS[rng.random::<u32>() as usize % FILLERS.len()];
            let f2 = FILLERS[rng.random::<u32>() as usize % FILLERS.len()];
            let ocr_text =
                format!("when your brain is {k1} and {k2} {f1} then {k3} {f2}");
            let split = if i < TRAIN_PER_CLASS {
                Split::Train
            } else if i < TRAIN_PER_CLASS + VAL_PER_CLASS {
                Split::Val
            } else {
                Split::Test
            };
            let reasoning = format!(
                "Cause-Effect:\n\
                 Feeling {k1} and {k2} causes the person to stay {k3} {f1}.\n\
                 Figurative Understanding:\n\
                 The caption plays on being {k1} as everyday humor about {k2} moments.\n\
                 Mental State:\n\
                 The person feels {k1}, {k2}, and {k3}."
            );
            responses.insert(id.clone(), reasoning);
            instances.push(MemeInstance {
                id,
                image_ref: None,
                ocr_text,
                labels: vec![label.to_string()],
                split,
                source: "synthetic".to_string(),
            });
        }
    }
    SyntheticCorpus {
        manifest: CorpusManifest::new(schema, instances),
        responses,
    }
}

/// Hyperparameters sized for the fixture corpus: a small encoder, no
/// dropout, and enough epochs to converge on separable data in seconds.
pub fn fixture_training_spec(seed: u64) -> TrainingSpec {
    TrainingSpec {
        learning_rate: 0.05,
        dropout: 0.0,
        batch_size: 8,
        max_seq_len: 256,
        epochs: 25,
        adapter_rank: 0,
        seed,
        encoder_dim: 24,
        encoder_vocab: 2048,
        ..TrainingSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::parse_reasoning;
    use std::collections::BTreeSet;

    #[test]
    fn corpus_has_expected_shape() {
        let corpus = synthetic_anxiety_corpus(42);
        let m = &corpus.manifest;
        assert!(m.is_complete());
        assert!(m.counts_consistent());
        assert_eq!(m.instances.len(), 60);
        assert_eq!(m.split_instances(Split::Train).count(), 42);
        assert_eq!(m.split_instances(Split::Val).count(), 6);
        assert_eq!(m.split_instances(Split::Test).count(), 12);
        assert_eq!(corpus.responses.len(), 60);
        for inst in &m.instances {
            assert!(corpus.responses.contains_key(&inst.id));
        }
        // Every split sees every class.
        for split in Split::ALL {
            let labels: BTreeSet<&str> = m
                .split_instances(split)
                .map(|i| i.labels[0].as_str())
                .collect();
            assert_eq!(labels.len(), 6);
        }
    }

    #[test]
    fn keyword_banks_are_disjoint() {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (_, bank) in KEYWORD_BANKS {
            for kw in bank {
                assert!(seen.insert(kw), "{kw} appears in two banks");
            }
        }
        // Fillers never collide with class keywords either.
        for f in FILLERS {
            assert!(!seen.contains(f), "{f} is both filler and keyword");
        }
    }

    #[test]
    fn scripted_responses_parse_into_three_sections() {
        let corpus = synthetic_anxiety_corpus(42);
        for (id, raw) in &corpus.responses {
            let sections = parse_reasoning(raw)
                .unwrap_or_else(|e| panic!("response for {id} does not parse: {e}"));
            assert!(!sections.cause_effect.is_empty());
            assert!(!sections.figurative_understanding.is_empty());
            assert!(!sections.mental_state.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = synthetic_anxiety_corpus(7);
        let b = synthetic_anxiety_corpus(7);
        assert_eq!(a.manifest.instances, b.manifest.instances);
        assert_eq!(a.responses, b.responses);
        let c = synthetic_anxiety_corpus(8);
        assert_ne!(
            a.manifest
                .instances
                .iter()
                .map(|i| i.ocr_text.clone())
                .collect::<Vec<_>>(),
            c.manifest
                .instances
                .iter()
                .map(|i| i.ocr_text.clone())
                .collect::<Vec<_>>()
        );
    }
}
