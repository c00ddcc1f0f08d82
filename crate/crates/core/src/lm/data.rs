//! JSON-lines datasets and a seeded two-class sentiment corpus generator.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

use super::model::TokenSequence;
use super::vocab::{Vocab, EOS};

/// One corpus line. Unlabelled lines (pretraining text) omit `label`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Example {
    pub fn labelled(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: Some(label.into()),
        }
    }

    pub fn unlabelled(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: None,
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Encodes examples for the model. Labelled lines become
/// `prompt = text, response = [label token]` with the prompt truncated to
/// fit `n_max`; unlabelled lines become `response = text + <eos>`.
pub fn encode(examples: &[Example], vocab: &Vocab, n_max: usize) -> Result<Vec<TokenSequence>> {
    if n_max < 2 {
        return Err(Error::InvalidArgument("n_max must be at least 2".into()));
    }
    examples
        .iter()
        .map(|ex| {
            let mut ids = vocab.tokenize(&ex.text);
            match &ex.label {
                Some(l) => {
                    let class = vocab
                        .class_of(l)
                        .ok_or_else(|| Error::Data(format!("unknown label {l:?}")))?;
                    ids.truncate(n_max - 1);
                    Ok(TokenSequence::new(
                        ids,
                        vec![vocab.label_ids()[class]],
                        Some(class),
                    ))
                }
                None => {
                    ids.push(EOS);
                    ids.truncate(n_max);
                    Ok(TokenSequence::new(Vec::new(), ids, None))
                }
            }
        })
        .collect()
}

pub const TOY_LABELS: [&str; 2] = ["negative", "positive"];

const POSITIVE: [&str; 20] = [
    "good", "great", "excellent", "wonderful", "superb", "brilliant", "delightful", "charming",
    "enjoyable", "lovely", "amazing", "fantastic", "moving", "beautiful", "fun", "clever",
    "touching", "memorable", "pleasant", "stunning",
];
const NEGATIVE: [&str; 20] = [
    "bad", "awful", "terrible", "boring", "dull", "poor", "weak", "tedious", "horrible",
    "dreadful", "bland", "clumsy", "messy", "annoying", "painful", "forgettable", "lame", "ugly",
    "stale", "pointless",
];
const NOUNS: [&str; 15] = [
    "movie", "film", "story", "plot", "acting", "script", "cast", "ending", "scene", "director",
    "music", "dialogue", "characters", "performance", "pacing",
];
const INTENSIFIERS: [&str; 7] = ["very", "really", "truly", "quite", "so", "rather", "incredibly"];

/// Knobs for [`ToyCorpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    /// Chance that a sentence also carries one word of the opposite class.
    pub noise_rate: f64,
    /// Restricts class words to the first `n` of each list (the rest of the
    /// lists still appear in unlabelled text).
    pub word_subset: Option<usize>,
}

impl Default for ToyCorpus {
    fn default() -> Self {
        Self {
            noise_rate: 0.15,
            word_subset: None,
        }
    }
}

impl ToyCorpus {
    fn words(&self, class: usize) -> &'static [&'static str] {
        let all: &'static [&'static str] = if class == 1 { &POSITIVE } else { &NEGATIVE };
        match self.word_subset {
            Some(n) => &all[..n.clamp(1, all.len())],
            None => all,
        }
    }

    /// One sentence expressing `class` (0 negative, 1 positive).
    pub fn sentence<R: Rng>(&self, rng: &mut R, class: usize) -> String {
        let adj = |rng: &mut R| *self.words(class).choose(rng).expect("nonempty");
        let noun = |rng: &mut R| *NOUNS.choose(rng).expect("nonempty");
        let int = |rng: &mut R| *INTENSIFIERS.choose(rng).expect("nonempty");
        let mut s = match rng.random_range(0..8) {
            0 => format!("the {} was {} {}", noun(rng), int(rng), adj(rng)),
            1 => format!("a {} {}", adj(rng), noun(rng)),
            2 => format!("i found the {} {}", noun(rng), adj(rng)),
            3 => format!("what a {} {}", adj(rng), noun(rng)),
            4 => format!(
                "the {} is {} and the {} is {}",
                noun(rng),
                adj(rng),
                noun(rng),
                adj(rng)
            ),
            5 => format!("{} {} {} overall", int(rng), adj(rng), noun(rng)),
            6 => format!("this {} felt {} {}", noun(rng), int(rng), adj(rng)),
            _ => format!("{} {} with a {} {}", adj(rng), noun(rng), adj(rng), noun(rng)),
        };
        if rng.random_bool(self.noise_rate) {
            let other = *self.words(1 - class).choose(rng).expect("nonempty");
            s.push_str(&format!(" but the {} was {}", noun(rng), other));
        }
        s
    }

    /// `n_per_class` labelled examples per class, classes interleaved.
    pub fn labelled(&self, seed: SeedStream, n_per_class: usize) -> Vec<Example> {
        let mut rng = seed.rng();
        let mut out = Vec::with_capacity(2 * n_per_class);
        for _ in 0..n_per_class {
            for class in 0..2 {
                out.push(Example::labelled(
                    self.sentence(&mut rng, class),
                    TOY_LABELS[class],
                ));
            }
        }
        out
    }

    /// Pretraining corpus: `n` lines of which a `labelled_fraction` carry a
    /// label, with class words restricted to the first `labelled_words` per
    /// class. With `labelled_words = 0` those labels are drawn independently
    /// of the text, so the model learns the label format but not the task. The rest are unlabelled, noise-free lines of two same-class
    /// sentences over the full lists joined by "and", so that predicting the
    /// second half rewards tracking sentiment.
    pub fn pretrain(
        seed: SeedStream,
        n: usize,
        labelled_fraction: f64,
        labelled_words: usize,
    ) -> Vec<Example> {
        let full = ToyCorpus {
            noise_rate: 0.0,
            word_subset: None,
        };
        let restricted = ToyCorpus {
            word_subset: Some(labelled_words),
            ..ToyCorpus::default()
        };
        let mut rng = seed.rng();
        (0..n)
            .map(|_| {
                let class = rng.random_range(0..2);
                if rng.random_bool(labelled_fraction) {
                    let label = if labelled_words == 0 {
                        rng.random_range(0..2)
                    } else {
                        class
                    };
                    Example::labelled(restricted.sentence(&mut rng, class), TOY_LABELS[label])
                } else {
                    let first = full.sentence(&mut rng, class);
                    let second = full.sentence(&mut rng, class);
                    Example::unlabelled(format!("{first} and {second}"))
                }
            })
            .collect()
    }
}

/// Class index per example, erroring on unlabelled or unknown labels.
pub fn classes_of(seqs: &[TokenSequence]) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| s.label.ok_or_else(|| Error::Data("unlabelled example".into())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        TOY_LABELS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let items = vec![Example::labelled("a b", "positive"), Example::unlabelled("c")];
        write_jsonl(&p, &items).unwrap();
        let back: Vec<Example> = read_jsonl(&p).unwrap();
        assert_eq!(back, items);
        assert!(std::fs::read_to_string(&p).unwrap().contains("\"label\":\"positive\""));
    }

    #[test]
    fn generator_is_seeded() {
        let c = ToyCorpus::default();
        assert_eq!(
            c.labelled(SeedStream::new(5), 10),
            c.labelled(SeedStream::new(5), 10)
        );
        assert_ne!(
            c.labelled(SeedStream::new(5), 10),
            c.labelled(SeedStream::new(6), 10)
        );
    }

    #[test]
    fn corpus_round_trip_up_to_unk() {
        let corpus = ToyCorpus::pretrain(SeedStream::new(1), 300, 0.2, 5);
        let vocab = Vocab::build(corpus.iter().map(|e| e.text.as_str()), &labels(), 512).unwrap();
        // Every generated word is in the vocabulary, so the scan is lossless.
        for ex in &corpus {
            let ids = vocab.tokenize(&ex.text);
            assert_eq!(vocab.detokenize(&ids), ex.text);
        }
        let small = Vocab::build(corpus.iter().map(|e| e.text.as_str()), &labels(), 20).unwrap();
        for ex in corpus.iter().take(50) {
            let ids = small.tokenize(&ex.text);
            let words: Vec<&str> = ex.text.split_whitespace().collect();
            let back: Vec<String> = small
                .detokenize(&ids)
                .split(' ')
                .map(str::to_string)
                .collect();
            // Per word either exact or a prefix of pieces ending in <unk>.
            assert!(back.len() >= words.len() || back.iter().any(|w| w == "<unk>"));
        }
    }

    #[test]
    fn encode_labelled_and_plain() {
        let vocab = Vocab::build(["good movie"], &labels(), 32).unwrap();
        let seqs = encode(
            &[
                Example::labelled("good movie", "positive"),
                Example::unlabelled("good"),
            ],
            &vocab,
            8,
        )
        .unwrap();
        assert_eq!(seqs[0].response, vec![vocab.label_ids()[1]]);
        assert_eq!(seqs[0].label, Some(1));
        assert_eq!(seqs[1].response, vec![vocab.id("good").unwrap(), EOS]);
        assert!(encode(&[Example::labelled("x", "meh")], &vocab, 8).is_err());
    }
}
