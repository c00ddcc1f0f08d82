//! Word-level vocabulary with fixed special tokens and one token per class
//! label.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Class names in class-index order; each is also a token.
    labels: Vec<String>,
    label_ids: Vec<usize>,
    max_token_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from raw texts: specials first, then the label
    /// tokens, then words by descending frequency (ties alphabetical) until
    /// `cap` tokens exist.
    pub fn build<'a, I>(texts: I, labels: &[String], cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let fixed = SPECIALS.len() + labels.len();
        if cap < fixed {
            return Err(Error::InvalidArgument(format!(
                "vocabulary cap {cap} cannot hold {fixed} special and label tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !labels.contains(w) && !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(labels.iter().cloned());
        tokens.extend(words.into_iter().take(cap - fixed).map(|(w, _)| w));
        Self::from_tokens(tokens, labels)
    }

    pub fn from_tokens(tokens: Vec<String>, labels: &[String]) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        let mut label_ids = Vec::with_capacity(labels.len());
        for l in labels {
            let id = *index
                .get(l)
                .ok_or_else(|| Error::Data(format!("label {l:?} missing from vocabulary")))?;
            label_ids.push(id);
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            labels: labels.to_vec(),
            label_ids,
            max_token_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Token id for each class index.
    pub fn label_ids(&self) -> &[usize] {
        &self.label_ids
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Ids usable as ordinary words: everything except specials and labels.
    pub fn word_ids(&self) -> Vec<usize> {
        (SPECIALS.len()..self.len())
            .filter(|id| !self.label_ids.contains(id))
            .collect()
    }

    /// Whitespace split, lowercase, then greedy longest-match inside each
    /// word. A position with no matching token emits `<unk>` and skips the
    /// rest of that word.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let word: Vec<char> = raw.to_lowercase().chars().collect();
            let mut i = 0;
            while i < word.len() {
                let max_end = (i + self.max_token_chars).min(word.len());
                let hit = (i + 1..=max_end).rev().find_map(|j| {
                    let piece: String = word[i..j].iter().collect();
                    self.index.get(&piece).map(|&id| (id, j))
                });
                match hit {
                    Some((id, j)) => {
                        out.push(id);
                        i = j;
                    }
                    None => {
                        out.push(UNK);
                        break;
                    }
                }
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, labels: &[String]) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = s.lines().map(str::to_string).collect();
        Self::from_tokens(tokens, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        vec!["negative".into(), "positive".into()]
    }

    fn vocab() -> Vocab {
        Vocab::build(
            ["good good movie", "bad movie", "the movie was good"],
            &labels(),
            64,
        )
        .unwrap()
    }

    #[test]
    fn specials_and_labels_come_first() {
        let v = vocab();
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.label_ids(), &[4, 5]);
        // "movie" and "good" are the most frequent words.
        assert_eq!(v.token(6), "good");
        assert_eq!(v.token(7), "movie");
    }

    #[test]
    fn empty_text_tokenizes_to_nothing() {
        assert!(vocab().tokenize("").is_empty());
    }

    #[test]
    fn repeated_word() {
        let v = vocab();
        let good = v.id("good").unwrap();
        assert_eq!(v.tokenize("good good"), vec![good, good]);
    }

    #[test]
    fn unknown_words_become_unk_and_case_folds() {
        let v = vocab();
        assert_eq!(v.tokenize("GOOD zebra"), vec![v.id("good").unwrap(), UNK]);
    }

    #[test]
    fn longest_match_splits_glued_words() {
        let v = vocab();
        assert_eq!(
            v.tokenize("goodmovie"),
            vec![v.id("good").unwrap(), v.id("movie").unwrap()]
        );
    }

    #[test]
    fn cap_limits_size() {
        let v = Vocab::build(["a b c d e f g"], &labels(), 8).unwrap();
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p, &labels()).unwrap(), v);
    }
}
