use std::collections::BTreeSet;

use super::DataError;

/// Word ↔ id bijection; id 0 is reserved for padding and real words get
/// `1..=len` in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

/// Every terminal of the expression template.
pub const GRAMMAR_WORDS: [&str; 15] = [
    "the", "small", "large", "red", "green", "blue", "yellow", "circle", "square", "triangle", "on", "left", "right",
    "top", "bottom",
];

pub const PAD_ID: usize = 0;

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = corpus.into_iter().collect();
        Self {
            words: set.into_iter().map(str::to_string).collect(),
        }
    }

    /// Vocabulary of the template grammar.
    pub fn grammar() -> Self {
        Self::build(GRAMMAR_WORDS)
    }

    /// Number of ids including padding: the embedding table height.
    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words
            .binary_search_by(|w| w.as_str().cmp(word))
            .ok()
            .map(|i| i + 1)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.words.get(i)).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>, DataError> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                self.id(w).ok_or_else(|| DataError::UnknownWord(w.to_string()))
            })
            .collect()
    }
}

/// Token ids of an expression plus their zero-padded form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// `ids` followed by [`PAD_ID`] up to the requested length.
    pub padded: Vec<usize>,
}

impl Tokenized {
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.padded.len()).map(|i| i < self.ids.len()).collect()
    }
}

pub fn tokenize_pad<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_words: usize) -> Result<Tokenized, DataError> {
    if words.len() > max_words {
        return Err(DataError::Contract(format!(
            "{} words exceed the limit of {max_words}",
            words.len()
        )));
    }
    let ids = vocab.encode(words)?;
    let mut padded = ids.clone();
    padded.resize(max_words, PAD_ID);
    Ok(Tokenized { ids, padded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_vocabulary() {
        let v = Vocabulary::grammar();
        assert_eq!(v.size(), 16);
        assert!(v.size() - 1 <= 20);
        assert_eq!(v.id("blue"), Some(1));
        assert_eq!(v.word(0), None);
        for w in GRAMMAR_WORDS {
            let id = v.id(w).unwrap();
            assert_ne!(id, PAD_ID);
            assert_eq!(v.word(id), Some(w));
        }
        let mut sorted = v.words().to_vec();
        sorted.sort();
        assert_eq!(sorted, v.words());
    }

    #[test]
    fn tokenize_pads_and_rejects_unknown() {
        let v = Vocabulary::grammar();
        let t = tokenize_pad(&["the", "red", "circle"], &v, 5).unwrap();
        assert_eq!(t.padded.len(), 5);
        assert_eq!(&t.padded[3..], &[0, 0]);
        assert_eq!(t.pad_mask(), vec![true, true, true, false, false]);
        assert!(matches!(tokenize_pad(&["the", "purple"], &v, 5), Err(DataError::UnknownWord(w)) if w == "purple"));
        assert!(tokenize_pad(&["the"; 6], &v, 5).is_err());
    }
}
