use super::vocab::{tokenize, Vocabulary, END, START};

/// A caption as fixed-length id sequences for teacher forcing.
///
/// Both views have length `N + 1`. `input` is `<S> y1 .. yn` and `target` is
/// `y1 .. yn <E>`; the remaining slots carry the `<E>` id as padding and only
/// the first `valid_len` target positions count towards the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub valid_len: usize,
}

impl TokenSeq {
    /// Encodes already-tokenized words, truncating to `max_len` of them.
    pub fn from_tokens<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_len: usize) -> Self {
        let ids: Vec<usize> = words
            .iter()
            .take(max_len)
            .map(|w| vocab.id(w.as_ref()))
            .collect();
        Self::from_ids(&ids, max_len)
    }

    pub fn encode(caption: &str, vocab: &Vocabulary, max_len: usize) -> Self {
        Self::from_tokens(&tokenize(caption), vocab, max_len)
    }

    /// Builds both views from caption ids (no `<S>`/`<E>`), truncating to `max_len`.
    pub fn from_ids(ids: &[usize], max_len: usize) -> Self {
        assert!(max_len >= 1, "max_len must be at least 1");
        let ids = &ids[..ids.len().min(max_len)];
        let mut input = Vec::with_capacity(max_len + 1);
        input.push(START);
        input.extend_from_slice(ids);
        input.resize(max_len + 1, END);
        let mut target = ids.to_vec();
        target.resize(max_len + 1, END);
        Self {
            input,
            target,
            valid_len: ids.len() + 1,
        }
    }

    pub fn max_len(&self) -> usize {
        self.input.len() - 1
    }

    /// Caption ids without `<S>`, `<E>` or padding.
    pub fn caption_ids(&self) -> &[usize] {
        &self.target[..self.valid_len - 1]
    }

    pub fn decode(&self, vocab: &Vocabulary) -> Vec<String> {
        vocab.decode(&self.target)
    }
}
