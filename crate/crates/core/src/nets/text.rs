//! Toy text encoder: whitespace/semicolon tokenization, hashed-vocabulary
//! lookup into a learned embedding table, truncation at `max_tokens`.

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

use super::{ParamSet, TextConfig};

/// Split on whitespace and semicolons; semicolons are separators, not
/// tokens. Shared by caption truncation and the encoder so token budgets
/// agree everywhere.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split(|c: char| c.is_whitespace() || c == ';')
        .filter(|t| !t.is_empty())
        .collect()
}

/// Hashed-bucket vocabulary; tokens map deterministically onto
/// `vocab_size` embedding rows.
#[derive(Clone, Debug)]
pub struct TextVocab {
    pub config: TextConfig,
}

impl TextVocab {
    pub fn new(config: TextConfig) -> Self {
        TextVocab { config }
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.config.vocab_size as u64) as usize
    }
}

/// Token embeddings for one caption: ids into the vocabulary, the
/// materialized embedding rows, and per-position validity flags.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub ids: Vec<usize>,
    pub tokens: Tensor,
    pub mask: Vec<bool>,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encode a caption against the embedding table in `params`
/// (`text.embed`). Truncates to the vocabulary's token budget; an empty
/// caption is a pipeline bug and errors out.
pub fn text_encode(caption: &str, vocab: &TextVocab, params: &ParamSet) -> Result<TextEmbedding> {
    let toks = tokenize(caption);
    if toks.is_empty() {
        return Err(Error::Data("empty caption".into()));
    }
    let ids: Vec<usize> = toks
        .iter()
        .take(vocab.config.max_tokens)
        .map(|t| vocab.token_id(t))
        .collect();
    let table = params.get("text.embed");
    let dim = table.shape()[1];
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in &ids {
        data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    Ok(TextEmbedding {
        mask: vec![true; ids.len()],
        tokens: Tensor::new(vec![ids.len(), dim], data),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_base, ModelConfig};

    fn setup() -> (TextVocab, ParamSet) {
        let cfg = ModelConfig::default();
        let w = init_base(&cfg, 7).unwrap();
        (TextVocab::new(cfg.text), w.base)
    }

    #[test]
    fn tokenizer_splits_on_whitespace_and_semicolons() {
        assert_eq!(tokenize("a; b c;d"), vec!["a", "b", "c", "d"]);
        assert_eq!(tokenize(" ;; "), Vec::<&str>::new());
    }

    #[test]
    fn identical_captions_identical_embeddings() {
        let (vocab, params) = setup();
        let a = text_encode("a thin crack; near the top", &vocab, &params).unwrap();
        let b = text_encode("a thin crack; near the top", &vocab, &params).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn long_caption_truncates_to_budget() {
        let (vocab, params) = setup();
        let caption = (0..100)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let e = text_encode(&caption, &vocab, &params).unwrap();
        assert_eq!(e.len(), 77);
        assert_eq!(e.tokens.shape()[0], 77);
    }

    #[test]
    fn truncation_ignores_tail_differences() {
        let (vocab, params) = setup();
        let head = (0..77)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let a = text_encode(&format!("{head} extra tail"), &vocab, &params).unwrap();
        let b = text_encode(&format!("{head} different ending here"), &vocab, &params).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let (vocab, params) = setup();
        assert!(text_encode("", &vocab, &params).is_err());
        assert!(text_encode(" ; ; ", &vocab, &params).is_err());
    }
}
