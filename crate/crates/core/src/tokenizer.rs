use std::sync::Arc;

/// Splits text into tokens. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn tokens(&self, text: &str) -> Vec<String>;

    fn count(&self, text: &str) -> usize {
        self.tokens(text).len()
    }
}

/// Approximate tokenizer: each maximal run of alphanumeric characters is
/// one token, each other non-whitespace character is one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenizer;

impl ApproxTokenizer {
    fn spans(text: &str) -> impl Iterator<Item = &str> {
        let mut rest = text;
        std::iter::from_fn(move || {
            rest = rest.trim_start();
            let first = rest.chars().next()?;
            let len = if first.is_alphanumeric() {
                rest.find(|c: char| !c.is_alphanumeric())
                    .unwrap_or(rest.len())
            } else {
                first.len_utf8()
            };
            let (tok, tail) = rest.split_at(len);
            rest = tail;
            Some(tok)
        })
    }
}

impl Tokenizer for ApproxTokenizer {
    fn tokens(&self, text: &str) -> Vec<String> {
        Self::spans(text).map(str::to_string).collect()
    }

    fn count(&self, text: &str) -> usize {
        Self::spans(text).count()
    }
}

pub fn token_length(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

pub fn default_tokenizer() -> Arc<dyn Tokenizer> {
    Arc::new(ApproxTokenizer)
}
