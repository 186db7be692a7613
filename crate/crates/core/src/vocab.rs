use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Token id. Id 0 is always the CTC blank.
pub type TokenId = u32;

pub const BLANK: TokenId = 0;

/// Symbol written for the blank in vocabulary files.
pub const BLANK_SYMBOL: &str = "<blank>";

/// Token inventory shared by sources and targets. Line/index 0 is the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from non-blank symbols; the blank is prepended.
    pub fn from_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![BLANK_SYMBOL.to_string()];
        tokens.extend(symbols.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from the full token list, blank included at index 0.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens[0] != BLANK_SYMBOL {
            return Err(Error::InvalidVocab(format!(
                "token 0 must be {BLANK_SYMBOL}, got {:?}",
                tokens[0]
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("bad token {tok:?}")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank_id(&self) -> TokenId {
        BLANK
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Renders ids as space-separated symbols; unknown ids print as `?`.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}
