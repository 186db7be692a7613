//! Multi-reference corpora, their line format, and the synthetic two-mode
//! translation task.
//!
//! Each source is a random sequence of base symbols `s_i`. A valid target is
//! either mode A (`a_i` in source order) or mode B (`b_i` in reverse order),
//! so a position-wise mixture of the two modes is detectably invalid.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, BLANK};

/// One source with one or more distinct references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiRefExample {
    pub src: Vec<TokenId>,
    pub refs: Vec<Vec<TokenId>>,
}

impl MultiRefExample {
    /// Drops repeated references, keeping first occurrences in order.
    pub fn new(src: Vec<TokenId>, refs: Vec<Vec<TokenId>>) -> Result<Self> {
        let mut unique: Vec<Vec<TokenId>> = Vec::with_capacity(refs.len());
        for r in refs {
            if !unique.contains(&r) {
                unique.push(r);
            }
        }
        let ex = Self { src, refs: unique };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.refs.is_empty() {
            return Err(Error::EmptyRefs);
        }
        if self.refs.iter().any(|r| r.contains(&BLANK)) {
            return Err(Error::InvalidConfig("reference contains the blank".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.refs.len()
    }
}

/// Writes one JSON object per line: `{"src":[..],"refs":[[..],..]}`.
pub fn save_corpus(path: &Path, corpus: &[MultiRefExample]) -> Result<()> {
    let mut out = String::new();
    for ex in corpus {
        out.push_str(&serde_json::to_string(ex).map_err(|e| Error::corrupt(path, e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<MultiRefExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|reason| Error::corrupt(path, reason))
}

fn parse_corpus(text: &str) -> std::result::Result<Vec<MultiRefExample>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ex: MultiRefExample =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            ex.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
            Ok(ex)
        })
        .collect()
}

/// Checks every id of a corpus against a vocabulary.
pub fn check_corpus_vocab(corpus: &[MultiRefExample], vocab: &Vocab) -> Result<()> {
    for ex in corpus {
        for &t in ex.src.iter().chain(ex.refs.iter().flatten()) {
            if !vocab.contains(t) {
                return Err(Error::UnknownToken(t));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    /// Number of base symbols `N`.
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a training target is rendered in mode A.
    pub mode_a_prob: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            symbols: 20,
            min_len: 3,
            max_len: 8,
            mode_a_prob: 0.5,
            train_size: 4000,
            dev_size: 200,
            test_size: 500,
            seed: 1,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "bad synthetic task shape: symbols={}, lengths [{}, {}]",
                self.symbols, self.min_len, self.max_len
            )));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig("corpus sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mode_a_prob) {
            return Err(Error::InvalidConfig("mode probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Id layout of the synthetic vocabulary:
/// `<blank>, s1..sN, a1..aN, b1..bN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLexicon {
    pub symbols: usize,
}

impl SynthLexicon {
    pub fn vocab(&self) -> Vocab {
        let n = self.symbols;
        let names = (1..=n)
            .map(|i| format!("s{i}"))
            .chain((1..=n).map(|i| format!("a{i}")))
            .chain((1..=n).map(|i| format!("b{i}")));
        Vocab::from_symbols(names).expect("synthetic vocabulary is valid")
    }

    pub fn source(&self, symbol: usize) -> TokenId {
        (1 + symbol) as TokenId
    }

    pub fn mode_a(&self, symbol: usize) -> TokenId {
        (1 + self.symbols + symbol) as TokenId
    }

    pub fn mode_b(&self, symbol: usize) -> TokenId {
        (1 + 2 * self.symbols + symbol) as TokenId
    }

    fn symbol_of_source(&self, tok: TokenId) -> usize {
        tok as usize - 1
    }

    pub fn render_a(&self, src: &[TokenId]) -> Vec<TokenId> {
        src.iter()
            .map(|&t| self.mode_a(self.symbol_of_source(t)))
            .collect()
    }

    pub fn render_b(&self, src: &[TokenId]) -> Vec<TokenId> {
        src.iter()
            .rev()
            .map(|&t| self.mode_b(self.symbol_of_source(t)))
            .collect()
    }

    /// Whether `hyp` is exactly one of the two renderings of `src`.
    pub fn is_valid(&self, src: &[TokenId], hyp: &[TokenId]) -> bool {
        hyp == self.render_a(src).as_slice() || hyp == self.render_b(src).as_slice()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    /// One gold reference per line, mode sampled per example.
    pub train: Vec<MultiRefExample>,
    /// Both renderings as references.
    pub dev: Vec<MultiRefExample>,
    pub test: Vec<MultiRefExample>,
}

pub fn gen_corpus(cfg: &SynthTaskConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let lex = SynthLexicon {
        symbols: cfg.symbols,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        (0..len)
            .map(|_| lex.source(rng.gen_range(0..cfg.symbols)))
            .collect()
    };
    let mut train = Vec::with_capacity(cfg.train_size);
    for _ in 0..cfg.train_size {
        let src = source(&mut rng);
        let gold = if rng.gen_bool(cfg.mode_a_prob) {
            lex.render_a(&src)
        } else {
            lex.render_b(&src)
        };
        train.push(MultiRefExample::new(src, vec![gold])?);
    }
    let both = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<MultiRefExample>> {
        (0..n)
            .map(|_| {
                let src = source(rng);
                let refs = vec![lex.render_a(&src), lex.render_b(&src)];
                MultiRefExample::new(src, refs)
            })
            .collect()
    };
    let dev = both(cfg.dev_size, &mut rng)?;
    let test = both(cfg.test_size, &mut rng)?;
    Ok(SynthCorpus {
        vocab: lex.vocab(),
        train,
        dev,
        test,
    })
}
