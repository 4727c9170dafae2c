use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token ids with `[CLS]` at position 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub utterance_id: String,
}

impl TokenSequence {
    /// Number of real tokens, excluding `[CLS]`.
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Input("duplicate vocabulary entry".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, utterance_id: &str, text: &str) -> TokenSequence {
        let mut ids = vec![CLS_ID];
        ids.extend(tokenize(text).iter().map(|t| self.id(t)));
        TokenSequence {
            ids,
            utterance_id: utterance_id.to_string(),
        }
    }
}

/// Smoothed inverse document frequency per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: Vec<f64>,
    pub documents: usize,
}

impl IdfTable {
    pub const SMOOTHING: f64 = 1.0;

    pub fn weight(&self, id: usize) -> f64 {
        self.weights.get(id).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights for token positions `1..=m`.
    pub fn for_sequence(&self, seq: &TokenSequence) -> Vec<f64> {
        seq.ids[1..].iter().map(|&id| self.weight(id)).collect()
    }
}

/// Builds the vocabulary (reserved ids first, then tokens in sorted order)
/// and `idf(t) = ln((N + 1) / (df(t) + 1))`. Reserved tokens get 0.
pub fn build_vocab_and_idf<S: AsRef<str>>(transcripts: &[S]) -> Result<(Vocabulary, IdfTable)> {
    if transcripts.is_empty() {
        return Err(Error::Input("empty transcript corpus".into()));
    }
    let docs: Vec<BTreeSet<String>> = transcripts.iter().map(|t| tokenize(t.as_ref()).into_iter().collect()).collect();
    let all: BTreeSet<&String> = docs.iter().flatten().collect();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(all.into_iter().cloned());
    let vocab = Vocabulary::from_tokens(tokens)?;

    let mut df = vec![0usize; vocab.len()];
    for doc in &docs {
        for t in doc {
            df[vocab.id(t)] += 1;
        }
    }
    let n = docs.len() as f64;
    let weights = df
        .iter()
        .enumerate()
        .map(|(id, &d)| {
            if id < RESERVED.len() {
                0.0
            } else {
                ((n + IdfTable::SMOOTHING) / (d as f64 + IdfTable::SMOOTHING)).ln()
            }
        })
        .collect();
    Ok((
        vocab,
        IdfTable {
            weights,
            documents: docs.len(),
        },
    ))
}

/// Writes `token<TAB>id<TAB>idf` lines ordered by id, after a
/// `# documents=N` header.
pub fn write_vocab<W: Write>(w: &mut W, vocab: &Vocabulary, idf: &IdfTable) -> Result<()> {
    writeln!(w, "# documents={}", idf.documents)?;
    for (id, token) in vocab.tokens.iter().enumerate() {
        writeln!(w, "{token}\t{id}\t{}", idf.weight(id))?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(r: R) -> Result<(Vocabulary, IdfTable)> {
    let mut documents = 0;
    let mut tokens = Vec::new();
    let mut weights = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# documents=") {
            documents = rest
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("line {}: bad document count", lineno + 1)))?;
            continue;
        }
        let bad = || Error::Input(format!("line {}: expected token<TAB>id<TAB>idf", lineno + 1));
        let mut parts = line.split('\t');
        let (Some(token), Some(id), Some(w), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let id: usize = id.parse().map_err(|_| bad())?;
        if id != tokens.len() {
            return Err(Error::Input(format!("line {}: ids must be consecutive", lineno + 1)));
        }
        tokens.push(token.to_string());
        weights.push(w.parse::<f64>().map_err(|_| bad())?);
    }
    Ok((Vocabulary::from_token_list(tokens)?, IdfTable { weights, documents }))
}
