//! Surface metrics of generated text. Sentiment and coherence are pluggable:
//! sentiment needs a lexicon, coherence can use supplied sentence
//! embeddings instead of bag-of-words vectors. Dependency depth is only
//! ever read from annotations.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub lexical_diversity: f64,
    pub sentence_count: usize,
    /// Tokens per sentence.
    pub mean_sentence_length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<f64>,
    /// Mean cosine of adjacent sentences; absent for single-sentence text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dependency_depth: Option<f64>,
}

impl TextMetrics {
    /// `(name, value)` for every metric present, in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("lexical_diversity", self.lexical_diversity),
            ("sentence_count", self.sentence_count as f64),
            ("mean_sentence_length", self.mean_sentence_length),
        ];
        let opt = [
            ("sentiment", self.sentiment),
            ("coherence", self.coherence),
            ("max_dependency_depth", self.max_dependency_depth),
        ];
        v.extend(opt.into_iter().filter_map(|(k, x)| x.map(|x| (k, x))));
        v
    }
}

/// Word → signed score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub scores: HashMap<String, f64>,
}

impl Lexicon {
    /// `word,score` CSV; a first row whose score does not parse is taken as
    /// a header.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut scores = HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let (Some(w), Some(s)) = (rec.get(0), rec.get(1)) else {
                return Err(MsmaError::validation("lexicon", format!("row {} needs word,score", i + 1)));
            };
            match s.trim().parse::<f64>() {
                Ok(v) => {
                    scores.insert(w.trim().to_lowercase(), v);
                }
                Err(_) if i == 0 => {}
                Err(_) => return Err(MsmaError::validation("lexicon", format!("row {}: bad score {s:?}", i + 1))),
            }
        }
        Ok(Lexicon { scores })
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sentences split at `.`, `!` and `?`; pieces without tokens are dropped.
pub fn sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['.', '!', '?']).map(tokenize).filter(|s| !s.is_empty()).collect()
}

fn cosine_bow(a: &[String], b: &[String]) -> f64 {
    fn count(s: &[String]) -> BTreeMap<&str, f64> {
        let mut m: BTreeMap<&str, f64> = BTreeMap::new();
        for t in s {
            *m.entry(t.as_str()).or_default() += 1.0;
        }
        m
    }
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine between consecutive embedding vectors.
pub fn coherence_from_embeddings(emb: &[Vec<f64>]) -> Option<f64> {
    if emb.len() < 2 {
        return None;
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            dot / n
        } else {
            0.0
        }
    };
    Some(emb.windows(2).map(|w| cos(&w[0], &w[1])).sum::<f64>() / (emb.len() - 1) as f64)
}

pub fn text_metrics(text: &str, lexicon: Option<&Lexicon>) -> Result<TextMetrics> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(MsmaError::validation("text", "no tokens"));
    }
    let types: std::collections::HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let sents = sentences(text);
    let n_in_sents: usize = sents.iter().map(Vec::len).sum();
    let coherence = (sents.len() >= 2)
        .then(|| sents.windows(2).map(|w| cosine_bow(&w[0], &w[1])).sum::<f64>() / (sents.len() - 1) as f64);
    let sentiment = lexicon.map(|lex| {
        let hits: Vec<f64> = tokens.iter().filter_map(|t| lex.scores.get(t).copied()).collect();
        if hits.is_empty() {
            0.0
        } else {
            hits.iter().sum::<f64>() / hits.len() as f64
        }
    });
    Ok(TextMetrics {
        lexical_diversity: types.len() as f64 / tokens.len() as f64,
        sentence_count: sents.len(),
        mean_sentence_length: n_in_sents as f64 / sents.len() as f64,
        sentiment,
        coherence,
        max_dependency_depth: None,
    })
}

/// `doc_id,max_depth` CSV with a header row.
pub fn read_depth_annotations(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let depth = rec
            .get(1)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| MsmaError::validation("annotations", format!("bad depth for {id:?}")))?;
        out.insert(id, depth);
    }
    Ok(out)
}
