//! Byte-pair-style subword vocabulary.
//!
//! Training starts from the reserved ids and the distinct characters of the
//! normalized corpus, then repeatedly merges the most frequent adjacent pair
//! (ties broken by the lexicographically smallest pair) until the target size
//! is reached or no pair is left. Tokenization replays the merges in rank order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::records::{normalize_text, NarrativeRecord};
use crate::geometry::TimedToken;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
const RESERVED: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum VocabError {
    EmptyCorpus,
    TargetTooSmall { target: usize, minimum: usize },
    Inconsistent(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::EmptyCorpus => f.write_str("corpus is empty"),
            VocabError::TargetTooSmall { target, minimum } => {
                write!(f, "target size {target} must exceed reserved ids plus characters ({minimum})")
            }
            VocabError::Inconsistent(why) => write!(f, "inconsistent vocabulary: {why}"),
        }
    }
}

impl core::error::Error for VocabError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    ids: BTreeMap<String, u32>,
    merge_rank: BTreeMap<(String, String), usize>,
    chars: BTreeSet<char>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its token list and ordered merges.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, VocabError> {
        if tokens.len() < RESERVED || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(VocabError::Inconsistent("reserved tokens missing".into()));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Inconsistent(alloc::format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = BTreeMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let joined = alloc::format!("{l}{r}");
            if !ids.contains_key(&joined) {
                return Err(VocabError::Inconsistent(alloc::format!("merge result {joined:?} not a token")));
            }
            merge_rank.entry((l.clone(), r.clone())).or_insert(rank);
        }
        let chars =
            tokens[RESERVED..].iter().filter(|t| t.chars().count() == 1).filter_map(|t| t.chars().next()).collect();
        Ok(Self { tokens, merges, ids, merge_rank, chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Subword strings of one already-normalized word.
    pub fn split_word(&self, word: &str) -> Vec<String> {
        if word.is_empty() {
            return Vec::new();
        }
        if word.chars().any(|c| !self.chars.contains(&c)) {
            return vec![UNK_TOKEN.to_string()];
        }
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == l && &symbols[i + 1] == r {
                    merged.push(alloc::format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(core::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Token ids of free text (normalized first).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_text(text)
            .split(' ')
            .flat_map(|w| self.split_word(w))
            .map(|s| self.id(&s).unwrap_or(UNK_ID))
            .collect()
    }
}

fn word_counts<'a>(corpus: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for caption in corpus {
        for w in normalize_text(caption).split(' ').filter(|w| !w.is_empty()) {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Trains a merge vocabulary of at most `target_size` entries.
///
/// Fewer entries are produced only when every word of the corpus has become a
/// single token before the target is reached.
pub fn build_vocabulary<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<Vocabulary, VocabError> {
    let counts = word_counts(corpus);
    if counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let chars: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
    let minimum = RESERVED + chars.len();
    if target_size <= minimum {
        return Err(VocabError::TargetTooSmall { target: target_size, minimum });
    }

    let mut tokens: Vec<String> = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(chars.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut words: Vec<(Vec<String>, usize)> =
        counts.into_iter().map(|(w, n)| (w.chars().map(|c| c.to_string()).collect(), n)).collect();

    while tokens.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += n;
            }
        }
        // BTreeMap iterates in ascending pair order, so the first maximum wins ties
        let Some(((l, r), _)) = pairs.iter().fold(None, |best: Option<(&(&str, &str), usize)>, (k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        }) else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        let joined = alloc::format!("{l}{r}");
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == l && symbols[i + 1] == r {
                    symbols[i] = joined.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((l, r));
    }
    Vocabulary::from_parts(tokens, merges)
}

/// Expands each timed word into subtokens that inherit the word's interval.
pub fn tokenize_aligned(record: &NarrativeRecord, vocab: &Vocabulary) -> Vec<TimedToken> {
    let mut out = Vec::new();
    for w in &record.timed_words {
        let norm = normalize_text(&w.word);
        for piece in norm.split(' ').flat_map(|p| vocab.split_word(p)) {
            out.push(TimedToken { token_id: vocab.id(&piece).unwrap_or(UNK_ID), t_start: w.t_start, t_end: w.t_end });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::TimedWord;
    use crate::geometry::MouseTrace;

    #[test]
    fn most_frequent_pair_merges_first() {
        // pairs: aa x3, ab x2 -> "aa"
        let v = build_vocabulary(["aaab", "aab"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(v.tokens()[4], "aa");
    }

    #[test]
    fn target_too_small() {
        assert_eq!(build_vocabulary(["ab"], 4), Err(VocabError::TargetTooSmall { target: 4, minimum: 4 }));
        assert_eq!(build_vocabulary(["  "], 10), Err(VocabError::EmptyCorpus));
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = build_vocabulary(["abc abc"], 8).unwrap();
        assert_eq!(v.encode("abz"), vec![UNK_ID]);
        assert_eq!(v.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn same_corpus_same_vocabulary() {
        let corpus = ["a man standing near a tree", "a woman running", "standing and running"];
        assert_eq!(build_vocabulary(corpus, 40).unwrap(), build_vocabulary(corpus, 40).unwrap());
    }

    fn standing_vocab() -> Vocabulary {
        let corpus = ["stand stand stand sing sing ring ring king king thing standing"];
        build_vocabulary(corpus, 22).unwrap()
    }

    #[test]
    fn standing_splits_into_stand_and_ing() {
        let v = standing_vocab();
        assert_eq!(v.split_word("standing"), ["stand", "ing"]);
    }

    #[test]
    fn subtokens_inherit_word_interval() {
        let v = standing_vocab();
        let rec = NarrativeRecord {
            image_id: "i".into(),
            caption: "standing sing".into(),
            timed_words: vec![
                TimedWord { word: "standing".into(), t_start: 1.0, t_end: 1.8 },
                TimedWord { word: "sing".into(), t_start: 1.8, t_end: 2.2 },
            ],
            trace: MouseTrace::empty(),
        };
        let toks = tokenize_aligned(&rec, &v);
        assert_eq!(toks.len(), 3);
        assert_eq!((toks[0].t_start, toks[0].t_end), (1.0, 1.8));
        assert_eq!((toks[1].t_start, toks[1].t_end), (1.0, 1.8));
        assert_eq!(v.token(toks[0].token_id), Some("stand"));
        assert_eq!(v.token(toks[1].token_id), Some("ing"));
        assert_eq!(v.token(toks[2].token_id), Some("sing"));

        let empty = NarrativeRecord { caption: String::new(), timed_words: vec![], ..rec };
        assert!(tokenize_aligned(&empty, &v).is_empty());
    }

    #[test]
    fn parts_round_trip() {
        let v = standing_vocab();
        let back = Vocabulary::from_parts(v.tokens().to_vec(), v.merges().to_vec()).unwrap();
        assert_eq!(back, v);
    }
}
