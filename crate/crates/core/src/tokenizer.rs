//! Byte-pair-encoding vocabulary over whitespace-delimited words.
//!
//! Each word is split into characters followed by an end-of-word marker, so
//! merges never cross word boundaries. Pair-frequency ties are broken by the
//! lexicographically smaller pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const HEADER_TAG: &str = "#bpe";
const FORMAT_VERSION: u32 = 1;

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

pub const SPECIAL_IDS: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

#[derive(Clone, Debug, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    symbol_to_id: HashMap<String, u32>,
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

/// Learns `target_merges` merges (fewer if the corpus runs out of pairs).
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_merges: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty BPE training corpus".into()));
    }
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let mut syms: Vec<String> = w.chars().map(String::from).collect();
            syms.push(END_OF_WORD.to_string());
            (syms, c)
        })
        .collect();

    let mut merges = Vec::new();
    while merges.len() < target_merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
            }
        }
        let Some(best) = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()))
        else {
            break;
        };
        for (syms, _) in &mut words {
            apply_merge(syms, &best.0, &best.1);
        }
        merges.push(best);
    }

    let chars: BTreeSet<String> = word_counts
        .keys()
        .flat_map(|w| w.chars().map(String::from))
        .collect();
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.push(END_OF_WORD.to_string());
    tokens.extend(chars);
    for (l, r) in &merges {
        let joined = format!("{l}{r}");
        if !tokens[SPECIALS.len()..].contains(&joined) {
            tokens.push(joined);
        }
    }
    BpeVocab::from_parts(merges, tokens)
}

fn apply_merge(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let r = syms.remove(i + 1);
            syms[i].push_str(&r);
        }
        i += 1;
    }
}

impl BpeVocab {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        let mut symbol_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            if symbol_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate BPE token {t:?}")));
            }
        }
        let mut merge_table = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let id = |s: &str| {
                symbol_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("merge symbol {s:?} not in vocabulary")))
            };
            let key = (id(l)?, id(r)?);
            let out = id(&format!("{l}{r}"))?;
            merge_table.entry(key).or_insert((rank, out));
        }
        Ok(Self {
            merges,
            tokens,
            symbol_to_id,
            merge_table,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIAL_IDS
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token ids for `sentence`, without bos/eos. Unknown characters map to unk.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let eow = self.symbol_to_id[END_OF_WORD];
        for word in sentence.split_whitespace() {
            let mut ids: Vec<u32> = word
                .chars()
                .map(|c| {
                    let mut buf = [0u8; 4];
                    self.symbol_to_id
                        .get(c.encode_utf8(&mut buf) as &str)
                        .copied()
                        .unwrap_or(SPECIAL_IDS.unk)
                })
                .collect();
            ids.push(eow);
            loop {
                let best = ids
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, p)| self.merge_table.get(&(p[0], p[1])).map(|&(r, out)| (r, i, out)))
                    .min();
                let Some((_, i, merged)) = best else { break };
                ids[i] = merged;
                ids.remove(i + 1);
            }
            out.extend(ids);
        }
        out
    }

    /// Joins tokens back into a single-spaced sentence. bos/eos/pad are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} out of range {}", self.size()))
            })?;
            if id == SPECIAL_IDS.pad || id == SPECIAL_IDS.bos || id == SPECIAL_IDS.eos {
                continue;
            }
            s.push_str(tok);
        }
        let s = s.replace(END_OF_WORD, " ");
        Ok(s.trim_end().to_string())
    }

    /// Serialized vocabulary: header, one merge per line, one `symbol<TAB>id` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{HEADER_TAG} version={FORMAT_VERSION} merges={} tokens={}",
            self.merges.len(),
            self.tokens.len()
        )
        .unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{t}\t{i}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty vocabulary file"))?;
        let fields: HashMap<&str, &str> = header
            .split_whitespace()
            .skip(1)
            .filter_map(|kv| kv.split_once('='))
            .collect();
        if !header.starts_with(HEADER_TAG) {
            return Err(Error::parse(origin, 1, "missing #bpe header"));
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(origin, 1, format!("header field {k} missing")))
        };
        if num("version")? != FORMAT_VERSION as usize {
            return Err(Error::parse(origin, 1, "unsupported vocabulary version"));
        }
        let n_merges = num("merges")?;
        let n_tokens = num("tokens")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "truncated merge list"))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(origin, ln + 1, "merge line needs two symbols"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "truncated token list"))?;
            let (sym, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(origin, ln + 1, "token line needs symbol<TAB>id"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(origin, ln + 1, "token ids must be dense and ordered"));
            }
            tokens.push(sym.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::parse(origin, 0, "special tokens missing"));
        }
        Self::from_parts(merges, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(&["abab", "ab"], 1).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let v = train_bpe(&["ab ba"], 0).unwrap();
        assert_eq!(v.size(), 4 + 1 + 2);
        assert_eq!(v.encode("ab").len(), 3);
    }

    #[test]
    fn ties_pick_lexicographically_smaller_pair() {
        // (c,d) and (a,b) both occur once
        let v = train_bpe(&["cd ab"], 1).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn merges_stop_when_pairs_run_out() {
        let v = train_bpe(&["ab"], 100).unwrap();
        assert_eq!(v.merges().len(), 2);
        assert_eq!(v.encode("ab").len(), 1);
    }

    #[test]
    fn roundtrip_and_unknowns() {
        let v = train_bpe(&["ab ab", "ba"], 3).unwrap();
        assert_eq!(v.decode(&v.encode("ab ab")).unwrap(), "ab ab");
        assert!(v.encode("").is_empty());
        let ids = v.encode("azb");
        assert_eq!(ids[1], SPECIAL_IDS.unk);
        assert!(v.decode(&[v.size() as u32]).is_err());
    }

    #[test]
    fn text_format_roundtrips() {
        let v = train_bpe(&["the cat sat", "the hat"], 6).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#bpe version=1 merges=6 tokens="));
        let back = BpeVocab::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(BpeVocab::from_text("garbage", Path::new("mem")).is_err());
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-f]{1,6}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn training_corpus_roundtrips(corpus in prop::collection::vec(sentence(), 1..8), merges in 0usize..40) {
            let v = train_bpe(&corpus, merges).unwrap();
            for s in &corpus {
                prop_assert_eq!(&v.decode(&v.encode(s)).unwrap(), s);
            }
        }

        #[test]
        fn more_merges_never_lengthen(corpus in prop::collection::vec(sentence(), 1..8), merges in 0usize..30) {
            let small = train_bpe(&corpus, merges).unwrap();
            let big = train_bpe(&corpus, merges + 5).unwrap();
            for s in &corpus {
                prop_assert!(big.encode(s).len() <= small.encode(s).len());
            }
        }

        #[test]
        fn training_is_deterministic(corpus in prop::collection::vec(sentence(), 1..6)) {
            prop_assert_eq!(train_bpe(&corpus, 20).unwrap().to_text(), train_bpe(&corpus, 20).unwrap().to_text());
        }
    }
}
