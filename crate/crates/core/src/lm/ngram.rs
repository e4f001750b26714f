//! Interpolated modified Kneser-Ney n-gram models over whitespace tokens.
//!
//! Adjusted counts follow the usual convention: raw counts at the highest
//! order and for n-grams starting with `<s>` (nothing can precede them),
//! continuation counts `N1+(• g)` everywhere else. The unigram level is
//! interpolated with a uniform distribution over the vocabulary (`</s>` and
//! `<unk>` included, `<s>` excluded). The trained model is stored in backoff
//! form: every seen n-gram keeps its final interpolated log-probability and,
//! when it is also a context, the log of its interpolation weight.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;

/// Discount used for every count bucket when count-of-counts are degenerate.
pub const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    logprob: f64,
    backoff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    order: usize,
    /// `<s>`, `</s>`, `<unk>`, then corpus words in sorted order.
    words: Vec<String>,
    index: HashMap<String, u32>,
    table: HashMap<Vec<u32>, Entry>,
}

/// Modified Kneser-Ney discounts `[D1, D2, D3+]` from the count-of-counts
/// `n[k-1]` = number of n-grams with adjusted count `k` (k = 1..=4).
pub fn modified_kn_discounts(n: [u64; 4]) -> [f64; 3] {
    if n.iter().any(|&c| c == 0) {
        return [FALLBACK_DISCOUNT; 3];
    }
    let [n1, n2, n3, n4] = n.map(|c| c as f64);
    let y = n1 / (n1 + 2.0 * n2);
    let d = [1.0 - 2.0 * y * n2 / n1, 2.0 - 3.0 * y * n3 / n2, 3.0 - 4.0 * y * n4 / n3];
    if d.iter().enumerate().all(|(k, &v)| v > 0.0 && v <= (k + 1) as f64) {
        d
    } else {
        [FALLBACK_DISCOUNT; 3]
    }
}

/// Continuation probabilities `N1+(• w) / N1+(• •)` over one token stream.
pub fn continuation_probs(tokens: &[&str]) -> BTreeMap<String, f64> {
    let bigrams: BTreeSet<(&str, &str)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    let mut m = BTreeMap::new();
    for (_, w) in &bigrams {
        *m.entry(w.to_string()).or_insert(0.0) += 1.0 / bigrams.len() as f64;
    }
    m
}

fn discount(d: &[f64; 3], count: u64) -> f64 {
    match count {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

#[derive(Default)]
struct ContextStats {
    total: u64,
    /// Word types with adjusted count 1, 2, 3+.
    buckets: [u64; 3],
}

pub fn train_ngram<S: AsRef<str>>(corpus: &[S], order: usize) -> Result<NGramModel> {
    if order < 1 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot train an n-gram model on an empty corpus".into()));
    }
    let vocab: BTreeSet<&str> = corpus
        .iter()
        .flat_map(|s| s.as_ref().split_whitespace())
        .filter(|w| ![BOS, EOS, UNK].contains(w))
        .collect();
    let mut words: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
    words.extend(vocab.into_iter().map(String::from));
    let index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();

    // raw[n-1]: counts of n-grams ending at a predicted position
    let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for s in corpus {
        let mut seq = vec![BOS_ID];
        seq.extend(s.as_ref().split_whitespace().map(|w| index.get(w).copied().unwrap_or(UNK_ID)));
        seq.push(EOS_ID);
        for i in 1..seq.len() {
            for n in 1..=order.min(i + 1) {
                *raw[n - 1].entry(seq[i + 1 - n..=i].to_vec()).or_insert(0) += 1;
            }
        }
    }
    let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    adjusted[order - 1] = raw[order - 1].clone();
    for n in 1..order {
        let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
        for g in raw[n].keys() {
            *cont.entry(g[1..].to_vec()).or_insert(0) += 1;
        }
        for (g, &c) in &raw[n - 1] {
            let a = if g[0] == BOS_ID { c } else { cont.get(g).copied().unwrap_or(0) };
            adjusted[n - 1].insert(g.clone(), a);
        }
    }

    let mut table: HashMap<Vec<u32>, Entry> = HashMap::new();
    let predictable = (words.len() - 1) as f64;
    for n in 1..=order {
        let counts = &adjusted[n - 1];
        let mut coc = [0u64; 4];
        for &a in counts.values() {
            if (1..=4).contains(&a) {
                coc[a as usize - 1] += 1;
            }
        }
        let d = modified_kn_discounts(coc);
        let mut stats: HashMap<&[u32], ContextStats> = HashMap::new();
        for (g, &a) in counts {
            let st = stats.entry(&g[..n - 1]).or_default();
            st.total += a;
            st.buckets[(a.min(3) - 1) as usize] += 1;
        }
        let gamma = |st: &ContextStats| -> f64 {
            (d[0] * st.buckets[0] as f64 + d[1] * st.buckets[1] as f64 + d[2] * st.buckets[2] as f64) / st.total as f64
        };
        let mut fresh = Vec::with_capacity(counts.len());
        if n == 1 {
            let st = &stats[&[][..]];
            let g0 = gamma(st);
            for w in 1..words.len() as u32 {
                let a = counts.get(&vec![w]).copied().unwrap_or(0);
                let p = (a as f64 - discount(&d, a)).max(0.0) / st.total as f64 + g0 / predictable;
                fresh.push((vec![w], p.ln()));
            }
            // <s> is a context only
            fresh.push((vec![BOS_ID], f64::NEG_INFINITY));
        } else {
            for (g, &a) in counts {
                let h = &g[..n - 1];
                let st = &stats[h];
                let lower = query(&table, &g[1..n - 1], g[n - 1]);
                let p = (a as f64 - discount(&d, a)).max(0.0) / st.total as f64 + gamma(st) * lower.exp();
                fresh.push((g.clone(), p.ln()));
            }
        }
        for (g, lp) in fresh {
            table.insert(g, Entry { logprob: lp, backoff: 0.0 });
        }
        for (h, st) in &stats {
            if let Some(e) = table.get_mut(*h) {
                e.backoff = gamma(st).ln();
            }
        }
    }
    Ok(NGramModel {
        order,
        words,
        index,
        table,
    })
}

/// Backoff-form lookup of `ln P(w | ctx)`.
fn query(table: &HashMap<Vec<u32>, Entry>, ctx: &[u32], w: u32) -> f64 {
    let mut acc = 0.0;
    let mut key = Vec::with_capacity(ctx.len() + 1);
    for start in 0..=ctx.len() {
        key.clear();
        key.extend_from_slice(&ctx[start..]);
        key.push(w);
        if let Some(e) = table.get(&key) {
            return acc + e.logprob;
        }
        if start < ctx.len() {
            if let Some(e) = table.get(&ctx[start..]) {
                acc += e.backoff;
            }
        }
    }
    unreachable!("every predictable word has a unigram entry")
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable tokens: corpus words, `</s>` and `<unk>`.
    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.words[1..].iter().map(String::as_str)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len() - 1
    }

    fn id(&self, w: &str) -> u32 {
        self.index.get(w).copied().filter(|&i| i != BOS_ID).unwrap_or(UNK_ID)
    }

    /// `ln P(word | context)`; `context` may start with `<s>`, unknown words
    /// map to `<unk>`.
    pub fn logprob(&self, context: &[&str], word: &str) -> f64 {
        let ids: Vec<u32> = context
            .iter()
            .enumerate()
            .map(|(i, w)| if i == 0 && *w == BOS { BOS_ID } else { self.id(w) })
            .collect();
        let keep = ids.len().min(self.order - 1);
        query(&self.table, &ids[ids.len() - keep..], self.id(word))
    }

    /// Natural-log total and per-token average over the sentence plus `</s>`.
    pub fn score(&self, sentence: &str) -> (f64, f64) {
        let mut ids = vec![BOS_ID];
        ids.extend(sentence.split_whitespace().map(|w| self.id(w)));
        ids.push(EOS_ID);
        let mut total = 0.0;
        for i in 1..ids.len() {
            let lo = i.saturating_sub(self.order - 1);
            total += query(&self.table, &ids[lo..i], ids[i]);
        }
        let n = (ids.len() - 1) as f64;
        (total, total / n)
    }

    /// Every context with at least one observed continuation, as token lists.
    pub fn contexts(&self) -> Vec<Vec<&str>> {
        let set: BTreeSet<&[u32]> = self.table.keys().map(|g| &g[..g.len() - 1]).collect();
        set.into_iter()
            .map(|g| g.iter().map(|&i| self.words[i as usize].as_str()).collect())
            .collect()
    }

    /// `# ngram order=N vocab=V` header, a column header, then one
    /// `context<TAB>word<TAB>logprob<TAB>backoff` row per stored n-gram,
    /// sorted by order, context, word.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(usize, String, &str, Entry)> = self
            .table
            .iter()
            .map(|(g, e)| {
                let ctx: Vec<&str> = g[..g.len() - 1].iter().map(|&i| self.words[i as usize].as_str()).collect();
                (g.len(), ctx.join(" "), self.words[g[g.len() - 1] as usize].as_str(), *e)
            })
            .collect();
        rows.sort_by(|a, b| (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2)));
        let mut s = format!("# ngram order={} vocab={}\ncontext\tword\tlogprob\tbackoff\n", self.order, self.vocab_size());
        for (_, ctx, w, e) in rows {
            let _ = writeln!(s, "{ctx}\t{w}\t{}\t{}", e.logprob, e.backoff);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty n-gram file"))?;
        let mut order = None;
        let mut vocab = None;
        for field in header.strip_prefix("# ngram ").unwrap_or("").split_whitespace() {
            match field.split_once('=') {
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                Some(("vocab", v)) => vocab = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (Some(order), Some(vocab)) = (order, vocab) else {
            return Err(Error::parse(origin, 1, "expected '# ngram order=N vocab=V'"));
        };
        if order == 0 {
            return Err(Error::parse(origin, 1, "order must be positive"));
        }
        lines.next();
        let mut raw = Vec::new();
        let mut words = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(origin, i + 1, "expected 4 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(origin, i + 1, format!("bad number {s}")));
            let (lp, bo) = (num(f[2])?, num(f[3])?);
            if f[0].is_empty() && ![BOS, EOS, UNK].contains(&f[1]) {
                words.push(f[1].to_string());
            }
            let mut g: Vec<String> = f[0].split_whitespace().map(String::from).collect();
            g.push(f[1].to_string());
            if g.len() > order {
                return Err(Error::parse(origin, i + 1, "n-gram longer than the model order"));
            }
            raw.push((g, lp, bo, i + 1));
        }
        words[3..].sort();
        if words.len() - 1 != vocab {
            return Err(Error::Format(format!(
                "{}: header declares {vocab} words, table has {}",
                origin.display(),
                words.len() - 1
            )));
        }
        let index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut table = HashMap::new();
        for (g, logprob, backoff, line) in raw {
            let ids = g
                .iter()
                .map(|w| index.get(w).copied().ok_or_else(|| Error::parse(origin, line, format!("unknown word {w}"))))
                .collect::<Result<Vec<u32>>>()?;
            table.insert(ids, Entry { logprob, backoff });
        }
        Ok(Self {
            order,
            words,
            index,
            table,
        })
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

/// Moore-Lewis selection: ranks general-domain sentences by in-domain minus
/// general per-token log-probability and keeps the top `⌊keep_fraction·N⌋`.
/// Ties go to the earlier sentence; returned indices are in corpus order.
pub fn moore_lewis_select<S: AsRef<str>>(
    general: &[S],
    in_domain_lm: &NGramModel,
    general_lm: &NGramModel,
    keep_fraction: f64,
) -> Result<Vec<usize>> {
    if general.is_empty() {
        return Err(Error::Data("empty general-domain corpus".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_fraction {keep_fraction} must lie in (0,1]")));
    }
    if in_domain_lm.order() != general_lm.order() {
        return Err(Error::InvalidArgument(format!(
            "in-domain LM has order {}, general LM has order {}",
            in_domain_lm.order(),
            general_lm.order()
        )));
    }
    // the epsilon keeps products like 0.29·100 from flooring to 28
    let keep = ((keep_fraction * general.len() as f64) + 1e-9).floor() as usize;
    let scores: Vec<f64> = general
        .iter()
        .map(|s| in_domain_lm.score(s.as_ref()).1 - general_lm.score(s.as_ref()).1)
        .collect();
    let mut order: Vec<usize> = (0..general.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

pub fn moore_lewis_filter<S: AsRef<str>>(
    general: &[S],
    in_domain_lm: &NGramModel,
    general_lm: &NGramModel,
    keep_fraction: f64,
) -> Result<Vec<String>> {
    let kept = moore_lewis_select(general, in_domain_lm, general_lm, keep_fraction)?;
    Ok(kept.into_iter().map(|i| general[i].as_ref().to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discounts_fall_back_on_degenerate_counts() {
        assert_eq!(modified_kn_discounts([5, 0, 1, 1]), [FALLBACK_DISCOUNT; 3]);
        let d = modified_kn_discounts([100, 40, 20, 10]);
        assert!(d[0] > 0.0 && d[0] < 1.0 && d[1] > d[0] && d[2] > d[1]);
    }

    #[test]
    fn text_round_trip() {
        let m = train_ngram(&["a b c", "a c b a", "b b"], 3).unwrap();
        let back = NGramModel::from_text(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn contexts_normalize() {
        let m = train_ngram(&["x y z", "y y x z", "z"], 3).unwrap();
        for ctx in m.contexts() {
            let total: f64 = m.vocab().map(|w| m.logprob(&ctx, w).exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "{ctx:?}: {total}");
        }
    }
}
