use std::collections::{BTreeSet, HashMap};

/// Interpolated modified Kneser-Ney bigram model written directly from the
/// textbook formulas.
pub struct BigramOracle {
    pub bigram: HashMap<(String, String), f64>,
    pub context_total: HashMap<String, f64>,
    pub context_types: HashMap<String, [f64; 3]>,
    pub cont: HashMap<String, f64>,
    pub cont_total: f64,
    pub cont_types: [f64; 3],
    pub vocab: Vec<String>,
    pub d_uni: [f64; 3],
    pub d_bi: [f64; 3],
}

pub fn discounts(counts: impl Iterator<Item = f64>) -> [f64; 3] {
    let mut n = [0.0f64; 4];
    for c in counts {
        if (1.0..=4.0).contains(&c) {
            n[c as usize - 1] += 1.0;
        }
    }
    if n.contains(&0.0) {
        return [0.75; 3];
    }
    let y = n[0] / (n[0] + 2.0 * n[1]);
    let d = [
        1.0 - 2.0 * y * n[1] / n[0],
        2.0 - 3.0 * y * n[2] / n[1],
        3.0 - 4.0 * y * n[3] / n[2],
    ];
    if d[0] > 0.0 && d[0] <= 1.0 && d[1] > 0.0 && d[1] <= 2.0 && d[2] > 0.0 && d[2] <= 3.0 {
        d
    } else {
        [0.75; 3]
    }
}

fn bucket(c: f64) -> usize {
    (c.min(3.0) as usize) - 1
}

impl BigramOracle {
    pub fn new(corpus: &[&str]) -> Self {
        let mut bigram: HashMap<(String, String), f64> = HashMap::new();
        let mut words = BTreeSet::new();
        for s in corpus {
            let mut toks = vec!["<s>".to_string()];
            toks.extend(s.split_whitespace().map(String::from));
            toks.push("</s>".into());
            for w in &toks[1..] {
                words.insert(w.clone());
            }
            for p in toks.windows(2) {
                *bigram.entry((p[0].clone(), p[1].clone())).or_default() += 1.0;
            }
        }
        words.insert("<unk>".into());
        let mut context_total: HashMap<String, f64> = HashMap::new();
        let mut context_types: HashMap<String, [f64; 3]> = HashMap::new();
        let mut cont: HashMap<String, f64> = HashMap::new();
        for ((v, w), &c) in &bigram {
            *context_total.entry(v.clone()).or_default() += c;
            context_types.entry(v.clone()).or_default()[bucket(c)] += 1.0;
            *cont.entry(w.clone()).or_default() += 1.0;
        }
        let cont_total = cont.values().sum();
        let mut cont_types = [0.0; 3];
        for &c in cont.values() {
            cont_types[bucket(c)] += 1.0;
        }
        let d_uni = discounts(cont.values().copied());
        let d_bi = discounts(bigram.values().copied());
        Self {
            bigram,
            context_total,
            context_types,
            cont,
            cont_total,
            cont_types,
            vocab: words.into_iter().collect(),
            d_uni,
            d_bi,
        }
    }

    fn d(d: &[f64; 3], c: f64) -> f64 {
        if c == 0.0 {
            0.0
        } else {
            d[bucket(c)]
        }
    }

    pub fn unigram(&self, w: &str) -> f64 {
        let c = self.cont.get(w).copied().unwrap_or(0.0);
        let gamma: f64 = (0..3).map(|k| self.d_uni[k] * self.cont_types[k]).sum::<f64>() / self.cont_total;
        (c - Self::d(&self.d_uni, c)).max(0.0) / self.cont_total + gamma / self.vocab.len() as f64
    }

    pub fn prob(&self, v: &str, w: &str) -> f64 {
        let Some(&total) = self.context_total.get(v) else {
            return self.unigram(w);
        };
        let c = self.bigram.get(&(v.to_string(), w.to_string())).copied().unwrap_or(0.0);
        let types = self.context_types[v];
        let gamma: f64 = (0..3).map(|k| self.d_bi[k] * types[k]).sum::<f64>() / total;
        (c - Self::d(&self.d_bi, c)).max(0.0) / total + gamma * self.unigram(w)
    }
}
