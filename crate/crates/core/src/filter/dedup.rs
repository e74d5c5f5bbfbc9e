//! N-gram overlap against benchmark prompts.
//!
//! Prompts are case-folded, punctuation becomes whitespace, and the result is
//! split on whitespace. Two prompts collide when both have at least `n` tokens
//! and share an n-gram, or when either is shorter than `n` tokens and the two
//! token sequences are identical.

use std::collections::HashSet;

pub fn tokenize(text: &str) -> Vec<String> {
    let folded: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    folded.split_whitespace().map(String::from).collect()
}

fn grams(tokens: &[String], n: usize) -> impl Iterator<Item = String> + '_ {
    tokens.windows(n).map(|w| w.join(" "))
}

/// Pairwise collision test; the definition the index below must agree with.
pub fn collides(a: &str, b: &str, n: usize) -> bool {
    let (ta, tb) = (tokenize(a), tokenize(b));
    if ta.len() < n || tb.len() < n {
        return ta == tb;
    }
    let set: HashSet<String> = grams(&ta, n).collect();
    let hit = grams(&tb, n).any(|g| set.contains(&g));
    hit
}

/// Precomputed benchmark n-grams for fast lookups.
#[derive(Clone, Debug)]
pub struct BenchmarkIndex {
    n: usize,
    grams: HashSet<String>,
    /// Normalized token sequences of every benchmark prompt, for short prompts.
    sequences: HashSet<String>,
}

impl BenchmarkIndex {
    pub fn new<S: AsRef<str>>(benchmarks: &[S], n: usize) -> Self {
        let n = n.max(1);
        let mut index = BenchmarkIndex {
            n,
            grams: HashSet::new(),
            sequences: HashSet::new(),
        };
        for b in benchmarks {
            let tokens = tokenize(b.as_ref());
            if tokens.len() >= n {
                index.grams.extend(grams(&tokens, n));
            }
            index.sequences.insert(tokens.join(" "));
        }
        index
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn contaminated(&self, prompt: &str) -> bool {
        let tokens = tokenize(prompt);
        if tokens.len() < self.n {
            return self.sequences.contains(&tokens.join(" "));
        }
        // A long prompt equals a short benchmark only if both are short, so
        // only shared n-grams matter here.
        let hit = grams(&tokens, self.n).any(|g| self.grams.contains(&g));
        hit
    }
}
