use std::collections::HashMap;

use super::{suffix, Provider, ProviderError};
use crate::dist::{LogDistribution, TokenId};

/// Add-alpha smoothed n-gram model.
///
/// The conditioning key is the last `order - 1` tokens of the context, or the
/// whole context when it is shorter. Training records every position of every
/// sequence, so sequence starts are modeled with shorter keys.
#[derive(Debug, Clone)]
pub struct NgramProvider {
    name: String,
    order: usize,
    alpha: f64,
    vocab_size: usize,
    counts: HashMap<Vec<TokenId>, Vec<u64>>,
    cost: f64,
}

/// Trains an add-`alpha` n-gram model over `vocab_size` tokens.
pub fn train_ngram(
    corpus: &[Vec<TokenId>],
    order: usize,
    alpha: f64,
    vocab_size: usize,
) -> Result<NgramProvider, ProviderError> {
    NgramProvider::train("ngram", corpus, order, alpha, vocab_size)
}

impl NgramProvider {
    pub fn train(
        name: impl Into<String>,
        corpus: &[Vec<TokenId>],
        order: usize,
        alpha: f64,
        vocab_size: usize,
    ) -> Result<Self, ProviderError> {
        if order < 1 {
            return Err(ProviderError::InvalidParameter(
                "n-gram order must be at least 1".into(),
            ));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ProviderError::InvalidParameter(format!(
                "smoothing must be positive, got {alpha}"
            )));
        }
        if vocab_size < 2 {
            return Err(ProviderError::InvalidParameter(
                "vocabulary needs at least 2 tokens".into(),
            ));
        }
        if corpus.iter().all(Vec::is_empty) {
            return Err(ProviderError::EmptyCorpus);
        }
        let mut counts: HashMap<Vec<TokenId>, Vec<u64>> = HashMap::new();
        for seq in corpus {
            for (pos, &tok) in seq.iter().enumerate() {
                if tok as usize >= vocab_size {
                    return Err(ProviderError::InvalidParameter(format!(
                        "corpus token {tok} outside vocabulary of {vocab_size}"
                    )));
                }
                let key = suffix(&seq[..pos], order - 1).to_vec();
                counts.entry(key).or_insert_with(|| vec![0; vocab_size])[tok as usize] += 1;
            }
        }
        Ok(Self {
            name: name.into(),
            order,
            alpha,
            vocab_size,
            counts,
            cost: 1.0,
        })
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Raw counts following `key`, if it was seen in training.
    pub fn counts(&self, key: &[TokenId]) -> Option<&[u64]> {
        self.counts.get(key).map(Vec::as_slice)
    }

    /// Same counts, different smoothing.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, ProviderError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ProviderError::InvalidParameter(format!(
                "smoothing must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }
}

impl Provider for NgramProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logdist(&self, ctx: &[TokenId]) -> Result<LogDistribution, ProviderError> {
        let key = suffix(ctx, self.order - 1);
        let logits: Vec<f64> = match self.counts.get(key) {
            Some(row) => row.iter().map(|&c| (c as f64 + self.alpha).ln()).collect(),
            None => vec![0.0; self.vocab_size],
        };
        Ok(LogDistribution::softmax(&logits)?)
    }

    fn cost_hint(&self) -> f64 {
        self.cost
    }
}

/// Parses a corpus file: whitespace-separated token ids, one sequence per
/// line. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Vec<TokenId>>, ProviderError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<TokenId>().map_err(|_| {
                        ProviderError::InvalidParameter(format!(
                            "corpus line {}: {w:?} is not a token id",
                            i + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::total_variation;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bigram_hand_count() {
        // after 0: counts (0, 2) -> ((0+1)/(2+2), (2+1)/(2+2))
        let m = train_ngram(&[vec![0, 1, 0, 1]], 2, 1.0, 2).unwrap();
        let d = m.next_logdist(&[0]).unwrap();
        assert_abs_diff_eq!(d.prob(0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d.prob(1), 0.75, epsilon = 1e-12);
        // the key is the last token only
        assert_eq!(m.next_logdist(&[1, 1, 0]).unwrap(), d);
    }

    #[test]
    fn unigram_ignores_context() {
        let m = train_ngram(&[vec![0, 1, 1, 2], vec![2]], 1, 0.5, 3).unwrap();
        let a = m.next_logdist(&[]).unwrap();
        assert_eq!(a, m.next_logdist(&[0, 1, 2]).unwrap());
        // (1.5, 2.5, 2.5) / 6.5
        assert_abs_diff_eq!(a.prob(0), 1.5 / 6.5, epsilon = 1e-12);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = train_ngram(&[vec![0, 0, 0]], 2, 1.0, 3).unwrap();
        let d = m.next_logdist(&[2]).unwrap();
        for t in 0..3 {
            assert_abs_diff_eq!(d.prob(t), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            train_ngram(&[], 2, 1.0, 2).unwrap_err(),
            ProviderError::EmptyCorpus
        );
        assert_eq!(
            train_ngram(&[vec![]], 2, 1.0, 2).unwrap_err(),
            ProviderError::EmptyCorpus
        );
        assert!(train_ngram(&[vec![0]], 0, 1.0, 2).is_err());
        assert!(train_ngram(&[vec![0]], 2, 0.0, 2).is_err());
        assert!(train_ngram(&[vec![5]], 2, 1.0, 2).is_err());
    }

    #[test]
    fn larger_alpha_moves_toward_uniform() {
        let corpus = vec![vec![0, 1, 2, 0, 1, 1, 0, 1], vec![2, 2, 0, 1]];
        let base = train_ngram(&corpus, 2, 0.1, 3).unwrap();
        let u = LogDistribution::uniform(3);
        for ctx in [&[][..], &[0], &[1], &[2]] {
            let mut last = f64::INFINITY;
            for alpha in [0.1, 0.5, 1.0, 4.0, 50.0] {
                let m = base.with_alpha(alpha).unwrap();
                let tv = total_variation(&m.next_logdist(ctx).unwrap(), &u).unwrap();
                assert!(tv <= last + 1e-15, "alpha {alpha}: {tv} > {last}");
                last = tv;
            }
        }
    }

    #[test]
    fn corpus_file_format() {
        let c = parse_corpus("0 1 2\n\n  3 4 \n").unwrap();
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4]]);
        assert!(parse_corpus("0 x\n").is_err());
    }
}
