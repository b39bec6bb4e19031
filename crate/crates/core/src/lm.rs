//! Add-k smoothed n-gram language model over token ids.
//!
//! Used to rescore beam hypotheses. Any scorer implementing
//! [`SequenceScorer`] can be swapped in.

use std::collections::HashMap;

use crate::tokenizer::{SOS_ID, EOS_ID};

/// Assigns a log-probability to a token sequence (sentinels included).
pub trait SequenceScorer {
    fn logprob(&self, ids: &[u32]) -> f64;
}

/// Counts over token n-grams with add-k smoothing. Conditional
/// distributions sum to one over the full id range by construction.
#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    k: f64,
    vocab_size: usize,
    next_counts: HashMap<Vec<u32>, HashMap<u32, u64>>,
    context_totals: HashMap<Vec<u32>, u64>,
}

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ADD_K: f64 = 0.1;

impl NGramLM {
    /// Train on content-token sequences (no sentinels); each sequence is
    /// padded with SOS context and terminated by an EOS event.
    pub fn train<I, T>(sequences: I, order: usize, k: f64, vocab_size: usize) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u32]>,
    {
        assert!(order >= 1, "n-gram order must be at least 1");
        assert!(vocab_size > 0);
        let mut lm = NGramLM {
            order,
            k,
            vocab_size,
            next_counts: HashMap::new(),
            context_totals: HashMap::new(),
        };
        for seq in sequences {
            for (ctx, next) in events(seq.as_ref(), order) {
                *lm.next_counts.entry(ctx.clone()).or_default().entry(next).or_insert(0) += 1;
                *lm.context_totals.entry(ctx).or_insert(0) += 1;
            }
        }
        lm
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `ln P(next | context)` with add-k smoothing.
    pub fn cond_logprob(&self, context: &[u32], next: u32) -> f64 {
        let ctx: Vec<u32> = context.to_vec();
        let c = self
            .next_counts
            .get(&ctx)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.context_totals.get(&ctx).copied().unwrap_or(0) as f64;
        ((c + self.k) / (total + self.k * self.vocab_size as f64)).ln()
    }
}

impl SequenceScorer for NGramLM {
    /// Sum of conditional log-probabilities of the content tokens plus the
    /// terminal EOS event.
    fn logprob(&self, ids: &[u32]) -> f64 {
        let content = strip_sentinels(ids);
        events_of_content(content, self.order)
            .map(|(ctx, next)| self.cond_logprob(&ctx, next))
            .sum()
    }
}

fn strip_sentinels(ids: &[u32]) -> &[u32] {
    let mut s = ids;
    if s.first() == Some(&SOS_ID) {
        s = &s[1..];
    }
    if s.last() == Some(&EOS_ID) {
        s = &s[..s.len() - 1];
    }
    s
}

fn events(content: &[u32], order: usize) -> Vec<(Vec<u32>, u32)> {
    events_of_content(content, order).collect()
}

/// (context, next) pairs: SOS-padded contexts of length order-1, events for
/// every content token and one terminal EOS.
fn events_of_content(content: &[u32], order: usize) -> impl Iterator<Item = (Vec<u32>, u32)> + '_ {
    let ctx_len = order - 1;
    (0..=content.len()).map(move |i| {
        let next = if i == content.len() { EOS_ID } else { content[i] };
        let mut ctx = Vec::with_capacity(ctx_len);
        for j in 0..ctx_len {
            let back = ctx_len - j;
            ctx.push(if i >= back { content[i - back] } else { SOS_ID });
        }
        (ctx, next)
    })
}
