//! Left-to-right beam search, horizontal-flip test-time augmentation, and
//! interpolated LM rescoring of the pooled hypotheses.

use std::cmp::Ordering;

use crate::config::{AugmentConfig, DecodingConfig};
use crate::error::{Error, Result};
use crate::lm::SequenceScorer;
use crate::model::Pipeline;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Tokenizer, EOS_ID, SOS_ID};
use crate::video::{eval_transform, VideoClip};

/// A candidate token sequence with its model log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub seq: TokenSequence,
    pub model_logprob: f64,
    pub complete: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            seq: TokenSequence::new(vec![SOS_ID]),
            model_logprob: 0.0,
            complete: false,
        }
    }

    pub fn content_len(&self) -> usize {
        self.seq.content().len()
    }
}

/// Supplies next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn step_logprobs(&mut self, prefix: &TokenSequence) -> Result<Vec<f64>>;
}

/// Step scorer backed by a pipeline's decoder over a fixed encoded source.
pub struct PipelineScorer<'a, S: Scalar> {
    pub pipe: &'a mut Pipeline<S>,
    pub g_enc: Tensor<S>,
}

impl<'a, S: Scalar> StepScorer for PipelineScorer<'a, S> {
    fn step_logprobs(&mut self, prefix: &TokenSequence) -> Result<Vec<f64>> {
        self.pipe.step_logprobs(&self.g_enc, prefix)
    }
}

fn ranking_score(h: &Hypothesis, length_normalize: bool) -> f64 {
    if length_normalize {
        h.model_logprob / h.content_len().max(1) as f64
    } else {
        h.model_logprob
    }
}

/// Deterministic ordering: score descending, ties broken by the
/// lexicographically smaller id sequence (shorter prefixes first).
fn compare(a: &Hypothesis, b: &Hypothesis, score_a: f64, score_b: f64) -> Ordering {
    score_b
        .partial_cmp(&score_a)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.seq.ids.cmp(&b.seq.ids))
}

fn sort_hyps(hyps: &mut [Hypothesis], length_normalize: bool) {
    hyps.sort_by(|a, b| {
        compare(a, b, ranking_score(a, length_normalize), ranking_score(b, length_normalize))
    });
}

/// Width-B beam over the scorer's token distribution. Hypotheses that emit
/// EOS are complete and never extended; the search stops once B complete
/// hypotheses exist or prefixes reach `max_len` emitted tokens.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    cfg: &DecodingConfig,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let b = cfg.beam_width;
    let mut live = vec![Hypothesis::root()];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut stopped_early = false;
    for _ in 0..max_len {
        if live.is_empty() || done.len() >= b {
            stopped_early = true;
            break;
        }
        // expand every live hypothesis by the full vocabulary, then keep
        // the top B of the union; completions only count once they survive
        // this selection (which also makes a width-1 beam exactly greedy)
        let mut candidates = Vec::with_capacity(live.len() * 8);
        for h in &live {
            let lps = scorer.step_logprobs(&h.seq)?;
            for (v, lp) in lps.iter().enumerate() {
                let mut ids = h.seq.ids.clone();
                ids.push(v as u32);
                candidates.push(Hypothesis {
                    seq: TokenSequence::new(ids),
                    model_logprob: h.model_logprob + lp,
                    complete: v as u32 == EOS_ID,
                });
            }
        }
        sort_hyps(&mut candidates, cfg.length_normalize);
        candidates.truncate(b);
        live = Vec::new();
        for c in candidates {
            if c.complete {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    let mut pool = done;
    if !stopped_early {
        // prefixes that ran to max_len count as terminal hypotheses
        pool.extend(live);
    }
    sort_hyps(&mut pool, cfg.length_normalize);
    pool.truncate(b);
    Ok(pool)
}

/// `alpha * log p(s|x) + (1 - alpha) * log p_LM(s)`.
pub fn combined_score(h: &Hypothesis, lm: &dyn SequenceScorer, alpha: f64) -> f64 {
    alpha * h.model_logprob + (1.0 - alpha) * lm.logprob(&h.seq.ids)
}

/// Pick the hypothesis with the best interpolated score (beam tie-break).
pub fn rescore(hyps: &[Hypothesis], lm: &dyn SequenceScorer, alpha: f64) -> Result<Hypothesis> {
    if hyps.is_empty() {
        return Err(Error::usage("rescore needs at least one hypothesis"));
    }
    let mut best: Option<(f64, &Hypothesis)> = None;
    for h in hyps {
        let score = combined_score(h, lm, alpha);
        let better = match &best {
            None => true,
            Some((bs, bh)) => compare(h, bh, score, *bs) == Ordering::Less,
        };
        if better {
            best = Some((score, h));
        }
    }
    Ok(best.unwrap().1.clone())
}

/// Rescoring against the model score only (no external LM).
struct ModelOnly;
impl SequenceScorer for ModelOnly {
    fn logprob(&self, _ids: &[u32]) -> f64 {
        0.0
    }
}

/// Final transcription of one decode.
#[derive(Clone, Debug)]
pub struct DecodeOutcome {
    pub text: String,
    pub best: Hypothesis,
    pub combined_score: f64,
    pub n_candidates: usize,
}

/// Decode a raw clip end to end: eval transform, beam search (optionally
/// again on the horizontally mirrored input), pooled rescoring, text.
pub fn decode_clip<S: Scalar>(
    pipe: &mut Pipeline<S>,
    raw: &VideoClip,
    aug: &AugmentConfig,
    dcfg: &DecodingConfig,
    lm: Option<&dyn SequenceScorer>,
    tokenizer: &Tokenizer,
) -> Result<DecodeOutcome> {
    let clip = eval_transform(raw, aug)?;
    let max_len = pipe.cfg.seq2seq.max_target_len - 1;
    let mut hyps = {
        let g_enc = pipe.encode_clip(&clip)?;
        let mut scorer = PipelineScorer { pipe, g_enc };
        beam_search(&mut scorer, dcfg, max_len)?
    };
    if dcfg.use_flip_tta {
        let flipped = clip.flip_horizontal();
        let g_enc = pipe.encode_clip(&flipped)?;
        let mut scorer = PipelineScorer { pipe, g_enc };
        hyps.extend(beam_search(&mut scorer, dcfg, max_len)?);
    }
    let n_candidates = hyps.len();
    let (alpha, lm_ref): (f64, &dyn SequenceScorer) = match lm {
        Some(l) => (dcfg.alpha, l),
        None => (1.0, &ModelOnly),
    };
    let best = rescore(&hyps, lm_ref, alpha)?;
    let combined = combined_score(&best, lm_ref, alpha);
    let text = tokenizer.decode(&best.seq)?;
    Ok(DecodeOutcome { text, best, combined_score: combined, n_candidates })
}


#[cfg(test)]
mod tests {
    use super::test_scorers::*;
    use super::*;
    use std::collections::HashMap;

    fn cfg(b: usize) -> DecodingConfig {
        DecodingConfig { beam_width: b, alpha: 0.7, use_flip_tta: false, length_normalize: false }
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..20 {
            let mut s = TableScorer { vocab: 6, seed };
            let hyps = beam_search(&mut s, &cfg(1), 5).unwrap();
            assert_eq!(hyps.len(), 1);
            // greedy rollout
            let mut ids = vec![SOS_ID];
            let mut lp_total = 0.0;
            for _ in 0..5 {
                let lps = s.step_logprobs(&TokenSequence::new(ids.clone())).unwrap();
                let (best, lp) = lps
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .unwrap();
                ids.push(best as u32);
                lp_total += lp;
                if best as u32 == EOS_ID {
                    break;
                }
            }
            assert_eq!(hyps[0].seq.ids, ids, "seed {seed}");
            assert!((hyps[0].model_logprob - lp_total).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_equals_exhaustive_enumeration() {
        for vocab in 4..=5usize {
            for max_len in 1..=4usize {
                for seed in 0..6 {
                    let b = 125;
                    let mut s1 = TableScorer { vocab, seed };
                    let got = beam_search(&mut s1, &cfg(b), max_len).unwrap();
                    let mut s2 = TableScorer { vocab, seed };
                    let want = exhaustive(&mut s2, vocab, max_len, b, false);
                    assert_eq!(got.len(), want.len());
                    for (g, w) in got.iter().zip(want.iter()) {
                        assert_eq!(g.seq.ids, w.seq.ids, "vocab={vocab} len={max_len} seed={seed}");
                        assert!((g.model_logprob - w.model_logprob).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn beam_is_deterministic_and_sorted() {
        let run = || {
            let mut s = TableScorer { vocab: 8, seed: 3 };
            beam_search(&mut s, &cfg(4), 6).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for w in a.windows(2) {
            assert!(w[0].model_logprob >= w[1].model_logprob);
        }
        for h in &a {
            assert!(h.model_logprob <= 0.0);
            assert!(h.complete || h.content_len() == 6);
        }
    }

    struct FixedLm {
        scores: HashMap<Vec<u32>, f64>,
    }

    impl SequenceScorer for FixedLm {
        fn logprob(&self, ids: &[u32]) -> f64 {
            *self.scores.get(ids).unwrap_or(&-100.0)
        }
    }

    fn hyp(ids: &[u32], lp: f64) -> Hypothesis {
        Hypothesis { seq: TokenSequence::new(ids.to_vec()), model_logprob: lp, complete: true }
    }

    #[test]
    fn rescoring_interpolates_and_flips_at_crossover() {
        let h1 = hyp(&[SOS_ID, 4, EOS_ID], -1.0);
        let h2 = hyp(&[SOS_ID, 5, EOS_ID], -2.0);
        let lm = FixedLm {
            scores: [(h1.seq.ids.clone(), -3.0), (h2.seq.ids.clone(), -2.0)]
                .into_iter()
                .collect(),
        };
        let hyps = vec![h1.clone(), h2.clone()];
        // alpha = 1: model-best wins
        assert_eq!(rescore(&hyps, &lm, 1.0).unwrap().seq.ids, h1.seq.ids);
        // alpha = 0: LM-best wins
        assert_eq!(rescore(&hyps, &lm, 0.0).unwrap().seq.ids, h2.seq.ids);
        // crossover at alpha* = 0.5: combined scores are
        // h1: -3 + 2a, h2: -2  => equal at a = 0.5
        assert_eq!(rescore(&hyps, &lm, 0.5 + 1e-6).unwrap().seq.ids, h1.seq.ids);
        assert_eq!(rescore(&hyps, &lm, 0.5 - 1e-6).unwrap().seq.ids, h2.seq.ids);
        // exactly at the crossover the smaller id sequence wins
        assert_eq!(rescore(&hyps, &lm, 0.5).unwrap().seq.ids, h1.seq.ids);
    }

    #[test]
    fn rescore_of_empty_list_is_usage_error() {
        let lm = FixedLm { scores: HashMap::new() };
        assert!(matches!(rescore(&[], &lm, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn superset_rescoring_never_scores_worse() {
        let lm = FixedLm { scores: HashMap::new() };
        for seed in 0..10 {
            let mut s = TableScorer { vocab: 5, seed };
            let a = beam_search(&mut s, &cfg(4), 4).unwrap();
            let mut s = TableScorer { vocab: 5, seed: seed + 100 };
            let b = beam_search(&mut s, &cfg(4), 4).unwrap();
            let both: Vec<Hypothesis> = a.iter().chain(b.iter()).cloned().collect();
            let alpha = 0.7;
            let best_a = combined_score(&rescore(&a, &lm, alpha).unwrap(), &lm, alpha);
            let best_b = combined_score(&rescore(&b, &lm, alpha).unwrap(), &lm, alpha);
            let best_both = combined_score(&rescore(&both, &lm, alpha).unwrap(), &lm, alpha);
            assert!(best_both >= best_a.max(best_b) - 1e-12);
        }
    }
}
