//! Corpus-level evaluation helpers shared by the CLI and acceptance tests.

use crate::beam::{decode_clip, DecodeOutcome};
use crate::config::{AugmentConfig, DecodingConfig};
use crate::error::Result;
use crate::lm::SequenceScorer;
use crate::metrics;
use crate::model::Pipeline;
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;
use crate::trainer::Corpus;
use crate::video::eval_transform;

/// Aggregate WER of greedy decoding over a corpus:
/// total edits / total reference words.
pub fn corpus_greedy_wer<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    aug: &AugmentConfig,
) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    let max_len = pipe.cfg.seq2seq.max_target_len - 1;
    for (e, clip) in corpus.entries.iter().zip(corpus.clips.iter()) {
        let view = eval_transform(clip, aug)?;
        let g_enc = pipe.encode_clip(&view)?;
        let (seq, _) = pipe.greedy(&g_enc, max_len)?;
        let hyp = tokenizer.decode(&seq)?;
        let b = metrics::wer(&e.transcript, &hyp)?;
        edits += b.edits();
        ref_words += b.ref_words;
    }
    Ok(edits as f64 / ref_words.max(1) as f64)
}

/// Aggregate WER of full beam decoding (with optional LM and TTA).
pub fn corpus_beam_wer<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    aug: &AugmentConfig,
    dcfg: &DecodingConfig,
    lm: Option<&dyn SequenceScorer>,
) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (e, clip) in corpus.entries.iter().zip(corpus.clips.iter()) {
        let out = decode_clip(pipe, clip, aug, dcfg, lm, tokenizer)?;
        let b = metrics::wer(&e.transcript, &out.text)?;
        edits += b.edits();
        ref_words += b.ref_words;
    }
    Ok(edits as f64 / ref_words.max(1) as f64)
}

/// Beam-decode every corpus clip, returning the outcomes in order.
pub fn decode_corpus<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    aug: &AugmentConfig,
    dcfg: &DecodingConfig,
    lm: Option<&dyn SequenceScorer>,
) -> Result<Vec<DecodeOutcome>> {
    corpus
        .clips
        .iter()
        .map(|clip| decode_clip(pipe, clip, aug, dcfg, lm, tokenizer))
        .collect()
}

/// Mean average precision of the detection head over labelled clips
/// (each clip is one group).
pub fn corpus_vsd_map<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    aug: &AugmentConfig,
) -> Result<f64> {
    let mut groups = Vec::new();
    for (i, clip) in corpus.clips.iter().enumerate() {
        let Some(labels) = &corpus.vsd_labels[i] else { continue };
        let view = eval_transform(clip, aug)?;
        let g_enc = pipe.encode_clip(&view)?;
        let probs = pipe.vsd_probs(&g_enc)?;
        groups.push((probs, labels.clone()));
    }
    metrics::mean_ap(&groups)
}
