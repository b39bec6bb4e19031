//! Per-frame visual speech detection on top of the sequence encoder: one
//! affine map to a scalar per frame, then a sigmoid.

use crate::error::{Error, Result};
use crate::model::Pipeline;
use crate::nn::{self, Graph};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::video::VideoClip;

/// `sigmoid(FC(g_enc))` per frame: `[T, d] -> [T]` probabilities.
pub fn vsd_forward<S: Scalar>(g: &mut Graph<S>, g_enc: Var) -> Result<Var> {
    let t = g.tape.dims(g_enc)[0];
    let logits = nn::linear(g, "vsd.fc", g_enc)?;
    let logits = g.tape.reshape(logits, &[t])?;
    Ok(g.tape.sigmoid(logits))
}

/// Mean binary cross-entropy between probabilities and 0/1 frame labels
/// (probabilities clamped to [1e-7, 1 - 1e-7] inside the loss).
pub fn vsd_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::data(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::data("empty prediction"));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels.iter()) {
        let pc = p.clamp(1e-7, 1.0 - 1e-7);
        total -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Graph-side BCE against constant labels (same clamping).
pub fn vsd_loss_graph<S: Scalar>(g: &mut Graph<S>, probs: Var, labels: &[u8]) -> Result<Var> {
    let l: Vec<S> = labels.iter().map(|&v| S::of_f64(v as f64)).collect();
    g.tape.bce_mean(probs, &l)
}

/// Sliding-window inference over a long (already eval-sized) video:
/// windows of `window_frames` at stride `window - overlap`, per-frame
/// probability averaged over every window covering the frame.
pub fn vsd_infer_long<S: Scalar>(
    pipe: &mut Pipeline<S>,
    video: &VideoClip,
    window_frames: usize,
    overlap_frames: usize,
) -> Result<Vec<f64>> {
    if window_frames == 0 || overlap_frames >= window_frames {
        return Err(Error::config(format!(
            "overlap {overlap_frames} must be smaller than window {window_frames}"
        )));
    }
    if window_frames > pipe.cfg.seq2seq.max_source_len {
        return Err(Error::config(format!(
            "window {window_frames} exceeds trained maximum {}",
            pipe.cfg.seq2seq.max_source_len
        )));
    }
    let t = video.t();
    if t <= window_frames {
        let g_enc = pipe.encode_clip(video)?;
        return pipe.vsd_probs(&g_enc);
    }
    let stride = window_frames - overlap_frames;
    let mut sums = vec![0.0f64; t];
    let mut counts = vec![0usize; t];
    let mut start = 0;
    loop {
        let s = start.min(t - window_frames);
        let window = video.crop_frames(s, s + window_frames - 1)?;
        let g_enc = pipe.encode_clip(&window)?;
        let probs = pipe.vsd_probs(&g_enc)?;
        for (i, p) in probs.iter().enumerate() {
            sums[s + i] += p;
            counts[s + i] += 1;
        }
        if s + window_frames >= t {
            break;
        }
        start += stride;
    }
    Ok(sums.iter().zip(counts.iter()).map(|(&s, &c)| s / c as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pipe() -> Pipeline<f64> {
        let mut cfg = PipelineConfig::desk(8);
        cfg.seq2seq.dropout = 0.0;
        Pipeline::new(cfg, 11).unwrap()
    }

    #[test]
    fn zero_head_outputs_half_everywhere() {
        let mut p = pipe();
        for name in ["vsd.fc.w", "vsd.fc.b"] {
            let idx = p.store.lookup(name).unwrap();
            let dims = p.store.value(idx).dims().to_vec();
            p.store.set_value(idx, Tensor::zeros(&dims));
        }
        let g_enc = Tensor::from_fn(&[5, 64], |i| (i % 9) as f64 * 0.1 - 0.4);
        let probs = p.vsd_probs(&g_enc).unwrap();
        assert!(probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn huge_bias_saturates_towards_one() {
        let mut p = pipe();
        let idx = p.store.lookup("vsd.fc.b").unwrap();
        p.store.set_value(idx, Tensor::full(&[1], 1e3));
        let g_enc = Tensor::from_fn(&[4, 64], |i| (i % 5) as f64 * 0.01);
        let probs = p.vsd_probs(&g_enc).unwrap();
        for v in probs {
            assert!((1.0 - v).abs() < 1e-6);
        }
    }

    #[test]
    fn head_matches_dot_product_sigmoid_oracle() {
        let mut p = pipe();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g_enc = Tensor::from_fn(&[3, 64], |_| rng.gen_range(-1.0..1.0));
        let probs = p.vsd_probs(&g_enc).unwrap();
        let w = p.store.value_by_name("vsd.fc.w").unwrap().clone();
        let b = p.store.value_by_name("vsd.fc.b").unwrap().item();
        for t in 0..3 {
            let z: f64 = b + (0..64).map(|c| g_enc.at2(t, c) * w.at2(c, 0)).sum::<f64>();
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((probs[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_of_near_perfect_predictions_is_tiny() {
        let l = vsd_loss(&[1.0 - 1e-7, 1e-7, 1.0 - 1e-7], &[1, 0, 1]).unwrap();
        assert!(l <= 1e-6);
    }

    #[test]
    fn loss_of_coin_flip_is_ln_two() {
        let l = vsd_loss(&[0.5; 7], &[1, 0, 1, 0, 1, 1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_per_term_arithmetic() {
        let l = vsd_loss(&[0.9, 0.2, 0.7], &[1, 0, 1]).unwrap();
        let want = -((0.9f64).ln() + (0.8f64).ln() + (0.7f64).ln()) / 3.0;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.2284).abs() < 1e-4);
    }

    #[test]
    fn loss_length_mismatch_is_data_error() {
        assert!(vsd_loss(&[0.5, 0.5], &[1]).is_err());
    }

    #[test]
    fn graph_loss_agrees_with_plain_loss() {
        let mut p = pipe();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g_enc = Tensor::from_fn(&[6, 64], |_| rng.gen_range(-1.0..1.0));
        let labels = [1u8, 0, 1, 1, 0, 0];
        let probs = p.vsd_probs(&g_enc).unwrap();
        let want = vsd_loss(&probs, &labels).unwrap();
        let mut g = p.graph(Mode::Eval, 0);
        let e = g.input(g_enc);
        let pv = vsd_forward(&mut g, e).unwrap();
        let lv = vsd_loss_graph(&mut g, pv, &labels).unwrap();
        assert!((g.tape.value(lv).item() - want).abs() < 1e-12);
    }

    fn eval_clip(t: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(Tensor::from_fn(&[t, 32, 32, 3], |_| rng.gen_range(0.0..1.0f32)))
            .unwrap()
    }

    #[test]
    fn long_inference_output_length_matches_input() {
        let mut p = pipe();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..8 {
            let t = rng.gen_range(1..60);
            let window = rng.gen_range(2..20);
            let overlap = rng.gen_range(0..window);
            let clip = eval_clip(t, t as u64);
            let probs = vsd_infer_long(&mut p, &clip, window, overlap).unwrap();
            assert_eq!(probs.len(), t, "t={t} window={window} overlap={overlap}");
        }
    }

    #[test]
    fn single_window_inference_equals_direct_pass() {
        let mut p = pipe();
        let clip = eval_clip(9, 77);
        let direct = {
            let g_enc = p.encode_clip(&clip).unwrap();
            p.vsd_probs(&g_enc).unwrap()
        };
        let windowed = vsd_infer_long(&mut p, &clip, 9, 4).unwrap();
        assert_eq!(direct, windowed);
    }

    #[test]
    fn overlapping_windows_average_their_probabilities() {
        // two windows with 50% overlap: middle frames are two-value means
        let mut p = pipe();
        let clip = eval_clip(12, 78);
        let probs = vsd_infer_long(&mut p, &clip, 8, 4).unwrap();
        let w1 = {
            let g = p.encode_clip(&clip.crop_frames(0, 7).unwrap()).unwrap();
            p.vsd_probs(&g).unwrap()
        };
        let w2 = {
            let g = p.encode_clip(&clip.crop_frames(4, 11).unwrap()).unwrap();
            p.vsd_probs(&g).unwrap()
        };
        for i in 0..4 {
            assert!((probs[i] - w1[i]).abs() < 1e-12);
            assert!((probs[4 + i] - (w1[4 + i] + w2[i]) / 2.0).abs() < 1e-12);
            assert!((probs[8 + i] - w2[4 + i]).abs() < 1e-12);
        }
    }
}
