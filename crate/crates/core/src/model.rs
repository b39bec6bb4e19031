//! Full pipeline assembly: backbone + pooling + seq2seq + detection head,
//! with checkpoint round-tripping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, PoolingConfig};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{Graph, Init, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::seq2seq;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;
use crate::video::VideoClip;
use crate::{backbone, vtp};

/// Model parameters bound to their configuration.
pub struct Pipeline<S: Scalar> {
    pub cfg: PipelineConfig,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Pipeline<S> {
    /// Deterministic seeded initialization of every parameter.
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let blocks = backbone_blocks(&cfg);
        backbone::init_backbone(&mut init, &cfg.backbone, blocks);
        vtp::init_pooling(&mut init, &cfg);
        seq2seq::init_seq2seq(&mut init, &cfg.seq2seq);
        init.linear("vsd.fc", cfg.seq2seq.model_dim, 1);
        Ok(Pipeline { cfg, store })
    }

    /// Fresh graph over this pipeline's parameters.
    pub fn graph(&mut self, mode: Mode, seed: u64) -> Graph<'_, S> {
        let dropout = if mode == Mode::Train { self.cfg.seq2seq.dropout } else { 0.0 };
        Graph::new(&mut self.store, mode, seed, dropout)
    }

    // ── eval-mode helpers ───────────────────────────────────────────

    /// Tap-point feature maps `[T, h, w, c]` for an already-sized clip.
    pub fn extract_features(&mut self, clip: &VideoClip) -> Result<Tensor<S>> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let x = g.input(clip.frames().cast::<S>());
        let f = backbone::backbone_forward(&mut g, &cfg.backbone, x, backbone_blocks(&cfg))?;
        Ok(g.tape.value(f).clone())
    }

    /// Pooled per-frame embeddings `[T, d]` plus attention masks `[T, hw]`
    /// (the masks are absent on the GAP path).
    pub fn pooled_sequence(&mut self, clip: &VideoClip) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let x = g.input(clip.frames().cast::<S>());
        let (pooled, attn) = frontend(&mut g, &cfg, x)?;
        let p = g.tape.value(pooled).clone();
        let a = attn.map(|a| g.tape.value(a).clone());
        Ok((p, a))
    }

    /// Encoder output for a pooled sequence tensor.
    pub fn encode_pooled(&mut self, pooled: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let p = g.input(pooled.clone());
        let e = seq2seq::encode(&mut g, &cfg.seq2seq, p)?;
        Ok(g.tape.value(e).clone())
    }

    /// Clip straight through backbone, pooling, and encoder.
    pub fn encode_clip(&mut self, clip: &VideoClip) -> Result<Tensor<S>> {
        let (pooled, _) = self.pooled_sequence(clip)?;
        self.encode_pooled(&pooled)
    }

    /// Next-token log-probabilities given the encoded source and a prefix.
    pub fn step_logprobs(&mut self, g_enc: &Tensor<S>, prefix: &TokenSequence) -> Result<Vec<f64>> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let e = g.input(g_enc.clone());
        let lp = seq2seq::decode_step(&mut g, &cfg.seq2seq, e, prefix)?;
        Ok(g.tape.value(lp).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Teacher-forced NLL of a target given the encoded source.
    pub fn nll(&mut self, g_enc: &Tensor<S>, target: &TokenSequence) -> Result<f64> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let e = g.input(g_enc.clone());
        let nll = seq2seq::teacher_forced_nll(&mut g, &cfg.seq2seq, e, target)?;
        Ok(g.tape.value(nll).item().as_f64())
    }

    /// Greedy decode of an encoded source.
    pub fn greedy(&mut self, g_enc: &Tensor<S>, max_len: usize) -> Result<(TokenSequence, f64)> {
        let cfg = self.cfg.clone();
        let mut g = self.graph(Mode::Eval, 0);
        let e = g.input(g_enc.clone());
        seq2seq::greedy_decode(&mut g, &cfg.seq2seq, e, max_len)
    }

    /// Per-frame speech probabilities from the encoded sequence.
    pub fn vsd_probs(&mut self, g_enc: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = self.graph(Mode::Eval, 0);
        let e = g.input(g_enc.clone());
        let probs = crate::vsd::vsd_forward(&mut g, e)?;
        Ok(g.tape.value(probs).data().iter().map(|v| v.as_f64()).collect())
    }

    // ── persistence ─────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors: Vec<(String, Tensor<f32>)> = (0..self.store.len())
            .map(|i| (self.store.name(i).to_string(), self.store.value(i).cast::<f32>()))
            .collect();
        let config_json = serde_json::to_string(&self.cfg).expect("config serializes");
        Checkpoint::new(tensors, config_json).expect("unique names")
    }

    /// Rebuild from the embedded config and verify every tensor's dims
    /// against the shapes that config implies.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::format(0, format!("bad config blob: {e}")))?;
        let mut pipe = Pipeline::new(cfg, 0)?;
        pipe.load_params(ckpt)?;
        Ok(pipe)
    }

    /// Copy all tensors from a checkpoint into this pipeline (names and
    /// dims must match the configured shapes exactly).
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.store.len() {
            return Err(Error::format(
                0,
                format!(
                    "checkpoint has {} tensors, config implies {}",
                    ckpt.tensors.len(),
                    self.store.len()
                ),
            ));
        }
        for (name, t) in &ckpt.tensors {
            let idx = self
                .store
                .lookup(name)
                .ok_or_else(|| Error::format(0, format!("unexpected tensor {name:?}")))?;
            if self.store.value(idx).dims() != t.dims() {
                return Err(Error::format(
                    0,
                    format!(
                        "tensor {name:?} dims {:?} do not match config dims {:?}",
                        t.dims(),
                        self.store.value(idx).dims()
                    ),
                ));
            }
            self.store.set_value(idx, t.cast::<S>());
        }
        Ok(())
    }
}

/// Depth of the backbone stack the configured pooling needs.
pub fn backbone_blocks(cfg: &PipelineConfig) -> usize {
    match &cfg.pooling {
        PoolingConfig::Vtp(_) => cfg.backbone.tap.block_count(),
        PoolingConfig::Gap => cfg.backbone.block_widths.len(),
    }
}

/// Backbone plus pooling on an existing graph: `([T, d], attention masks)`.
pub fn frontend<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &PipelineConfig,
    clip: Var,
) -> Result<(Var, Option<Var>)> {
    let features = backbone::backbone_forward(g, &cfg.backbone, clip, backbone_blocks(cfg))?;
    match &cfg.pooling {
        PoolingConfig::Vtp(v) => {
            let (pooled, attn) = vtp::vtp_forward(g, v, features)?;
            Ok((pooled, Some(attn)))
        }
        PoolingConfig::Gap => Ok((vtp::gap_forward(g, features)?, None)),
    }
}

/// Frontend plus encoder on an existing graph.
pub fn encode_clip_graph<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &PipelineConfig,
    clip: Var,
) -> Result<Var> {
    let (pooled, _) = frontend(g, cfg, clip)?;
    seq2seq::encode(g, &cfg.seq2seq, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{EOS_ID, SOS_ID};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk(16);
        cfg.seq2seq.dropout = 0.0;
        cfg
    }

    fn random_clip(t: usize, hw: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(Tensor::from_fn(&[t, hw, hw, 3], |_| rng.gen_range(0.0..1.0f32))).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_every_tensor() {
        let pipe = Pipeline::<f32>::new(small_cfg(), 42).unwrap();
        let ckpt = pipe.to_checkpoint();
        let back = Pipeline::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.store.len(), pipe.store.len());
        for i in 0..pipe.store.len() {
            assert_eq!(pipe.store.name(i), back.store.name(i));
            let a = pipe.store.value(i);
            let b = back.store.value(i);
            assert_eq!(a.dims(), b.dims());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_checkpoint_dims_are_rejected() {
        let pipe = Pipeline::<f32>::new(small_cfg(), 1).unwrap();
        let mut ckpt = pipe.to_checkpoint();
        ckpt.tensors[3].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            Pipeline::<f32>::from_checkpoint(&ckpt),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn full_forward_and_scoring_runs() {
        let mut pipe = Pipeline::<f32>::new(small_cfg(), 7).unwrap();
        let clip = random_clip(6, 32, 3);
        let (pooled, attn) = pipe.pooled_sequence(&clip).unwrap();
        assert_eq!(pooled.dims(), &[6, 64]);
        let attn = attn.unwrap();
        assert_eq!(attn.dims(), &[6, 64]);
        let g_enc = pipe.encode_pooled(&pooled).unwrap();
        assert_eq!(g_enc.dims(), &[6, 64]);
        assert!(g_enc.all_finite());
        let lp = pipe
            .step_logprobs(&g_enc, &TokenSequence::new(vec![SOS_ID]))
            .unwrap();
        assert_eq!(lp.len(), 16);
        let nll = pipe
            .nll(&g_enc, &TokenSequence::new(vec![SOS_ID, 5, EOS_ID]))
            .unwrap();
        assert!(nll.is_finite() && nll > 0.0);
    }

    #[test]
    fn same_seed_builds_identical_pipelines() {
        let a = Pipeline::<f32>::new(small_cfg(), 9).unwrap();
        let b = Pipeline::<f32>::new(small_cfg(), 9).unwrap();
        for i in 0..a.store.len() {
            assert!(a
                .store
                .value(i)
                .data()
                .iter()
                .zip(b.store.value(i).data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
