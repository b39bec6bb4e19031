//! Two-stage training: end-to-end on 2-word crops, then encoder-decoder
//! only on all word n-grams over frozen, pre-extracted features.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AugmentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{self, ManifestEntry};
use crate::model::{self, Pipeline};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::seq2seq;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::video::{augment_train, eval_transform, VideoClip};
use crate::vsd;

// ── schedules ───────────────────────────────────────────────────────

/// Warmup-then-decay learning rate:
/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::usage("schedule step starts at 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Plateau { best: f64::INFINITY, stale: 0, patience }
    }

    /// Returns true when the decay should fire (patience consecutive
    /// checks without a >=1% relative improvement).
    fn observe(&mut self, val: f64) -> bool {
        if val < self.best * 0.99 {
            self.best = val;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return true;
        }
        false
    }
}

// ── optimizer ───────────────────────────────────────────────────────

/// Adam with bias correction; skips frozen parameters.
pub struct Adam<S> {
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step(
        &mut self,
        store: &mut crate::nn::ParamStore<S>,
        grads: &[Option<Tensor<S>>],
        lr: f64,
    ) {
        self.t += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let eps = S::of_f64(self.epsilon);
        let lr_s = S::of_f64(lr);
        let c1 = S::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::of_f64(1.0 - self.beta2.powi(self.t as i32));
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !store.is_trainable(idx) {
                continue;
            }
            let dims = store.value(idx).dims().to_vec();
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(&dims));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(&dims));
            let mut theta = store.value(idx).clone();
            for ((t, mi), (vi, &gi)) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *t = *t - lr_s * mhat / (vhat.sqrt() + eps);
            }
            store.set_value(idx, theta);
        }
    }
}

// ── data ────────────────────────────────────────────────────────────

/// A manifest with its clips (and any frame labels) loaded into memory.
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub clips: Vec<VideoClip>,
    pub vsd_labels: Vec<Option<Vec<u8>>>,
}

pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let entries = io::parse_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut clips = Vec::with_capacity(entries.len());
    let mut vsd_labels = Vec::with_capacity(entries.len());
    for e in &entries {
        let clip = VideoClip::new(io::read_clip(&root.join(&e.clip_path))?)?;
        if let Some(&(_, last)) = e.word_boundaries.last() {
            if last >= clip.t() {
                return Err(Error::data(format!(
                    "{}: boundary {} outside clip of {} frames",
                    e.clip_path,
                    last,
                    clip.t()
                )));
            }
        }
        let labels = match &e.vsd_labels_path {
            Some(p) => {
                let l = io::read_vsd_labels(&root.join(p))?;
                if l.len() != clip.t() {
                    return Err(Error::data(format!(
                        "{}: {} labels for {} frames",
                        e.clip_path,
                        l.len(),
                        clip.t()
                    )));
                }
                Some(l)
            }
            None => None,
        };
        clips.push(clip);
        vsd_labels.push(labels);
    }
    Ok(Corpus { root, entries, clips, vsd_labels })
}

/// All contiguous word runs with length in `[min_len, max_len]`:
/// `(frame_span, word_span)` pairs, spans inclusive.
pub fn enumerate_ngrams(
    word_boundaries: &[(usize, usize)],
    min_len: usize,
    max_len: Option<usize>,
) -> Result<Vec<((usize, usize), (usize, usize))>> {
    for w in word_boundaries.windows(2) {
        if w[1].0 <= w[0].1 {
            return Err(Error::data(format!(
                "word boundaries unordered or overlapping: {:?} then {:?}",
                w[0], w[1]
            )));
        }
    }
    let n = word_boundaries.len();
    let cap = max_len.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let len = j - i + 1;
            if len < min_len {
                continue;
            }
            if len > cap {
                break;
            }
            out.push(((word_boundaries[i].0, word_boundaries[j].1), (i, j)));
        }
    }
    Ok(out)
}

// ── stats ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainStats {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_ms: u64,
}

/// CSV rows: step, split, loss, lr, wall_ms.
pub fn write_stats_csv(path: &Path, stats: &[TrainStats]) -> Result<()> {
    let mut body = String::from("step,split,loss,lr,wall_ms\n");
    for s in stats {
        body.push_str(&format!(
            "{},{},{:.6},{:.3e},{}\n",
            s.step, s.split, s.loss, s.learning_rate, s.wall_ms
        ));
    }
    io::write_atomic(path, body.as_bytes())
}

fn derive_seed(base: u64, tag: u64, k: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_EPOCH: u64 = 11;
const TAG_AUG: u64 = 12;
const TAG_DROPOUT: u64 = 13;

/// Deterministic epoch shuffle: sample order is a pure function of
/// (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EPOCH, epoch as u64));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

struct BatchCursor {
    n: usize,
    seed: u64,
    epoch: usize,
    pos: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    fn new(n: usize, seed: u64) -> Self {
        BatchCursor { n, seed, epoch: 0, pos: 0, order: epoch_order(n, seed, 0) }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.n {
                self.epoch += 1;
                self.order = epoch_order(self.n, self.seed, self.epoch);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

// ── stage 1 ─────────────────────────────────────────────────────────

struct CropSample {
    clip_idx: usize,
    frame_span: (usize, usize),
    target: crate::tokenizer::TokenSequence,
    tokens: usize,
}

fn two_word_samples(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    max_target: usize,
) -> Vec<CropSample> {
    let mut out = Vec::new();
    for (ci, e) in corpus.entries.iter().enumerate() {
        let words: Vec<&str> = e.transcript.split_whitespace().collect();
        for i in 0..words.len().saturating_sub(1) {
            let text = format!("{} {}", words[i], words[i + 1]);
            let target = tokenizer.encode(&text);
            if target.ids.len() > max_target {
                continue;
            }
            let tokens = target.ids.len() - 1;
            out.push(CropSample {
                clip_idx: ci,
                frame_span: (e.word_boundaries[i].0, e.word_boundaries[i + 1].1),
                target,
                tokens,
            });
        }
    }
    out
}

fn split_train_val(n_samples: usize, clip_of: &[usize], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if val_fraction <= 0.0 {
        return ((0..n_samples).collect(), Vec::new());
    }
    let every = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n_samples {
        if clip_of[i] % every == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() {
        // degenerate split on tiny corpora: train on everything
        return ((0..n_samples).collect(), Vec::new());
    }
    (train, val)
}

/// End-to-end training on all consecutive 2-word crops. Returns the stats
/// trace; the pipeline's parameters are updated in place and a checkpoint
/// is written to `ckpt_out` when given.
pub fn stage1_train<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    ckpt_out: Option<&Path>,
) -> Result<Vec<TrainStats>> {
    if corpus.entries.is_empty() {
        return Err(Error::data("empty manifest"));
    }
    let samples = two_word_samples(corpus, tokenizer, pipe.cfg.seq2seq.max_target_len);
    if samples.is_empty() {
        return Err(Error::data("no 2-word crops in the corpus"));
    }
    let clip_of: Vec<usize> = samples.iter().map(|s| s.clip_idx).collect();
    let (train_idx, val_idx) = split_train_val(samples.len(), &clip_of, cfg.val_fraction);

    let model_dim = pipe.cfg.seq2seq.model_dim;
    let mut adam = Adam::new(pipe.store.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut cursor = BatchCursor::new(train_idx.len(), cfg.seed);
    let mut plateau = Plateau::new(cfg.plateau_patience);
    let mut plateau_lr = noam_lr(cfg.noam_steps.max(1), model_dim, cfg.warmup_steps)?;
    let mut stats = Vec::new();
    let started = Instant::now();

    for step in 1..=cfg.max_steps {
        let lr = if step <= cfg.noam_steps {
            noam_lr(step, model_dim, cfg.warmup_steps)?
        } else {
            plateau_lr
        };
        let batch: Vec<usize> = cursor.next_batch(cfg.batch_clips).iter().map(|&i| train_idx[i]).collect();
        let (loss_tok, grads) = {
            let Pipeline { cfg: pcfg, store } = pipe;
            let mut g = crate::nn::Graph::new(
                store,
                Mode::Train,
                derive_seed(cfg.seed, TAG_DROPOUT, step as u64),
                pcfg.seq2seq.dropout,
            );
            let mut losses = Vec::with_capacity(batch.len());
            let mut tokens = 0usize;
            for (bi, &si) in batch.iter().enumerate() {
                let s = &samples[si];
                let crop = corpus.clips[s.clip_idx].crop_frames(s.frame_span.0, s.frame_span.1)?;
                let aug_seed = derive_seed(cfg.seed, TAG_AUG, (step * 1024 + bi) as u64);
                let view = augment_train(&crop, &cfg.augment, aug_seed)?;
                let clip_var = g.input(view.frames().cast::<S>());
                let enc = model::encode_clip_graph(&mut g, pcfg, clip_var)?;
                let nll = seq2seq::teacher_forced_nll(&mut g, &pcfg.seq2seq, enc, &s.target)?;
                losses.push(nll);
                tokens += s.tokens;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.tape.add(total, l)?;
            }
            let loss = g.tape.scale(total, S::one() / S::of_usize(batch.len()));
            let grads = g.grads(loss)?;
            g.apply_stat_updates();
            let loss_tok =
                g.tape.value(loss).item().as_f64() * batch.len() as f64 / tokens.max(1) as f64;
            (loss_tok, grads)
        };
        adam.step(&mut pipe.store, &grads, lr);

        if step % cfg.val_interval == 0 || step == cfg.max_steps {
            let wall = started.elapsed().as_millis() as u64;
            stats.push(TrainStats { step, split: "train", loss: loss_tok, learning_rate: lr, wall_ms: wall });
            let vloss = if val_idx.is_empty() {
                loss_tok
            } else {
                stage1_eval_loss(pipe, corpus, &samples, &val_idx, &cfg.augment)?
            };
            stats.push(TrainStats { step, split: "val", loss: vloss, learning_rate: lr, wall_ms: wall });
            if let Some(p) = ckpt_out {
                io::save_checkpoint(p, &pipe.to_checkpoint())?;
            }
            if step > cfg.noam_steps && plateau.observe(vloss) {
                let next = plateau_lr / cfg.plateau_factor;
                if next < cfg.min_lr {
                    break; // converged: decay would undershoot the floor
                }
                plateau_lr = next;
            }
        } else {
            stats.push(TrainStats {
                step,
                split: "train",
                loss: loss_tok,
                learning_rate: lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    if let Some(p) = ckpt_out {
        io::save_checkpoint(p, &pipe.to_checkpoint())?;
    }
    Ok(stats)
}

fn stage1_eval_loss<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    samples: &[CropSample],
    idx: &[usize],
    aug: &AugmentConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for &si in idx {
        let s = &samples[si];
        let crop = corpus.clips[s.clip_idx].crop_frames(s.frame_span.0, s.frame_span.1)?;
        let view = eval_transform(&crop, aug)?;
        let g_enc = pipe.encode_clip(&view)?;
        total += pipe.nll(&g_enc, &s.target)?;
        tokens += s.tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

// ── feature dump and stage 2 ────────────────────────────────────────

/// Pooled sequences per manifest clip, dumped at stage-1 convergence.
pub struct FeatureStore {
    pub features: Vec<Tensor<f32>>,
}

fn feature_file(entry: &ManifestEntry) -> String {
    let stem = Path::new(&entry.clip_path)
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "clip".to_string());
    format!("{stem}.vtpf")
}

/// Eval-mode pooled sequence per clip, written as one feature file per
/// clip under `out_dir` when given.
pub fn dump_features<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    aug: &AugmentConfig,
    out_dir: Option<&Path>,
) -> Result<FeatureStore> {
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut features = Vec::with_capacity(corpus.entries.len());
    for (e, clip) in corpus.entries.iter().zip(corpus.clips.iter()) {
        let view = eval_transform(clip, aug)?;
        let (pooled, _) = pipe.pooled_sequence(&view)?;
        let f32_t = pooled.cast::<f32>();
        if let Some(d) = out_dir {
            io::write_features(&d.join(feature_file(e)), &f32_t)?;
        }
        features.push(f32_t);
    }
    Ok(FeatureStore { features })
}

/// Load a dumped feature store back (one file per manifest clip).
pub fn load_features(corpus: &Corpus, dir: &Path) -> Result<FeatureStore> {
    let mut features = Vec::with_capacity(corpus.entries.len());
    for e in &corpus.entries {
        features.push(io::read_features(&dir.join(feature_file(e)))?);
    }
    Ok(FeatureStore { features })
}

struct NgramSample {
    clip_idx: usize,
    frame_span: (usize, usize),
    words: usize,
    target: crate::tokenizer::TokenSequence,
    tokens: usize,
}

/// Encoder-decoder training on all word n-grams sliced from dumped
/// features. The visual front-end is frozen (and absent from the graph).
pub fn stage2_train<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    features: &FeatureStore,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    ckpt_out: Option<&Path>,
) -> Result<Vec<TrainStats>> {
    if features.features.len() != corpus.entries.len() {
        return Err(Error::data(format!(
            "feature store has {} rows for {} clips",
            features.features.len(),
            corpus.entries.len()
        )));
    }
    pipe.store.freeze_prefix("backbone.");
    pipe.store.freeze_prefix("vtp.");
    pipe.store.freeze_prefix("gap.");

    let mut samples = Vec::new();
    for (ci, e) in corpus.entries.iter().enumerate() {
        let spans = enumerate_ngrams(&e.word_boundaries, cfg.ngram_min_len, cfg.ngram_max_len)?;
        let words: Vec<&str> = e.transcript.split_whitespace().collect();
        let feat_len = features.features[ci].dim(0);
        for (frame_span, word_span) in spans {
            if frame_span.1 >= feat_len {
                return Err(Error::data(format!(
                    "{}: n-gram frames {}..{} outside dumped features of length {}",
                    e.clip_path, frame_span.0, frame_span.1, feat_len
                )));
            }
            let text = words[word_span.0..=word_span.1].join(" ");
            let target = tokenizer.encode(&text);
            if target.ids.len() > pipe.cfg.seq2seq.max_target_len {
                continue;
            }
            let tokens = target.ids.len() - 1;
            samples.push(NgramSample { clip_idx: ci, frame_span, words: word_span.1 - word_span.0 + 1, target, tokens });
        }
    }
    if samples.is_empty() {
        return Err(Error::data("no n-gram samples"));
    }
    let clip_of: Vec<usize> = samples.iter().map(|s| s.clip_idx).collect();
    let (train_idx, val_idx) = split_train_val(samples.len(), &clip_of, cfg.val_fraction);

    // curriculum phases: 2-word, <=3-word, everything
    let phase_pools: Vec<Vec<usize>> = if cfg.stage2_curriculum {
        vec![
            train_idx.iter().copied().filter(|&i| samples[i].words == 2).collect(),
            train_idx.iter().copied().filter(|&i| samples[i].words <= 3).collect(),
            train_idx.clone(),
        ]
    } else {
        vec![train_idx.clone()]
    };
    let phase_len = cfg.stage2_steps.div_ceil(phase_pools.len());

    let mut adam = Adam::new(pipe.store.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut plateau = Plateau::new(cfg.plateau_patience);
    let mut lr = cfg.stage2_init_lr;
    let mut stats = Vec::new();
    let started = Instant::now();
    let mut cursor: Option<(usize, BatchCursor)> = None;

    for step in 1..=cfg.stage2_steps {
        let phase = ((step - 1) / phase_len).min(phase_pools.len() - 1);
        let pool = &phase_pools[phase];
        let pool_nonempty = if pool.is_empty() { &train_idx } else { pool };
        if cursor.as_ref().map(|(p, _)| *p) != Some(phase) {
            cursor = Some((
                phase,
                BatchCursor::new(pool_nonempty.len(), derive_seed(cfg.seed, 21, phase as u64)),
            ));
        }
        let batch: Vec<usize> = cursor
            .as_mut()
            .unwrap()
            .1
            .next_batch(cfg.batch_ngrams)
            .iter()
            .map(|&i| pool_nonempty[i])
            .collect();

        let (loss_tok, grads) = {
            let Pipeline { cfg: pcfg, store } = pipe;
            let mut g = crate::nn::Graph::new(
                store,
                Mode::Train,
                derive_seed(cfg.seed, TAG_DROPOUT, step as u64),
                pcfg.seq2seq.dropout,
            );
            let mut losses = Vec::with_capacity(batch.len());
            let mut tokens = 0usize;
            for &si in &batch {
                let s = &samples[si];
                let span = slice_rows_tensor(&features.features[s.clip_idx], s.frame_span);
                let feat_var = g.input(span.cast::<S>());
                let enc = seq2seq::encode(&mut g, &pcfg.seq2seq, feat_var)?;
                let nll = seq2seq::teacher_forced_nll(&mut g, &pcfg.seq2seq, enc, &s.target)?;
                losses.push(nll);
                tokens += s.tokens;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.tape.add(total, l)?;
            }
            let loss = g.tape.scale(total, S::one() / S::of_usize(batch.len()));
            let grads = g.grads(loss)?;
            let loss_tok =
                g.tape.value(loss).item().as_f64() * batch.len() as f64 / tokens.max(1) as f64;
            (loss_tok, grads)
        };
        // the frozen front-end never receives gradient
        debug_assert!(grads
            .iter()
            .enumerate()
            .all(|(i, g)| g.is_none() || pipe.store.is_trainable(i)
                || !pipe.store.name(i).starts_with("backbone.")));
        adam.step(&mut pipe.store, &grads, lr);

        if step % cfg.val_interval == 0 || step == cfg.stage2_steps {
            let wall = started.elapsed().as_millis() as u64;
            stats.push(TrainStats { step, split: "train", loss: loss_tok, learning_rate: lr, wall_ms: wall });
            let vloss = if val_idx.is_empty() {
                loss_tok
            } else {
                stage2_eval_loss(pipe, features, &samples, &val_idx)?
            };
            stats.push(TrainStats { step, split: "val", loss: vloss, learning_rate: lr, wall_ms: wall });
            if let Some(p) = ckpt_out {
                io::save_checkpoint(p, &pipe.to_checkpoint())?;
            }
            if plateau.observe(vloss) {
                let next = lr / cfg.plateau_factor;
                if next < cfg.min_lr {
                    break;
                }
                lr = next;
            }
        } else {
            stats.push(TrainStats {
                step,
                split: "train",
                loss: loss_tok,
                learning_rate: lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    if let Some(p) = ckpt_out {
        io::save_checkpoint(p, &pipe.to_checkpoint())?;
    }
    Ok(stats)
}

fn slice_rows_tensor(t: &Tensor<f32>, span: (usize, usize)) -> Tensor<f32> {
    let d = t.dim(1);
    let data = t.data()[span.0 * d..(span.1 + 1) * d].to_vec();
    Tensor::new(vec![span.1 - span.0 + 1, d], data).expect("feature slice")
}

/// Loss of a single n-gram span, computed exactly as stage 2 does.
pub fn stage2_span_loss<S: Scalar>(
    pipe: &mut Pipeline<S>,
    features: &FeatureStore,
    clip_idx: usize,
    frame_span: (usize, usize),
    target: &crate::tokenizer::TokenSequence,
) -> Result<f64> {
    let span = slice_rows_tensor(&features.features[clip_idx], frame_span);
    let g_enc = pipe.encode_pooled(&span.cast::<S>())?;
    pipe.nll(&g_enc, target)
}

fn stage2_eval_loss<S: Scalar>(
    pipe: &mut Pipeline<S>,
    features: &FeatureStore,
    samples: &[NgramSample],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for &si in idx {
        let s = &samples[si];
        total += stage2_span_loss(pipe, features, s.clip_idx, s.frame_span, &s.target)?;
        tokens += s.tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

// ── visual speech detection fine-tune ───────────────────────────────

#[derive(Clone, Debug)]
pub struct VsdTrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_clips: usize,
    pub augment: AugmentConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl VsdTrainConfig {
    pub fn desk(seed: u64) -> Self {
        VsdTrainConfig {
            seed,
            // published fine-tune rate is 1e-6; desk models are far
            // smaller, so the default is hotter
            lr: 1e-4,
            steps: 400,
            batch_clips: 2,
            augment: AugmentConfig {
                resize_to: 40,
                crop_to: 32,
                flip_prob: 0.5,
                max_rotation_deg: 10.0,
            },
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Fine-tune all layers (backbone, pooling, encoder, detection head) with
/// the per-frame binary cross-entropy.
pub fn vsd_finetune<S: Scalar>(
    pipe: &mut Pipeline<S>,
    corpus: &Corpus,
    cfg: &VsdTrainConfig,
    ckpt_out: Option<&Path>,
) -> Result<Vec<TrainStats>> {
    let labeled: Vec<usize> =
        (0..corpus.entries.len()).filter(|&i| corpus.vsd_labels[i].is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::data("no clips with speech labels"));
    }
    let mut adam = Adam::new(pipe.store.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut cursor = BatchCursor::new(labeled.len(), cfg.seed);
    let mut stats = Vec::new();
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let batch: Vec<usize> =
            cursor.next_batch(cfg.batch_clips).iter().map(|&i| labeled[i]).collect();
        let (loss_val, grads) = {
            let Pipeline { cfg: pcfg, store } = pipe;
            let mut g = crate::nn::Graph::new(
                store,
                Mode::Train,
                derive_seed(cfg.seed, TAG_DROPOUT, step as u64),
                pcfg.seq2seq.dropout,
            );
            let mut losses = Vec::with_capacity(batch.len());
            for (bi, &ci) in batch.iter().enumerate() {
                let aug_seed = derive_seed(cfg.seed, TAG_AUG, (step * 1024 + bi) as u64);
                let view = augment_train(&corpus.clips[ci], &cfg.augment, aug_seed)?;
                let labels = corpus.vsd_labels[ci].as_ref().unwrap();
                let clip_var = g.input(view.frames().cast::<S>());
                let enc = model::encode_clip_graph(&mut g, pcfg, clip_var)?;
                let probs = vsd::vsd_forward(&mut g, enc)?;
                losses.push(vsd::vsd_loss_graph(&mut g, probs, labels)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.tape.add(total, l)?;
            }
            let loss = g.tape.scale(total, S::one() / S::of_usize(batch.len()));
            let grads = g.grads(loss)?;
            g.apply_stat_updates();
            (g.tape.value(loss).item().as_f64(), grads)
        };
        adam.step(&mut pipe.store, &grads, cfg.lr);
        stats.push(TrainStats {
            step,
            split: "train",
            loss: loss_val,
            learning_rate: cfg.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    if let Some(p) = ckpt_out {
        io::save_checkpoint(p, &pipe.to_checkpoint())?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::synth::{self, GrammarPreset};
    use crate::tokenizer::{train_vocab, TokenizerKind};

    #[test]
    fn noam_peaks_at_warmup_and_is_monotone_each_side() {
        let w = 50;
        let d = 64;
        let peak = noam_lr(w, d, w).unwrap();
        let want = (d as f64).powf(-0.5) * (w as f64).powf(-0.5);
        assert!((peak - want).abs() < 1e-15);
        for s in 1..w {
            assert!(noam_lr(s, d, w).unwrap() < noam_lr(s + 1, d, w).unwrap());
        }
        for s in w..3 * w {
            assert!(noam_lr(s, d, w).unwrap() > noam_lr(s + 1, d, w).unwrap());
        }
        // closed form at the published operating point
        let lr = noam_lr(4000, 512, 4000).unwrap();
        assert!((lr - 6.9877e-4).abs() < 1e-7, "{lr}");
        // power-law decay: doubling the step scales by 1/sqrt(2)
        let a = noam_lr(2 * w, d, w).unwrap();
        assert!((a / peak - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noam_step_zero_is_usage_error() {
        assert!(matches!(noam_lr(0, 64, 100), Err(Error::Usage(_))));
    }

    #[test]
    fn ngram_counts_follow_the_closed_form() {
        for w in 1..=50usize {
            let bounds: Vec<(usize, usize)> = (0..w).map(|i| (i * 8, i * 8 + 7)).collect();
            let grams = enumerate_ngrams(&bounds, 2, None).unwrap();
            assert_eq!(grams.len(), w * (w - 1) / 2, "W={w}");
            // brute-force check of the span set
            let mut want = Vec::new();
            for i in 0..w {
                for j in i + 1..w {
                    want.push(((bounds[i].0, bounds[j].1), (i, j)));
                }
            }
            assert_eq!(grams, want);
        }
    }

    #[test]
    fn four_words_give_six_ngrams_two_give_one_one_gives_none() {
        let b4: Vec<(usize, usize)> = (0..4).map(|i| (i * 8, i * 8 + 7)).collect();
        assert_eq!(enumerate_ngrams(&b4, 2, None).unwrap().len(), 6);
        let b2: Vec<(usize, usize)> = (0..2).map(|i| (i * 8, i * 8 + 7)).collect();
        let two = enumerate_ngrams(&b2, 2, None).unwrap();
        assert_eq!(two, vec![((0, 15), (0, 1))]);
        let b1 = vec![(0, 7)];
        assert!(enumerate_ngrams(&b1, 2, None).unwrap().is_empty());
    }

    #[test]
    fn ngram_length_cap_applies() {
        let b: Vec<(usize, usize)> = (0..5).map(|i| (i * 8, i * 8 + 7)).collect();
        let grams = enumerate_ngrams(&b, 2, Some(3)).unwrap();
        assert!(grams.iter().all(|(_, (i, j))| j - i + 1 <= 3));
        assert_eq!(grams.len(), 4 + 3);
    }

    #[test]
    fn unordered_boundaries_are_a_data_error() {
        let b = vec![(8, 15), (0, 7)];
        assert!(matches!(enumerate_ngrams(&b, 2, None), Err(Error::Data(_))));
    }

    fn tiny_setup(dir: &Path) -> (Pipeline<f32>, Corpus, Tokenizer, TrainConfig) {
        let g = synth::grammar(GrammarPreset::Plain);
        synth::generate_corpus(&g, 4, 5, dir).unwrap();
        let corpus = load_corpus(&dir.join("manifest.tsv")).unwrap();
        let text = synth::generate_text(&g, 200, 6);
        let vocab = train_vocab(&text, 96).unwrap();
        let tokenizer = Tokenizer::new(vocab, TokenizerKind::WordPiece);
        let mut pcfg = PipelineConfig::desk(tokenizer.vocab.size());
        pcfg.seq2seq.dropout = 0.0;
        let pipe = Pipeline::new(pcfg, 1).unwrap();
        let mut tcfg = TrainConfig::desk(1);
        tcfg.max_steps = 40;
        tcfg.noam_steps = 40;
        tcfg.warmup_steps = 400;
        tcfg.val_interval = 20;
        tcfg.stage2_steps = 30;
        tcfg.val_fraction = 0.0;
        (pipe, corpus, tokenizer, tcfg)
    }

    #[test]
    fn stage1_is_deterministic_and_loss_decreases() {
        let dir = tempfile::tempdir().unwrap();
        let (pipe, corpus, tokenizer, tcfg) = tiny_setup(dir.path());
        let run = || {
            let mut p = Pipeline::<f32>::new(pipe.cfg.clone(), 1).unwrap();
            let stats = stage1_train(&mut p, &corpus, &tokenizer, &tcfg, None).unwrap();
            (p.to_checkpoint(), stats)
        };
        let (c1, s1) = run();
        let (c2, s2) = run();
        for ((n1, t1), (n2, t2)) in c1.tensors.iter().zip(c2.tensors.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        // learning happened
        let first = s1.first().unwrap().loss;
        let last = s1.iter().filter(|s| s.split == "train").last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
        // lr trace follows the schedule during warmup
        for s in s1.iter().filter(|s| s.split == "train") {
            let want = noam_lr(s.step, 64, tcfg.warmup_steps).unwrap();
            assert_eq!(s.learning_rate, want);
        }
    }

    #[test]
    fn dumped_features_match_fresh_forward_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (mut pipe, corpus, _tok, tcfg) = tiny_setup(dir.path());
        let fdir = dir.path().join("features");
        let store = dump_features(&mut pipe, &corpus, &tcfg.augment, Some(&fdir)).unwrap();
        assert_eq!(store.features.len(), corpus.entries.len());
        // recompute oracle
        let view = eval_transform(&corpus.clips[0], &tcfg.augment).unwrap();
        let (pooled, _) = pipe.pooled_sequence(&view).unwrap();
        assert_eq!(store.features[0].dims(), pooled.dims());
        for (a, b) in store.features[0].data().iter().zip(pooled.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // reload round trip
        let back = load_features(&corpus, &fdir).unwrap();
        for (a, b) in back.features.iter().zip(store.features.iter()) {
            assert_eq!(a.dims(), b.dims());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // dumping twice is byte-identical
        let fdir2 = dir.path().join("features2");
        dump_features(&mut pipe, &corpus, &tcfg.augment, Some(&fdir2)).unwrap();
        for e in &corpus.entries {
            let a = std::fs::read(fdir.join(feature_file(e))).unwrap();
            let b = std::fs::read(fdir2.join(feature_file(e))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stage2_freezes_the_front_end_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (mut pipe, corpus, tokenizer, tcfg) = tiny_setup(dir.path());
        let features = dump_features(&mut pipe, &corpus, &tcfg.augment, None).unwrap();
        let before: Vec<(String, Vec<u32>)> = (0..pipe.store.len())
            .filter(|&i| {
                pipe.store.name(i).starts_with("backbone.") || pipe.store.name(i).starts_with("vtp.")
            })
            .map(|i| {
                (
                    pipe.store.name(i).to_string(),
                    pipe.store.value(i).data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        stage2_train(&mut pipe, &corpus, &features, &tokenizer, &tcfg, None).unwrap();
        for (name, bits) in before {
            let idx = pipe.store.lookup(&name).unwrap();
            let now: Vec<u32> = pipe.store.value(idx).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, now, "{name} changed");
        }
    }

    #[test]
    fn stage2_span_loss_matches_teacher_forcing_on_slices() {
        let dir = tempfile::tempdir().unwrap();
        let (mut pipe, corpus, tokenizer, tcfg) = tiny_setup(dir.path());
        let features = dump_features(&mut pipe, &corpus, &tcfg.augment, None).unwrap();
        let e = &corpus.entries[0];
        let grams = enumerate_ngrams(&e.word_boundaries, 2, None).unwrap();
        let (frame_span, word_span) = grams[0];
        let words: Vec<&str> = e.transcript.split_whitespace().collect();
        let text = words[word_span.0..=word_span.1].join(" ");
        let target = tokenizer.encode(&text);
        let via_helper = stage2_span_loss(&mut pipe, &features, 0, frame_span, &target).unwrap();
        // oracle: slice, encode, teacher-forced NLL by hand
        let d = features.features[0].dim(1);
        let rows = features.features[0].data()
            [frame_span.0 * d..(frame_span.1 + 1) * d]
            .to_vec();
        let sliced =
            Tensor::new(vec![frame_span.1 - frame_span.0 + 1, d], rows).unwrap().cast::<f32>();
        let g_enc = pipe.encode_pooled(&sliced).unwrap();
        let direct = pipe.nll(&g_enc, &target).unwrap();
        assert_eq!(via_helper.to_bits(), direct.to_bits());
    }

    #[test]
    fn stats_csv_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_stats_csv(
            &p,
            &[TrainStats { step: 1, split: "train", loss: 1.5, learning_rate: 1e-3, wall_ms: 10 }],
        )
        .unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("step,split,loss,lr,wall_ms\n"));
        assert!(body.lines().nth(1).unwrap().starts_with("1,train,1.5"));
    }
}
