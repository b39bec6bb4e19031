//! Deterministic synthetic "visual language" benchmark.
//!
//! Sentences are sampled from a bigram grammar and rendered as video
//! clips: each word animates a procedural glyph (a spinning, pulsing
//! radial shape) that drifts slowly over a textured background with a
//! static distractor ring. Homopheme word pairs share a glyph spec, so
//! their renderings are pixel-identical and only language context can
//! tell them apart.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, ManifestEntry};
use crate::tensor::Tensor;
use crate::video::VideoClip;

/// Procedural glyph: a radial shape `r(theta, tau)` with `harmonics`
/// lobes, spinning and pulsing over the word's duration `tau in [0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub harmonics: usize,
    pub spin: f64,
    pub pulse_freq: f64,
    pub pulse_amp: f64,
    pub base_radius: f64,
    pub lobe_amp: f64,
    pub tint: [f32; 3],
    pub phase: f64,
}

/// Word vocabulary, bigram transition table, homopheme pairing, and
/// rendering geometry.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub words: Vec<String>,
    pub glyphs: Vec<GlyphSpec>,
    pub homopheme_pairs: Vec<(usize, usize)>,
    pub transitions: Vec<Vec<f64>>,
    pub start_probs: Vec<f64>,
    pub min_words: usize,
    pub max_words: usize,
    pub frames_per_word: usize,
    pub frame_hw: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GrammarPreset {
    /// No homopheme pairs (every word renders uniquely).
    Plain,
    /// Mild homopheme share, used for the main learnability runs.
    Default,
    /// Pair words dominate; rescoring has to resolve them.
    Homopheme,
}

impl GrammarPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "plain" => Ok(GrammarPreset::Plain),
            "default" => Ok(GrammarPreset::Default),
            "homopheme" => Ok(GrammarPreset::Homopheme),
            other => Err(Error::config(format!("unknown grammar preset {other:?}"))),
        }
    }
}

const WORDS: [&str; 24] = [
    "pa", "ba", "ko", "go", "ti", "di", "mu", "nu", "re", "si", "lo", "ve", "za", "ki", "on",
    "ur", "fa", "el", "do", "sha", "mi", "tu", "wen", "ras",
];
const PAIRS: [(usize, usize); 4] = [(0, 1), (2, 3), (4, 5), (6, 7)];

/// Spatial jitter of the glyph: initial offset plus a slow random walk,
/// both clamped to `max_offset` pixels per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub max_offset: f64,
    pub drift_step: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams { max_offset: 7.0, drift_step: 0.7 }
    }
}

pub fn grammar(preset: GrammarPreset) -> Grammar {
    let words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    let n = words.len();
    let pairs: Vec<(usize, usize)> =
        if preset == GrammarPreset::Plain { Vec::new() } else { PAIRS.to_vec() };

    // glyph specs; pair members copy the first member's spec
    let mut rng = ChaCha8Rng::seed_from_u64(0x517c_a11);
    let mut glyphs: Vec<GlyphSpec> = Vec::with_capacity(n);
    for i in 0..n {
        glyphs.push(GlyphSpec {
            harmonics: 3 + (i % 6),
            spin: rng.gen_range(0.6..1.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            pulse_freq: rng.gen_range(1.0..3.0),
            pulse_amp: rng.gen_range(0.15..0.35),
            base_radius: rng.gen_range(6.5..8.5),
            lobe_amp: rng.gen_range(0.25..0.45),
            tint: [
                rng.gen_range(0.75..1.0),
                rng.gen_range(0.75..1.0),
                rng.gen_range(0.75..1.0),
            ],
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        });
    }
    for &(a, b) in &pairs {
        glyphs[b] = glyphs[a].clone();
    }

    // bigram table: ~6 successors per word; a pair's two members never
    // share a predecessor, so the preceding word disambiguates them
    let mut table_rng = ChaCha8Rng::seed_from_u64(match preset {
        GrammarPreset::Homopheme => 0xb16_9a2,
        _ => 0xde_fa17,
    });
    let twin = |w: usize| -> Option<usize> {
        pairs.iter().find_map(|&(a, b)| {
            if a == w {
                Some(b)
            } else if b == w {
                Some(a)
            } else {
                None
            }
        })
    };
    let is_pair_word = |w: usize| twin(w).is_some();
    let pair_weight = match preset {
        GrammarPreset::Homopheme => 4.0,
        _ => 0.6,
    };
    let mut transitions = vec![vec![0.0f64; n]; n];
    for (u, row) in transitions.iter_mut().enumerate() {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < 6 {
            let c = table_rng.gen_range(0..n);
            if c == u || chosen.contains(&c) {
                continue;
            }
            if let Some(t) = twin(c) {
                if chosen.contains(&t) {
                    continue;
                }
            }
            chosen.push(c);
        }
        for &c in &chosen {
            let w = table_rng.gen_range(0.5..1.5)
                * if is_pair_word(c) { pair_weight } else { 1.0 };
            row[c] = w;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    // starts exclude pair words so every pair occurrence has a left context
    let mut start_probs = vec![0.0f64; n];
    let n_starts = n - 2 * pairs.len();
    for (w, p) in start_probs.iter_mut().enumerate() {
        if !is_pair_word(w) {
            *p = 1.0 / n_starts as f64;
        }
    }

    Grammar {
        words,
        glyphs,
        homopheme_pairs: pairs,
        transitions,
        start_probs,
        min_words: 3,
        max_words: 8,
        // six frames per word keeps the stem's 5-frame receptive field
        // inside one word while shortening clips
        frames_per_word: 6,
        frame_hw: 40,
    }
}

impl Grammar {
    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.words.iter().position(|x| x == w)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transitions.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::data(format!("transition row {i} sums to {s}")));
            }
        }
        for &(a, b) in &self.homopheme_pairs {
            if a == b || self.glyphs[a] != self.glyphs[b] {
                return Err(Error::data("homopheme pair must be distinct words with one glyph"));
            }
        }
        Ok(())
    }

    fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let x: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if x < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Sample one sentence (word ids) from the bigram chain.
    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let mut out = Vec::with_capacity(len);
        out.push(Self::sample_index(&self.start_probs, rng));
        while out.len() < len {
            let prev = *out.last().unwrap();
            out.push(Self::sample_index(&self.transitions[prev], rng));
        }
        out
    }

    pub fn sentence_text(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.words[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_DRIFT: u64 = 1;
const TAG_SCENE: u64 = 2;
const TAG_SENTENCE: u64 = 3;
const TAG_SEGMENTS: u64 = 4;

/// The seeded random-walk trajectory of the glyph center offset,
/// recomputable independently of rendering.
pub fn drift_path(clip_seed: u64, frames: usize, jitter: &JitterParams) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, TAG_DRIFT));
    let mut path = Vec::with_capacity(frames);
    if jitter.max_offset <= 0.0 {
        path.resize(frames, (0.0, 0.0));
        return path;
    }
    let mut y = rng.gen_range(-jitter.max_offset..=jitter.max_offset);
    let mut x = rng.gen_range(-jitter.max_offset..=jitter.max_offset);
    for _ in 0..frames {
        path.push((y, x));
        y = (y + rng.gen_range(-jitter.drift_step..=jitter.drift_step))
            .clamp(-jitter.max_offset, jitter.max_offset);
        x = (x + rng.gen_range(-jitter.drift_step..=jitter.drift_step))
            .clamp(-jitter.max_offset, jitter.max_offset);
    }
    path
}

struct Scene {
    bg_phase: [f64; 3],
    bg_freq: (f64, f64),
    distractor: (f64, f64),
    distractor_radius: f64,
}

fn scene_params(clip_seed: u64, hw: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, TAG_SCENE));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dist = rng.gen_range(0.70..0.86) * hw as f64 / 2.0;
    let c = (hw as f64 - 1.0) / 2.0;
    Scene {
        bg_phase: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
        bg_freq: (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)),
        distractor: (c + dist * angle.sin(), c + dist * angle.cos()),
        distractor_radius: rng.gen_range(3.0..4.5),
    }
}

/// What one temporal segment of a clip shows.
#[derive(Clone, Debug)]
pub enum Segment {
    /// Word glyphs animating, one word per `frames_per_word` span.
    Speak { word_ids: Vec<usize>, dim: bool },
    /// Frozen glyph, no articulation.
    Still { word_id: usize, frames: usize },
    /// Frozen glyph shaken sinusoidally (laughter-like, not speech).
    Oscillate { word_id: usize, frames: usize },
}

impl Segment {
    fn frames(&self, fpw: usize) -> usize {
        match self {
            Segment::Speak { word_ids, .. } => word_ids.len() * fpw,
            Segment::Still { frames, .. } | Segment::Oscillate { frames, .. } => *frames,
        }
    }

    fn label(&self) -> u8 {
        matches!(self, Segment::Speak { .. }) as u8
    }
}

fn render_segments(
    segments: &[Segment],
    grammar: &Grammar,
    clip_seed: u64,
    jitter: &JitterParams,
) -> (VideoClip, Vec<u8>) {
    let hw = grammar.frame_hw;
    let fpw = grammar.frames_per_word;
    let total: usize = segments.iter().map(|s| s.frames(fpw)).sum();
    let scene = scene_params(clip_seed, hw);
    let drift = drift_path(clip_seed, total, jitter);
    let center = (hw as f64 - 1.0) / 2.0;

    let mut frames = vec![0.0f32; total * hw * hw * 3];
    let mut labels = Vec::with_capacity(total);
    let mut t = 0usize;
    for seg in segments {
        let seg_frames = seg.frames(fpw);
        for k in 0..seg_frames {
            labels.push(seg.label());
            let (word, tau, dim, wobble) = match seg {
                Segment::Speak { word_ids, dim } => {
                    (word_ids[k / fpw], (k % fpw) as f64 / fpw as f64, *dim, 0.0)
                }
                Segment::Still { word_id, .. } => (*word_id, 0.0, false, 0.0),
                Segment::Oscillate { word_id, frames } => {
                    let ph = k as f64 / (*frames).max(1) as f64;
                    (*word_id, 0.0, false, (ph * std::f64::consts::TAU * 3.0).sin() * 2.5)
                }
            };
            let spec = &grammar.glyphs[word];
            let (dy, dx) = drift[t];
            let gy = center + dy;
            let gx = center + dx + wobble;
            let frame = &mut frames[t * hw * hw * 3..(t + 1) * hw * hw * 3];
            render_frame(frame, hw, &scene, spec, tau, gy, gx, dim);
            t += 1;
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![total, hw, hw, 3], frames).expect("render shape"))
        .expect("rendered values in range");
    (clip, labels)
}

#[allow(clippy::too_many_arguments)]
fn render_frame(
    frame: &mut [f32],
    hw: usize,
    scene: &Scene,
    spec: &GlyphSpec,
    tau: f64,
    gy: f64,
    gx: f64,
    dim: bool,
) {
    let pulse = 1.0 + spec.pulse_amp * (std::f64::consts::TAU * spec.pulse_freq * tau).sin();
    let spin = std::f64::consts::TAU * spec.spin * tau + spec.phase;
    let tint_scale = if dim { 0.72 } else { 1.0 };
    for y in 0..hw {
        for x in 0..hw {
            let px = (y * hw + x) * 3;
            // smooth static background texture
            for c in 0..3 {
                let v = 0.25
                    + 0.08
                        * ((y as f64 * scene.bg_freq.0
                            + x as f64 * scene.bg_freq.1
                            + scene.bg_phase[c])
                            .sin());
                frame[px + c] = v as f32;
            }
            // static distractor ring
            let ddy = y as f64 - scene.distractor.0;
            let ddx = x as f64 - scene.distractor.1;
            let dr = (ddy * ddy + ddx * ddx).sqrt();
            let ring = 1.0 - ((dr - scene.distractor_radius).abs() / 1.2).min(1.0);
            if ring > 0.0 {
                for c in 0..3 {
                    let v = frame[px + c] as f64;
                    frame[px + c] = (v + (0.62 - v) * ring) as f32;
                }
            }
            // glyph: inside iff distance < r(theta, tau)
            let dy = y as f64 - gy;
            let dx = x as f64 - gx;
            let r = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let boundary = spec.base_radius
                * pulse
                * (1.0 + spec.lobe_amp * (spec.harmonics as f64 * theta - spin).cos());
            let alpha = ((boundary - r) / 1.0).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for c in 0..3 {
                    let target = spec.tint[c] as f64 * tint_scale;
                    let v = frame[px + c] as f64;
                    frame[px + c] = (v + (target - v) * alpha) as f32;
                }
            }
        }
    }
    for v in frame.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Render one spoken sentence (used for lip-reading corpora).
pub fn render_clip(
    word_ids: &[usize],
    grammar: &Grammar,
    clip_seed: u64,
    jitter: &JitterParams,
) -> Result<VideoClip> {
    if word_ids.is_empty() {
        return Err(Error::usage("render_clip needs at least one word"));
    }
    if let Some(&bad) = word_ids.iter().find(|&&w| w >= grammar.words.len()) {
        return Err(Error::data(format!("word id {bad} outside the vocabulary")));
    }
    let (clip, _) =
        render_segments(&[Segment::Speak { word_ids: word_ids.to_vec(), dim: false }], grammar, clip_seed, jitter);
    Ok(clip)
}

/// Sampled, rendered lip-reading corpus; returns the manifest entries that
/// were also written to `<out_dir>/manifest.tsv`.
pub fn generate_corpus(
    grammar: &Grammar,
    n_clips: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    grammar.validate()?;
    std::fs::create_dir_all(out_dir.join("clips"))?;
    let jitter = JitterParams::default();
    let mut entries = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip_seed = derive_seed(seed, i as u64);
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, TAG_SENTENCE));
        let words = grammar.sample_sentence(&mut srng);
        let clip = render_clip(&words, grammar, clip_seed, &jitter)?;
        let rel = format!("clips/clip_{i:05}.vtpc");
        io::write_clip(&out_dir.join(&rel), clip.frames())?;
        let fpw = grammar.frames_per_word;
        let boundaries: Vec<(usize, usize)> =
            (0..words.len()).map(|j| (j * fpw, (j + 1) * fpw - 1)).collect();
        entries.push(ManifestEntry {
            clip_path: rel,
            transcript: grammar.sentence_text(&words),
            word_boundaries: boundaries,
            vsd_labels_path: None,
        });
    }
    io::write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}

/// Text-only sample from the same grammar (LM and tokenizer training).
pub fn generate_text(grammar: &Grammar, n_sentences: usize, seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, i as u64), TAG_SENTENCE));
        let words = grammar.sample_sentence(&mut rng);
        out.push(grammar.sentence_text(&words));
    }
    out
}

/// Speech-detection corpus: clips interleave speaking segments with still
/// or oscillating (non-speech motion) segments; labels are frame-exact.
/// Speaking segments are randomly rendered dim ("inaudible") or bright,
/// both labelled positive.
pub fn generate_vsd_corpus(
    grammar: &Grammar,
    n_clips: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    grammar.validate()?;
    std::fs::create_dir_all(out_dir.join("clips"))?;
    std::fs::create_dir_all(out_dir.join("labels"))?;
    let jitter = JitterParams::default();
    let fpw = grammar.frames_per_word;
    let mut entries = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip_seed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, TAG_SEGMENTS));
        let n_segments = rng.gen_range(2..=4);
        let speak_slot = rng.gen_range(0..n_segments);
        let mut segments = Vec::with_capacity(n_segments);
        let mut spoken: Vec<(usize, usize, usize)> = Vec::new(); // (word, start, end)
        let mut frame = 0usize;
        for s in 0..n_segments {
            let speak = s == speak_slot || rng.gen_bool(0.45);
            if speak {
                let n_words = rng.gen_range(1..=3);
                let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, 100 + s as u64));
                let mut words = grammar.sample_sentence(&mut srng);
                words.truncate(n_words);
                for (j, &w) in words.iter().enumerate() {
                    spoken.push((w, frame + j * fpw, frame + (j + 1) * fpw - 1));
                }
                frame += words.len() * fpw;
                segments.push(Segment::Speak { word_ids: words, dim: rng.gen_bool(0.3) });
            } else {
                let frames = rng.gen_range(6..=14);
                let word_id = rng.gen_range(0..grammar.words.len());
                frame += frames;
                segments.push(if rng.gen_bool(0.5) {
                    Segment::Still { word_id, frames }
                } else {
                    Segment::Oscillate { word_id, frames }
                });
            }
        }
        let (clip, labels) = render_segments(&segments, grammar, clip_seed, &jitter);
        let rel = format!("clips/vsd_{i:05}.vtpc");
        let rel_labels = format!("labels/vsd_{i:05}.txt");
        io::write_clip(&out_dir.join(&rel), clip.frames())?;
        io::write_vsd_labels(&out_dir.join(&rel_labels), &labels)?;
        let transcript =
            spoken.iter().map(|&(w, _, _)| grammar.words[w].as_str()).collect::<Vec<_>>().join(" ");
        entries.push(ManifestEntry {
            clip_path: rel,
            transcript,
            word_boundaries: spoken.iter().map(|&(_, s, e)| (s, e)).collect(),
            vsd_labels_path: Some(rel_labels),
        });
    }
    io::write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_share_vocabulary() {
        for preset in [GrammarPreset::Plain, GrammarPreset::Default, GrammarPreset::Homopheme] {
            grammar(preset).validate().unwrap();
        }
        assert_eq!(grammar(GrammarPreset::Default).words, grammar(GrammarPreset::Homopheme).words);
        assert_eq!(
            grammar(GrammarPreset::Default).glyphs,
            grammar(GrammarPreset::Homopheme).glyphs
        );
        assert!(grammar(GrammarPreset::Plain).homopheme_pairs.is_empty());
    }

    #[test]
    fn pair_members_never_share_a_predecessor() {
        for g in [grammar(GrammarPreset::Default), grammar(GrammarPreset::Homopheme)] {
            for &(a, b) in &g.homopheme_pairs {
                for row in &g.transitions {
                    assert!(!(row[a] > 0.0 && row[b] > 0.0));
                }
                assert_eq!(g.start_probs[a], 0.0);
                assert_eq!(g.start_probs[b], 0.0);
            }
        }
    }

    #[test]
    fn homopheme_pair_renders_pixel_identically() {
        let g = grammar(GrammarPreset::Default);
        let (a, b) = g.homopheme_pairs[0];
        let ca = render_clip(&[a], &g, 99, &JitterParams::default()).unwrap();
        let cb = render_clip(&[b], &g, 99, &JitterParams::default()).unwrap();
        assert_eq!(ca.frames().data(), cb.frames().data());
        // a non-paired word renders differently
        let cc = render_clip(&[8], &g, 99, &JitterParams::default()).unwrap();
        assert_ne!(ca.frames().data(), cc.frames().data());
    }

    #[test]
    fn zero_jitter_centers_the_glyph() {
        let g = grammar(GrammarPreset::Plain);
        let jit = JitterParams { max_offset: 0.0, drift_step: 0.0 };
        let clip = render_clip(&[10], &g, 5, &jit).unwrap();
        // glyph mass (brightest region) is centered: compare the two
        // halves' brightness along both axes on the first frame
        let hw = g.frame_hw;
        let frame = &clip.frames().data()[..hw * hw * 3];
        let col_mass = |x: usize| -> f32 { (0..hw).map(|y| frame[(y * hw + x) * 3]).sum() };
        let left: f32 = (0..hw / 2).map(col_mass).sum();
        let right: f32 = (hw / 2..hw).map(col_mass).sum();
        // background is not symmetric, so allow a loose balance check
        assert!((left - right).abs() / (left + right) < 0.2, "{left} vs {right}");
        let path = drift_path(5, clip.t(), &jit);
        assert!(path.iter().all(|&(y, x)| y == 0.0 && x == 0.0));
    }

    #[test]
    fn drift_replays_from_the_seed() {
        let jit = JitterParams::default();
        let a = drift_path(1234, 40, &jit);
        let b = drift_path(1234, 40, &jit);
        assert_eq!(a, b);
        let c = drift_path(1235, 40, &jit);
        assert_ne!(a, c);
        for &(y, x) in &a {
            assert!(y.abs() <= jit.max_offset && x.abs() <= jit.max_offset);
        }
    }

    #[test]
    fn rendered_clips_stay_inside_unit_range() {
        let g = grammar(GrammarPreset::Default);
        let clip = render_clip(&[0, 9, 12], &g, 7, &JitterParams::default()).unwrap();
        assert_eq!(clip.t(), 3 * g.frames_per_word);
        assert!(clip.frames().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let g = grammar(GrammarPreset::Default);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let e1 = generate_corpus(&g, 3, 11, d1.path()).unwrap();
        let e2 = generate_corpus(&g, 3, 11, d2.path()).unwrap();
        assert_eq!(e1, e2);
        for e in &e1 {
            let b1 = std::fs::read(d1.path().join(&e.clip_path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&e.clip_path)).unwrap();
            assert_eq!(b1, b2);
        }
        assert_eq!(
            std::fs::read(d1.path().join("manifest.tsv")).unwrap(),
            std::fs::read(d2.path().join("manifest.tsv")).unwrap()
        );
    }

    #[test]
    fn empty_corpus_writes_only_an_empty_manifest() {
        let g = grammar(GrammarPreset::Default);
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_corpus(&g, 0, 1, dir.path()).unwrap();
        assert!(entries.is_empty());
        assert_eq!(std::fs::read(dir.path().join("manifest.tsv")).unwrap(), b"");
        assert_eq!(std::fs::read_dir(dir.path().join("clips")).unwrap().count(), 0);
    }

    #[test]
    fn boundaries_cover_each_word_span() {
        let g = grammar(GrammarPreset::Default);
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_corpus(&g, 5, 3, dir.path()).unwrap();
        for e in &entries {
            let words = e.transcript.split_whitespace().count();
            assert_eq!(e.word_boundaries.len(), words);
            for (j, &(s, t)) in e.word_boundaries.iter().enumerate() {
                assert_eq!(s, j * g.frames_per_word);
                assert_eq!(t, (j + 1) * g.frames_per_word - 1);
            }
            let clip = io::read_clip(&dir.path().join(&e.clip_path)).unwrap();
            assert_eq!(clip.dim(0), words * g.frames_per_word);
        }
    }

    #[test]
    fn vsd_labels_align_with_segments() {
        let g = grammar(GrammarPreset::Default);
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_vsd_corpus(&g, 6, 17, dir.path()).unwrap();
        for e in &entries {
            let labels =
                io::read_vsd_labels(&dir.path().join(e.vsd_labels_path.as_ref().unwrap()))
                    .unwrap();
            let clip = io::read_clip(&dir.path().join(&e.clip_path)).unwrap();
            assert_eq!(labels.len(), clip.dim(0));
            assert!(labels.iter().any(|&l| l == 1), "at least one speaking frame");
            // every spoken word's span carries label 1
            for &(s, t) in &e.word_boundaries {
                assert!(labels[s..=t].iter().all(|&l| l == 1));
            }
        }
        // same seed reproduces identical labels
        let dir2 = tempfile::tempdir().unwrap();
        let entries2 = generate_vsd_corpus(&g, 6, 17, dir2.path()).unwrap();
        for (a, b) in entries.iter().zip(entries2.iter()) {
            let la = io::read_vsd_labels(&dir.path().join(a.vsd_labels_path.as_ref().unwrap()))
                .unwrap();
            let lb = io::read_vsd_labels(&dir2.path().join(b.vsd_labels_path.as_ref().unwrap()))
                .unwrap();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn all_speaking_vsd_clip_labels_are_all_one() {
        let g = grammar(GrammarPreset::Default);
        let (clip, labels) = render_segments(
            &[Segment::Speak { word_ids: vec![3, 9], dim: false }],
            &g,
            55,
            &JitterParams::default(),
        );
        assert_eq!(labels.len(), clip.t());
        assert!(labels.iter().all(|&l| l == 1));
        // dim (inaudible-analog) speech is also positive
        let (_, labels_dim) = render_segments(
            &[Segment::Speak { word_ids: vec![3, 9], dim: true }],
            &g,
            55,
            &JitterParams::default(),
        );
        assert!(labels_dim.iter().all(|&l| l == 1));
    }
}
