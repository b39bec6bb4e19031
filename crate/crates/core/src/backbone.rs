//! Spatio-temporal CNN: one 3-D stem convolution over 5-frame sub-clips,
//! then 2-D residual blocks applied frame-wise. Output keeps the input
//! frame count (unit temporal stride, replicate-padded edges).

use crate::config::{BackboneConfig, NormKind};
use crate::error::Result;
use crate::nn::{Graph, Init};
use crate::scalar::Scalar;
use crate::tape::{batch_stats, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Register stem + block parameters. `blocks` limits how deep the stack is
/// built (tap point for pooling, full stack for the GAP path).
pub fn init_backbone<S: Scalar>(init: &mut Init<S>, cfg: &BackboneConfig, blocks: usize) {
    init.conv("backbone.conv1", 5, 5, 5, 3, cfg.conv1_channels);
    register_norm(init, "backbone.conv1.norm", cfg, cfg.conv1_channels);
    let mut ci = cfg.conv1_channels;
    for (b, &width) in cfg.block_widths.iter().take(blocks).enumerate() {
        for j in 0..3 {
            let name = format!("backbone.b{b}.{j}");
            let in_ch = if j == 0 { ci } else { width };
            init.conv(&name, 1, 3, 3, in_ch, width);
            register_norm(init, &format!("{name}.norm"), cfg, width);
        }
        ci = width;
    }
}

fn register_norm<S: Scalar>(init: &mut Init<S>, name: &str, cfg: &BackboneConfig, c: usize) {
    match cfg.norm {
        NormKind::Channel => init.norm(name, c),
        NormKind::Batch => init.batch_norm(name, c),
    }
}

fn norm_layer<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    cfg: &BackboneConfig,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    match cfg.norm {
        NormKind::Channel => g.tape.channel_norm(x, gamma, beta, S::of_f64(BN_EPS)),
        NormKind::Batch => {
            let rm_idx = g
                .store()
                .lookup(&format!("{name}.rm"))
                .expect("running mean registered");
            let rv_idx = g
                .store()
                .lookup(&format!("{name}.rv"))
                .expect("running var registered");
            let rm = g.store().value(rm_idx).clone();
            let rv = g.store().value(rv_idx).clone();
            let training = g.mode == crate::nn::Mode::Train;
            if training {
                // fold the batch statistics into the running estimates
                let c = rm.dims()[0];
                let (bm, bv) = batch_stats(g.tape.value(x), c);
                let m = S::of_f64(BN_MOMENTUM);
                let one_m = S::one() - m;
                let new_rm = crate::tensor::Tensor::new(
                    vec![c],
                    rm.data()
                        .iter()
                        .zip(bm.data())
                        .map(|(&r, &b)| r * one_m + b * m)
                        .collect(),
                )?;
                let new_rv = crate::tensor::Tensor::new(
                    vec![c],
                    rv.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&r, &b)| r * one_m + b * m)
                        .collect(),
                )?;
                g.push_stat_update(rm_idx, new_rm);
                g.push_stat_update(rv_idx, new_rv);
            }
            g.tape.batch_norm(x, gamma, beta, rm, rv, S::of_f64(BN_EPS), training)
        }
    }
}

fn conv_norm_relu<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    cfg: &BackboneConfig,
    x: Var,
    stride: [usize; 3],
    pad: [usize; 3],
    shortcut: Option<Var>,
) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.tape.conv(x, w, b, stride, pad)?;
    let y = norm_layer(g, &format!("{name}.norm"), cfg, y)?;
    let y = match shortcut {
        Some(s) => g.tape.add(y, s)?,
        None => y,
    };
    Ok(g.tape.relu(y))
}

/// Run the stem plus the first `blocks` residual blocks on a
/// `[T, H, W, 3]` clip tensor, producing `[T, h, w, c]`.
pub fn backbone_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    clip: Var,
    blocks: usize,
) -> Result<Var> {
    let padded = g.tape.replicate_pad_t(clip, 2)?;
    let mut x = conv_norm_relu(g, "backbone.conv1", cfg, padded, [1, 2, 2], [0, 2, 2], None)?;
    for b in 0..blocks {
        // stride-2 entry has no shortcut, the two unit-stride layers do
        x = conv_norm_relu(g, &format!("backbone.b{b}.0"), cfg, x, [1, 2, 2], [0, 1, 1], None)?;
        for j in 1..3 {
            x = conv_norm_relu(
                g,
                &format!("backbone.b{b}.{j}"),
                cfg,
                x,
                [1, 1, 1],
                [0, 1, 1],
                Some(x),
            )?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PipelineConfig, TapPoint};
    use crate::nn::{Graph, Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build_store(cfg: &BackboneConfig, blocks: usize, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        init_backbone(&mut init, cfg, blocks);
        store
    }

    fn forward(cfg: &BackboneConfig, store: &mut ParamStore<f32>, clip: Tensor<f32>, blocks: usize) -> Tensor<f32> {
        let mut g = Graph::new(store, Mode::Eval, 0, 0.0);
        let c = g.input(clip);
        let y = backbone_forward(&mut g, cfg, c, blocks).unwrap();
        g.tape.value(y).clone()
    }

    #[test]
    fn paper_scale_extents_match_published_table() {
        // quarter tap: T x 24 x 24 x 128 from 96 x 96 input
        let cfg = PipelineConfig::paper_scale().backbone;
        let mut store = build_store(&cfg, 1, 1);
        let clip = Tensor::from_fn(&[2, 96, 96, 3], |i| (i % 7) as f32 / 7.0);
        let out = forward(&cfg, &mut store, clip, 1);
        assert_eq!(out.dims(), &[2, 24, 24, 128]);
    }

    #[test]
    fn paper_scale_sixteenth_is_6x6x512() {
        let mut cfg = PipelineConfig::paper_scale().backbone;
        cfg.tap = TapPoint::Sixteenth;
        let mut store = build_store(&cfg, 3, 1);
        let clip = Tensor::from_fn(&[1, 96, 96, 3], |i| (i % 5) as f32 / 5.0);
        let out = forward(&cfg, &mut store, clip, 3);
        assert_eq!(out.dims(), &[1, 6, 6, 512]);
    }

    #[test]
    fn desk_scale_tap_is_8x8x32() {
        let cfg = PipelineConfig::desk(64).backbone;
        let mut store = build_store(&cfg, 1, 2);
        let clip = Tensor::from_fn(&[3, 32, 32, 3], |i| (i % 11) as f32 / 11.0);
        let out = forward(&cfg, &mut store, clip, 1);
        // conv shape oracle: floor((n + 2p - k) / s) + 1 per axis
        let after_stem = (32 + 4 - 5) / 2 + 1; // 16
        let after_block = (after_stem + 2 - 3) / 2 + 1; // 8
        assert_eq!(out.dims(), &[3, after_block, after_block, 32]);
    }

    #[test]
    fn output_frames_match_input_frames() {
        let cfg = PipelineConfig::desk(64).backbone;
        let mut store = build_store(&cfg, 1, 3);
        for t in [1usize, 2, 5, 9] {
            let clip = Tensor::from_fn(&[t, 32, 32, 3], |i| ((i * 13) % 17) as f32 / 17.0);
            let out = forward(&cfg, &mut store, clip, 1);
            assert_eq!(out.dim(0), t, "T={t}");
        }
    }

    #[test]
    fn temporal_shift_equivariance_away_from_edges() {
        let cfg = PipelineConfig::desk(64).backbone;
        let mut store = build_store(&cfg, 1, 4);
        let t = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Tensor::from_fn(&[t, 32, 32, 3], |_| rng.gen_range(0.0..1.0f32));
        // shift by one frame: drop the first frame, duplicate the last
        let frame = 32 * 32 * 3;
        let mut shifted = base.data()[frame..].to_vec();
        shifted.extend_from_slice(&base.data()[(t - 1) * frame..]);
        let shifted = Tensor::new(vec![t, 32, 32, 3], shifted).unwrap();

        let out_a = forward(&cfg, &mut store, base, 1);
        let out_b = forward(&cfg, &mut store, shifted, 1);
        let of = out_a.numel() / t;
        // interior frames: out_b[k] == out_a[k+1], ignoring 2-frame borders
        for k in 2..t - 3 {
            let a = &out_a.data()[(k + 1) * of..(k + 2) * of];
            let b = &out_b.data()[k * of..(k + 1) * of];
            assert_eq!(a, b, "frame {k}");
        }
    }

    #[test]
    fn desk_forward_of_40_frames_is_fast() {
        let cfg = PipelineConfig::desk(64).backbone;
        let mut store = build_store(&cfg, 1, 6);
        let clip = Tensor::from_fn(&[40, 32, 32, 3], |i| ((i * 7) % 23) as f32 / 23.0);
        let start = std::time::Instant::now();
        let out = forward(&cfg, &mut store, clip, 1);
        let elapsed = start.elapsed();
        assert_eq!(out.dims(), &[40, 8, 8, 32]);
        assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    }
}
