//! Query-attention pooling over per-frame spatial feature maps.
//!
//! Each frame's `[h*w, c]` map is projected to the transformer width,
//! summed with learnable spatial positional encodings, self-attended by a
//! shared encoder stack, and collapsed to one vector by softmax attention
//! against a learnable query. A global-average-pooling path exists for the
//! ablation baseline.

use crate::config::{BackboneConfig, PipelineConfig, PoolingConfig, VtpConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Graph, Init};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Width of the first half of the stack (half the output width when the
/// mid-stack downsample is enabled).
fn entry_dim(cfg: &VtpConfig) -> usize {
    if cfg.mid_downsample {
        cfg.model_dim / 2
    } else {
        cfg.model_dim
    }
}

fn split_layer(cfg: &VtpConfig) -> usize {
    if cfg.mid_downsample {
        cfg.n_layers / 2
    } else {
        cfg.n_layers
    }
}

/// Register projection, positional table, encoder stack, and pooling query.
pub fn init_vtp<S: Scalar>(init: &mut Init<S>, cfg: &VtpConfig, grid_hw: usize, in_channels: usize) {
    let d0 = entry_dim(cfg);
    init.linear("vtp.proj", in_channels, d0);
    init.normal("vtp.spe", &[grid_hw * grid_hw, d0], 0.02);
    let split = split_layer(cfg);
    for l in 0..split {
        nn::init_encoder_layer(init, &format!("vtp.l{l}"), d0, d0 * cfg.ffn_mult);
    }
    if cfg.mid_downsample {
        init.linear("vtp.mid_proj", d0, cfg.model_dim);
        for l in split..cfg.n_layers {
            nn::init_encoder_layer(init, &format!("vtp.l{l}"), cfg.model_dim, cfg.model_dim * cfg.ffn_mult);
        }
    }
    init.normal("vtp.query", &[cfg.model_dim], 0.02);
}

/// Self-attended per-frame map: projection, positional encodings, encoder
/// stack (optionally pooling the grid and widening mid-stack).
pub fn vtp_encode<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &VtpConfig,
    frame: Var,
    grid_hw: usize,
) -> Result<Var> {
    let dims = g.tape.dims(frame).to_vec();
    if dims.len() != 2 || dims[0] != grid_hw * grid_hw {
        return Err(Error::config(format!(
            "frame map {:?} does not match {grid_hw}x{grid_hw} grid",
            dims
        )));
    }
    let spe = g.param("vtp.spe")?;
    if g.tape.dims(spe)[0] != grid_hw * grid_hw {
        return Err(Error::config(format!(
            "positional table has {} rows, grid needs {}",
            g.tape.dims(spe)[0],
            grid_hw * grid_hw
        )));
    }
    let projected = nn::linear(g, "vtp.proj", frame)?;
    let mut z = g.tape.add(projected, spe)?;
    let split = split_layer(cfg);
    for l in 0..split {
        z = nn::encoder_layer(g, &format!("vtp.l{l}"), z, cfg.n_heads, None, cfg.attention_kernel)?;
    }
    if cfg.mid_downsample {
        z = g.tape.avg_pool_grid(z, grid_hw, grid_hw)?;
        z = nn::linear(g, "vtp.mid_proj", z)?;
        for l in split..cfg.n_layers {
            z = nn::encoder_layer(g, &format!("vtp.l{l}"), z, cfg.n_heads, None, cfg.attention_kernel)?;
        }
    }
    Ok(z)
}

/// Softmax-pooled summary of one self-attended map using the given query:
/// returns the `[hw]` attention mask and the `[1, d]` pooled vector.
pub fn attention_pool_with<S: Scalar>(
    tape: &mut crate::tape::Tape<S>,
    z: Var,
    query: Var,
    literal_hw_scale: bool,
) -> Result<(Var, Var)> {
    let dims = tape.dims(z).to_vec();
    let (hw, d) = (dims[0], dims[1]);
    if tape.dims(query) != [d] {
        return Err(Error::shape(format!("query dims {:?}, want [{d}]", tape.dims(query))));
    }
    let q_col = tape.reshape(query, &[d, 1])?;
    let logits = tape.matmul(z, q_col)?;
    let logits = tape.reshape(logits, &[hw])?;
    let attn = tape.softmax(logits, 0)?;
    let attn_row = tape.reshape(attn, &[1, hw])?;
    let mut pooled = tape.matmul(attn_row, z)?;
    if literal_hw_scale {
        pooled = tape.scale(pooled, S::one() / S::of_usize(hw));
    }
    Ok((attn, pooled))
}

pub fn attention_pool<S: Scalar>(g: &mut Graph<S>, cfg: &VtpConfig, z: Var) -> Result<(Var, Var)> {
    let query = g.param("vtp.query")?;
    attention_pool_with(&mut g.tape, z, query, cfg.literal_hw_scale)
}

/// Frames processed independently with shared weights; pooled vectors are
/// stacked over time. Returns `([T, d], [T, hw])`.
///
/// The softmax kernel without mid-stack downsampling runs on a fused path
/// that stacks all frames into one `[T*hw, d]` matrix (attention stays
/// block-diagonal per frame); the general path loops frames.
pub fn vtp_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &VtpConfig,
    features: Var,
) -> Result<(Var, Var)> {
    let dims = g.tape.dims(features).to_vec();
    if dims.len() != 4 {
        return Err(Error::shape(format!("feature map must be [T,h,w,c], got {dims:?}")));
    }
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    if h != w {
        return Err(Error::shape(format!("pooling expects a square grid, got {h}x{w}")));
    }
    if cfg.attention_kernel == nn::AttnKernel::Softmax && !cfg.mid_downsample {
        return vtp_forward_batched(g, cfg, features, t, h, c);
    }
    let flat = g.tape.reshape(features, &[t, h * w * c])?;
    let mut pooled_rows = Vec::with_capacity(t);
    let mut attn_rows = Vec::with_capacity(t);
    for ti in 0..t {
        let row = g.tape.slice_rows(flat, ti, 1)?;
        let frame = g.tape.reshape(row, &[h * w, c])?;
        let z = vtp_encode(g, cfg, frame, h)?;
        let (attn, pooled) = attention_pool(g, cfg, z)?;
        let hw_out = g.tape.dims(attn)[0];
        attn_rows.push(g.tape.reshape(attn, &[1, hw_out])?);
        pooled_rows.push(pooled);
    }
    let pooled = g.tape.concat_rows(&pooled_rows)?;
    let attn = g.tape.concat_rows(&attn_rows)?;
    Ok((pooled, attn))
}

fn batched_encoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    x: Var,
    n_heads: usize,
    rows: usize,
) -> Result<Var> {
    let n1 = nn::layer_norm(g, &format!("{name}.ln1"), x)?;
    let q = nn::linear(g, &format!("{name}.attn.q"), n1)?;
    let k = nn::linear(g, &format!("{name}.attn.k"), n1)?;
    let v = nn::linear(g, &format!("{name}.attn.v"), n1)?;
    let a = g.tape.frame_attention(q, k, v, n_heads, rows)?;
    let a = nn::linear(g, &format!("{name}.attn.o"), a)?;
    let a = g.dropout(a);
    let x = g.tape.add(x, a)?;
    let n2 = nn::layer_norm(g, &format!("{name}.ln2"), x)?;
    let h = nn::linear(g, &format!("{name}.ff1"), n2)?;
    let h = g.tape.relu(h);
    let h = nn::linear(g, &format!("{name}.ff2"), h)?;
    let h = g.dropout(h);
    g.tape.add(x, h)
}

fn vtp_forward_batched<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &VtpConfig,
    features: Var,
    t: usize,
    grid_hw: usize,
    c: usize,
) -> Result<(Var, Var)> {
    let hw = grid_hw * grid_hw;
    let spe = g.param("vtp.spe")?;
    if g.tape.dims(spe)[0] != hw {
        return Err(Error::config(format!(
            "positional table has {} rows, grid needs {}",
            g.tape.dims(spe)[0],
            hw
        )));
    }
    let flat = g.tape.reshape(features, &[t * hw, c])?;
    let projected = nn::linear(g, "vtp.proj", flat)?;
    let mut z = g.tape.add_tiled(projected, spe)?;
    for l in 0..cfg.n_layers {
        z = batched_encoder_layer(g, &format!("vtp.l{l}"), z, cfg.n_heads, hw)?;
    }
    let query = g.param("vtp.query")?;
    let d = cfg.model_dim;
    let q_col = g.tape.reshape(query, &[d, 1])?;
    let logits = g.tape.matmul(z, q_col)?;
    let logits = g.tape.reshape(logits, &[t, hw])?;
    let attn = g.tape.softmax(logits, 1)?;
    let mut pooled = g.tape.pool_frames(attn, z)?;
    if cfg.literal_hw_scale {
        pooled = g.tape.scale(pooled, S::one() / S::of_usize(hw));
    }
    Ok((pooled, attn))
}

/// GAP baseline head parameters: a projection from the last block width.
pub fn init_gap<S: Scalar>(init: &mut Init<S>, backbone: &BackboneConfig, d: usize) {
    init.linear("gap.fc", backbone.last_width(), d);
}

/// Per-frame spatial mean over the full-stack feature map, then the
/// projection to the sequence width. Returns `[T, d]`.
pub fn gap_forward<S: Scalar>(g: &mut Graph<S>, features: Var) -> Result<Var> {
    let dims = g.tape.dims(features).to_vec();
    if dims.len() != 4 {
        return Err(Error::shape(format!("feature map must be [T,h,w,c], got {dims:?}")));
    }
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let flat = g.tape.reshape(features, &[t, h * w * c])?;
    let mut rows = Vec::with_capacity(t);
    for ti in 0..t {
        let row = g.tape.slice_rows(flat, ti, 1)?;
        let frame = g.tape.reshape(row, &[h * w, c])?;
        let mean = g.tape.mean_over_rows(frame)?;
        rows.push(g.tape.reshape(mean, &[1, c])?);
    }
    let stacked = g.tape.concat_rows(&rows)?;
    nn::linear(g, "gap.fc", stacked)
}

/// Register whichever pooling head the pipeline uses.
pub fn init_pooling<S: Scalar>(init: &mut Init<S>, cfg: &PipelineConfig) {
    match &cfg.pooling {
        PoolingConfig::Vtp(v) => {
            init_vtp(init, v, cfg.backbone.tap_hw(), cfg.backbone.tap_channels())
        }
        PoolingConfig::Gap => init_gap(init, &cfg.backbone, cfg.seq2seq.model_dim),
    }
}

/// Pack per-frame attention masks into a grayscale grid image
/// (`frames_per_row` maps side by side, nearest-neighbor upscaled).
/// Returns (pixels, width, height).
pub fn attention_grid_image(
    maps: &[Vec<f64>],
    grid_hw: usize,
    upscale: usize,
    frames_per_row: usize,
) -> (Vec<u8>, usize, usize) {
    assert!(upscale >= 1 && frames_per_row >= 1);
    let n = maps.len();
    let rows = n.div_ceil(frames_per_row);
    let cell = grid_hw * upscale + 1;
    let width = frames_per_row * cell + 1;
    let height = rows * cell + 1;
    let mut img = vec![0u8; width * height];
    for (i, map) in maps.iter().enumerate() {
        let peak = map.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let (gy, gx) = (i / frames_per_row, i % frames_per_row);
        for y in 0..grid_hw * upscale {
            for x in 0..grid_hw * upscale {
                let v = map[(y / upscale) * grid_hw + x / upscale] / peak;
                let px = (gy * cell + 1 + y) * width + gx * cell + 1 + x;
                img[px] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, width, height)
}
