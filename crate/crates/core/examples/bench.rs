//! Rough component timings for the desk-scale pipeline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtp_core::config::PipelineConfig;
use vtp_core::model::{self, Pipeline};
use vtp_core::nn::{Graph, Mode};
use vtp_core::seq2seq;
use vtp_core::tensor::Tensor;
use vtp_core::tokenizer::TokenSequence;
use vtp_core::{backbone, vtp};

fn main() {
    let mut cfg = PipelineConfig::desk(64);
    cfg.seq2seq.dropout = 0.0;
    let mut pipe: Pipeline<f32> = Pipeline::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = Tensor::from_fn(&[16, 32, 32, 3], |_| rng.gen_range(0.0..1.0f32));
    let target = TokenSequence::new(vec![2, 10, 11, 3]);

    let reps = 20;

    // backbone forward only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Eval, 0);
        let c = g.input(clip.clone());
        let f = backbone::backbone_forward(&mut g, &cfg.backbone, c, 1).unwrap();
        std::hint::black_box(g.tape.value(f).numel());
    }
    println!("backbone fwd      {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // frontend (backbone + vtp) forward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Eval, 0);
        let c = g.input(clip.clone());
        let (p, _) = model::frontend(&mut g, &cfg, c).unwrap();
        std::hint::black_box(g.tape.value(p).numel());
    }
    println!("frontend fwd      {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // full loss forward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Eval, 0);
        let c = g.input(clip.clone());
        let enc = model::encode_clip_graph(&mut g, &cfg, c).unwrap();
        let nll = seq2seq::teacher_forced_nll(&mut g, &cfg.seq2seq, enc, &target).unwrap();
        std::hint::black_box(g.tape.value(nll).item());
    }
    println!("full fwd          {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // full forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Train, 0);
        let c = g.input(clip.clone());
        let enc = model::encode_clip_graph(&mut g, &cfg, c).unwrap();
        let nll = seq2seq::teacher_forced_nll(&mut g, &cfg.seq2seq, enc, &target).unwrap();
        let grads = g.grads(nll).unwrap();
        std::hint::black_box(grads.len());
    }
    println!("full fwd+bwd      {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // backbone forward + backward only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Train, 0);
        let c = g.input(clip.clone());
        let f = backbone::backbone_forward(&mut g, &cfg.backbone, c, 1).unwrap();
        let loss = g.tape.sum_all(f);
        let grads = g.grads(loss).unwrap();
        std::hint::black_box(grads.len());
    }
    println!("backbone fwd+bwd  {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // frontend forward + backward only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = pipe.graph(Mode::Train, 0);
        let c = g.input(clip.clone());
        let (p, _) = model::frontend(&mut g, &cfg, c).unwrap();
        let loss = g.tape.sum_all(p);
        let grads = g.grads(loss).unwrap();
        std::hint::black_box(grads.len());
    }
    println!("frontend fwd+bwd  {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // vtp encode alone on one frame map
    let frame = Tensor::from_fn(&[64, 32], |_| rng.gen_range(-1.0..1.0f32));
    if let vtp_core::config::PoolingConfig::Vtp(vcfg) = &cfg.pooling {
        let t0 = Instant::now();
        for _ in 0..reps * 16 {
            let mut g = pipe.graph(Mode::Eval, 0);
            let f = g.input(frame.clone());
            let z = vtp::vtp_encode(&mut g, vcfg, f, 8).unwrap();
            std::hint::black_box(g.tape.value(z).numel());
        }
        println!(
            "vtp frame fwd     {:>8.3} ms",
            t0.elapsed().as_secs_f64() * 1e3 / (reps * 16) as f64
        );
    }

    // one greedy decode of an encoded 16-frame source
    let mut g = pipe.graph(Mode::Eval, 0);
    let c = g.input(clip.clone());
    let enc = model::encode_clip_graph(&mut g, &cfg, c).unwrap();
    let enc_t = g.tape.value(enc).clone();
    drop(g);
    let t0 = Instant::now();
    for _ in 0..reps {
        let out = pipe.greedy(&enc_t, 12).unwrap();
        std::hint::black_box(out.1);
    }
    println!("greedy decode     {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
