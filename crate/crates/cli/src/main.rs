//! Command-line surface for the visual speech recognition pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vtp_core::config::{PipelineConfig, RunConfig, TrainConfig};
use vtp_core::error::Error;
use vtp_core::eval;
use vtp_core::io;
use vtp_core::lm::NGramLM;
use vtp_core::metrics;
use vtp_core::model::Pipeline;
use vtp_core::synth::{self, GrammarPreset};
use vtp_core::tokenizer::{self, Tokenizer, TokenizerKind, Vocab};
use vtp_core::trainer::{self, VsdTrainConfig};
use vtp_core::video::{eval_transform, VideoClip};
use vtp_core::vsd;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "vtp", about = "Desk-scale visual speech recognition pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rendered corpus (clips + manifest).
    SynthData(SynthArgs),
    /// Induce a sub-word (or character) vocabulary from text.
    TokenizerTrain(TokenizerArgs),
    /// Train stage 1 (end-to-end on 2-word crops) or stage 2 (n-grams).
    Train(TrainArgs),
    /// Dump eval-mode pooled features for every manifest clip.
    DumpFeatures(DumpArgs),
    /// Beam-decode manifest clips into transcriptions.
    Decode(DecodeArgs),
    /// Word error rate between reference and hypothesis transcripts.
    EvalWer(EvalWerArgs),
    /// Fine-tune the visual speech detection head (and full stack).
    VsdTrain(VsdTrainArgs),
    /// Per-frame speech probabilities for one clip (sliding windows).
    VsdInfer(VsdInferArgs),
    /// Average precision of score/label CSV rows, grouped.
    EvalAp(EvalApArgs),
    /// Export attention masks as a grayscale image grid.
    AttnDump(AttnDumpArgs),
}

#[derive(Args)]
struct CommonConfig {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonConfig {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Output directory (clips/, manifest.tsv).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_clips: usize,
    /// Grammar preset: plain, default, or homopheme.
    #[arg(long, default_value = "default")]
    grammar: String,
    /// Generate a speech-detection corpus (labels + mixed segments).
    #[arg(long)]
    vsd: bool,
    /// Also write a text-only corpus sampled from the grammar.
    #[arg(long)]
    text_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    text_sentences: usize,
}

#[derive(Args)]
struct TokenizerArgs {
    /// Manifest (.tsv, transcripts) or plain text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 160)]
    target_size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Build a character-level vocabulary instead of word pieces.
    #[arg(long)]
    chars: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Pipeline preset when no config file overrides it:
    /// desk, desk-gap, or desk-sixteenth.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Stage-2 input: checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Stage-2 input: directory of dumped feature files.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Step-budget override (stage 1: max_steps, stage 2: stage2_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Use the 3-phase length curriculum in stage 2.
    #[arg(long)]
    curriculum: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output file, one hypothesis per manifest line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable horizontal-flip test-time augmentation.
    #[arg(long)]
    no_tta: bool,
    /// Length-normalize beam scores.
    #[arg(long)]
    length_norm: bool,
    /// Text corpus to train the rescoring n-gram LM on.
    #[arg(long)]
    lm_text: Option<PathBuf>,
}

#[derive(Args)]
struct EvalWerArgs {
    /// Reference transcripts, one per line.
    #[arg(long, conflicts_with = "ref_manifest")]
    refs: Option<PathBuf>,
    /// Take references from a manifest instead.
    #[arg(long)]
    ref_manifest: Option<PathBuf>,
    /// Hypotheses, one per line.
    #[arg(long)]
    hyps: PathBuf,
}

#[derive(Args)]
struct VsdTrainArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Lip-reading checkpoint to initialize from (random init if absent;
    /// requires --vocab-size for the fresh model's shape).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct VsdInferArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    /// Output CSV: frame_index, probability.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    overlap: usize,
}

#[derive(Args)]
struct EvalApArgs {
    /// CSV with header group,score,label.
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Cap on the number of frames in the grid.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    upscale: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Usage(_) | Error::Shape(_) | Error::Length(_) => 2,
                Error::Data(_) | Error::Io(_) => 3,
                Error::Format { .. } => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Train(a) => train(a),
        Command::DumpFeatures(a) => dump_features(a),
        Command::Decode(a) => decode(a),
        Command::EvalWer(a) => eval_wer(a),
        Command::VsdTrain(a) => vsd_train(a),
        Command::VsdInfer(a) => vsd_infer(a),
        Command::EvalAp(a) => eval_ap(a),
        Command::AttnDump(a) => attn_dump(a),
    }
}

fn write_effective_config(dir: &Path, run: &RunConfig) -> Result<()> {
    let body = serde_json::to_string_pretty(run).expect("config serializes");
    io::write_atomic(&dir.join("config.json"), body.as_bytes())
}

fn load_tokenizer(vocab_path: &Path) -> Result<Tokenizer> {
    let vocab = Vocab::load(vocab_path)?;
    let kind = if vocab.id(tokenizer::SPACE_TOKEN).is_some() {
        TokenizerKind::Chars
    } else {
        TokenizerKind::WordPiece
    };
    Ok(Tokenizer::new(vocab, kind))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let run = a.common.load()?;
    let seed = a.common.seed.unwrap_or(0);
    let preset = GrammarPreset::parse(&a.grammar)?;
    let g = synth::grammar(preset);
    let entries = if a.vsd {
        synth::generate_vsd_corpus(&g, a.n_clips, seed, &a.out_dir)?
    } else {
        synth::generate_corpus(&g, a.n_clips, seed, &a.out_dir)?
    };
    if let Some(text_out) = &a.text_out {
        let lines = synth::generate_text(&g, a.text_sentences, seed ^ 0x7e97);
        io::write_atomic(text_out, (lines.join("\n") + "\n").as_bytes())?;
    }
    write_effective_config(&a.out_dir, &run)?;
    println!("wrote {} clips under {}", entries.len(), a.out_dir.display());
    Ok(())
}

fn read_corpus_lines(path: &Path) -> Result<Vec<String>> {
    if path.extension().map(|e| e == "tsv").unwrap_or(false) {
        let entries = io::parse_manifest(path)?;
        Ok(entries.into_iter().map(|e| e.transcript).collect())
    } else {
        Ok(std::fs::read_to_string(path)?.lines().map(|l| l.to_string()).collect())
    }
}

fn tokenizer_train(a: TokenizerArgs) -> Result<()> {
    let lines = read_corpus_lines(&a.input)?;
    let vocab = if a.chars {
        tokenizer::char_vocab(&lines)?
    } else {
        tokenizer::train_vocab(&lines, a.target_size)?
    };
    vocab.save(&a.out)?;
    println!("wrote {} tokens to {}", vocab.size(), a.out.display());
    Ok(())
}

fn pipeline_config(run: &RunConfig, preset: &str, vocab_size: usize) -> Result<PipelineConfig> {
    if let Some(mut p) = run.pipeline.clone() {
        p.seq2seq.vocab_size = vocab_size;
        return Ok(p);
    }
    match preset {
        "desk" => Ok(PipelineConfig::desk(vocab_size)),
        "desk-gap" => Ok(PipelineConfig::desk_gap(vocab_size)),
        "desk-sixteenth" => Ok(PipelineConfig::desk_sixteenth(vocab_size)),
        other => Err(Error::config(format!("unknown preset {other:?}"))),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = a.common.load()?;
    let tokenizer = load_tokenizer(&a.vocab)?;
    let mut tcfg = run.train.clone().unwrap_or_else(|| TrainConfig::desk(0));
    if let Some(s) = a.common.seed {
        tcfg.seed = s;
    }
    if a.curriculum {
        tcfg.stage2_curriculum = true;
    }
    let corpus = trainer::load_corpus(&a.manifest)?;
    std::fs::create_dir_all(&a.out_dir)?;
    match a.stage {
        1 => {
            if let Some(s) = a.steps {
                tcfg.max_steps = s;
                tcfg.noam_steps = tcfg.noam_steps.min(s);
            }
            let mut pcfg = pipeline_config(&run, &a.preset, tokenizer.vocab.size())?;
            pcfg.tokenizer_kind = tokenizer.kind;
            let mut pipe: Pipeline<f32> = Pipeline::new(pcfg.clone(), tcfg.seed)?;
            let ckpt = a.out_dir.join("stage1.vtpk");
            let stats = trainer::stage1_train(&mut pipe, &corpus, &tokenizer, &tcfg, Some(&ckpt))?;
            trainer::write_stats_csv(&a.out_dir.join("stage1_log.csv"), &stats)?;
            run.pipeline = Some(pcfg);
            run.train = Some(tcfg);
            write_effective_config(&a.out_dir, &run)?;
            let last = stats.iter().filter(|s| s.split == "train").last();
            println!(
                "stage 1 done: {} steps, final train loss {:.4} nats/token",
                last.map(|s| s.step).unwrap_or(0),
                last.map(|s| s.loss).unwrap_or(f64::NAN),
            );
        }
        2 => {
            if let Some(s) = a.steps {
                tcfg.stage2_steps = s;
            }
            let init = a
                .init
                .as_ref()
                .ok_or_else(|| Error::config("stage 2 needs --init (stage-1 checkpoint)"))?;
            let feat_dir = a
                .features
                .as_ref()
                .ok_or_else(|| Error::config("stage 2 needs --features (dumped features)"))?;
            let ckpt = io::load_checkpoint(init)?;
            let mut pipe: Pipeline<f32> = Pipeline::from_checkpoint(&ckpt)?;
            let features = trainer::load_features(&corpus, feat_dir)?;
            let out = a.out_dir.join("stage2.vtpk");
            let stats =
                trainer::stage2_train(&mut pipe, &corpus, &features, &tokenizer, &tcfg, Some(&out))?;
            trainer::write_stats_csv(&a.out_dir.join("stage2_log.csv"), &stats)?;
            run.pipeline = Some(pipe.cfg.clone());
            run.train = Some(tcfg);
            write_effective_config(&a.out_dir, &run)?;
            let last = stats.iter().filter(|s| s.split == "train").last();
            println!(
                "stage 2 done: {} steps, final train loss {:.4} nats/token",
                last.map(|s| s.step).unwrap_or(0),
                last.map(|s| s.loss).unwrap_or(f64::NAN),
            );
        }
        other => return Err(Error::config(format!("unknown stage {other}, expected 1 or 2"))),
    }
    Ok(())
}

fn dump_features(a: DumpArgs) -> Result<()> {
    let run = a.common.load()?;
    let tcfg = run.train.clone().unwrap_or_else(|| TrainConfig::desk(0));
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut pipe: Pipeline<f32> = Pipeline::from_checkpoint(&ckpt)?;
    let corpus = trainer::load_corpus(&a.manifest)?;
    trainer::dump_features(&mut pipe, &corpus, &tcfg.augment, Some(&a.out_dir))?;
    write_effective_config(&a.out_dir, &run)?;
    println!("dumped {} feature files to {}", corpus.entries.len(), a.out_dir.display());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let run = a.common.load()?;
    let tcfg = run.train.clone().unwrap_or_else(|| TrainConfig::desk(0));
    let mut dcfg = run.decoding.clone().unwrap_or_default();
    if let Some(b) = a.beam_width {
        dcfg.beam_width = b;
    }
    if let Some(al) = a.alpha {
        dcfg.alpha = al;
    }
    if a.no_tta {
        dcfg.use_flip_tta = false;
    }
    if a.length_norm {
        dcfg.length_normalize = true;
    }
    if !(0.0..=1.0).contains(&dcfg.alpha) {
        return Err(Error::config(format!("alpha {} outside [0, 1]", dcfg.alpha)));
    }
    let tokenizer = load_tokenizer(&a.vocab)?;
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut pipe: Pipeline<f32> = Pipeline::from_checkpoint(&ckpt)?;
    let corpus = trainer::load_corpus(&a.manifest)?;

    let lm_cfg = run.lm.clone().unwrap_or_default();
    let lm = match &a.lm_text {
        Some(p) => {
            let lines = read_corpus_lines(p)?;
            let seqs: Vec<Vec<u32>> =
                lines.iter().map(|l| tokenizer.encode(l).content().to_vec()).collect();
            Some(NGramLM::train(seqs, lm_cfg.order, lm_cfg.add_k, tokenizer.vocab.size()))
        }
        None => None,
    };
    let outcomes = eval::decode_corpus(
        &mut pipe,
        &corpus,
        &tokenizer,
        &tcfg.augment,
        &dcfg,
        lm.as_ref().map(|l| l as &dyn vtp_core::lm::SequenceScorer),
    )?;
    let mut body = String::new();
    for o in &outcomes {
        body.push_str(&o.text);
        body.push('\n');
    }
    io::write_atomic(&a.out, body.as_bytes())?;
    let mut run_out = run.clone();
    run_out.decoding = Some(dcfg);
    let sidecar = a.out.with_extension("config.json");
    io::write_atomic(
        &sidecar,
        serde_json::to_string_pretty(&run_out).expect("config").as_bytes(),
    )?;
    println!("decoded {} clips to {}", outcomes.len(), a.out.display());
    Ok(())
}

fn eval_wer(a: EvalWerArgs) -> Result<()> {
    let refs: Vec<String> = match (&a.refs, &a.ref_manifest) {
        (Some(p), None) => std::fs::read_to_string(p)?.lines().map(|l| l.to_string()).collect(),
        (None, Some(m)) => io::parse_manifest(m)?.into_iter().map(|e| e.transcript).collect(),
        _ => return Err(Error::config("supply exactly one of --refs or --ref-manifest")),
    };
    let hyps: Vec<String> =
        std::fs::read_to_string(&a.hyps)?.lines().map(|l| l.to_string()).collect();
    if refs.len() != hyps.len() {
        return Err(Error::data(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut s = 0usize;
    let mut d = 0usize;
    let mut ins = 0usize;
    let mut n = 0usize;
    for (r, h) in refs.iter().zip(hyps.iter()) {
        let b = metrics::wer(r, h)?;
        s += b.substitutions;
        d += b.deletions;
        ins += b.insertions;
        n += b.ref_words;
    }
    let wer = (s + d + ins) as f64 / n.max(1) as f64;
    println!("WER {:.4} (S={s} D={d} I={ins} N={n})", wer);
    Ok(())
}

fn vsd_train(a: VsdTrainArgs) -> Result<()> {
    let run = a.common.load()?;
    let corpus = trainer::load_corpus(&a.manifest)?;
    let mut vcfg = VsdTrainConfig::desk(a.common.seed.unwrap_or(0));
    if let Some(s) = a.steps {
        vcfg.steps = s;
    }
    if let Some(lr) = a.lr {
        vcfg.lr = lr;
    }
    let mut pipe: Pipeline<f32> = match (&a.init, a.vocab_size) {
        (Some(p), _) => Pipeline::from_checkpoint(&io::load_checkpoint(p)?)?,
        (None, Some(v)) => Pipeline::new(pipeline_config(&run, "desk", v)?, vcfg.seed)?,
        (None, None) => {
            return Err(Error::config("need --init checkpoint or --vocab-size for random init"))
        }
    };
    std::fs::create_dir_all(&a.out_dir)?;
    let out = a.out_dir.join("vsd.vtpk");
    let stats = trainer::vsd_finetune(&mut pipe, &corpus, &vcfg, Some(&out))?;
    trainer::write_stats_csv(&a.out_dir.join("vsd_log.csv"), &stats)?;
    write_effective_config(&a.out_dir, &run)?;
    println!(
        "vsd training done: final loss {:.4}",
        stats.last().map(|s| s.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn vsd_infer(a: VsdInferArgs) -> Result<()> {
    let run = a.common.load()?;
    let tcfg = run.train.clone().unwrap_or_else(|| TrainConfig::desk(0));
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut pipe: Pipeline<f32> = Pipeline::from_checkpoint(&ckpt)?;
    let raw = VideoClip::new(io::read_clip(&a.clip)?)?;
    let clip = eval_transform(&raw, &tcfg.augment)?;
    let probs = vsd::vsd_infer_long(&mut pipe, &clip, a.window, a.overlap)?;
    let mut body = String::from("frame_index,probability\n");
    for (i, p) in probs.iter().enumerate() {
        body.push_str(&format!("{i},{p:.6}\n"));
    }
    io::write_atomic(&a.out, body.as_bytes())?;
    println!("wrote {} frame probabilities to {}", probs.len(), a.out.display());
    Ok(())
}

fn eval_ap(a: EvalApArgs) -> Result<()> {
    let body = std::fs::read_to_string(&a.scores)?;
    let mut groups: std::collections::BTreeMap<String, (Vec<f64>, Vec<u8>)> =
        std::collections::BTreeMap::new();
    for (ln, line) in body.lines().enumerate() {
        if ln == 0 && line.starts_with("group") {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::data(format!(
                "scores line {}: expected group,score,label",
                ln + 1
            )));
        }
        let score: f64 = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("scores line {}: bad score", ln + 1)))?;
        let label: u8 = match cols[2].trim() {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(Error::data(format!("scores line {}: label must be 0 or 1", ln + 1)))
            }
        };
        let g = groups.entry(cols[0].trim().to_string()).or_default();
        g.0.push(score);
        g.1.push(label);
    }
    let grouped: Vec<(Vec<f64>, Vec<u8>)> = groups.into_values().collect();
    let map = metrics::mean_ap(&grouped)?;
    println!("mAP {:.4} over {} groups", map, grouped.len());
    Ok(())
}

fn attn_dump(a: AttnDumpArgs) -> Result<()> {
    let run = a.common.load()?;
    let tcfg = run.train.clone().unwrap_or_else(|| TrainConfig::desk(0));
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let mut pipe: Pipeline<f32> = Pipeline::from_checkpoint(&ckpt)?;
    let raw = VideoClip::new(io::read_clip(&a.clip)?)?;
    let clip = eval_transform(&raw, &tcfg.augment)?;
    let (_, attn) = pipe.pooled_sequence(&clip)?;
    let attn = attn.ok_or_else(|| {
        Error::config("attention maps require the attention pooler (GAP has none)")
    })?;
    let grid_hw = pipe.cfg.pooled_grid_hw();
    let t = attn.dims()[0].min(a.frames);
    let maps: Vec<Vec<f64>> =
        (0..t).map(|i| attn.row(i).iter().map(|v| *v as f64).collect()).collect();
    let per_row = (t as f64).sqrt().ceil() as usize;
    let (pixels, w, h) = vtp_core::vtp::attention_grid_image(&maps, grid_hw, a.upscale, per_row);
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::shape("attention grid buffer mismatch"))?;
    img.save(&a.out).map_err(|e| Error::data(format!("cannot write image: {e}")))?;
    println!("wrote {}x{} attention grid to {}", w, h, a.out.display());
    Ok(())
}
