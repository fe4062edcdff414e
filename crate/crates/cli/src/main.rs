//! Command-line front end: data synthesis, transducer and LM training,
//! risk-based fine-tuning, decoding, evaluation, and self-check oracles.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tmbr_core::beam::{beam_search_nbest, BeamConfig, FusionConfig};
use tmbr_core::io::{
    load_dataset, load_nnlm, load_rnnt, save_dataset, write_nbest, Utterance,
};
use tmbr_core::model::{Nnlm, RnntConfig, RnntModel, Vocab};
use tmbr_core::trainer::{
    evaluate_cer, train_mbr, train_nnlm, train_rnnt, Mode, TrainConfig,
};
use tmbr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tmbr", version, about = "Sequence-transducer training and decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed override, applied after the config file and --set flags.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Individual config override, repeatable; applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for artifacts (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset plus its vocabulary.
    SynthData {
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 2000)]
        utts: usize,
        #[arg(long, default_value_t = 3)]
        frames_per_label: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sigma: f64,
    },
    /// Train the transducer with the negative log-likelihood objective.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Dev set for per-epoch error-rate tracking.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Checkpoint to continue from instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a trained checkpoint with the expected-risk objective.
    MbrTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// External LM checkpoint for fused N-best generation.
        #[arg(long)]
        nnlm: Option<PathBuf>,
    },
    /// Train the external language model on the label text of a dataset.
    TrainNnlm {
        #[arg(long)]
        data: PathBuf,
    },
    /// N-best decode a dataset; writes decode.tsv (1-best) and nbest.tsv.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nnlm: Option<PathBuf>,
    },
    /// Report character error rate of 1-best decoding against references.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nnlm: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over all differentiable pieces.
    Gradcheck,
    /// Brute-force lattice and exhaustive-beam oracle comparisons.
    OracleCheck,
}

fn resolve_config(cli: &Cli, mode: Mode) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => TrainConfig::parse(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {:?}", kv)))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.mode = mode;
    config.validate()?;
    Ok(config)
}

fn banner(config: &TrainConfig) {
    eprintln!(
        "# mode={} seed={} initial_lr={} final_lr={} epochs={} batch_size={} \
         sync_period={} workers={} block_momentum={} block_lr={} max_utt_seconds={} \
         grad_clip={} beam={} nbest={} lm_weight={} smoothing={} rnnt_weight={} bptt={}",
        config.mode,
        config.seed,
        config.initial_lr,
        config.final_lr,
        config.epochs,
        config.batch_size,
        config.sync_period,
        config.workers,
        config.block_momentum,
        config.block_lr,
        config.max_utt_seconds,
        config.grad_clip,
        config.beam,
        config.nbest,
        config.lm_weight,
        config.smoothing,
        config.rnnt_weight,
        config.bptt,
    );
}

/// Infer a desk-scale model configuration from the dataset itself.
fn infer_config(dataset: &[Utterance], seed: u64) -> Result<RnntConfig> {
    let vocab = dataset.iter().flat_map(|u| &u.labels).copied().max().unwrap_or(0);
    let feat = dataset
        .first()
        .map(|u| u.features.cols())
        .ok_or(Error::EmptyDataset)?;
    if vocab == 0 {
        return Err(Error::Config("dataset has no labels to size the vocabulary".into()));
    }
    Ok(RnntConfig { init_seed: seed, ..RnntConfig::desk(vocab, feat) })
}

fn search_config(config: &TrainConfig) -> BeamConfig {
    BeamConfig {
        beam: config.beam,
        nbest: config.nbest,
        max_symbols_per_frame: 3,
        fusion: FusionConfig { lm_weight: config.lm_weight, smoothing: config.smoothing },
    }
}

fn load_lm(path: &Option<PathBuf>) -> Result<Option<Nnlm>> {
    path.as_ref().map(|p| load_nnlm(p)).transpose()
}

fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::SynthData { vocab, utts, frames_per_label, noise_sigma } => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let data = tmbr_core::trainer::synth_dataset(
                *vocab,
                *utts,
                *frames_per_label,
                *noise_sigma,
                config.seed,
            )?;
            save_dataset(&cli.out.join("dataset.tmbd"), &data)?;
            Vocab::synthetic(*vocab).save(&cli.out.join("vocab.txt"))?;
            println!("wrote {} utterances to {}", data.len(), cli.out.display());
        }
        Command::Train { data, dev, init } => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let dataset = load_dataset(data)?;
            let devset = dev.as_ref().map(|p| load_dataset(p)).transpose()?;
            let mut model = match init {
                Some(path) => load_rnnt(path)?,
                None => RnntModel::init(infer_config(&dataset, config.seed)?)?,
            };
            let report =
                train_rnnt(&config, &mut model, &dataset, devset.as_deref(), Some(&cli.out))?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                match report.epoch_cer.get(i) {
                    Some(cer) => println!("epoch {} loss {:.4} dev_cer {:.2}", i + 1, loss, cer),
                    None => println!("epoch {} loss {:.4}", i + 1, loss),
                }
            }
        }
        Command::MbrTrain { data, dev, model, nnlm } => {
            let config = resolve_config(cli, Mode::Mbr)?;
            banner(&config);
            let dataset = load_dataset(data)?;
            let devset = dev.as_ref().map(|p| load_dataset(p)).transpose()?;
            let mut model = load_rnnt(model)?;
            let lm = load_lm(nnlm)?;
            let report = train_mbr(
                &config,
                &mut model,
                lm.as_ref(),
                &dataset,
                devset.as_deref(),
                Some(&cli.out),
            )?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                match report.epoch_cer.get(i) {
                    Some(cer) => println!("epoch {} loss {:.4} dev_cer {:.2}", i + 1, loss, cer),
                    None => println!("epoch {} loss {:.4}", i + 1, loss),
                }
            }
        }
        Command::TrainNnlm { data } => {
            let config = resolve_config(cli, Mode::Nnlm)?;
            banner(&config);
            let dataset = load_dataset(data)?;
            let vocab = dataset.iter().flat_map(|u| &u.labels).copied().max().unwrap_or(0);
            if vocab == 0 {
                return Err(Error::Config("dataset has no labels".into()));
            }
            let mut lm = Nnlm::init(tmbr_core::model::NnlmConfig {
                init_seed: config.seed,
                ..tmbr_core::model::NnlmConfig::desk(vocab)
            })?;
            let report = train_nnlm(&config, &mut lm, &dataset, Some(&cli.out))?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {} nll_per_symbol {:.4}", i + 1, loss);
            }
        }
        Command::Decode { data, model, nnlm } => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let dataset = load_dataset(data)?;
            let model = load_rnnt(model)?;
            let lm = load_lm(nnlm)?;
            let vocab = Vocab::synthetic(model.config.vocab_size);
            let search = search_config(&config);
            let mut one_best = BufWriter::new(File::create(cli.out.join("decode.tsv"))?);
            let mut n_best = BufWriter::new(File::create(cli.out.join("nbest.tsv"))?);
            for utt in &dataset {
                let h = model.encode_eval(&utt.features)?;
                let hyps = beam_search_nbest(&model, &h, lm.as_ref(), &search)?;
                let top = hyps.first().ok_or_else(|| {
                    Error::Contract(format!("no hypothesis for {}", utt.id))
                })?;
                let text: Vec<&str> =
                    top.labels.iter().map(|&l| vocab.symbol(l).unwrap_or("<unk>")).collect();
                writeln!(one_best, "{}\t{:.6}\t{}", utt.id, top.fused_score, text.join(" "))?;
                write_nbest(&mut n_best, &utt.id, &hyps, &vocab)?;
            }
            println!("decoded {} utterances to {}", dataset.len(), cli.out.display());
        }
        Command::Eval { data, model, nnlm } => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let dataset = load_dataset(data)?;
            let model = load_rnnt(model)?;
            let lm = load_lm(nnlm)?;
            let report = evaluate_cer(&model, lm.as_ref(), &dataset, &search_config(&config))?;
            let mut per_utt = BufWriter::new(File::create(cli.out.join("cer.tsv"))?);
            for (id, dist, ref_len, _) in &report.per_utt {
                writeln!(per_utt, "{}\t{}\t{}", id, dist, ref_len)?;
            }
            println!("cer {:.4}", report.cer);
        }
        Command::Gradcheck => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let mut worst = 0.0f64;
            for (name, err) in tmbr_core::checks::primitive_grad_report(config.seed)? {
                println!("{:<16} max_rel_err {:.3e}", name, err);
                worst = worst.max(err);
            }
            let t = tmbr_core::checks::transducer_grad_report(config.seed, 10)?;
            println!("{:<16} max_rel_err {:.3e}", "transducer", t);
            worst = worst.max(t);
            let m = tmbr_core::checks::mbr_coefficient_report(config.seed, 50)?;
            println!("{:<16} max_rel_err {:.3e}", "mbr", m);
            worst = worst.max(m);
            println!("overall max_rel_err {:.3e}", worst);
            if worst > 1e-3 {
                return Err(Error::NonFinite { op: "gradcheck exceeded 1e-3" });
            }
        }
        Command::OracleCheck => {
            let config = resolve_config(cli, Mode::Rnnt)?;
            banner(&config);
            let lattice = tmbr_core::checks::lattice_oracle_report(config.seed, 200)?;
            println!("lattice brute-force max_abs_diff {:.3e}", lattice);
            let beam = exhaustive_beam_check(config.seed)?;
            println!("exhaustive beam max_abs_diff {:.3e}", beam);
            if lattice > 1e-5 || beam > 1e-5 {
                return Err(Error::Contract("oracle comparison exceeded 1e-5".into()));
            }
        }
    }
    Ok(())
}

/// Exact sequence log-probability under the model by alignment-lattice
/// dynamic programming, independent of the beam-search implementation.
fn lattice_sequence_score(model: &RnntModel, h_enc: &[Vec<f32>], y: &[usize]) -> Result<f64> {
    let vocab = model.config.vocab_size + 1;
    let mut states = vec![model.decoder_start()?];
    for &sym in y {
        let next = model.decoder_step(states.last().unwrap(), sym)?;
        states.push(next);
    }
    let mut lp = Vec::with_capacity(h_enc.len() * states.len() * vocab);
    for h in h_enc {
        for s in &states {
            let logits: Vec<f64> =
                model.joint_eval(h, &s.out).iter().map(|&v| v as f64).collect();
            lp.extend(tmbr_core::math::log_softmax_f64(&logits));
        }
    }
    let lat = tmbr_core::transducer::Lattice::new(h_enc.len(), vocab, y.to_vec(), lp)?;
    let (nll, _) = tmbr_core::transducer::forward_backward_loss(&lat)?;
    Ok(-nll)
}

/// Compare wide-beam N-best against full enumeration of short label
/// sequences on a tiny random model; returns the max score discrepancy.
fn exhaustive_beam_check(seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model =
        RnntModel::init(RnntConfig { init_seed: seed, ..RnntConfig::desk(2, 8) })?;
    let frames = 8;
    let feats: Vec<f32> = (0..frames * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = tmbr_core::Tensor::matrix(frames, 8, feats)?;
    let h = model.encode_eval(&features)?;
    let h_rows: Vec<Vec<f32>> = (0..h.rows()).map(|t| h.row(t).to_vec()).collect();

    // every label sequence up to length 2 over symbols {1, 2}
    let mut candidates: Vec<Vec<usize>> = vec![vec![]];
    for a in 1..=2usize {
        candidates.push(vec![a]);
        for b in 1..=2usize {
            candidates.push(vec![a, b]);
        }
    }
    let mut exact: Vec<(Vec<usize>, f64)> = candidates
        .into_iter()
        .map(|y| lattice_sequence_score(&model, &h_rows, &y).map(|s| (y, s)))
        .collect::<Result<_>>()?;
    exact.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

    let search = BeamConfig {
        beam: 256,
        nbest: 256,
        max_symbols_per_frame: 3,
        fusion: FusionConfig { lm_weight: 0.0, smoothing: 1.0 },
    };
    let hyps = beam_search_nbest(&model, &h, None, &search)?;
    // the beam also explores longer sequences; compare only the enumerated ones
    let short: Vec<_> = hyps.iter().filter(|h| h.labels.len() <= 2).collect();
    let mut max_abs = 0.0f64;
    for (rank, (y, score)) in exact.iter().enumerate() {
        let hyp = short.get(rank).ok_or_else(|| {
            Error::Contract(format!("beam found only {} short hypotheses", short.len()))
        })?;
        if &hyp.labels != y {
            return Err(Error::Contract(format!(
                "rank {}: beam {:?} vs enumeration {:?}",
                rank, hyp.labels, y
            )));
        }
        max_abs = max_abs.max((hyp.log_prob - score).abs());
    }
    Ok(max_abs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
