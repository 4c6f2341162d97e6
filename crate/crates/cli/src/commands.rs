use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use pbd::attention::{build_causal_mask, build_pbd_mask};
use pbd::data::{builtin_words, load_tsv_with, synthesize, write_tsv, CorruptionConfig, Example, Vocab};
use pbd::inference::{evaluate, transduce, Strategy};
use pbd::model::{gradient_check, init_model, ModelConfig, TransformerModel};
use pbd::training::{
    load_checkpoint, load_checkpoint_for, peek_checkpoint, save_checkpoint, train_until, BatchStream, OptimState,
};
use pbd::{Error, ExecMode, Result, Scalar};

use crate::config::{Precision, RunConfig};
use crate::{GradcheckArgs, SynthArgs};

/// 2 for problems with the user's input, 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Data(_)
        | Error::DataLine { .. }
        | Error::Format(_)
        | Error::Length { .. } => 2,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn train(config_path: &Path, resume: bool) -> Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, resume),
        Precision::F64 => train_as::<f64>(&cfg, resume),
    }
}

fn train_as<F: Scalar>(cfg: &RunConfig, resume: bool) -> Result<ExitCode> {
    let train = load_tsv_with(&cfg.train_path, cfg.lowercase)?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} contains no examples", cfg.train_path.display())));
    }
    let eval = cfg
        .eval_path
        .as_ref()
        .map(|p| load_tsv_with(p, cfg.lowercase))
        .transpose()?;
    let vocab = match &cfg.alphabet {
        Some(a) => Vocab::from_alphabet(a)?,
        None => Vocab::from_corpus(
            train
                .iter()
                .chain(eval.iter().flatten())
                .flat_map(|e| [e.source.as_str(), e.target.as_str()]),
        )?,
    };
    check_vocab(&vocab, &train)?;
    let model_cfg = cfg.model_config(vocab.len());
    let (mut model, mut optim) = if resume && cfg.checkpoint_path.exists() {
        let ck = load_checkpoint_for::<F>(&cfg.checkpoint_path, &model_cfg)?;
        if ck.vocab.as_ref() != Some(&vocab) {
            return Err(Error::Config("vocab mismatch: checkpoint was trained on another alphabet".into()));
        }
        let optim = ck
            .optim
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        (ck.model, optim)
    } else {
        let model = init_model::<F>(&model_cfg, cfg.init_seed)?;
        let optim = OptimState::new(model.params(), cfg.train_options().adam);
        (model, optim)
    };
    let opts = cfg.train_options();
    let mut data = BatchStream::new(&train, &vocab, cfg.batch_size, cfg.data_seed, model_cfg.max_len)?;
    let mut log = match &cfg.log_path {
        Some(p) => {
            let f = if resume {
                fs::OpenOptions::new().create(true).append(true).open(p)
            } else {
                File::create(p)
            };
            Some((BufWriter::new(f.map_err(io_err(p))?), p.clone()))
        }
        None => None,
    };
    let stdout = std::io::stdout();
    train_until(&mut model, &mut optim, &mut data, &opts, cfg.steps, |r, m, st| {
        let line = format!("{}\t{}\t{}", r.step, r.loss, r.lr);
        writeln!(stdout.lock(), "{line}").map_err(io_err(Path::new("<stdout>")))?;
        if let Some((w, p)) = log.as_mut() {
            writeln!(w, "{line}").map_err(io_err(p))?;
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&cfg.checkpoint_path, m, Some(st), Some(&vocab))?;
        }
        Ok(())
    })?;
    if let Some((mut w, p)) = log {
        w.flush().map_err(io_err(&p))?;
    }
    save_checkpoint(&cfg.checkpoint_path, &model, Some(&optim), Some(&vocab))?;
    if let Some(eval) = eval.filter(|e| !e.is_empty()) {
        check_vocab(&vocab, &eval)?;
        let report = evaluate(&model, &vocab, &eval, Strategy::Greedy, ExecMode::default())?;
        print!("{report}");
    }
    Ok(ExitCode::SUCCESS)
}

fn check_vocab(vocab: &Vocab, examples: &[Example]) -> Result<()> {
    for e in examples {
        if let Some(c) = e.source.chars().chain(e.target.chars()).find(|&c| !vocab.contains(c)) {
            return Err(Error::Data(format!(
                "vocab mismatch: character {c:?} is not in the model vocabulary"
            )));
        }
    }
    Ok(())
}

fn load_any(path: &Path) -> Result<usize> {
    let (width, _) = peek_checkpoint(path)?;
    Ok(width)
}

pub fn eval(checkpoint: &Path, tsv: &Path, strategy: Strategy, lowercase: bool) -> Result<ExitCode> {
    match load_any(checkpoint)? {
        8 => eval_as::<f64>(checkpoint, tsv, strategy, lowercase),
        _ => eval_as::<f32>(checkpoint, tsv, strategy, lowercase),
    }
}

fn eval_as<F: Scalar>(checkpoint: &Path, tsv: &Path, strategy: Strategy, lowercase: bool) -> Result<ExitCode> {
    let (model, vocab) = load_model::<F>(checkpoint)?;
    let examples = load_tsv_with(tsv, lowercase)?;
    if examples.is_empty() {
        return Err(Error::Data(format!("{} contains no examples", tsv.display())));
    }
    check_vocab(&vocab, &examples)?;
    let report = evaluate(&model, &vocab, &examples, strategy, ExecMode::default())?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn load_model<F: Scalar>(path: &Path) -> Result<(TransformerModel<F>, Vocab)> {
    let ck = load_checkpoint::<F>(path)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| Error::Format(format!("{} carries no vocabulary", path.display())))?;
    if vocab.len() != ck.model.config().vocab_size {
        return Err(Error::Format("checkpoint vocabulary does not match its model".into()));
    }
    Ok((ck.model, vocab))
}

pub fn decode(checkpoint: &Path, input: &Path, output: Option<&Path>, strategy: Strategy) -> Result<ExitCode> {
    match load_any(checkpoint)? {
        8 => decode_as::<f64>(checkpoint, input, output, strategy),
        _ => decode_as::<f32>(checkpoint, input, output, strategy),
    }
}

fn decode_as<F: Scalar>(checkpoint: &Path, input: &Path, output: Option<&Path>, strategy: Strategy) -> Result<ExitCode> {
    let (model, vocab) = load_model::<F>(checkpoint)?;
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    let lines: Vec<&str> = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let hyps = transduce(&model, &vocab, &lines, strategy, ExecMode::default())?;
    let mut out = String::new();
    for h in hyps {
        out.push_str(&h);
        out.push('\n');
    }
    match output {
        Some(p) => fs::write(p, out).map_err(io_err(p))?,
        None => print!("{out}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let words = match &a.words {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            text.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from).collect()
        }
        None => builtin_words(),
    };
    let explicit = [a.p_sub, a.p_del, a.p_ins, a.p_swap];
    let cfg = if explicit.iter().any(Option::is_some) {
        let [s, d, i, w] = explicit.map(|p| p.unwrap_or(0.0));
        CorruptionConfig::lowercase_latin(s, d, i, w, a.seed)
    } else {
        CorruptionConfig::with_total(a.noise, a.seed)
    };
    let examples = synthesize(&words, a.count, &cfg).map_err(|e| match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    })?;
    write_tsv(&a.out, &examples)?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let config = match &a.config {
        Some(p) => RunConfig::load(p)?.model_config(a.vocab_size),
        None => ModelConfig {
            vocab_size: a.vocab_size,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        },
    };
    config.validate()?;
    let reports = gradient_check(&config, a.n, a.m, a.seed, a.fault)?;
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    for r in &reports {
        println!("{}\t{}\t{:.3e}", r.name, r.elements, r.worst);
    }
    let pass = worst < a.tolerance;
    println!("{} worst_rel_err={worst:.3e} tolerance={:.1e}", if pass { "PASS" } else { "FAIL" }, a.tolerance);
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn mask_dump(n: usize, m: usize, causal: bool) -> Result<ExitCode> {
    let mask = if causal { build_causal_mask(m)? } else { build_pbd_mask(n, m)? };
    print!("{mask}");
    Ok(ExitCode::SUCCESS)
}

