use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::info;
use semgen::checkpoint::Checkpoint;
use semgen::config::{AblationPoint, RunConfig};
use semgen::data::{
    corpus_stats, find_occurrence, format_stats_table, load_corpus, partition_seen_unseen, serialize_corpus,
    tokenize, SplitName, Vocabulary,
};
use semgen::metrics::{evaluate, EvalOptions};
use semgen::model::{build_examples, Example, Model};
use semgen::pipeline::{contextual_provider, entry_tokens, Prepared};
use semgen::training::{log_lines, pretrain_decoder, train, LogRecord, TrainOutcome};
use serde_json::json;

use crate::run_dir::RunDir;
use crate::{AblateArgs, Cli, Command, DataCommand, EvalArgs, GenerateArgs, SplitArg, TrainArgs, DATA_DIR_ENV};

/// Exit status 1 for anything caused by inputs; 2 for numerical or
/// internal failures.
pub fn is_user_error(e: &anyhow::Error) -> bool {
    e.chain()
        .find_map(|c| c.downcast_ref::<semgen::Error>())
        .is_none_or(semgen::Error::is_user_error)
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => default_config(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_config() -> RunConfig {
    let dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let mut cfg = RunConfig::default();
    cfg.data.corpus = dir.join("corpus.jsonl");
    let optional = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    cfg.data.lm_corpus = optional("lm.txt");
    cfg.data.stopwords = optional("stopwords.txt");
    cfg
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Data(DataCommand::Validate) => "data-validate",
        Command::Data(DataCommand::Split) => "data-split",
        Command::Data(DataCommand::Stats) => "data-stats",
        Command::Data(DataCommand::Vocab { .. }) => "data-vocab",
        Command::Pretrain => "pretrain",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Generate(_) => "generate",
        Command::Ablate(_) => "ablate",
    }
}

pub fn run(cli: &Cli, command_line: &str) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Command::Generate(args) = &cli.command {
        // Generation prints to stdout and only writes files when asked to.
        let dir = match &cli.out_dir {
            Some(p) => Some(RunDir::create(p, command_line, &cfg)?),
            None => None,
        };
        let r = generate(&cfg, args, dir.as_ref());
        if let Some(d) = &dir {
            d.finish(&r)?;
        }
        return r;
    }
    let out = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command_name(&cli.command)));
    let dir = RunDir::create(&out, command_line, &cfg)?;
    let r = match &cli.command {
        Command::Data(DataCommand::Validate) => data_validate(&cfg, &dir),
        Command::Data(DataCommand::Split) => data_split(&cfg, &dir),
        Command::Data(DataCommand::Stats) => data_stats(&cfg, &dir),
        Command::Data(DataCommand::Vocab { content }) => data_vocab(&cfg, &dir, *content),
        Command::Pretrain => pretrain(&cfg, &dir),
        Command::Train(args) => train_cmd(&cfg, &dir, args),
        Command::Eval(args) => eval(&cfg, &dir, args),
        Command::Ablate(args) => ablate(&cfg, &dir, args),
        Command::Generate(_) => unreachable!("handled above"),
    };
    dir.finish(&r)?;
    r
}

fn data_validate(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (_, report) = load_corpus(&cfg.data.corpus)?;
    let mut text = dir.text_header();
    let _ = writeln!(text, "{}", report.summary());
    for r in &report.rejected {
        let _ = writeln!(text, "line {}: {}", r.line, r.reason);
    }
    dir.write("validation.txt", &text)?;
    println!("{}", report.summary());
    Ok(())
}

fn data_split(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    dir.write("splits.tsv", &format!("{}{}", dir.text_header(), prep.splits.manifest()))?;
    for name in SplitName::ALL {
        dir.write(&format!("{name}.jsonl"), &serialize_corpus(prep.splits.get(name)))?;
    }
    for name in SplitName::ALL {
        println!("{name}: {} entries", prep.splits.get(name).len());
    }
    Ok(())
}

fn data_stats(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let stats = corpus_stats(&prep.splits);
    let table = format_stats_table(&stats);
    dir.write("stats.txt", &format!("{}{table}", dir.text_header()))?;
    let v = json!({ "run": dir.provenance(), "splits": stats });
    dir.write("stats.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
    print!("{table}");
    Ok(())
}

fn data_vocab(cfg: &RunConfig, dir: &RunDir, content: bool) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let vocab = if content {
        let stop = Prepared::stopwords(cfg)?;
        Vocabulary::build(entry_tokens(&prep.splits.train), cfg.data.vocab_size, &stop)?
    } else {
        prep.vocab.clone()
    };
    vocab.save(&dir.file("vocab.txt"))?;
    let mut v = dir.provenance();
    v["size"] = vocab.len().into();
    v["fingerprint"] = vocab.fingerprint().into();
    v["content_words"] = content.into();
    dir.write("vocab.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
    println!("{} tokens, fingerprint {}", vocab.len(), vocab.fingerprint());
    Ok(())
}

fn progress(r: &LogRecord) {
    match r.valid_ppl {
        Some(p) => info!("{} epoch {} step {}: loss {:.4}, ppl {:.4}{}", r.phase, r.epoch, r.step, r.loss, p, if r.best { " *" } else { "" }),
        None => info!("{} epoch {} step {}: loss {:.4}", r.phase, r.epoch, r.step, r.loss),
    }
}

/// Runs `body`, writing whatever log it produced even when it fails.
fn logged<T>(dir: &RunDir, name: &str, body: impl FnOnce(&mut dyn FnMut(&LogRecord)) -> Result<T>) -> Result<T> {
    let records = RefCell::new(Vec::new());
    let r = body(&mut |rec: &LogRecord| {
        progress(rec);
        records.borrow_mut().push(rec.clone());
    });
    dir.write(name, &(dir.json_header() + &log_lines(&records.borrow())))?;
    r
}

fn checkpoint_meta(dir: &RunDir, extra: serde_json::Value) -> serde_json::Value {
    let mut v = dir.provenance();
    if let (Some(m), Some(e)) = (v.as_object_mut(), extra.as_object()) {
        m.extend(e.clone());
    }
    v
}

fn pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let sentences = prep.lm_ids();
    if sentences.is_empty() {
        bail!("pretraining needs data.lm_corpus");
    }
    let mut model = prep.model(cfg)?;
    let epochs = cfg.train.pretrain_epochs;
    let history = logged(dir, "pretrain_log.jsonl", |cb| {
        Ok(pretrain_decoder(&mut model, &sentences, &cfg.train, epochs, cfg.seed, cb)?)
    })?;
    let meta = checkpoint_meta(dir, json!({ "phase": "pretrain", "epochs": epochs }));
    Checkpoint::from_model(&model, &prep.vocab, meta).save(&dir.file("pretrain.ckpt"))?;
    if let Some(last) = history.last() {
        println!("pretrained {} epochs, final loss {:.4}", last.epoch, last.loss);
    }
    Ok(())
}

fn same_vocabulary(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    let (a, b) = (ck.vocab.fingerprint(), vocab.fingerprint());
    if a != b {
        return Err(semgen::Error::Checkpoint(format!(
            "vocabulary fingerprint mismatch: checkpoint {} vs data {}",
            &a[..12],
            &b[..12]
        ))
        .into());
    }
    Ok(())
}

fn outcome_json(o: &TrainOutcome) -> serde_json::Value {
    json!({
        "best_valid_ppl": o.best_valid_ppl,
        "best_epoch": o.best_epoch,
        "epochs_run": o.epochs_run,
        "steps": o.steps,
        "stop": o.stop,
    })
}

fn train_cmd(cfg: &RunConfig, dir: &RunDir, args: &TrainArgs) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let (train_set, valid_set) = prep.train_valid(cfg)?;
    let mut model = prep.model(cfg)?;
    if let Some(path) = &args.init {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        same_vocabulary(&ck, &prep.vocab)?;
        let n = model.warm_start(&ck.store)?;
        info!("warm start: {n} tensors copied from {}", path.display());
    }
    info!(
        "{} model, {} parameters, {} training / {} validation examples",
        model.config.kind,
        model.config.parameter_count(model.vocab_size),
        train_set.len(),
        valid_set.len()
    );
    let outcome = logged(dir, "train_log.jsonl", |cb| {
        Ok(train(&mut model, &train_set, &valid_set, &cfg.train, cfg.seed, cb)?)
    })?;
    let summary = outcome_json(&outcome);
    let meta = checkpoint_meta(dir, summary.clone());
    Checkpoint::from_model(&model, &prep.vocab, meta).save(&dir.file("model.ckpt"))?;
    let mut v = dir.provenance();
    v["outcome"] = summary;
    dir.write("train_summary.json", &(serde_json::to_string_pretty(&v)? + "\n"))?;
    println!(
        "best validation perplexity {:.4} at epoch {} ({} epochs, stop: {:?})",
        outcome.best_valid_ppl, outcome.best_epoch, outcome.epochs_run, outcome.stop
    );
    Ok(())
}

fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn eval(cfg: &RunConfig, dir: &RunDir, args: &EvalArgs) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    same_vocabulary(&ck, &prep.vocab)?;
    let (model, vocab) = ck.into_model()?;
    let provider = contextual_provider(&cfg.data, &model.config)?;
    let split = match args.split {
        SplitArg::Train => SplitName::Train,
        SplitArg::Valid => SplitName::Valid,
        SplitArg::Test => SplitName::Test,
    };
    let entries = prep.splits.get(split);
    let familiarity = partition_seen_unseen(&prep.splits.train, entries);
    let opts = EvalOptions {
        temperature: cfg.generate.temperature,
        max_len: cfg.generate.max_len,
        seed: cfg.seed,
        batch_size: cfg.train.batch_size,
    };
    let report = evaluate(&model, &vocab, entries, &familiarity, provider.as_ref(), opts)?;
    dir.write("eval.jsonl", &(dir.json_header() + &report.to_json_lines()))?;
    let table = format!("Split: {split}\n{}", report.table());
    dir.write("eval.txt", &(dir.text_header() + &table))?;
    print!("{table}");
    Ok(())
}

fn generate(cfg: &RunConfig, args: &GenerateArgs, dir: Option<&RunDir>) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let fingerprint = ck.vocab.fingerprint();
    let (model, vocab) = ck.into_model()?;
    let provider = contextual_provider(&cfg.data, &model.config)?;
    let temperature = args.temperature.unwrap_or(cfg.generate.temperature);
    let word = args.word.trim().to_lowercase();
    if !semgen::data::is_alphabetic(&word) {
        bail!("word `{}` must be purely alphabetic", args.word);
    }
    let mut lines = String::new();
    for (i, text) in args.contexts.iter().enumerate() {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            bail!("context {} is empty", i + 1);
        }
        let target = find_occurrence(&word, &tokens);
        let key = format!("generate:{i}");
        let contextual = match &provider {
            Some(p) => Some(p.embed(&key, &word, &tokens, target)?),
            None => None,
        };
        let example = Example {
            entry_id: key,
            context_index: 0,
            word: word.clone(),
            word_id: vocab.id(&word),
            context: vocab.encode(&tokens),
            contextual,
            definition: Vec::new(),
            usage: None,
        };
        let seed = cfg.seed.wrapping_add(i as u64);
        let out = model.generate(&example, temperature, cfg.generate.max_len, seed)?;
        let mut v = json!({
            "word": word,
            "context": tokens.join(" "),
            "definition": vocab.decode(&out.definition).join(" "),
            "unknown_word": out.unknown_word,
            "word_in_context": target.is_some(),
            "model": model.config.kind.as_str(),
            "temperature": temperature,
            "seed": seed,
            "vocab_fingerprint": fingerprint,
        });
        if let Some(u) = &out.usage {
            v["usage"] = vocab.decode(u).join(" ").into();
        }
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    print!("{lines}");
    if let Some(d) = dir {
        d.write("generations.jsonl", &(d.json_header() + &lines))?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, dir: &RunDir, args: &AblateArgs) -> Result<()> {
    let prep = Prepared::load(cfg)?;
    let epochs = args.epochs.unwrap_or(cfg.train.max_epochs);
    let test = &prep.splits.test;
    let familiarity = partition_seen_unseen(&prep.splits.train, test);
    let mut records = dir.json_header();
    let mut rows = Vec::new();
    for point in AblationPoint::grid() {
        let mut pcfg = cfg.clone();
        point.apply(&mut pcfg.model);
        pcfg.train.max_epochs = epochs;
        pcfg.validate()?;
        let provider = contextual_provider(&pcfg.data, &pcfg.model)?;
        let train_set = build_examples(&prep.splits.train, &prep.vocab, provider.as_ref())?;
        let valid_set = if pcfg.data.valid_on_train {
            train_set.clone()
        } else {
            build_examples(&prep.splits.valid, &prep.vocab, provider.as_ref())?
        };
        let mut model = Model::new(pcfg.model.clone(), &prep.word_vectors.vectors, pcfg.seed)?;
        let params: usize = model.store.iter().map(|(_, p)| p.value.len()).sum();
        let expected = pcfg.model.parameter_count(model.vocab_size);
        if params != expected {
            return Err(semgen::Error::Precondition(format!(
                "{}: {params} parameters instantiated, formula gives {expected}",
                point.label()
            ))
            .into());
        }
        info!("ablation {}: {params} parameters", point.label());
        let outcome = train(&mut model, &train_set, &valid_set, &pcfg.train, pcfg.seed, progress)
            .with_context(|| point.label())?;
        let (bleu, rouge) = if test.is_empty() {
            (None, None)
        } else {
            let opts = EvalOptions {
                temperature: pcfg.generate.temperature,
                max_len: pcfg.generate.max_len,
                seed: pcfg.seed,
                batch_size: pcfg.train.batch_size,
            };
            let r = evaluate(&model, &prep.vocab, test, &familiarity, provider.as_ref(), opts)?;
            (Some(r.bleu), Some(r.rouge_l))
        };
        let rec = json!({
            "record": "ablation",
            "gate": point.gate,
            "embeddings": point.features.label(),
            "init": point.init.as_str(),
            "parameters": params,
            "valid_ppl": outcome.best_valid_ppl,
            "bleu": bleu,
            "rouge_l": rouge,
        });
        records.push_str(&rec.to_string());
        records.push('\n');
        rows.push((point, params, outcome.best_valid_ppl, bleu, rouge));
    }
    dir.write("ablation.jsonl", &records)?;

    let pct = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut table = format!(
        "{:<8}{:<8}{:<9}{:>12}{:>12}{:>9}{:>9}\n",
        "Gate", "Embed", "s0", "Params", "PPL", "BLEU", "ROUGE-L"
    );
    for (p, params, ppl, bleu, rouge) in &rows {
        let _ = writeln!(
            table,
            "{:<8}{:<8}{:<9}{:>12}{:>12.3}{:>9}{:>9}",
            if p.gate { "on" } else { "off" },
            p.features.label(),
            p.init.as_str(),
            params,
            ppl,
            pct(*bleu),
            pct(*rouge)
        );
    }
    dir.write("ablation.txt", &(dir.text_header() + &table))?;
    print!("{table}");
    Ok(())
}
