use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hass_core::bench::{self, BenchCase, Record};
use hass_core::checkpoint::{load_draft, load_target, save_draft, save_target};
use hass_core::corpus::{self, TokenCorpus, Vocab};
use hass_core::drafting::{Drafter, HeadDrafter};
use hass_core::engine::{Decoder, Method, RunReport};
use hass_core::model::{DraftHead, TargetModel};
use hass_core::pretrain::train_target as pretrain;
use hass_core::training::{build_dataset, train_draft as train_head, Dataset};
use hass_core::{HassError, Result, Rng};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    self, set, BenchConfig, CaseSpec, GenerateConfig, NamedPath, PrepareConfig, SweepConfig, TrainDraftConfig, TrainTargetConfig,
};
use crate::{BenchArgs, GenerateArgs, PrepareArgs, TrainDraftArgs, TrainTargetArgs};

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn out_dir(flag: Option<PathBuf>, slot: &mut PathBuf) -> Result<PathBuf> {
    set(slot, flag);
    std::fs::create_dir_all(&*slot)?;
    Ok(slot.clone())
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut cfg: PrepareConfig = config::load(a.common.config.as_deref())?;
    set(&mut cfg.corpus, a.corpus);
    let dir = out_dir(a.common.out_dir, &mut cfg.out_dir)?;
    config::save(&cfg, &dir)?;
    let c = TokenCorpus::from_file(&cfg.corpus)?;
    c.save(&dir)?;
    let report = json!({
        "vocab_size": c.vocab.size(),
        "tokens": c.tokens.len(),
        "train_tokens": c.train().len(),
        "held_out_tokens": c.held_out().len(),
        "source_sha256": c.source_sha256,
    });
    write_json(&report, &dir.join("report.json"))?;
    log::info!("{} tokens over a vocabulary of {}", c.tokens.len(), c.vocab.size());
    Ok(())
}

pub fn train_target(a: TrainTargetArgs) -> Result<()> {
    let mut cfg: TrainTargetConfig = config::load(a.common.config.as_deref())?;
    set(&mut cfg.data_dir, a.data_dir);
    let m = &mut cfg.model;
    set(&mut m.d_model, a.d_model);
    set(&mut m.n_layers, a.n_layers);
    set(&mut m.n_heads, a.n_heads);
    set(&mut m.d_ff, a.d_ff);
    set(&mut m.max_seq_len, a.max_seq_len);
    let p = &mut cfg.pretrain;
    set(&mut p.seq_len, a.seq_len);
    set(&mut p.epochs, a.epochs);
    set(&mut p.batch_size, a.batch_size);
    set(&mut p.learning_rate, a.learning_rate);
    set(&mut p.seed, a.seed);

    let c = TokenCorpus::load(&cfg.data_dir)?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = c.vocab.size();
    } else if cfg.model.vocab_size != c.vocab.size() {
        return Err(HassError::Config(format!(
            "model vocab_size {} does not match the prepared vocabulary of {}",
            cfg.model.vocab_size,
            c.vocab.size()
        )));
    }
    let dir = out_dir(a.common.out_dir, &mut cfg.out_dir)?;
    config::save(&cfg, &dir)?;
    let mut model = TargetModel::<f32>::new(cfg.model.clone(), &mut Rng::new(cfg.pretrain.seed))?;
    log::info!("target: {} parameters", model.num_params());
    let logs = pretrain(&cfg.pretrain, &mut model, c.train(), c.held_out())?;
    write_lines(&logs, &dir.join("metrics.jsonl"))?;
    save_target(&model, cfg.pretrain.seed, json!({ "pretrain": cfg.pretrain }), &dir.join("target.bin"))?;
    let last = logs.last();
    let report = json!({
        "params": model.num_params(),
        "epochs": logs.len(),
        "valid_loss": last.map(|l| l.valid_loss),
        "valid_perplexity": last.map(|l| l.valid_perplexity),
    });
    write_json(&report, &dir.join("report.json"))
}

fn dataset_for(cfg: &TrainDraftConfig, train: &[u32], target: &TargetModel<f32>) -> Result<Dataset> {
    if let Some(path) = cfg.dataset_cache.as_deref().filter(|p| p.exists()) {
        let d = Dataset::load(path)?;
        if d.mode != cfg.train.data_mode || d.seq_len != cfg.dataset.seq_len {
            return Err(HassError::Config(format!(
                "cached dataset {} was built with a different mode or window length",
                path.display()
            )));
        }
        log::info!("dataset: {} cached windows", d.examples.len());
        return Ok(d);
    }
    let mut rng = Rng::derive(cfg.train.seed, 1);
    let d = build_dataset(cfg.train.data_mode, train, target, &cfg.dataset, &mut rng)?;
    if let Some(path) = &cfg.dataset_cache {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        d.save(path)?;
    }
    Ok(d)
}

pub fn train_draft(a: TrainDraftArgs) -> Result<()> {
    let mut cfg: TrainDraftConfig = config::load(a.common.config.as_deref())?;
    set(&mut cfg.data_dir, a.data_dir);
    set(&mut cfg.target, a.target);
    if a.dataset_cache.is_some() {
        cfg.dataset_cache = a.dataset_cache;
    }
    let t = &mut cfg.train;
    set(&mut t.align_steps, a.align_steps);
    set(&mut t.top_k, a.topk_k);
    set(&mut t.top_k_weight, a.topk_weight);
    set(&mut t.cls_weight, a.cls_weight);
    set(&mut t.reg_weight, a.reg_weight);
    set(&mut t.data_mode, a.data_mode);
    set(&mut t.detach_between_forwards, a.detach_between_forwards);
    set(&mut t.train_embedding, a.train_embedding);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.seed, a.seed);
    let d = &mut cfg.dataset;
    set(&mut d.seq_len, a.seq_len);
    set(&mut d.stride, a.stride);
    if a.max_examples.is_some() {
        d.max_examples = a.max_examples;
    }

    let (target, _) = load_target(&cfg.target)?;
    let c = TokenCorpus::load(&cfg.data_dir)?;
    if c.vocab.size() != target.config().vocab_size {
        return Err(HassError::Load("target checkpoint and prepared data use different vocabularies".into()));
    }
    cfg.train.validate(target.config().vocab_size)?;
    let dir = out_dir(a.common.out_dir, &mut cfg.out_dir)?;
    config::save(&cfg, &dir)?;
    let data = dataset_for(&cfg, c.train(), &target)?;
    let mut head = DraftHead::new(&target, &mut Rng::derive(cfg.train.seed, 2));
    let logs = train_head(&cfg.train, &data, &mut head)?;
    write_lines(&logs, &dir.join("metrics.jsonl"))?;
    save_draft(&head, cfg.train.seed, json!({ "train": cfg.train }), &dir.join("draft.bin"))?;
    let report = json!({
        "examples": data.examples.len(),
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.loss),
        "forwards": logs.last().map(|l| &l.forwards),
    });
    write_json(&report, &dir.join("report.json"))
}

/// Trains the sweep's drafters under `dir/drafts` and adds one case per
/// cell (plus vanilla) to `cfg`.
fn train_sweep(sweep: &SweepConfig, cfg: &mut BenchConfig, target: &TargetModel<f32>, dir: &Path) -> Result<()> {
    let c = TokenCorpus::load(&cfg.data_dir)?;
    let cells = sweep.cells();
    if cells.is_empty() {
        return Err(HassError::Config("empty sweep grid".into()));
    }
    let mut data_cfg = TrainDraftConfig {
        data_dir: cfg.data_dir.clone(),
        target: cfg.target.clone(),
        out_dir: dir.join("drafts"),
        dataset_cache: sweep.dataset_cache.clone(),
        dataset: sweep.dataset.clone(),
        train: sweep.train.clone(),
    };
    let data = dataset_for(&data_cfg, c.train(), target)?;
    if !cfg.cases.iter().any(|k| k.method == Method::Vanilla) {
        cfg.cases.push(CaseSpec { name: "vanilla".into(), method: Method::Vanilla, draft: None });
    }
    for (name, train) in cells {
        train.validate(target.config().vocab_size)?;
        let cell_dir = dir.join("drafts").join(&name);
        std::fs::create_dir_all(&cell_dir)?;
        data_cfg.train = train.clone();
        config::save(&data_cfg, &cell_dir)?;
        let mut head = DraftHead::new(target, &mut Rng::derive(train.seed, 2));
        let logs = train_head(&train, &data, &mut head)?;
        write_lines(&logs, &cell_dir.join("metrics.jsonl"))?;
        let path = cell_dir.join("draft.bin");
        save_draft(&head, train.seed, json!({ "train": train }), &path)?;
        log::info!("sweep: trained {name}");
        cfg.cases.push(CaseSpec { name: format!("{name}/{}", sweep.method.name()), method: sweep.method, draft: Some(name.clone()) });
        cfg.drafts.push(NamedPath { name, path });
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = config::load(a.common.config.as_deref())?;
    set(&mut cfg.data_dir, a.data_dir);
    set(&mut cfg.target, a.target);
    if !a.drafts.is_empty() {
        cfg.drafts = a.drafts;
    }
    set(&mut cfg.methods, a.methods);
    set(&mut cfg.temperatures, a.temperatures);
    set(&mut cfg.prompts, a.prompts);
    set(&mut cfg.prompt_len, a.prompt_len);
    set(&mut cfg.seed, a.seed);
    a.decode.apply(&mut cfg.decode);
    if a.sweep_align_steps.is_some() || a.sweep_topk_k.is_some() || a.sweep_topk_weight.is_some() {
        let s = cfg.sweep.get_or_insert_with(SweepConfig::default);
        set(&mut s.align_steps, a.sweep_align_steps);
        set(&mut s.top_k, a.sweep_topk_k);
        set(&mut s.top_k_weight, a.sweep_topk_weight);
    }
    let dir = out_dir(a.common.out_dir, &mut cfg.out_dir)?;
    config::save(&cfg, &dir)?;

    let (target, _) = load_target(&cfg.target)?;
    if let Some(sweep) = cfg.sweep.clone() {
        train_sweep(&sweep, &mut cfg, &target, &dir)?;
    }
    let heads = cfg.drafts.iter().map(|d| load_draft(&d.path, &target).map(|(h, _)| h)).collect::<Result<Vec<_>>>()?;
    let cases = cfg
        .resolved_cases()
        .into_iter()
        .map(|c| {
            let drafter = match &c.draft {
                None => None,
                Some(name) => Some(
                    cfg.drafts
                        .iter()
                        .position(|d| &d.name == name)
                        .ok_or_else(|| HassError::Config(format!("case {:?} names unknown draft {name:?}", c.name)))?,
                ),
            };
            Ok(BenchCase { name: c.name, method: c.method, drafter, decode: cfg.decode.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = TokenCorpus::load(&cfg.data_dir)?;
    let prompts = corpus::prompts(c.held_out(), cfg.prompts, cfg.prompt_len)?;
    let refs: Vec<&DraftHead<f32>> = heads.iter().collect();

    let mut w = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let records = bench::run_bench(&target, &refs, &cases, &prompts, &cfg.temperatures, cfg.seed, |r: &Record| {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    w.flush()?;
    let max_step = cfg.decode.chain_len.max(cfg.decode.tree.depth);
    let summaries = bench::summarize(&records, max_step);
    write_json(&json!({ "cases": summaries }), &dir.join("report.json"))?;
    let table = bench::format_table(&summaries);
    std::fs::write(dir.join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg: GenerateConfig = config::load(a.common.config.as_deref())?;
    set(&mut cfg.data_dir, a.data_dir);
    set(&mut cfg.target, a.target);
    if a.draft.is_some() {
        cfg.draft = a.draft;
    }
    if a.common.out_dir.is_some() {
        cfg.out_dir = a.common.out_dir;
    }
    set(&mut cfg.prompt, a.prompt);
    set(&mut cfg.decode.method, a.method);
    set(&mut cfg.sampling.temperature, a.temperature);
    set(&mut cfg.sampling.top_p, a.top_p);
    set(&mut cfg.sampling.top_k, a.top_k);
    set(&mut cfg.sampling.seed, a.seed);
    a.decode.apply(&mut cfg.decode);
    cfg.trace |= a.trace;

    let vocab = Vocab::load(&cfg.data_dir.join("vocab.json"))?;
    let (target, _) = load_target(&cfg.target)?;
    if vocab.size() != target.config().vocab_size {
        return Err(HassError::Config("target checkpoint and vocabulary differ in size".into()));
    }
    let head = match (&cfg.draft, cfg.decode.method) {
        (_, Method::Vanilla) => None,
        (Some(p), _) => Some(load_draft(p, &target)?.0),
        (None, m) => return Err(HassError::Parameter(format!("{} decoding needs --draft", m.name()))),
    };
    let mut drafter = head.as_ref().map(HeadDrafter::new);
    let dr = drafter.as_mut().map(|d| d as &mut dyn Drafter<f32>);
    let prompt = vocab.encode(&cfg.prompt);
    let mut dec = Decoder::new(&prompt, &target, dr, cfg.decode.clone(), cfg.sampling.clone())?;
    while !dec.is_finished() {
        let m = dec.step()?;
        if cfg.trace {
            eprintln!(
                "cycle {} drafted {} accepted {:?} bonus {:?} ({} tokens)",
                m.cycle,
                m.drafted,
                vocab.decode(&m.accepted),
                vocab.decode(&[m.bonus]),
                m.tokens_generated
            );
        }
    }
    let out = dec.run()?;
    println!("{}{}", cfg.prompt, vocab.decode(&out.tokens));
    if let Some(dir) = cfg.out_dir.clone() {
        config::save(&cfg, &dir)?;
        write_lines(&out.cycles, &dir.join("metrics.jsonl"))?;
        let report: &RunReport = &out.report;
        write_json(&json!({ "report": report, "text": vocab.decode(&out.tokens) }), &dir.join("report.json"))?;
    }
    Ok(())
}
