use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use pat_core::container::{self, find};
use pat_core::data::{generate_dataset, Dataset, RecordMeta};
use pat_core::engine::{embed_images, evaluate_split, load_params, sample_meta, split_by_meta, RunConfig};
use pat_core::eval::{compute_metrics, ranking_list};
use pat_core::gradcheck::{run_suite, toy_objective_check, SUITE_EPSILON};
use pat_core::{oracle, Encoder, EncoderParams, MemoryBank, PatError, SampleMeta, Tensor, TokenRef, TrainState, Trainer};
use serde::Serialize;

use crate::pgm;
use crate::{AttnArgs, Common, Domain, EmbedArgs, EvalArgs, TrainArgs};

const GRAD_TOLERANCE: f64 = 1e-4;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| PatError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn domain_dataset(cfg: &RunConfig, domain: Domain) -> Result<Dataset> {
    let d = &cfg.data;
    let (spec, ids) = match domain {
        Domain::Source => (&d.source, d.source_ids),
        Domain::Target => (&d.target, d.target_ids),
    };
    Ok(generate_dataset(
        ids,
        d.images_per_id,
        spec,
        cfg.train.seed,
        cfg.model.image_h,
        cfg.model.image_w,
    )?)
}

fn write_json_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn meta_tensor(meta: &[SampleMeta]) -> Result<Tensor<f32>> {
    let data = meta.iter().flat_map(|m| [m.id as f32, m.camera as f32]).collect();
    Ok(Tensor::new(vec![meta.len(), 2], data)?)
}

fn meta_from_tensor(t: &Tensor<f32>) -> Result<Vec<SampleMeta>> {
    if t.dims().len() != 2 || t.cols() != 2 {
        bail!(PatError::Format {
            offset: 0,
            msg: format!("metadata must be N x 2, got {:?}", t.dims()),
        });
    }
    Ok((0..t.rows())
        .map(|r| SampleMeta {
            id: t.at(r, 0) as usize,
            camera: t.at(r, 1) as usize,
        })
        .collect())
}

fn rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Ok(Tensor::new(vec![idx.len(), t.cols()], data)?)
}

pub fn gen_data(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    fs::create_dir_all(&args.out)?;
    for (name, domain) in [("source", Domain::Source), ("target", Domain::Target)] {
        let ds = domain_dataset(&cfg, domain)?;
        let named: Vec<(String, Tensor<f32>)> = ds
            .records
            .iter()
            .map(|r| (format!("image/{:05}", r.index), r.image.clone()))
            .collect();
        container::save_container(args.out.join(format!("{name}.patb")), &named)?;
        write_json_lines(&args.out.join(format!("{name}.jsonl")), ds.records.iter().map(RecordMeta::from))?;
        println!("{name}: {} images of {} identities", ds.records.len(), ds.identities.len());
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if args.no_csl {
        cfg.train.ablation.csl_on = false;
    }
    if args.no_psd {
        cfg.train.ablation.psd_on = false;
    }
    let out = &args.common.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let trainer = Trainer::new(cfg)?;
    let mut state = match &args.ckpt {
        Some(path) => TrainState::load(&trainer.config().model, path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => trainer.init_state()?,
    };
    info!(
        "{} steps per epoch, starting at epoch {}",
        trainer.steps_per_epoch(),
        state.epoch
    );
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(args.ckpt.is_some())
            .write(true)
            .truncate(args.ckpt.is_none())
            .open(&log_path)?,
    );
    let ckpt = out.join("checkpoint.patb");
    trainer.run(&mut state, |entry, s| {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
        log.flush()?;
        s.save(&ckpt)?;
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  triplet {:.4}",
            entry.epoch, entry.lr, entry.loss.total, entry.loss.triplet
        );
        Ok(())
    })?;
    let train = trainer.train_retrieval(&state.params)?.to_json();
    let target = trainer.evaluate_target(&state.params)?.to_json();
    let metrics = serde_json::json!({ "train": train, "target": target });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn score_features(path: &Path) -> Result<pat_core::RetrievalResult> {
    let named = container::load_container(path)?;
    let has = |n: &str| named.iter().any(|(k, _)| k == n);
    if has("query") {
        let qm = meta_from_tensor(find(&named, "query_meta")?)?;
        let gm = meta_from_tensor(find(&named, "gallery_meta")?)?;
        return Ok(compute_metrics(find(&named, "query")?, &qm, find(&named, "gallery")?, &gm)?);
    }
    let global = find(&named, "global")?;
    let meta = meta_from_tensor(find(&named, "meta")?)?;
    let (q, g) = split_by_meta(&meta);
    let pick = |idx: &[usize]| idx.iter().map(|&i| meta[i]).collect::<Vec<_>>();
    Ok(compute_metrics(&rows(global, &q)?, &pick(&q), &rows(global, &g)?, &pick(&g))?)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let result = match (&args.features, &args.ckpt) {
        (Some(features), _) => score_features(features)?,
        (None, Some(ckpt)) => {
            let cfg = load_config(&args.common)?;
            let encoder = Encoder::with_default_regions(cfg.model.clone())?;
            let params = load_params(&cfg.model, ckpt)?;
            let ds = domain_dataset(&cfg, args.domain)?;
            evaluate_split(&encoder, &params, &ds, cfg.train.eval_batch)?
        }
        (None, None) => bail!(PatError::Config("eval needs --ckpt or --features".into())),
    };
    let json = serde_json::to_string_pretty(&result.to_json())?;
    fs::create_dir_all(&args.common.out)?;
    fs::write(args.common.out.join("metrics.json"), &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct RankingRow {
    index: usize,
    part: usize,
    neighbors: Vec<pat_core::eval::RankedEntry>,
}

pub fn embed(args: &EmbedArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let encoder = Encoder::with_default_regions(cfg.model.clone())?;
    let params = load_params(&cfg.model, &args.ckpt)?;
    let ds = domain_dataset(&cfg, args.domain)?;
    let emb = embed_images(&encoder, &params, &ds.images(), cfg.train.eval_batch)?;
    let meta = sample_meta(&ds);
    let mut named = vec![("global".to_string(), emb.global.clone())];
    for (i, l) in emb.locals.iter().enumerate() {
        named.push((format!("part/p{}", i + 1), l.clone()));
    }
    named.push(("meta".into(), meta_tensor(&meta)?));
    fs::create_dir_all(&args.common.out)?;
    let path = args.common.out.join("embeddings.patb");
    container::save_container(&path, &named)?;
    println!("{} samples x {} dims -> {}", emb.global.rows(), emb.global.cols(), path.display());

    if let Some(n) = args.top_n {
        let bank = MemoryBank::from_features(emb.locals.clone(), ds.ids(), 1.0)?;
        let mut out = Vec::new();
        for part in 0..bank.num_parts() {
            for i in 0..bank.len() {
                out.push(RankingRow {
                    index: i,
                    part: part + 1,
                    neighbors: ranking_list(&bank, part, emb.locals[part].row(i), Some(i), n)?,
                });
            }
        }
        let path = args.common.out.join("rankings.jsonl");
        write_json_lines(&path, out)?;
        println!("part rankings -> {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let mut reports = run_suite(seed)?;
    reports.push(toy_objective_check(seed, SUITE_EPSILON, 4)?);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_relative_error <= GRAD_TOLERANCE;
        println!(
            "{:<24} {:>6} coords  max rel err {:.3e}  {}",
            r.op,
            r.coordinates,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check above {GRAD_TOLERANCE:e} for {}", failed.join(", "));
    }
    Ok(())
}

pub fn attnmap(args: &AttnArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let tokens = args
        .tokens
        .iter()
        .map(|t| t.parse::<TokenRef>())
        .collect::<Result<Vec<_>, _>>()?;
    let encoder = Encoder::with_default_regions(cfg.model.clone())?;
    let params = match &args.ckpt {
        Some(p) => load_params(&cfg.model, p)?,
        None => EncoderParams::init(&cfg.model, cfg.train.seed)?,
    };
    let ds = domain_dataset(&cfg, args.domain)?;
    let record = ds.records.get(args.index).ok_or(PatError::Index {
        what: "sample",
        index: args.index,
        len: ds.records.len(),
    })?;
    let out = encoder.forward(&params, &[&record.image], true)?;
    fs::create_dir_all(&args.common.out)?;
    for (name, token) in args.tokens.iter().zip(tokens) {
        let map = encoder.fused_attention_map(&out, 0, token)?;
        let path = args.common.out.join(format!("attn_{name}_{:05}.pgm", args.index));
        pgm::write_map(&path, &map, cfg.model.patch_size)?;
        println!("{name} -> {}", path.display());
    }
    Ok(())
}

pub fn oracle_check(seed: u64) -> Result<()> {
    let reports = oracle::run_all(seed)?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!("oracle mismatch in {}", failed.join(", "));
    }
    Ok(())
}
