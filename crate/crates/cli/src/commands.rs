//! The five subcommands. Each reads and writes files in the run directory
//! and records a JSON manifest echoing the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use wlrn::data::{build_dataset, load_dataset, save_dataset, BagDataset, Split};
use wlrn::net::{load_net, save_net, DescriptorNet};
use wlrn::retrieval::{evaluate_matching, evaluate_vlad, kmeans, sweep_csv, sweep_tau, RetrievalIndex, Scores};
use wlrn::seed::derive_seed;
use wlrn::training::{loss_curve_csv, train_from, RoundRecord};

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.wlrn";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const TAU_SWEEP_FILE: &str = "tau_sweep.csv";
pub const EVAL_MATCH_FILE: &str = "eval_match.csv";
pub const EVAL_VLAD_FILE: &str = "eval_vlad.csv";

pub fn dataset_path(out: &Path, split: Split) -> PathBuf {
    out.join(format!("{split}.bag"))
}

fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.json"))
}

/// Writes through a temporary sibling so a failed run never leaves a
/// partial file under the final name.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write(&tmp).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |p| Ok(fs::write(p, text)?))
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[&str], results: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config": cfg,
        "outputs": outputs,
        "results": results,
    });
    write_text(
        &manifest_path(&cfg.out, command),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<BagDataset> {
    let path = dataset_path(&cfg.out, split);
    load_dataset(&path).with_context(|| format!("loading {} (run gen-data first)", path.display()))
}

fn load_model(cfg: &RunConfig) -> Result<DescriptorNet> {
    let path = cfg.out.join(MODEL_FILE);
    load_net(&path).with_context(|| format!("loading {} (run train first)", path.display()))
}

/// The untrained network training starts from.
pub fn initial_net(cfg: &RunConfig) -> DescriptorNet {
    DescriptorNet::init(derive_seed(cfg.seed, "init", 0))
}

/// Object ids of the three splits: consecutive, disjoint ranges.
pub fn split_object_ids(cfg: &RunConfig) -> [Vec<u32>; 3] {
    let [a, b, c] = cfg.data.split_sizes().map(|s| s as u32);
    [(0..a).collect(), (a..a + b).collect(), (a + b..a + b + c).collect()]
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let data_cfg = cfg.data.data_config();
    let seed = derive_seed(cfg.seed, "data", 0);
    let mut outputs = Vec::new();
    let mut counts = serde_json::Map::new();
    for (split, ids) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .zip(split_object_ids(cfg))
    {
        eprintln!("generating {split}: {} objects", ids.len());
        let ds = build_dataset(&ids, split, &data_cfg, seed)?;
        let path = dataset_path(&cfg.out, split);
        write_atomic(&path, |p| Ok(save_dataset(&ds, p)?))?;
        counts.insert(split.to_string(), json!({"objects": ids.len(), "bags": ds.bags.len()}));
        outputs.push(format!("{split}.bag"));
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(cfg, "gen-data", &outputs, counts.into())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub curve: Vec<RoundRecord>,
    pub best_round: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let trainset = load_split(cfg, Split::Train)?;
    let valset = load_split(cfg, Split::Val)?;
    let tc = cfg.train_config()?;
    let outcome = train_from(initial_net(cfg), &trainset, &valset, &tc, |r| {
        eprintln!(
            "round {:>3}  train {:.6}  val {:.6}  lr {}",
            r.round, r.train_loss, r.val_loss, r.lr
        );
    })?;
    if let Some(r) = outcome.curve.iter().find(|r| !r.train_loss.is_finite()) {
        bail!("training loss is not finite in round {}", r.round);
    }
    write_atomic(&cfg.out.join(MODEL_FILE), |p| Ok(save_net(&outcome.net, p)?))?;
    write_text(&cfg.out.join(LOSS_CURVE_FILE), &loss_curve_csv(&outcome.curve))?;
    let last = outcome.curve.last().expect("at least one round");
    write_manifest(
        cfg,
        "train",
        &[MODEL_FILE, LOSS_CURVE_FILE],
        json!({
            "best_round": outcome.best_round,
            "first_val_loss": outcome.curve[0].val_loss,
            "final_val_loss": last.val_loss,
        }),
    )?;
    Ok(TrainSummary {
        curve: outcome.curve,
        best_round: outcome.best_round,
    })
}

/// Scores of one model on one split at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: &'static str,
    pub split: String,
    pub tau: f64,
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
}

impl ReportRow {
    fn new(model: &'static str, split: Split, tau: f64, s: Scores) -> Self {
        Self {
            model,
            split: split.to_string(),
            tau,
            nn: s.nn,
            ft: s.ft,
            st: s.st,
        }
    }
}

fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("model,split,tau,NN,FT,ST\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.split, r.tau, r.nn, r.ft, r.st
        ));
    }
    out
}

/// Threshold tuned on the validation split, then scores on the test split
/// for the trained and the untrained network, plus the trained network on
/// its own training split.
pub fn eval_match(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let trained = load_model(cfg)?;
    let valset = load_split(cfg, Split::Val)?;
    let testset = load_split(cfg, Split::Test)?;
    let trainset = load_split(cfg, Split::Train)?;
    let grid = &cfg.retrieval.tau_grid;

    let trained_sweep = sweep_tau(&RetrievalIndex::describe(&trained, &valset)?, grid)?;
    let tau = trained_sweep.best_tau;
    let mut rows = vec![
        ReportRow::new(
            "trained",
            Split::Test,
            tau,
            evaluate_matching(&RetrievalIndex::describe(&trained, &testset)?, tau)?,
        ),
        ReportRow::new(
            "trained",
            Split::Train,
            tau,
            evaluate_matching(&RetrievalIndex::describe(&trained, &trainset)?, tau)?,
        ),
    ];
    let random = initial_net(cfg);
    let random_tau = sweep_tau(&RetrievalIndex::describe(&random, &valset)?, grid)?.best_tau;
    rows.push(ReportRow::new(
        "random",
        Split::Test,
        random_tau,
        evaluate_matching(&RetrievalIndex::describe(&random, &testset)?, random_tau)?,
    ));
    for r in &rows {
        eprintln!(
            "{:<8} {:<5} tau {:<5} NN {:.4} FT {:.4} ST {:.4}",
            r.model, r.split, r.tau, r.nn, r.ft, r.st
        );
    }
    write_text(&cfg.out.join(TAU_SWEEP_FILE), &sweep_csv(&trained_sweep.rows))?;
    write_text(&cfg.out.join(EVAL_MATCH_FILE), &report_csv(&rows))?;
    write_manifest(
        cfg,
        "eval-match",
        &[TAU_SWEEP_FILE, EVAL_MATCH_FILE],
        serde_json::to_value(&rows)?,
    )?;
    Ok(rows)
}

/// VLAD scores of one model at one codebook size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VladRow {
    pub model: &'static str,
    pub k: usize,
    pub vlad_dim: usize,
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
}

/// For every k, fits a codebook on validation descriptors and scores VLAD
/// retrieval on the test split, for the trained and the untrained network.
pub fn eval_vlad(cfg: &RunConfig) -> Result<Vec<VladRow>> {
    cfg.validate()?;
    let trained = load_model(cfg)?;
    let valset = load_split(cfg, Split::Val)?;
    let testset = load_split(cfg, Split::Test)?;
    let available = valset.bags.len() * valset.bag_size;
    if let Some(k) = cfg.retrieval.k.iter().find(|&&k| k > available) {
        bail!("k = {k} exceeds the {available} descriptors of the validation split");
    }
    let mut rows = Vec::new();
    for (model, net) in [("trained", trained), ("random", initial_net(cfg))] {
        let tuning = RetrievalIndex::describe(&net, &valset)?.stacked_rows()?;
        let test = RetrievalIndex::describe(&net, &testset)?;
        for &k in &cfg.retrieval.k {
            let fit = kmeans(
                &tuning,
                k,
                derive_seed(cfg.seed, "kmeans", k as u64),
                cfg.retrieval.kmeans_iters,
            )?;
            let s = evaluate_vlad(&test, &fit.codebook)?;
            let row = VladRow {
                model,
                k,
                vlad_dim: k * fit.codebook.dim(),
                nn: s.nn,
                ft: s.ft,
                st: s.st,
            };
            eprintln!(
                "{:<8} k {:<3} dim {:<5} NN {:.4} FT {:.4} ST {:.4}",
                model, k, row.vlad_dim, s.nn, s.ft, s.st
            );
            rows.push(row);
        }
    }
    let mut csv = String::from("model,k,vlad_dim,NN,FT,ST\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.k, r.vlad_dim, r.nn, r.ft, r.st
        ));
    }
    write_text(&cfg.out.join(EVAL_VLAD_FILE), &csv)?;
    write_manifest(cfg, "eval-vlad", &[EVAL_VLAD_FILE], serde_json::to_value(&rows)?)?;
    Ok(rows)
}

/// Matching scores of the trained network on the validation split for
/// every threshold of the grid.
pub fn sweep(cfg: &RunConfig) -> Result<f64> {
    cfg.validate()?;
    let trained = load_model(cfg)?;
    let valset = load_split(cfg, Split::Val)?;
    let result = sweep_tau(&RetrievalIndex::describe(&trained, &valset)?, &cfg.retrieval.tau_grid)?;
    eprintln!("best tau {} (NN {:.4})", result.best_tau, result.best.nn);
    write_text(&cfg.out.join(TAU_SWEEP_FILE), &sweep_csv(&result.rows))?;
    write_manifest(
        cfg,
        "sweep-tau",
        &[TAU_SWEEP_FILE],
        json!({"best_tau": result.best_tau, "NN": result.best.nn, "FT": result.best.ft, "ST": result.best.st}),
    )?;
    Ok(result.best_tau)
}
