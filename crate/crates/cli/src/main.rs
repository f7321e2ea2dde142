//! `gah`: command-line driver for the group-activity hashing pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration and file-format problems,
//! 3 for numeric failures during optimization, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use gah_core::filter::{fit_filter_with_report, FilterMatrix};
use gah_core::io::{self, CodeSet, EvalReport};
use gah_core::retrieval::{map_at_k, query_topk};
use gah_core::train::{
    self, build_index, code_records, encode_dataset, load_dataset, read_run_config, Model,
    RunConfig,
};
use gah_core::{synth, Error};

#[derive(Parser)]
#[command(name = "gah", version, about = "group-activity video hashing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory from a run config's generator
    /// block.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's sample count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for final.ckpt, best.ckpt, and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode a dataset with a trained checkpoint into codes.gahc and
    /// labels.json.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to encode.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the code-regeneration filter on a multi-layer code file.
    FitFilter {
        /// Code file with at least two layers.
        #[arg(long)]
        codes: PathBuf,
        /// Filter file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate shallower code layers from each sample's deepest stored
    /// layer.
    DeriveCodes {
        #[arg(long)]
        filter: PathBuf,
        /// Code file whose last layer seeds the derivation.
        #[arg(long)]
        codes: PathBuf,
        /// Layers to emit, shallow to deep (default: as many as the input
        /// holds).
        #[arg(long)]
        layers: Option<usize>,
        /// Code file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the in-memory index over one code layer and report its shape.
    Index {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Rank all stored codes against one sample's code; the sample itself
    /// lists first at distance zero.
    Query {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Sample id (a labels.json key) whose code is the query.
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Retrieval mAP@k of query codes against a database.
    Eval {
        #[arg(long)]
        query_codes: PathBuf,
        #[arg(long)]
        query_labels: PathBuf,
        #[arg(long)]
        db_codes: PathBuf,
        #[arg(long)]
        db_labels: PathBuf,
        /// Label space to score: activity, appearance, or video-id.
        #[arg(long, default_value = "activity")]
        label_space: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Drop each query's own record from its ranking; only meaningful
        /// when queries and database are the same set.
        #[arg(long, default_value_t = false)]
        exclude_self: bool,
        /// Optional report file with per-query average precisions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one sample's per-layer attention matrices as array files.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample id within the dataset.
        #[arg(long)]
        sample: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::Io(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut config =
        read_run_config(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn emit(value: serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed, count } => {
            let config = load_config(&config, seed)?;
            let (gen_config, samples) = config.generator_config()?;
            let count = count.unwrap_or(samples);
            synth::write_dataset(&out, &gen_config, count, train::worker_threads())?;
            emit(json!({ "dir": out, "samples": count, "seed": gen_config.seed }))
        }
        Command::Train { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let outcome = train::train(&config, &out)?;
            emit(serde_json::to_value(&outcome)?)
        }
        Command::Encode { checkpoint, dataset, out } => {
            let model = Model::load(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let (codes, labels) = encode_dataset(&model, &ds, train::worker_threads())?;
            std::fs::create_dir_all(&out)?;
            io::write_codes(&out.join("codes.gahc"), &codes)?;
            io::write_labels(&out.join("labels.json"), &labels)?;
            emit(json!({
                "dir": out,
                "samples": codes.samples(),
                "layers": codes.upsilon(),
                "k": codes.k(),
                "payload_bytes": codes.payload_bytes(),
            }))
        }
        Command::FitFilter { codes, out } => {
            let codes = io::read_codes(&codes)?;
            let (filter, report) = fit_filter_with_report(&codes)?;
            io::write_filter(&out, filter.matrix())?;
            if report.underdetermined {
                eprintln!(
                    "warning: {} code rows for a {k}x{k} filter; the fit is underdetermined",
                    codes.samples() * (codes.upsilon() - 1),
                    k = codes.k()
                );
            }
            emit(json!({
                "filter": out,
                "k": filter.k(),
                "steps": report.steps,
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "underdetermined": report.underdetermined,
            }))
        }
        Command::DeriveCodes { filter, codes, layers, out } => {
            let filter = FilterMatrix::new(io::read_filter(&filter)?)?;
            let codes = io::read_codes(&codes)?;
            if filter.k() != codes.k() {
                return Err(Error::Config(format!(
                    "filter is {}x{0}, codes have K={}",
                    filter.k(),
                    codes.k()
                ))
                .into());
            }
            let layers = layers.unwrap_or_else(|| codes.upsilon());
            let mut derived = CodeSet::new(codes.k(), layers);
            for sample in 0..codes.samples() {
                let deepest =
                    io::unpack_code(codes.code(sample, codes.upsilon() - 1), codes.k());
                let chain = filter.derive_chain(&deepest, layers)?;
                let packed: Vec<Vec<u8>> =
                    chain.iter().map(|bits| io::pack_code(bits)).collect();
                derived.push(&packed)?;
            }
            io::write_codes(&out, &derived)?;
            emit(json!({
                "codes": out,
                "samples": derived.samples(),
                "layers": derived.upsilon(),
                "k": derived.k(),
            }))
        }
        Command::Index { codes, labels, layer } => {
            let codes = io::read_codes(&codes)?;
            let labels = io::read_labels(&labels)?;
            let index = build_index(&codes, &labels, layer)?;
            emit(json!({
                "records": index.len(),
                "k": codes.k(),
                "layer": layer,
                "code_bytes": codes.bytes_per_code(),
            }))
        }
        Command::Query { codes, labels, id, layer, k } => {
            let codes = io::read_codes(&codes)?;
            let labels = io::read_labels(&labels)?;
            let position = labels
                .keys()
                .position(|key| *key == id)
                .ok_or_else(|| Error::Config(format!("no sample {id:?} in the labels file")))?;
            let index = build_index(&codes, &labels, layer)?;
            let result = query_topk(&index, codes.code(position, layer), k)?;
            let ids: Vec<&String> = labels.keys().collect();
            let hits: Vec<serde_json::Value> = result
                .hits
                .iter()
                .map(|hit| json!({ "id": ids[hit.id as usize], "distance": hit.distance }))
                .collect();
            emit(json!({ "query": id, "layer": layer, "hits": hits }))
        }
        Command::Eval {
            query_codes,
            query_labels,
            db_codes,
            db_labels,
            label_space,
            k,
            layer,
            exclude_self,
            out,
        } => {
            let db_codes = io::read_codes(&db_codes)?;
            let db_labels = io::read_labels(&db_labels)?;
            let index = build_index(&db_codes, &db_labels, layer)?;
            let query_codes = io::read_codes(&query_codes)?;
            let query_labels = io::read_labels(&query_labels)?;
            let queries = code_records(&query_codes, &query_labels, layer)?;
            let score = map_at_k(&queries, &index, &label_space, k, exclude_self)?;
            let report = EvalReport {
                metric: "map".into(),
                label_space: label_space.clone(),
                k,
                value: score.value,
                per_query: score.per_query.iter().map(|&(_, ap)| ap).collect(),
            };
            if let Some(path) = &out {
                io::write_report(path, &report)?;
            }
            emit(json!({
                "metric": "map",
                "label_space": label_space,
                "k": k,
                "layer": layer,
                "value": score.value,
                "queries": score.per_query.len(),
            }))
        }
        Command::AttnDump { checkpoint, dataset, sample, out } => {
            let model = Model::load(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let target = ds
                .samples
                .iter()
                .find(|s| s.id == sample)
                .ok_or_else(|| {
                    Error::Config(format!("no sample {sample:?} in {}", dataset.display()))
                })?;
            let attention = model.attention(target)?;
            std::fs::create_dir_all(&out)?;
            let mut files = Vec::new();
            for (layer, (temporal, spatial)) in attention.iter().enumerate() {
                for (tag, matrix) in [("t", temporal), ("s", spatial)] {
                    let name = format!("attn.{layer}.{tag}.gahm");
                    io::write_array(&out.join(&name), matrix)?;
                    files.push(name);
                }
            }
            emit(json!({ "sample": sample, "layers": attention.len(), "files": files }))
        }
    }
}
