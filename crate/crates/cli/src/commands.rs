use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use feddcg_core::gradcheck::{run_gradcheck, GradcheckResult};
use feddcg_core::inference::{evaluate, Aggregator, EvalResults};
use feddcg_core::protocol::{init_round, run_round, RoundState};
use feddcg_core::store::{StoreManifest, DEFAULT_TOKEN_LEN};
use feddcg_core::{
    generate_synthetic, load_store, partition_clients, save_store, Checkpoint, EmbeddingStore, Error,
    SyntheticSpec, TextEncoderStub,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{parse_aggregator, CliError};

pub const ROUND_LOG: &str = "rounds.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const RESULTS: &str = "results.json";
pub const TABLE: &str = "table.txt";

pub fn checkpoint_name(round: usize) -> String {
    format!("checkpoint-{round:05}.fdcp")
}

#[derive(Debug, Clone, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub domains: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub dim: usize,
    /// Width of class token embeddings; defaults to `dim`.
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub token_len: usize,
    #[arg(long, default_value_t = 20)]
    pub images_per_cell: usize,
    #[arg(long, default_value_t = 0.6)]
    pub shift: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_synthetic(args: &GenSyntheticArgs) -> Result<StoreManifest, CliError> {
    for (name, v) in [
        ("--domains", args.domains),
        ("--classes", args.classes),
        ("--dim", args.dim),
        ("--token-len", args.token_len),
        ("--images-per-cell", args.images_per_cell),
    ] {
        if v == 0 {
            return Err(CliError::Usage(format!("{name} must be at least 1")));
        }
    }
    if args.token_dim == Some(0) {
        return Err(CliError::Usage("--token-dim must be at least 1".into()));
    }
    if !(args.shift >= 0.0 && args.noise >= 0.0) {
        return Err(CliError::Usage("--shift and --noise must be non-negative".into()));
    }
    let spec = SyntheticSpec {
        num_domains: args.domains,
        num_classes: args.classes,
        dim: args.dim,
        token_dim: args.token_dim.unwrap_or(args.dim),
        images_per_class_per_domain: args.images_per_cell,
        domain_shift: args.shift,
        noise: args.noise,
        seed: args.seed,
    };
    let store = if args.token_len == DEFAULT_TOKEN_LEN {
        generate_synthetic(&spec)?
    } else {
        feddcg_core::store::generate_synthetic_with_token_len(&spec, args.token_len)?
    };
    save_store(&store, &args.out)?;
    Ok(store.manifest())
}

/// Indices of `wanted` within `all`, or every index when `wanted` is empty.
fn select(wanted: &[String], all: &[String], what: &str) -> Result<Vec<usize>, CliError> {
    if wanted.is_empty() {
        return Ok((0..all.len()).collect());
    }
    wanted
        .iter()
        .map(|name| {
            all.iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::Usage(format!("unknown {what} {name:?}")))
        })
        .collect()
}

/// Evaluation output as written to `results.json`, plus the rendered table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_round: usize,
    pub classes: Vec<String>,
    #[serde(flatten)]
    pub results: EvalResults,
    #[serde(skip)]
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub num_clients: usize,
    pub train_domains: Vec<String>,
    pub train_classes: Vec<String>,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    /// Last logged mean local loss per stage label and domain.
    pub final_loss: BTreeMap<String, BTreeMap<String, f64>>,
    pub eval: Vec<EvalReport>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types always serialize") + "\n"
}

fn snapshot(state: &RoundState, store: &EmbeddingStore, config: &RunConfig, stub_seed: u64) -> Checkpoint {
    Checkpoint {
        round: state.round,
        stub_seed,
        dim: store.dim,
        tau: config.tau,
        tau_w: config.tau_w,
        group_nets: state.group_nets.clone(),
        bank: state.bank.clone(),
    }
}

/// Runs a full training job and writes checkpoints, the round log and a
/// summary into `config.output_dir`.
pub fn train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    config.validate()?;
    let train_path = config
        .train_store
        .as_ref()
        .ok_or_else(|| CliError::Usage("train_store is not set in the config".into()))?;
    if !train_path.is_file() {
        return Err(CliError::Usage(format!(
            "train_store {} does not exist",
            train_path.display()
        )));
    }
    if let Some(p) = &config.eval_store {
        if !p.is_file() {
            return Err(CliError::Usage(format!(
                "eval_store {} does not exist",
                p.display()
            )));
        }
    }

    let full = load_store(train_path)?;
    let domains = select(&config.train_domains, &full.domains, "domain")?;
    let classes = select(&config.train_classes, &full.class_names, "class")?;
    let store = full.subset(&domains, &classes)?;
    let partitions = partition_clients(
        &store,
        config.clients_per_domain,
        config.classes_per_client,
        config.sampling_rate,
        config.seed,
    )?;
    let stub = TextEncoderStub::new(store.token_dim, store.dim, config.stub_seed)?;
    let protocol = config.protocol();
    let mut state = init_round(
        &partitions,
        store.num_domains(),
        config.net_shape(store.token_dim),
        config.bank_shape(),
        config.seed,
        &config.schedule(),
    )?;

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join(CONFIG_COPY), config.to_toml())?;
    let log_path = out.join(ROUND_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);

    let mut checkpoints = Vec::new();
    let mut save = |state: &RoundState| -> Result<(), CliError> {
        let name = checkpoint_name(state.round);
        snapshot(state, &store, config, config.stub_seed).save(out.join(&name))?;
        checkpoints.push(name);
        Ok(())
    };
    save(&state)?;

    let mut final_loss: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in 0..config.rounds {
        let (next, entry) = run_round(&state, &partitions, &store, &stub, &protocol)?;
        state = next;
        info!(
            "round {} stage {} loss {:?}",
            entry.round, entry.stage, entry.group_loss
        );
        let line = serde_json::to_string(&entry).expect("round log always serializes");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| CliError::io(&log_path, e))?;
        final_loss.insert(entry.stage.clone(), entry.group_loss);
        let done = r + 1;
        let periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if periodic || done == config.rounds {
            save(&state)?;
        }
    }

    let mut eval_reports = Vec::new();
    if let Some(eval_path) = &config.eval_store {
        let model = {
            let mut m = snapshot(&state, &store, config, config.stub_seed).inference_model()?;
            m.fixed_global_weight = config.fixed_global_weight;
            m
        };
        let eval_store = load_store(eval_path)?;
        check_compatible(&model_dims(&model), &eval_store)?;
        let report = evaluate_store(
            &model,
            state.round,
            &eval_store,
            &config.eval_domains,
            &config.eval_classes,
            config.aggregator,
        )?;
        eval_reports.push(report);
    }

    let summary = TrainSummary {
        rounds: state.round,
        num_clients: partitions.len(),
        train_domains: store.domains.clone(),
        train_classes: store.class_names.clone(),
        final_checkpoint: checkpoints.last().cloned().unwrap_or_default(),
        checkpoints,
        final_loss,
        eval: eval_reports,
    };
    write_file(&out.join(SUMMARY), to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_parser = parse_aggregator, default_value = "domain_guided")]
    pub aggregator: Aggregator,
    /// Comma-separated class names to classify among; default all.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Comma-separated domain names to evaluate on; default all.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    #[arg(long)]
    pub tau_w: Option<f64>,
    #[arg(long)]
    pub fixed_global_weight: Option<f64>,
    /// Directory for results.json and table.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn model_dims(model: &feddcg_core::InferenceModel) -> (usize, usize) {
    (model.stub.dim(), model.stub.token_dim())
}

fn check_compatible(dims: &(usize, usize), store: &EmbeddingStore) -> Result<(), CliError> {
    let (dim, token_dim) = *dims;
    if store.dim != dim || store.token_dim != token_dim {
        return Err(Error::Shape(format!(
            "checkpoint expects dim {dim} / token_dim {token_dim}, store has {} / {}",
            store.dim, store.token_dim
        ))
        .into());
    }
    Ok(())
}

fn evaluate_store(
    model: &feddcg_core::InferenceModel,
    round: usize,
    store: &EmbeddingStore,
    domains: &[String],
    classes: &[String],
    aggregator: Aggregator,
) -> Result<EvalReport, CliError> {
    let domain_idx = select(domains, &store.domains, "domain")?;
    let class_idx = select(classes, &store.class_names, "class")?;
    let view = store.subset(&domain_idx, &(0..store.num_classes()).collect::<Vec<_>>())?;
    let results = evaluate(model, &view, aggregator, &class_idx)?;
    let table = results.to_table(&view.domains);
    Ok(EvalReport {
        checkpoint_round: round,
        classes: class_idx.iter().map(|&c| store.class_names[c].clone()).collect(),
        results,
        table,
    })
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let store = load_store(&args.store)?;
    let mut model = checkpoint.inference_model()?;
    check_compatible(&model_dims(&model), &store)?;
    if let Some(t) = args.tau_w {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::Usage(format!("--tau-w must be positive, got {t}")));
        }
        model.tau_w = t;
    }
    if let Some(w) = args.fixed_global_weight {
        if !(0.0..=1.0).contains(&w) {
            return Err(CliError::Usage(format!(
                "--fixed-global-weight must lie in [0, 1], got {w}"
            )));
        }
        model.fixed_global_weight = Some(w);
    }
    let report = evaluate_store(
        &model,
        checkpoint.round,
        &store,
        &args.domains,
        &args.classes,
        args.aggregator,
    )?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        write_file(&out.join(RESULTS), to_json(&report))?;
        write_file(&out.join(TABLE), &report.table)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Seed to check; repeat for several.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Check seeds 0..N instead of listing them.
    #[arg(long, conflicts_with = "seeds")]
    pub num_seeds: Option<u64>,
    /// Perturbs the analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<Vec<GradcheckResult>, CliError> {
    let seeds: Vec<u64> = match (args.num_seeds, args.seeds.is_empty()) {
        (Some(0), _) => return Err(CliError::Usage("--num-seeds must be at least 1".into())),
        (Some(n), _) => (0..n).collect(),
        (None, true) => vec![0],
        (None, false) => args.seeds.clone(),
    };
    seeds
        .into_iter()
        .map(|s| run_gradcheck(s, args.corrupt).map_err(CliError::from))
        .collect()
}
