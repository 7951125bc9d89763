use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::Args;
use gclrec::data::{load_interactions, split_dataset, Delimiter};
use gclrec::eval::evaluate;
use gclrec::model::{read_embeddings_binary, write_embeddings_binary, write_embeddings_text};
use gclrec::synth::{generate, SynthConfig};
use gclrec::timing::bench_methods;
use gclrec::train::{sweep as run_sweep, train_with_observer, EpochRecord, SweepGrid, SweepRow};
use gclrec::{ContrastAnchor, DenseMatrix, Error, InteractionDataset, Method, Result, SplitRatio, TrainConfig};
use log::{info, warn};

use crate::manifest::{opt, CsvOut, DatasetFingerprint, RunManifest};
use crate::GlobalOpts;

const CONFIG_ECHO: &str = "config.txt";
const E0_FILE: &str = "e0.bin";
const FINAL_FILE: &str = "final.bin";

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Interaction log, one `user item [...]` record per line.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate a log instead: `ml100k` or `edges:<count>`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Field separator: `whitespace`, `tab`, `comma` or a single character.
    #[arg(long, default_value = "whitespace")]
    pub delimiter: String,
    /// Directory for train.tsv, valid.tsv, test.tsv and idmap.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the manifest, traces, embeddings and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `prepare`; must be the one the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Cutoff for Recall@K and NDCG@K.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Output CSV; defaults to `eval.csv` beside the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "lightgcn,xsimgcl,simgcl,sgl-ed")]
    pub methods: Vec<Method>,
    /// Propagation depth for every method.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Timed batches per method, after five warm-up batches.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Base config for everything but the method and layer count.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-method timing table.
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Base config; each cell overrides the keys its grid varies.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// `standard`, `layers`, `layers=<L>` or `lambda=<a,b,..>;epsilon=<x,y,..>`.
    #[arg(long)]
    pub grid: String,
    /// One row per cell, appended as each cell finishes.
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    /// Keep the rows already in the output file and train only the missing cells.
    #[arg(long)]
    pub resume: bool,
}

fn parse_delimiter(text: &str) -> Result<Delimiter> {
    match text {
        "whitespace" | "ws" => Ok(Delimiter::Whitespace),
        "tab" => Ok(Delimiter::Char('\t')),
        "comma" => Ok(Delimiter::Char(',')),
        _ => {
            let mut chars = text.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(Delimiter::Char(c)),
                _ => Err(Error::Config(format!("unknown delimiter `{text}`"))),
            }
        }
    }
}

fn parse_synthetic(text: &str, seed: u64) -> Result<SynthConfig> {
    if text == "ml100k" {
        return Ok(SynthConfig::movielens_100k_like(seed));
    }
    text.strip_prefix("edges:")
        .and_then(|n| n.parse().ok())
        .map(|n| SynthConfig::with_edges(n, seed))
        .ok_or_else(|| Error::Config(format!("unknown synthetic preset `{text}`")))
}

fn manifest(command: &str, global: &GlobalOpts, seed: u64) -> RunManifest {
    RunManifest::new(command, seed, global.deterministic, global.threads)
}

/// Reads a config file (or the defaults), applies `--seed` and logs ignored keys.
fn load_config(path: Option<&Path>, global: &GlobalOpts) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let (config, warnings) = TrainConfig::parse(&text)?;
            for w in warnings {
                warn!("{}: {w}", p.display());
            }
            config
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_data(dir: &Path) -> Result<(InteractionDataset, DatasetFingerprint)> {
    let dataset = InteractionDataset::read_splits(dir)?;
    let fingerprint = DatasetFingerprint::of_dir(dir, &dataset)?;
    Ok((dataset, fingerprint))
}

pub fn prepare(global: &GlobalOpts, args: &PrepareArgs) -> Result<()> {
    let seed = global.seed.unwrap_or(0);
    let raw = match (&args.input, &args.synthetic) {
        (Some(path), _) => load_interactions(path, parse_delimiter(&args.delimiter)?)?,
        (None, Some(preset)) => generate(&parse_synthetic(preset, seed)?)?,
        (None, None) => return Err(Error::Config("either --input or --synthetic is required".into())),
    };
    let dataset = split_dataset(&raw, SplitRatio::default(), seed);
    dataset.write_splits(&args.out)?;

    let mut m = manifest("prepare", global, seed);
    m.dataset = Some(DatasetFingerprint::of_dir(&args.out, &dataset)?);
    m.outputs = ["train.tsv", "valid.tsv", "test.tsv", "idmap.tsv"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    m.write(&args.out.join("manifest.json"))?;

    println!("users\t{}", dataset.num_users);
    println!("items\t{}", dataset.num_items);
    println!("feedback\t{}", dataset.num_interactions());
    println!("density\t{:.2}%", dataset.density() * 100.0);
    println!(
        "split\t{} / {} / {}",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len()
    );
    Ok(())
}

const TRACE_HEADER: [&str; 11] = [
    "epoch",
    "rec_loss",
    "cl_loss",
    "reg_loss",
    "total_loss",
    "val_recall",
    "val_ndcg",
    "uniformity",
    "mean_batch_seconds",
    "augmentation_seconds",
    "epoch_seconds",
];

fn trace_row(r: &EpochRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.losses.rec_loss.to_string(),
        r.losses.cl_loss.to_string(),
        r.losses.reg_loss.to_string(),
        r.losses.total.to_string(),
        opt(r.validation.map(|v| v.recall)),
        opt(r.validation.map(|v| v.ndcg)),
        opt(r.uniformity),
        r.mean_batch_seconds.to_string(),
        r.augmentation_seconds.to_string(),
        r.epoch_seconds.to_string(),
    ]
}

fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings_binary(BufWriter::new(file), m).map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings_binary(BufReader::new(file))
}

pub fn train(global: &GlobalOpts, args: &TrainArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), global)?;
    config.validate()?;
    let (dataset, fingerprint) = load_data(&args.data)?;

    let out = &args.out;
    let checkpoint = out.join("checkpoint");
    let trace_path = out.join("trace.csv");
    let uniformity_path = out.join("uniformity.csv");
    let embeddings_path = out.join("embeddings.tsv");
    let mut m = manifest("train", global, config.seed);
    m.config = Some(config.to_kv_string());
    m.dataset = Some(fingerprint);
    m.outputs = vec![
        checkpoint.clone(),
        trace_path.clone(),
        uniformity_path.clone(),
        embeddings_path.clone(),
    ];
    let hash = m.write(&out.join("manifest.json"))?;

    let mut trace = CsvOut::create(&trace_path, &hash, &TRACE_HEADER)?;
    let mut uniformity = CsvOut::create(&uniformity_path, &hash, &["epoch", "uniformity"])?;
    let mut write_error = None;
    let outcome = train_with_observer(&config, &dataset, &mut |r| {
        info!(
            "epoch {} loss {:.4} val recall {}",
            r.epoch,
            r.losses.total,
            opt(r.validation.map(|v| v.recall))
        );
        let written = trace.row(&trace_row(r)).and_then(|_| match r.uniformity {
            Some(u) => uniformity.row(&[r.epoch.to_string(), u.to_string()]),
            None => Ok(()),
        });
        if let Err(e) = written {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    trace.flush()?;
    uniformity.flush()?;

    fs::create_dir_all(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    let echo = checkpoint.join(CONFIG_ECHO);
    fs::write(&echo, config.to_kv_string()).map_err(|e| Error::io(&echo, e))?;
    write_matrix(&checkpoint.join(E0_FILE), &outcome.e0)?;
    write_matrix(&checkpoint.join(FINAL_FILE), &outcome.final_repr)?;

    let tokens: Vec<String> = dataset
        .user_tokens
        .iter()
        .map(|t| format!("user:{t}"))
        .chain(dataset.item_tokens.iter().map(|t| format!("item:{t}")))
        .collect();
    let file = File::create(&embeddings_path).map_err(|e| Error::io(&embeddings_path, e))?;
    write_embeddings_text(BufWriter::new(file), &outcome.final_repr, &tokens)?;

    match outcome.trace.best() {
        Some(best) => println!(
            "best epoch {} validation recall@{} {}",
            outcome.trace.best_epoch,
            config.top_k,
            opt(best.validation.map(|v| v.recall))
        ),
        None => println!("trained {} epochs", outcome.trace.epochs.len()),
    }
    Ok(())
}

pub fn eval(global: &GlobalOpts, args: &EvalArgs) -> Result<()> {
    let echo = args.checkpoint.join(CONFIG_ECHO);
    let text = fs::read_to_string(&echo).map_err(|e| Error::io(&echo, e))?;
    let (config, _) = TrainConfig::parse(&text)?;
    let final_repr = read_matrix(&args.checkpoint.join(FINAL_FILE))?;
    let (dataset, fingerprint) = load_data(&args.data)?;
    if final_repr.rows() != dataset.num_nodes() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} rows but the id map has {} users + {} items",
            final_repr.rows(),
            dataset.num_users,
            dataset.num_items
        )));
    }
    if args.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }

    let out = args.out.clone().unwrap_or_else(|| {
        let parent = args.checkpoint.parent().unwrap_or(Path::new("."));
        parent.join("eval.csv")
    });
    let mut m = manifest("eval", global, global.seed.unwrap_or(config.seed));
    m.config = Some(config.to_kv_string());
    m.dataset = Some(fingerprint);
    m.outputs = vec![out.clone()];
    let hash = m.write(&out.with_extension("manifest.json"))?;

    let report = evaluate(&dataset, &final_repr, args.k, &config.uniformity)?;
    let mut csv = CsvOut::create(&out, &hash, &["metric", "group", "value"])?;
    let k = report.k;
    csv.row(&[format!("recall@{k}"), "all".into(), report.recall.to_string()])?;
    csv.row(&[format!("ndcg@{k}"), "all".into(), report.ndcg.to_string()])?;
    for (g, r) in report.per_group_recall.iter().enumerate() {
        csv.row(&[format!("recall@{k}"), (g + 1).to_string(), opt(*r)])?;
    }
    csv.row(&["uniformity".into(), "all".into(), opt(report.uniformity)])?;
    csv.row(&["users".into(), "all".into(), report.num_eval_users.to_string()])?;
    csv.flush()?;
    println!("recall@{k}\t{}\nndcg@{k}\t{}", report.recall, report.ndcg);
    Ok(())
}

pub fn bench(global: &GlobalOpts, args: &BenchArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), global)?;
    config.layers = args.layers;
    config.validate()?;
    let (dataset, fingerprint) = load_data(&args.data)?;

    let mut m = manifest("bench", global, config.seed);
    m.config = Some(config.to_kv_string());
    m.dataset = Some(fingerprint);
    m.outputs = vec![args.out.clone()];
    let hash = m.write(&args.out.with_extension("manifest.json"))?;

    let rows = bench_methods(&config, &dataset, &args.methods, args.batches)?;
    let mut csv = CsvOut::create(
        &args.out,
        &hash,
        &[
            "method",
            "layers",
            "batches",
            "batch_size",
            "mean_batch_seconds",
            "stdev_batch_seconds",
            "augmentation_seconds",
            "batches_per_epoch",
            "amortized_batch_seconds",
        ],
    )?;
    for r in &rows {
        csv.row(&[
            r.method.to_string(),
            r.layers.to_string(),
            r.batches.to_string(),
            config.batch_size.to_string(),
            r.mean_batch_seconds.to_string(),
            r.stdev_batch_seconds.to_string(),
            r.augmentation_seconds.to_string(),
            r.batches_per_epoch.to_string(),
            r.amortized_batch_seconds().to_string(),
        ])?;
        println!("{}\t{:.6}s/batch", r.method, r.amortized_batch_seconds());
    }
    csv.flush()
}

/// Parses a grid spec such as `lambda=0.1,0.2;epsilon=0,0.1`.
pub fn parse_grid(spec: &str, base: &TrainConfig) -> Result<SweepGrid> {
    let bad = || Error::Config(format!("malformed grid spec `{spec}`"));
    let spec = spec.trim();
    match spec {
        "standard" => return Ok(SweepGrid::standard_lambda_epsilon()),
        "layers" => return Ok(SweepGrid::LayerPairs { layers: base.layers }),
        _ => {}
    }
    if let Some(n) = spec.strip_prefix("layers=") {
        let layers = n.trim().parse().map_err(|_| bad())?;
        return match layers {
            0 => Err(bad()),
            layers => Ok(SweepGrid::LayerPairs { layers }),
        };
    }
    let mut lambdas = None;
    let mut epsilons = None;
    for part in spec.split(';') {
        let (key, values) = part.split_once('=').ok_or_else(bad)?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad());
        }
        let slot = match key.trim() {
            "lambda" => &mut lambdas,
            "epsilon" => &mut epsilons,
            _ => return Err(bad()),
        };
        if slot.replace(values).is_some() {
            return Err(bad());
        }
    }
    Ok(SweepGrid::LambdaEpsilon {
        lambdas: lambdas.unwrap_or_else(|| vec![base.lambda]),
        epsilons: epsilons.unwrap_or_else(|| vec![base.epsilon]),
    })
}

const SWEEP_HEADER: [&str; 13] = [
    "key",
    "lambda",
    "epsilon",
    "anchor",
    "contrast_layer",
    "status",
    "best_epoch",
    "val_recall",
    "val_ndcg",
    "test_recall",
    "test_ndcg",
    "uniformity",
    "error",
];

fn sweep_row(row: &SweepRow) -> Vec<String> {
    let c = &row.cell;
    let anchor = match c.anchor {
        ContrastAnchor::Final => "final".to_string(),
        ContrastAnchor::Layer(a) => a.to_string(),
    };
    let mut fields = vec![
        c.key(),
        c.lambda.to_string(),
        c.epsilon.to_string(),
        anchor,
        c.contrast_layer.to_string(),
    ];
    match &row.outcome {
        Ok(m) => fields.extend([
            "ok".to_string(),
            m.best_epoch.to_string(),
            m.validation.recall.to_string(),
            m.validation.ndcg.to_string(),
            m.test.recall.to_string(),
            m.test.ndcg.to_string(),
            opt(m.uniformity),
            String::new(),
        ]),
        Err(msg) => {
            fields.push("error".to_string());
            fields.extend(std::iter::repeat_n(String::new(), 6));
            fields.push(msg.replace([',', '\n'], ";"));
        }
    }
    fields
}

/// Keys of the cells that already finished successfully in an earlier sweep file.
fn completed_keys(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, header)) if header == SWEEP_HEADER.join(",") => {}
        Some((n, _)) => return Err(Error::parse(path, n + 1, "not a sweep file header")),
        None => return Ok(BTreeSet::new()),
    }
    let status = SWEEP_HEADER.iter().position(|h| *h == "status").unwrap_or(5);
    let mut keys = BTreeSet::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != SWEEP_HEADER.len() {
            return Err(Error::parse(path, n + 1, "wrong number of fields"));
        }
        if fields[status] == "ok" {
            keys.insert(fields[0].to_owned());
        }
    }
    Ok(keys)
}

pub fn sweep(global: &GlobalOpts, args: &SweepArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), global)?;
    config.validate()?;
    let grid = parse_grid(&args.grid, &config)?;
    let (dataset, fingerprint) = load_data(&args.data)?;

    let resuming = args.resume && args.out.exists();
    let done = if resuming {
        completed_keys(&args.out)?
    } else {
        BTreeSet::new()
    };
    let mut csv = if resuming {
        info!("resuming: {} finished cells kept", done.len());
        CsvOut::append(&args.out)?
    } else {
        let mut m = manifest("sweep", global, config.seed);
        m.config = Some(format!("{}grid = {}\n", config.to_kv_string(), args.grid));
        m.dataset = Some(fingerprint);
        m.outputs = vec![args.out.clone()];
        let hash = m.write(&args.out.with_extension("manifest.json"))?;
        CsvOut::create(&args.out, &hash, &SWEEP_HEADER)?
    };
    csv.flush()?;

    let mut write_error = None;
    let rows = run_sweep(&config, &dataset, &grid, &|cell| done.contains(&cell.key()), &mut |row| {
        let written = csv.row(&sweep_row(row)).and_then(|_| csv.flush());
        if let Err(e) = written {
            write_error.get_or_insert(e);
        }
        info!("cell {} finished", row.cell.key());
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    println!("{} cells trained, {} skipped, {failed} failed", rows.len(), done.len());
    Ok(())
}
