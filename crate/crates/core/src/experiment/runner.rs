use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSpec, ExperimentConfig, Mode, PartitionSpec};
use super::summary::{summarize_run, summary_csv};
use crate::data::{
    class_skew_partition, concept_drift_partition, iid_partition, load_csv, load_idx, matched_test_indices, ood_clusters,
    shard_partition, BlobGenerator, Dataset, PartitionPlan, SuperclassGenerator,
};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, Checkpoint, ClientHandle, EvalData, Federation, FederationConfig};
use crate::metrics::MetricsRecord;
use crate::nn::ModelSpec;
use crate::seed::{self, Purpose};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARTITION_FILE: &str = "partition.json";

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Continue from an existing checkpoint in the run directory.
    pub resume: bool,
}

impl ExperimentConfig {
    /// Applies overrides; the config's own values stay in effect for
    /// anything not overridden.
    pub fn with_options(mut self, opts: &RunOptions) -> Self {
        if let Some(s) = opts.seed {
            self.seed = s;
        }
        if let Some(p) = opts.parallel {
            self.federation.parallel = p;
        }
        if let Some(d) = &opts.output_dir {
            self.output_dir = d.clone();
        }
        self
    }
}

/// Data ready for a federation run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub spec: ModelSpec,
    pub clients: Vec<ClientHandle>,
    pub eval: EvalData,
    pub plan: PartitionPlan,
}

fn data_seed(root: u64, part: u64) -> u64 {
    seed::derive(root, Purpose::Data, &[part])
}

fn with_classes(d: Dataset, c: usize) -> Result<Dataset> {
    if d.n_classes() == c {
        return Ok(d);
    }
    Dataset::new(d.inputs().to_vec(), d.labels().to_vec(), d.dim(), c)
}

fn load_pair(train: Dataset, test: Dataset, n_classes: Option<usize>) -> Result<(Dataset, Dataset)> {
    let c = n_classes.unwrap_or(train.n_classes().max(test.n_classes()));
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train inputs are {}-dimensional, test inputs {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((with_classes(train, c)?, with_classes(test, c)?))
}

/// Generates or loads the data, partitions it among clients and builds the
/// model spec. Client-matched test splits are attached in personalized mode.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let root = cfg.seed;
    let mut ood = None;
    let (train, test) = match &cfg.data {
        DataSpec::Blobs {
            n_classes,
            n_per_class,
            test_per_class,
            dim,
            separation,
        } => {
            let gen = BlobGenerator::new(*n_classes, *dim, *separation, data_seed(root, 0))?;
            if cfg.mode == Mode::Ood {
                ood = Some(ood_clusters(
                    gen.centers(),
                    cfg.ood.n_clusters,
                    cfg.ood.n_per_cluster,
                    cfg.ood.distance,
                    *n_classes,
                    data_seed(root, 3),
                )?);
            }
            (gen.sample(*n_per_class, data_seed(root, 1)), gen.sample(*test_per_class, data_seed(root, 2)))
        }
        DataSpec::Superclass {
            n_super,
            n_sub,
            n_per_sub,
            test_per_sub,
            dim,
        } => {
            let sep = 4.0 * (*dim as f64).sqrt();
            let gen = SuperclassGenerator::new(*n_super, *n_sub, *dim, sep, 1.0, data_seed(root, 0))?;
            (gen.sample(*n_per_sub, data_seed(root, 1)), gen.sample(*test_per_sub, data_seed(root, 2)))
        }
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_classes,
        } => load_pair(
            load_idx(train_images, train_labels, *n_classes)?,
            load_idx(test_images, test_labels, *n_classes)?,
            *n_classes,
        )?,
        DataSpec::Csv { train, test, n_classes } => {
            load_pair(load_csv(train, *n_classes)?, load_csv(test, *n_classes)?, *n_classes)?
        }
    };

    let k = cfg.federation.n_clients;
    let part_seed = seed::derive(root, Purpose::Partition, &[]);
    let plan = match &cfg.partition {
        PartitionSpec::Iid => iid_partition(&train, k, part_seed)?,
        PartitionSpec::Shard { shards_per_client } => shard_partition(&train, k, *shards_per_client, part_seed)?,
        PartitionSpec::ClassSkew { classes_per_client } => {
            class_skew_partition(&train, k, *classes_per_client, part_seed)?
        }
        PartitionSpec::ConceptDrift => concept_drift_partition(&train, k, part_seed)?,
    };
    plan.validate(train.len())?;

    let drift = matches!(cfg.partition, PartitionSpec::ConceptDrift);
    let personalized = cfg.mode == Mode::Personalized;
    let mut clients = Vec::with_capacity(k);
    for (id, idx) in plan.clients.iter().enumerate() {
        let mut data = train.subset(idx);
        let mut client_test = personalized.then(|| test.subset(&matched_test_indices(&test, &plan.client_labels[id])));
        if drift {
            data = data.to_superclass_task()?;
            client_test = client_test.map(|t| t.to_superclass_task()).transpose()?;
        }
        clients.push(ClientHandle {
            id,
            data,
            test: client_test,
        });
    }
    let test = if drift { test.to_superclass_task()? } else { test };
    let mut layers = vec![train.dim()];
    layers.extend_from_slice(&cfg.model.hidden);
    layers.push(test.n_classes());
    let spec = ModelSpec::new(layers, cfg.model.activation)?;
    Ok(PreparedData {
        spec,
        clients,
        eval: EvalData { test: Some(test), ood },
        plan,
    })
}

/// The federation settings a config describes for model `spec`.
pub fn federation_config(cfg: &ExperimentConfig, spec: ModelSpec) -> FederationConfig {
    let f = &cfg.federation;
    let personalization = (cfg.mode == Mode::Personalized && f.algorithm == Algorithm::Fedivon).then_some(f.beta);
    FederationConfig {
        n_clients: f.n_clients,
        rounds: f.rounds,
        participation_fraction: f.participation_fraction,
        algorithm: f.algorithm,
        personalization,
        ivon: cfg.ivon.clone(),
        baseline: cfg.baseline.clone(),
        model: spec,
        eval_every: f.eval_every,
        eval: cfg.metrics.clone(),
        seed: cfg.seed,
        parallel: f.parallel,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: String,
    pub summary: String,
    pub checkpoint: String,
    pub partition: String,
}

/// Written once before the first round of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Set for the sub-runs of an ablation, e.g. `E=2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub mode: String,
    pub algorithm: String,
    pub seed: u64,
    /// `sha256:` digest of `config`.
    pub config_hash: String,
    /// The fully resolved config, in the config file format.
    pub config: String,
    pub created_unix: u64,
    pub crate_version: String,
    pub artifacts: Artifacts,
}

pub fn config_hash(config_toml: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(config_toml.as_bytes())))
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_dirs: Vec<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

/// Runs the experiment a config describes and writes its artifacts under
/// `<output_dir>/<name>/` (one subdirectory per epoch count in ablation
/// mode).
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let cfg = cfg.clone().with_options(opts);
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let base = cfg.output_dir.join(&cfg.name);
    let mut report = RunReport {
        run_dirs: Vec::new(),
        records: Vec::new(),
    };
    if cfg.mode == Mode::Ablation {
        for &e in &cfg.ablation_epochs {
            let mut sub = cfg.clone();
            sub.ivon.epochs = e;
            let dir = base.join(format!("E{e}"));
            let records = run_single(&sub, &dir, Some(format!("E={e}")), opts.resume)?;
            report.run_dirs.push(dir);
            report.records.extend(records);
        }
    } else {
        report.records = run_single(&cfg, &base, None, opts.resume)?;
        report.run_dirs.push(base);
    }
    Ok(report)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a metrics stream, keeping only records up to `max_round`.
pub fn read_metrics(path: &Path, max_round: Option<usize>) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            format: "JSONL".into(),
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        if max_round.is_none_or(|r| rec.round <= r) {
            out.push(rec);
        }
    }
    Ok(out)
}

fn jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn run_single(cfg: &ExperimentConfig, dir: &Path, variant: Option<String>, resume: bool) -> Result<Vec<MetricsRecord>> {
    let data = prepare_data(cfg)?;
    let fed_cfg = federation_config(cfg, data.spec.clone());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);

    let resumed = resume && checkpoint_path.exists();
    let (mut fed, mut records) = if resumed {
        let cp = Checkpoint::load(&checkpoint_path)?;
        let kept = if metrics_path.exists() {
            read_metrics(&metrics_path, Some(cp.round))?
        } else {
            Vec::new()
        };
        write_atomic(&metrics_path, &jsonl(&kept)?)?;
        (Federation::resume(fed_cfg, data.clients, data.eval, cp)?, kept)
    } else {
        let config_toml = cfg.to_toml();
        let manifest = RunManifest {
            name: cfg.name.clone(),
            variant,
            mode: cfg.mode.name().into(),
            algorithm: cfg.federation.algorithm.name().into(),
            seed: cfg.seed,
            config_hash: config_hash(&config_toml),
            config: config_toml,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            artifacts: Artifacts {
                metrics: METRICS_FILE.into(),
                summary: SUMMARY_FILE.into(),
                checkpoint: CHECKPOINT_FILE.into(),
                partition: PARTITION_FILE.into(),
            },
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), &text)?;
        write_atomic(&dir.join(PARTITION_FILE), &data.plan.to_json()?)?;
        fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        let fed = Federation::new(fed_cfg, data.clients, data.eval)?;
        fed.checkpoint().save(&checkpoint_path)?;
        (fed, Vec::new())
    };

    let mut stream = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    fed.run(|fed, round| {
        stream
            .write_all(jsonl(&round.metrics)?.as_bytes())
            .and_then(|_| stream.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;
        records.extend(round.metrics.iter().cloned());
        let cp = fed.checkpoint();
        write_atomic(&checkpoint_path, &cp.to_json()?)
    })?;
    let label = dir
        .strip_prefix(&cfg.output_dir)
        .unwrap_or(dir)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/");
    let rows = summarize_run(&label, &records)?;
    write_atomic(&dir.join(SUMMARY_FILE), &summary_csv(&rows))?;
    Ok(records)
}
