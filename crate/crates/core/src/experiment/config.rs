//! Experiment configuration: a TOML file with fixed sections, parsed by
//! hand so that every problem (unknown key, wrong type, out-of-range value)
//! is reported in one pass with its dotted key path.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::baseline::Optimizer;
use crate::error::{Error, Result};
use crate::federation::{Algorithm, BaselineConfig, EvalConfig};
use crate::ivon::{Ess, IvonConfig};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Standard,
    Personalized,
    Ood,
    Ablation,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Personalized => "personalized",
            Mode::Ood => "ood",
            Mode::Ablation => "ablation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Mode::Standard, Mode::Personalized, Mode::Ood, Mode::Ablation]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSection {
    pub n_clients: usize,
    pub rounds: usize,
    pub participation_fraction: f64,
    pub algorithm: Algorithm,
    /// Personalization strength, used in personalized mode.
    pub beta: f64,
    pub eval_every: usize,
    pub parallel: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            n_clients: 10,
            rounds: 10,
            participation_fraction: 1.0,
            algorithm: Algorithm::Fedivon,
            beta: 1.0,
            eval_every: 1,
            parallel: 1,
        }
    }
}

/// Hidden layer widths; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Blobs {
        n_classes: usize,
        n_per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
    },
    Superclass {
        n_super: usize,
        n_sub: usize,
        n_per_sub: usize,
        test_per_sub: usize,
        dim: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        n_classes: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        n_classes: Option<usize>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Blobs {
            n_classes: 10,
            n_per_class: 100,
            test_per_class: 50,
            dim: 10,
            separation: 6.0,
        }
    }
}

/// Held-out clusters for out-of-distribution evaluation (blob data only).
#[derive(Debug, Clone, PartialEq)]
pub struct OodSpec {
    pub n_clusters: usize,
    pub n_per_cluster: usize,
    pub distance: f64,
}

impl Default for OodSpec {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            n_per_cluster: 50,
            distance: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSpec {
    Iid,
    Shard { shards_per_client: usize },
    ClassSkew { classes_per_client: usize },
    ConceptDrift,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Shard { shards_per_client: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub federation: FederationSection,
    pub model: ModelSection,
    pub ivon: IvonConfig,
    pub baseline: BaselineConfig,
    pub data: DataSpec,
    pub ood: OodSpec,
    pub partition: PartitionSpec,
    pub metrics: EvalConfig,
    /// Local epoch counts compared in ablation mode.
    pub ablation_epochs: Vec<usize>,
}

/// IVON defaults for experiments: the standard-FL hyperparameters with a
/// fixed effective sample size of 5000.
pub fn experiment_ivon_defaults() -> IvonConfig {
    IvonConfig {
        ess: Ess::Fixed(5000.0),
        ..IvonConfig::default()
    }
}

impl ExperimentConfig {
    /// A config with every default materialized.
    pub fn with_name(name: &str) -> Self {
        Self {
            name: name.into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            mode: Mode::Standard,
            federation: FederationSection::default(),
            model: ModelSection::default(),
            ivon: experiment_ivon_defaults(),
            baseline: BaselineConfig::default(),
            data: DataSpec::default(),
            ood: OodSpec::default(),
            partition: PartitionSpec::default(),
            metrics: EvalConfig::default(),
            ablation_epochs: vec![1, 2],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {}", e.message())]))?;
        let mut p = Parser::default();
        let cfg = p.config(table);
        p.problems.extend(cfg.problems());
        if p.problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(p.problems))
        }
    }

    /// Range and consistency checks, one message per violation.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            out.push(format!("name: must be a non-empty plain file name, got {:?}", self.name));
        }
        let f = &self.federation;
        if f.n_clients == 0 {
            out.push("federation.n_clients: must be at least 1".into());
        }
        if !(f.participation_fraction > 0.0 && f.participation_fraction <= 1.0) {
            out.push(format!(
                "federation.participation_fraction: must be in (0, 1], got {}",
                f.participation_fraction
            ));
        }
        if !(f.beta >= 0.0 && f.beta.is_finite()) {
            out.push(format!("federation.beta: must be nonnegative, got {}", f.beta));
        }
        if f.eval_every == 0 {
            out.push("federation.eval_every: must be at least 1".into());
        }
        if f.parallel == 0 {
            out.push("federation.parallel: must be at least 1".into());
        }
        if self.mode == Mode::Personalized && f.algorithm == Algorithm::Fedavg {
            out.push("federation.algorithm: personalized mode needs fedivon or local_only".into());
        }
        if self.mode != Mode::Personalized && f.algorithm == Algorithm::LocalOnly {
            out.push("federation.algorithm: local_only is only available in personalized mode".into());
        }
        if self.model.hidden.contains(&0) {
            out.push("model.hidden: widths must be positive".into());
        }
        out.extend(self.ivon.problems().into_iter().map(|p| format!("ivon.{p}")));
        let b = &self.baseline;
        if !(b.lr_initial > 0.0) {
            out.push(format!("baseline.lr_initial: must be positive, got {}", b.lr_initial));
        }
        if !(b.lr_final > 0.0 && b.lr_final <= b.lr_initial) {
            out.push(format!("baseline.lr_final: must be positive and at most lr_initial, got {}", b.lr_final));
        }
        match &self.data {
            DataSpec::Blobs {
                n_classes,
                n_per_class,
                test_per_class,
                dim,
                separation,
            } => {
                if *n_classes < 2 {
                    out.push("data.n_classes: must be at least 2".into());
                }
                for (k, v) in [("n_per_class", n_per_class), ("test_per_class", test_per_class), ("dim", dim)] {
                    if *v == 0 {
                        out.push(format!("data.{k}: must be positive"));
                    }
                }
                if !(*separation > 0.0) {
                    out.push(format!("data.separation: must be positive, got {separation}"));
                }
            }
            DataSpec::Superclass {
                n_super,
                n_sub,
                n_per_sub,
                test_per_sub,
                dim,
            } => {
                if *n_super < 2 {
                    out.push("data.n_super: must be at least 2".into());
                }
                for (k, v) in [("n_sub", n_sub), ("n_per_sub", n_per_sub), ("test_per_sub", test_per_sub), ("dim", dim)] {
                    if *v == 0 {
                        out.push(format!("data.{k}: must be positive"));
                    }
                }
            }
            DataSpec::Idx { n_classes, .. } | DataSpec::Csv { n_classes, .. } => {
                if n_classes.is_some_and(|c| c < 2) {
                    out.push("data.n_classes: must be at least 2".into());
                }
            }
        }
        if self.mode == Mode::Ood {
            match self.data {
                DataSpec::Blobs { n_classes, dim, .. } if dim < n_classes => {
                    out.push(format!("data.dim: ood mode needs dim >= n_classes ({n_classes}), got {dim}"));
                }
                DataSpec::Blobs { .. } => {}
                _ => out.push("data.source: ood mode needs blob data".into()),
            }
            if self.ood.n_clusters == 0 || self.ood.n_per_cluster == 0 {
                out.push("ood: n_clusters and n_per_cluster must be positive".into());
            }
            if !(self.ood.distance > 0.0) {
                out.push(format!("ood.distance: must be positive, got {}", self.ood.distance));
            }
        }
        match (&self.partition, &self.data) {
            (PartitionSpec::Shard { shards_per_client: 0 }, _) => {
                out.push("partition.shards_per_client: must be positive".into());
            }
            (PartitionSpec::ClassSkew { classes_per_client: 0 }, _) => {
                out.push("partition.classes_per_client: must be positive".into());
            }
            (PartitionSpec::ClassSkew { classes_per_client }, DataSpec::Blobs { n_classes, .. })
                if classes_per_client > n_classes =>
            {
                out.push(format!(
                    "partition.classes_per_client: {classes_per_client} exceeds the {n_classes} classes"
                ));
            }
            (PartitionSpec::ConceptDrift, d) if !matches!(d, DataSpec::Superclass { .. }) => {
                out.push("partition.scheme: concept_drift needs superclass data".into());
            }
            _ => {}
        }
        if self.metrics.ece_bins == 0 {
            out.push("metrics.ece_bins: must be positive".into());
        }
        if self.mode == Mode::Ablation && self.ablation_epochs.is_empty() {
            out.push("ablation.epochs: must list at least one epoch count".into());
        }
        out
    }

    /// Serializes every field, defaults included, as TOML that parses back
    /// to an equal config.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("name".into(), Value::String(self.name.clone()));
        root.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert("output_dir".into(), path_value(&self.output_dir));
        root.insert("mode".into(), Value::String(self.mode.name().into()));

        let f = &self.federation;
        let mut t = Table::new();
        t.insert("n_clients".into(), int(f.n_clients));
        t.insert("rounds".into(), int(f.rounds));
        t.insert("participation_fraction".into(), Value::Float(f.participation_fraction));
        t.insert("algorithm".into(), Value::String(f.algorithm.name().into()));
        t.insert("beta".into(), Value::Float(f.beta));
        t.insert("eval_every".into(), int(f.eval_every));
        t.insert("parallel".into(), int(f.parallel));
        root.insert("federation".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("hidden".into(), Value::Array(self.model.hidden.iter().map(|&h| int(h)).collect()));
        t.insert("activation".into(), Value::String(activation_name(self.model.activation).into()));
        root.insert("model".into(), Value::Table(t));

        let iv = &self.ivon;
        let mut t = Table::new();
        t.insert("beta1".into(), Value::Float(iv.beta1));
        t.insert("beta2".into(), Value::Float(iv.beta2));
        t.insert("lr_initial".into(), Value::Float(iv.lr_initial));
        t.insert("lr_final".into(), Value::Float(iv.lr_final));
        t.insert("weight_decay".into(), Value::Float(iv.weight_decay));
        t.insert(
            "ess".into(),
            match iv.ess {
                Ess::Fixed(v) => Value::Float(v),
                Ess::DatasetSize => Value::String("dataset".into()),
            },
        );
        t.insert("h_init".into(), Value::Float(iv.h_init));
        t.insert("batch_size".into(), int(iv.batch_size));
        t.insert("epochs".into(), int(iv.epochs));
        t.insert("train_mc_samples".into(), int(iv.train_mc_samples));
        if let Some(c) = iv.clip_grad_norm {
            t.insert("clip_grad_norm".into(), Value::Float(c));
        }
        root.insert("ivon".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("optimizer".into(), Value::String(self.baseline.optimizer.name().into()));
        t.insert("lr_initial".into(), Value::Float(self.baseline.lr_initial));
        t.insert("lr_final".into(), Value::Float(self.baseline.lr_final));
        root.insert("baseline".into(), Value::Table(t));

        let mut t = Table::new();
        match &self.data {
            DataSpec::Blobs {
                n_classes,
                n_per_class,
                test_per_class,
                dim,
                separation,
            } => {
                t.insert("source".into(), Value::String("blobs".into()));
                t.insert("n_classes".into(), int(*n_classes));
                t.insert("n_per_class".into(), int(*n_per_class));
                t.insert("test_per_class".into(), int(*test_per_class));
                t.insert("dim".into(), int(*dim));
                t.insert("separation".into(), Value::Float(*separation));
            }
            DataSpec::Superclass {
                n_super,
                n_sub,
                n_per_sub,
                test_per_sub,
                dim,
            } => {
                t.insert("source".into(), Value::String("superclass".into()));
                t.insert("n_super".into(), int(*n_super));
                t.insert("n_sub".into(), int(*n_sub));
                t.insert("n_per_sub".into(), int(*n_per_sub));
                t.insert("test_per_sub".into(), int(*test_per_sub));
                t.insert("dim".into(), int(*dim));
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                n_classes,
            } => {
                t.insert("source".into(), Value::String("idx".into()));
                t.insert("train_images".into(), path_value(train_images));
                t.insert("train_labels".into(), path_value(train_labels));
                t.insert("test_images".into(), path_value(test_images));
                t.insert("test_labels".into(), path_value(test_labels));
                if let Some(c) = n_classes {
                    t.insert("n_classes".into(), int(*c));
                }
            }
            DataSpec::Csv { train, test, n_classes } => {
                t.insert("source".into(), Value::String("csv".into()));
                t.insert("train".into(), path_value(train));
                t.insert("test".into(), path_value(test));
                if let Some(c) = n_classes {
                    t.insert("n_classes".into(), int(*c));
                }
            }
        }
        root.insert("data".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("n_clusters".into(), int(self.ood.n_clusters));
        t.insert("n_per_cluster".into(), int(self.ood.n_per_cluster));
        t.insert("distance".into(), Value::Float(self.ood.distance));
        root.insert("ood".into(), Value::Table(t));

        let mut t = Table::new();
        match &self.partition {
            PartitionSpec::Iid => {
                t.insert("scheme".into(), Value::String("iid".into()));
            }
            PartitionSpec::Shard { shards_per_client } => {
                t.insert("scheme".into(), Value::String("shard".into()));
                t.insert("shards_per_client".into(), int(*shards_per_client));
            }
            PartitionSpec::ClassSkew { classes_per_client } => {
                t.insert("scheme".into(), Value::String("class_skew".into()));
                t.insert("classes_per_client".into(), int(*classes_per_client));
            }
            PartitionSpec::ConceptDrift => {
                t.insert("scheme".into(), Value::String("concept_drift".into()));
            }
        }
        root.insert("partition".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("mc_test_samples".into(), int(self.metrics.mc_samples));
        t.insert("ece_bins".into(), int(self.metrics.ece_bins));
        root.insert("metrics".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("epochs".into(), Value::Array(self.ablation_epochs.iter().map(|&e| int(e)).collect()));
        root.insert("ablation".into(), Value::Table(t));

        toml::to_string(&root).expect("plain tables always serialize")
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Collects problems while draining keys out of tables; whatever is left in
/// a table afterwards is an unknown key.
#[derive(Default)]
struct Parser {
    problems: Vec<String>,
}

struct Section {
    path: String,
    table: Table,
}

impl Section {
    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }
}

impl Parser {
    fn section(&mut self, root: &mut Table, name: &str) -> Section {
        let table = match root.remove(name) {
            None => Table::new(),
            Some(Value::Table(t)) => t,
            Some(other) => {
                self.problems.push(format!("{name}: expected a table, got {}", type_name(&other)));
                Table::new()
            }
        };
        Section {
            path: name.into(),
            table,
        }
    }

    fn finish(&mut self, s: Section) {
        for k in s.table.keys() {
            self.problems.push(format!("{}: unknown key", s.key(k)));
        }
    }

    fn wrong(&mut self, s: &Section, k: &str, want: &str, got: &Value) {
        self.problems.push(format!("{}: expected {want}, got {}", s.key(k), type_name(got)));
    }

    fn opt_usize(&mut self, s: &mut Section, k: &str) -> Option<usize> {
        match s.table.remove(k) {
            None => None,
            Some(Value::Integer(i)) if i >= 0 => Some(i as usize),
            Some(Value::Integer(i)) => {
                self.problems.push(format!("{}: must be nonnegative, got {i}", s.key(k)));
                None
            }
            Some(v) => {
                self.wrong(s, k, "an integer", &v);
                None
            }
        }
    }

    fn usize(&mut self, s: &mut Section, k: &str, default: usize) -> usize {
        self.opt_usize(s, k).unwrap_or(default)
    }

    fn opt_f64(&mut self, s: &mut Section, k: &str) -> Option<f64> {
        match s.table.remove(k) {
            None => None,
            Some(Value::Float(x)) => Some(x),
            Some(Value::Integer(i)) => Some(i as f64),
            Some(v) => {
                self.wrong(s, k, "a number", &v);
                None
            }
        }
    }

    fn f64(&mut self, s: &mut Section, k: &str, default: f64) -> f64 {
        self.opt_f64(s, k).unwrap_or(default)
    }

    fn opt_string(&mut self, s: &mut Section, k: &str) -> Option<String> {
        match s.table.remove(k) {
            None => None,
            Some(Value::String(x)) => Some(x),
            Some(v) => {
                self.wrong(s, k, "a string", &v);
                None
            }
        }
    }

    fn required_path(&mut self, s: &mut Section, k: &str) -> PathBuf {
        match self.opt_string(s, k) {
            Some(p) => PathBuf::from(p),
            None => {
                if !self.problems.iter().any(|p| p.starts_with(&s.key(k))) {
                    self.problems.push(format!("{}: required", s.key(k)));
                }
                PathBuf::new()
            }
        }
    }

    fn choice<T>(&mut self, s: &mut Section, k: &str, default: T, options: &[&str], parse: impl Fn(&str) -> Option<T>) -> T {
        match self.opt_string(s, k) {
            None => default,
            Some(v) => parse(&v).unwrap_or_else(|| {
                self.problems
                    .push(format!("{}: expected one of {}, got {v:?}", s.key(k), options.join(", ")));
                default
            }),
        }
    }

    fn usize_list(&mut self, s: &mut Section, k: &str, default: Vec<usize>) -> Vec<usize> {
        match s.table.remove(k) {
            None => default,
            Some(Value::Array(items)) => {
                let mut out = Vec::new();
                for (i, v) in items.iter().enumerate() {
                    match v {
                        Value::Integer(x) if *x >= 0 => out.push(*x as usize),
                        other => self.problems.push(format!(
                            "{}[{i}]: expected a nonnegative integer, got {}",
                            s.key(k),
                            type_name(other)
                        )),
                    }
                }
                out
            }
            Some(v) => {
                self.wrong(s, k, "an array", &v);
                default
            }
        }
    }

    fn config(&mut self, mut root: Table) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_name("");
        let mut top = Section {
            path: String::new(),
            table: Table::new(),
        };
        for k in ["name", "seed", "output_dir", "mode"] {
            if let Some(v) = root.remove(k) {
                top.table.insert(k.into(), v);
            }
        }
        match self.opt_string(&mut top, "name") {
            Some(n) => cfg.name = n,
            None if !self.problems.iter().any(|p| p.starts_with("name")) => {
                self.problems.push("name: required".into());
            }
            None => {}
        }
        match top.table.remove("seed") {
            None => {}
            Some(Value::Integer(i)) if i >= 0 => cfg.seed = i as u64,
            Some(Value::Integer(i)) => self.problems.push(format!("seed: must be nonnegative, got {i}")),
            Some(v) => self.wrong(&top, "seed", "an integer", &v),
        }
        if let Some(d) = self.opt_string(&mut top, "output_dir") {
            cfg.output_dir = d.into();
        }
        cfg.mode = self.choice(&mut top, "mode", Mode::Standard, &["standard", "personalized", "ood", "ablation"], Mode::parse);

        let mut s = self.section(&mut root, "federation");
        let d = FederationSection::default();
        cfg.federation = FederationSection {
            n_clients: self.usize(&mut s, "n_clients", d.n_clients),
            rounds: self.usize(&mut s, "rounds", d.rounds),
            participation_fraction: self.f64(&mut s, "participation_fraction", d.participation_fraction),
            algorithm: self.choice(&mut s, "algorithm", d.algorithm, &["fedivon", "fedavg", "local_only"], Algorithm::parse),
            beta: self.f64(&mut s, "beta", d.beta),
            eval_every: self.usize(&mut s, "eval_every", d.eval_every),
            parallel: self.usize(&mut s, "parallel", d.parallel),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "model");
        let d = ModelSection::default();
        cfg.model = ModelSection {
            hidden: self.usize_list(&mut s, "hidden", d.hidden),
            activation: self.choice(&mut s, "activation", d.activation, &["relu", "tanh"], |v| match v {
                "relu" => Some(Activation::Relu),
                "tanh" => Some(Activation::Tanh),
                _ => None,
            }),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "ivon");
        let d = experiment_ivon_defaults();
        let ess = match s.table.remove("ess") {
            None => d.ess,
            Some(Value::Integer(i)) => Ess::Fixed(i as f64),
            Some(Value::Float(x)) => Ess::Fixed(x),
            Some(Value::String(t)) if t == "dataset" => Ess::DatasetSize,
            Some(v) => {
                self.problems.push(format!("ivon.ess: expected a number or \"dataset\", got {}", match &v {
                    Value::String(t) => format!("{t:?}"),
                    other => type_name(other).to_string(),
                }));
                d.ess
            }
        };
        cfg.ivon = IvonConfig {
            beta1: self.f64(&mut s, "beta1", d.beta1),
            beta2: self.f64(&mut s, "beta2", d.beta2),
            lr_initial: self.f64(&mut s, "lr_initial", d.lr_initial),
            lr_final: self.f64(&mut s, "lr_final", d.lr_final),
            weight_decay: self.f64(&mut s, "weight_decay", d.weight_decay),
            ess,
            h_init: self.f64(&mut s, "h_init", d.h_init),
            batch_size: self.usize(&mut s, "batch_size", d.batch_size),
            epochs: self.usize(&mut s, "epochs", d.epochs),
            train_mc_samples: self.usize(&mut s, "train_mc_samples", d.train_mc_samples),
            clip_grad_norm: self.opt_f64(&mut s, "clip_grad_norm"),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "baseline");
        let d = BaselineConfig::default();
        cfg.baseline = BaselineConfig {
            optimizer: self.choice(&mut s, "optimizer", d.optimizer, &["sgd", "adam"], |v| match v {
                "sgd" => Some(Optimizer::Sgd),
                "adam" => Some(Optimizer::Adam),
                _ => None,
            }),
            lr_initial: self.f64(&mut s, "lr_initial", d.lr_initial),
            lr_final: self.f64(&mut s, "lr_final", d.lr_final),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "data");
        let source = self.opt_string(&mut s, "source").unwrap_or_else(|| "blobs".into());
        cfg.data = match source.as_str() {
            "blobs" => {
                let DataSpec::Blobs {
                    n_classes,
                    n_per_class,
                    test_per_class,
                    dim,
                    separation,
                } = DataSpec::default()
                else {
                    unreachable!()
                };
                DataSpec::Blobs {
                    n_classes: self.usize(&mut s, "n_classes", n_classes),
                    n_per_class: self.usize(&mut s, "n_per_class", n_per_class),
                    test_per_class: self.usize(&mut s, "test_per_class", test_per_class),
                    dim: self.usize(&mut s, "dim", dim),
                    separation: self.f64(&mut s, "separation", separation),
                }
            }
            "superclass" => DataSpec::Superclass {
                n_super: self.usize(&mut s, "n_super", 4),
                n_sub: self.usize(&mut s, "n_sub", 3),
                n_per_sub: self.usize(&mut s, "n_per_sub", 60),
                test_per_sub: self.usize(&mut s, "test_per_sub", 30),
                dim: self.usize(&mut s, "dim", 10),
            },
            "idx" => DataSpec::Idx {
                train_images: self.required_path(&mut s, "train_images"),
                train_labels: self.required_path(&mut s, "train_labels"),
                test_images: self.required_path(&mut s, "test_images"),
                test_labels: self.required_path(&mut s, "test_labels"),
                n_classes: self.opt_usize(&mut s, "n_classes"),
            },
            "csv" => DataSpec::Csv {
                train: self.required_path(&mut s, "train"),
                test: self.required_path(&mut s, "test"),
                n_classes: self.opt_usize(&mut s, "n_classes"),
            },
            other => {
                self.problems.push(format!(
                    "data.source: expected one of blobs, superclass, idx, csv, got {other:?}"
                ));
                s.table.clear();
                DataSpec::default()
            }
        };
        self.finish(s);

        let mut s = self.section(&mut root, "ood");
        let d = OodSpec::default();
        cfg.ood = OodSpec {
            n_clusters: self.usize(&mut s, "n_clusters", d.n_clusters),
            n_per_cluster: self.usize(&mut s, "n_per_cluster", d.n_per_cluster),
            distance: self.f64(&mut s, "distance", d.distance),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "partition");
        let scheme = self.opt_string(&mut s, "scheme").unwrap_or_else(|| "shard".into());
        cfg.partition = match scheme.as_str() {
            "iid" => PartitionSpec::Iid,
            "shard" => PartitionSpec::Shard {
                shards_per_client: self.usize(&mut s, "shards_per_client", 2),
            },
            "class_skew" => PartitionSpec::ClassSkew {
                classes_per_client: self.usize(&mut s, "classes_per_client", 5),
            },
            "concept_drift" => PartitionSpec::ConceptDrift,
            other => {
                self.problems.push(format!(
                    "partition.scheme: expected one of iid, shard, class_skew, concept_drift, got {other:?}"
                ));
                s.table.clear();
                PartitionSpec::default()
            }
        };
        self.finish(s);

        let mut s = self.section(&mut root, "metrics");
        let d = EvalConfig::default();
        cfg.metrics = EvalConfig {
            mc_samples: self.usize(&mut s, "mc_test_samples", d.mc_samples),
            ece_bins: self.usize(&mut s, "ece_bins", d.ece_bins),
        };
        self.finish(s);

        let mut s = self.section(&mut root, "ablation");
        cfg.ablation_epochs = self.usize_list(&mut s, "epochs", vec![1, 2]);
        self.finish(s);

        self.finish(top);
        for k in root.keys() {
            self.problems.push(format!("{k}: unknown key"));
        }
        cfg
    }
}
