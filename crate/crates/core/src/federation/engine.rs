use rayon::prelude::*;

use super::history::{Checkpoint, RoundHistory, RoundRecord};
use super::{client_seed, sample_clients, Algorithm, FederationConfig};
use crate::aggregation::{aggregate, fedavg_aggregate, ClientContribution, GlobalModel};
use crate::baseline::{first_order_update, FirstOrderConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ivon::{client_update, personalized_client_update, Ess, PriorSpec, VariationalPosterior};
use crate::metrics::{self, mc_predict, MetricsRecord, PredictiveBatch, Scores};
use crate::nn::{self, ParamVector};
use crate::seed::{self, Purpose};

/// One simulated client: its private training data and, for personalized
/// evaluation, a test split matching its label distribution.
#[derive(Debug, Clone)]
pub struct ClientHandle {
    pub id: usize,
    pub data: Dataset,
    pub test: Option<Dataset>,
}

/// Held-out data for global-model evaluation. `ood` inputs are scored
/// against `test` by predictive entropy.
#[derive(Debug, Clone, Default)]
pub struct EvalData {
    pub test: Option<Dataset>,
    pub ood: Option<Dataset>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub history: RoundHistory,
    pub global: GlobalModel,
    pub personalized: Vec<Option<VariationalPosterior>>,
}

enum LocalResult {
    Posterior(VariationalPosterior, Option<f64>),
    Point(ParamVector, Option<f64>),
}

impl LocalResult {
    fn loss(&self) -> Option<f64> {
        match self {
            LocalResult::Posterior(_, l) | LocalResult::Point(_, l) => *l,
        }
    }
}

/// Orchestrator state. The server side sees only `(m, h, N)` per client.
pub struct Federation {
    config: FederationConfig,
    clients: Vec<ClientHandle>,
    eval: EvalData,
    global: GlobalModel,
    personalized: Vec<Option<VariationalPosterior>>,
    history: RoundHistory,
    round: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    pub fn new(config: FederationConfig, clients: Vec<ClientHandle>, eval: EvalData) -> Result<Self> {
        config.validate()?;
        if clients.is_empty() {
            return Err(Error::InvalidArgument("federation needs at least one client".into()));
        }
        if clients.len() != config.n_clients {
            return Err(Error::InvalidArgument(format!(
                "config declares {} clients but {} were supplied",
                config.n_clients,
                clients.len()
            )));
        }
        let spec = &config.model;
        for (k, c) in clients.iter().enumerate() {
            if c.id != k {
                return Err(Error::InvalidArgument(format!("client at position {k} has id {}", c.id)));
            }
            let sets = std::iter::once(&c.data).chain(c.test.iter());
            for d in sets {
                if d.dim() != spec.input_dim() || d.n_classes() > spec.n_classes() {
                    return Err(Error::Shape(format!(
                        "client {k} data is {}-dimensional with {} classes, model expects {} and {}",
                        d.dim(),
                        d.n_classes(),
                        spec.input_dim(),
                        spec.n_classes()
                    )));
                }
            }
            if c.data.is_empty() {
                return Err(Error::EmptyDataset.for_client(k));
            }
        }
        for d in eval.test.iter().chain(eval.ood.iter()) {
            if d.dim() != spec.input_dim() {
                return Err(Error::Shape("evaluation data dimension differs from the model input".into()));
            }
        }
        let init_seed = seed::derive(config.seed, Purpose::Init, &[]);
        let global = GlobalModel::initial(spec, init_seed, config.ivon.h_init);
        let pool = if config.parallel > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.parallel)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let n = clients.len();
        Ok(Self {
            config,
            clients,
            eval,
            global,
            personalized: vec![None; n],
            history: RoundHistory::default(),
            round: 0,
            pool,
        })
    }

    /// Continues from a checkpoint; history restarts empty.
    pub fn resume(
        config: FederationConfig,
        clients: Vec<ClientHandle>,
        eval: EvalData,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        checkpoint.validate()?;
        let mut fed = Self::new(config, clients, eval)?;
        if checkpoint.len != fed.global.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model needs {}",
                checkpoint.len,
                fed.global.len()
            )));
        }
        fed.round = checkpoint.round;
        fed.global = checkpoint.global;
        if let Some(pms) = checkpoint.personalized {
            if pms.len() != fed.clients.len() {
                return Err(Error::Shape("checkpoint client count differs".into()));
            }
            fed.personalized = pms
                .into_iter()
                .map(|r| r.map(|r| r.into_posterior()).transpose())
                .collect::<Result<_>>()?;
        }
        Ok(fed)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn global(&self) -> &GlobalModel {
        &self.global
    }

    pub fn personalized(&self) -> &[Option<VariationalPosterior>] {
        &self.personalized
    }

    pub fn history(&self) -> &RoundHistory {
        &self.history
    }

    /// Rounds completed so far, including any before a resume.
    pub fn completed_rounds(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let pms = self
            .config
            .is_personalized()
            .then(|| self.personalized.iter().map(|p| p.as_ref().map(|p| p.to_record())).collect());
        Checkpoint::new(self.round, self.global.clone(), pms)
    }

    fn first_order_config(&self) -> FirstOrderConfig {
        let iv = &self.config.ivon;
        FirstOrderConfig {
            optimizer: self.config.baseline.optimizer,
            lr_initial: self.config.baseline.lr_initial,
            lr_final: self.config.baseline.lr_final,
            weight_decay: iv.weight_decay,
            batch_size: iv.batch_size,
            epochs: iv.epochs,
            clip_grad_norm: iv.clip_grad_norm,
        }
    }

    fn train_client(&self, id: usize, round: usize) -> Result<LocalResult> {
        let cfg = &self.config;
        let spec = &cfg.model;
        let data = &self.clients[id].data;
        let seed = client_seed(cfg.seed, round, id);
        let out = if cfg.algorithm == Algorithm::Fedavg {
            let fit = first_order_update(spec, data, &self.global.mean, &self.first_order_config(), seed)?;
            LocalResult::Point(fit.params, fit.mean_loss)
        } else if cfg.is_personalized() {
            let beta = match cfg.algorithm {
                Algorithm::LocalOnly => 0.0,
                _ => cfg.personalization.unwrap_or(1.0),
            };
            let init = match &self.personalized[id] {
                Some(pm) => GlobalModel {
                    mean: pm.mean.clone(),
                    hessian: pm.hessian.clone(),
                },
                None => self.global.clone(),
            };
            let prior = PriorSpec::from_global(&self.global, beta);
            let fit = personalized_client_update(spec, data, &init, &prior, &cfg.ivon, seed)?;
            LocalResult::Posterior(fit.posterior, fit.mean_loss)
        } else {
            let fit = client_update(spec, data, &self.global, &cfg.ivon, seed)?;
            LocalResult::Posterior(fit.posterior, fit.mean_loss)
        };
        Ok(out)
    }

    /// Runs one round and returns its record.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let round = self.round + 1;
        let cfg = &self.config;
        let sampled = sample_clients(cfg.n_clients, cfg.participation_fraction, round, cfg.seed);
        let work = |&id: &usize| self.train_client(id, round).map_err(|e| e.for_client(id));
        let results: Vec<Result<LocalResult>> = match &self.pool {
            Some(pool) => pool.install(|| sampled.par_iter().map(work).collect()),
            None => sampled.iter().map(work).collect(),
        };
        let results: Vec<LocalResult> = results.into_iter().collect::<Result<_>>()?;

        let client_losses = results.iter().map(LocalResult::loss).collect();
        match self.config.algorithm {
            Algorithm::Fedavg => {
                let means: Vec<(ParamVector, usize)> = sampled
                    .iter()
                    .zip(&results)
                    .map(|(&id, r)| match r {
                        LocalResult::Point(p, _) => (p.clone(), self.clients[id].data.len()),
                        LocalResult::Posterior(p, _) => (p.mean.clone(), self.clients[id].data.len()),
                    })
                    .collect();
                self.global.mean = fedavg_aggregate(&means)?;
            }
            algorithm => {
                let posts: Vec<VariationalPosterior> = results
                    .into_iter()
                    .map(|r| match r {
                        LocalResult::Posterior(p, _) => p,
                        LocalResult::Point(..) => unreachable!("first-order fits only run under fedavg"),
                    })
                    .collect();
                if algorithm == Algorithm::Fedivon {
                    let contribs: Vec<ClientContribution> = sampled
                        .iter()
                        .zip(&posts)
                        .map(|(&id, p)| ClientContribution {
                            mean: p.mean.clone(),
                            hessian: p.hessian.clone(),
                            n_examples: self.clients[id].data.len(),
                        })
                        .collect();
                    self.global = aggregate(&contribs)?;
                }
                if self.config.is_personalized() {
                    for (&id, p) in sampled.iter().zip(posts) {
                        self.personalized[id] = Some(p);
                    }
                }
            }
        }
        self.round = round;

        let due = round % self.config.eval_every == 0 || round == self.config.rounds;
        let metrics = if due { self.evaluate(round)? } else { Vec::new() };
        self.history.push(RoundRecord {
            round,
            sampled,
            client_losses,
            metrics,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs the remaining rounds, calling `on_round` after each.
    pub fn run(&mut self, mut on_round: impl FnMut(&Federation, &RoundRecord) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let record = self.run_round()?.clone();
            on_round(self, &record)?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> FederationOutcome {
        FederationOutcome {
            history: self.history,
            global: self.global,
            personalized: self.personalized,
        }
    }

    /// The global model as a posterior: `λ` is the configured ESS, or the
    /// total number of training examples when ESS follows dataset size.
    pub fn global_posterior(&self) -> Result<VariationalPosterior> {
        let ess = match self.config.ivon.ess {
            Ess::Fixed(v) => v,
            Ess::DatasetSize => self.clients.iter().map(|c| c.data.len()).sum::<usize>() as f64,
        };
        VariationalPosterior::new(
            self.global.mean.clone(),
            self.global.hessian.clone(),
            ess,
            self.config.ivon.weight_decay,
        )
    }

    fn record(&self, round: usize, split: &str, scores: Scores, auroc: Option<f64>, n: usize, mc: usize) -> MetricsRecord {
        MetricsRecord {
            round,
            split: split.into(),
            algorithm: self.config.algorithm.name().into(),
            acc: scores.acc,
            nll: scores.nll,
            ece: scores.ece,
            brier: scores.brier,
            auroc,
            n,
            mc_samples: mc,
        }
    }

    fn variants(&self) -> Vec<usize> {
        let mc = self.config.eval.mc_samples;
        if self.config.algorithm == Algorithm::Fedavg || mc == 0 {
            vec![0]
        } else {
            vec![0, mc]
        }
    }

    fn predict(&self, post: &VariationalPosterior, data: &Dataset, samples: usize, seed: u64) -> Result<PredictiveBatch> {
        mc_predict(post, &self.config.model, data.inputs(), data.labels(), samples, seed)
    }

    /// Metrics for the current models. Global-model records use split
    /// `test`; personalized records (`personalized`) average per-client
    /// scores on each client's matched test split.
    pub fn evaluate(&self, round: usize) -> Result<Vec<MetricsRecord>> {
        let bins = self.config.eval.ece_bins;
        let mut out = Vec::new();
        if let (Some(test), true) = (&self.eval.test, self.config.algorithm != Algorithm::LocalOnly) {
            if !test.is_empty() {
                let post = self.global_posterior()?;
                let seed = seed::derive(self.config.seed, Purpose::Evaluation, &[round as u64, 0]);
                for samples in self.variants() {
                    let pred = self.predict(&post, test, samples, seed)?;
                    let auroc = match &self.eval.ood {
                        Some(ood) if !ood.is_empty() => {
                            let ood_pred = self.predict(&post, ood, samples, seed)?;
                            Some(metrics::auroc(
                                &metrics::predictive_entropy(&ood_pred),
                                &metrics::predictive_entropy(&pred),
                            )?)
                        }
                        _ => None,
                    };
                    let scores = Scores::of(&pred, bins)?;
                    out.push(self.record(round, "test", scores, auroc, test.len(), samples));
                }
            }
        }
        if self.config.is_personalized() {
            for samples in self.variants() {
                let mut all = Vec::new();
                let mut n = 0;
                for (id, pm) in self.personalized.iter().enumerate() {
                    let (Some(pm), Some(test)) = (pm, &self.clients[id].test) else {
                        continue;
                    };
                    if test.is_empty() {
                        continue;
                    }
                    let seed = seed::derive(self.config.seed, Purpose::Evaluation, &[round as u64, id as u64 + 1]);
                    let pred = self.predict(pm, test, samples, seed)?;
                    all.push(Scores::of(&pred, bins)?);
                    n += test.len();
                }
                if let Some(mean) = Scores::mean(&all) {
                    out.push(self.record(round, "personalized", mean, None, n, samples));
                }
            }
        }
        Ok(out)
    }

    /// Global-model scores on an arbitrary dataset at the posterior mean.
    pub fn score_global_at_mean(&self, data: &Dataset) -> Result<Scores> {
        let probs = nn::forward(&self.config.model, &self.global.mean, data.inputs())?;
        let pred = PredictiveBatch::new(probs, data.labels().to_vec(), self.config.model.n_classes())?;
        Scores::of(&pred, self.config.eval.ece_bins)
    }
}

/// Standard federated training (FedIvon or FedAvg) for `config.rounds` rounds.
pub fn run_federation(config: FederationConfig, clients: Vec<ClientHandle>, eval: EvalData) -> Result<FederationOutcome> {
    let mut fed = Federation::new(config, clients, eval)?;
    fed.run(|_, _| Ok(()))?;
    Ok(fed.into_outcome())
}

/// Personalized training: requires `config.personalization` or the
/// local-only algorithm.
pub fn run_personalized(config: FederationConfig, clients: Vec<ClientHandle>, eval: EvalData) -> Result<FederationOutcome> {
    if !config.is_personalized() {
        return Err(Error::InvalidArgument(
            "personalized training needs a personalization strength or the local_only algorithm".into(),
        ));
    }
    run_federation(config, clients, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::ivon::IvonConfig;
    use crate::nn::{Activation, ModelSpec};

    fn setup(k: usize) -> (FederationConfig, Vec<ClientHandle>, EvalData) {
        let spec = ModelSpec::new(vec![2, 6, 3], Activation::Relu).unwrap();
        let data = synth_blobs(3, 10 * k, 2, 5.0, 11).unwrap();
        let clients = (0..k)
            .map(|id| {
                let idx: Vec<usize> = (0..data.len()).filter(|i| i % k == id).collect();
                ClientHandle {
                    id,
                    data: data.subset(&idx),
                    test: None,
                }
            })
            .collect();
        let test = synth_blobs(3, 20, 2, 5.0, 11).unwrap();
        let mut cfg = FederationConfig::new(spec, k, 3);
        cfg.ivon = IvonConfig {
            batch_size: 8,
            epochs: 1,
            ..Default::default()
        };
        cfg.eval.mc_samples = 4;
        (cfg, clients, EvalData { test: Some(test), ood: None })
    }

    #[test]
    fn zero_rounds_keeps_initial_model() {
        let (mut cfg, clients, eval) = setup(2);
        cfg.rounds = 0;
        let fed = Federation::new(cfg.clone(), clients.clone(), eval.clone()).unwrap();
        let initial = fed.global().clone();
        let out = run_federation(cfg, clients, eval).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.global, initial);
    }

    #[test]
    fn eval_every_round_counts() {
        let (cfg, clients, eval) = setup(2);
        let out = run_federation(cfg, clients, eval).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.history.evaluations(), 3);
        // @mean and MC per evaluation
        assert_eq!(out.history.metrics().count(), 6);
    }

    #[test]
    fn single_client_round_is_its_local_update() {
        let (cfg, clients, eval) = setup(1);
        let mut fed = Federation::new(cfg.clone(), clients.clone(), eval).unwrap();
        let start = fed.global().clone();
        fed.run_round().unwrap();
        let local = client_update(&cfg.model, &clients[0].data, &start, &cfg.ivon, client_seed(cfg.seed, 1, 0)).unwrap();
        assert_eq!(fed.global().mean, local.posterior.mean);
        assert_eq!(fed.global().hessian, local.posterior.hessian);
    }

    #[test]
    fn client_errors_carry_the_client_id() {
        let (mut cfg, clients, eval) = setup(2);
        cfg.ivon.ess = Ess::Fixed(1e-300);
        cfg.ivon.h_init = 0.0;
        cfg.ivon.weight_decay = 1e-300;
        let err = run_federation(cfg, clients, eval).unwrap_err();
        assert!(matches!(err, Error::Client { client: 0, .. }), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, clients, eval) = setup(3);
        let full = run_federation(cfg.clone(), clients.clone(), eval.clone()).unwrap();
        let mut first = Federation::new(cfg.clone(), clients.clone(), eval.clone()).unwrap();
        first.run_round().unwrap();
        let cp = Checkpoint::from_json(&first.checkpoint().to_json().unwrap()).unwrap();
        let mut rest = Federation::resume(cfg, clients, eval, cp).unwrap();
        rest.run(|_, _| Ok(())).unwrap();
        assert_eq!(rest.global(), &full.global);
        assert_eq!(rest.history().rounds(), &full.history.rounds()[1..]);
    }

    #[test]
    fn rejects_mismatched_client_count() {
        let (mut cfg, clients, eval) = setup(2);
        cfg.n_clients = 3;
        assert!(Federation::new(cfg, clients, eval).is_err());
    }

    #[test]
    fn personalized_requires_a_strength() {
        let (cfg, clients, eval) = setup(2);
        assert!(run_personalized(cfg, clients, eval).is_err());
    }
}
