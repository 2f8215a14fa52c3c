//! Fixtures that drive the library: small federations, the ridge fit, and
//! proptest strategies for random networks, contributions and predictions.

use fedivon::data::{matched_test_indices, shard_partition, BlobGenerator};
use fedivon::federation::{client_seed, run_federation, run_personalized, FederationOutcome};
use fedivon::ivon::{client_update, hessian_estimate, ivon_step, noise_stream, IvonConfig, IvonState};
use fedivon::nn::{loss_and_grad, param_count};
use fedivon::{
    Activation, Algorithm, Batch, ClientContribution, ClientHandle, Dataset, EvalData, FederationConfig, GlobalModel,
    ModelSpec, ParamVector, PartitionPlan, PredictiveBatch, VariationalPosterior,
};
use proptest::prelude::*;

use super::{Ridge, ScalarHyper, ScalarState};

/// A one-parameter optimizer state holding the given scalar state.
pub fn scalar_ivon_state(s: ScalarState, hp: ScalarHyper, ess: f64) -> IvonState {
    let cfg = IvonConfig {
        beta1: hp.beta1,
        beta2: hp.beta2,
        weight_decay: hp.delta,
        ..IvonConfig::default()
    };
    let post = VariationalPosterior::new(vec![s.m].into(), vec![s.h].into(), ess, hp.delta).unwrap();
    let mut state = IvonState::new(post, cfg);
    state.momentum = vec![s.g].into();
    state.step = s.e;
    state
}

/// Runs IVON on the ridge problem with a linearly decaying step size.
pub fn fit_ridge(steps: usize, seed: u64) -> VariationalPosterior {
    let ridge = Ridge::fixture();
    let delta = 1e-3;
    let cfg = IvonConfig {
        beta1: 0.9,
        beta2: 0.999,
        weight_decay: delta,
        ..IvonConfig::default()
    };
    let post = VariationalPosterior::new(ParamVector::zeros(3), ParamVector::filled(3, 1.0), 1e4, delta).unwrap();
    let mut state = IvonState::new(post, cfg);
    let mut noise = noise_stream(seed);
    let draws = 8;
    for t in 0..steps {
        let lr = 0.1 + (1e-3 - 0.1) * t as f64 / (steps - 1) as f64;
        let mut g = vec![0.0; 3];
        let mut h = vec![0.0; 3];
        for _ in 0..draws {
            let theta = state.posterior.sample_theta(&mut noise);
            let gs = ridge.grad(&theta);
            let hs = hessian_estimate(&gs, &theta, &state.posterior).unwrap();
            for j in 0..3 {
                g[j] += gs[j] / draws as f64;
                h[j] += hs[j] / draws as f64;
            }
        }
        ivon_step(&mut state, &g.into(), &h.into(), lr).unwrap();
    }
    state.posterior
}

/// Largest mean and curvature errors of the ridge fit against the exact
/// posterior: absolute for the mean, relative for the curvature.
pub fn ridge_errors(post: &VariationalPosterior) -> (f64, f64) {
    let ridge = Ridge::fixture();
    let mean = ridge.posterior_mean(1e-3);
    (0..3).fold((0.0, 0.0), |(em, eh), j| {
        let rel = (post.hessian[j] - ridge.a[j][j]).abs() / ridge.a[j][j];
        (f64::max(em, (post.mean[j] - mean[j]).abs()), f64::max(eh, rel))
    })
}

pub struct Task {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
}

/// Four well-separated 5-dimensional blobs and a one-hidden-layer ReLU net.
pub fn blob_task(n_per_class: usize) -> Task {
    let gen = BlobGenerator::new(4, 5, 5.0, 1).unwrap();
    Task {
        spec: ModelSpec::new(vec![5, 8, 4], Activation::Relu).unwrap(),
        train: gen.sample(n_per_class, 2),
        test: gen.sample(30, 3),
    }
}

pub fn task_config(task: &Task, k: usize, rounds: usize) -> FederationConfig {
    let mut cfg = FederationConfig::new(task.spec.clone(), k, rounds);
    cfg.ivon = IvonConfig {
        batch_size: 8,
        epochs: 2,
        ..IvonConfig::default()
    };
    cfg.eval.mc_samples = 8;
    cfg.seed = 17;
    cfg
}

pub fn task_eval(task: &Task) -> EvalData {
    EvalData {
        test: Some(task.test.clone()),
        ood: None,
    }
}

/// One handle per client; `test` attaches the client-matched test subset.
pub fn split(data: &Dataset, plan: &PartitionPlan, test: Option<&Dataset>) -> Vec<ClientHandle> {
    plan.clients
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientHandle {
            id,
            data: data.subset(idx),
            test: test.map(|t| t.subset(&matched_test_indices(t, &plan.client_labels[id]))),
        })
        .collect()
}

/// A single-client federation and the same client trained by chaining
/// `client_update` round after round with the per-round seeds. Returns
/// (federated, chained).
pub fn single_client_collapse(rounds: usize) -> (GlobalModel, GlobalModel) {
    let task = blob_task(10);
    let cfg = task_config(&task, 1, rounds);
    let client = vec![ClientHandle {
        id: 0,
        data: task.train.clone(),
        test: None,
    }];
    let out = run_federation(cfg.clone(), client, task_eval(&task)).unwrap();

    let init_seed = fedivon::seed::derive(cfg.seed, fedivon::seed::Purpose::Init, &[]);
    let mut model = GlobalModel::initial(&task.spec, init_seed, cfg.ivon.h_init);
    for r in 1..=rounds {
        let fit = client_update(&task.spec, &task.train, &model, &cfg.ivon, client_seed(cfg.seed, r, 0)).unwrap();
        model = GlobalModel {
            mean: fit.posterior.mean,
            hessian: fit.posterior.hessian,
        };
    }
    (out.global, model)
}

/// Personalized fits with zero strength and with the local-only algorithm
/// on the same shard split. Returns (β = 0, local only).
pub fn zero_strength_and_local_only() -> (FederationOutcome, FederationOutcome) {
    let task = blob_task(20);
    let plan = shard_partition(&task.train, 6, 2, 5).unwrap();
    let clients = split(&task.train, &plan, Some(&task.test));
    let mut pers = task_config(&task, 6, 3);
    pers.personalization = Some(0.0);
    let mut local = task_config(&task, 6, 3);
    local.algorithm = Algorithm::LocalOnly;
    let a = run_personalized(pers, clients.clone(), task_eval(&task)).unwrap();
    let b = run_personalized(local, clients, task_eval(&task)).unwrap();
    (a, b)
}

/// Fitted personalized parameters. The stored anchors differ in their mean
/// (the evolving global model) but carry zero precision, so they are left
/// out.
pub fn personalized_params(o: &FederationOutcome) -> Vec<Option<(ParamVector, ParamVector)>> {
    o.personalized
        .iter()
        .map(|p| p.as_ref().map(|p| (p.mean.clone(), p.hessian.clone())))
        .collect()
}

/// Bit patterns of every personalized metrics record.
pub fn personalized_metric_bits(o: &FederationOutcome) -> Vec<(usize, usize, [u64; 4])> {
    o.history
        .metrics()
        .filter(|r| r.split == "personalized")
        .map(|r| (r.round, r.mc_samples, [r.acc.to_bits(), r.nll.to_bits(), r.ece.to_bits(), r.brier.to_bits()]))
        .collect()
}

const FD_STEP: f64 = 1e-5;

/// Largest absolute gap between the analytic gradient and central
/// differences of the loss.
pub fn max_gradient_error(spec: &ModelSpec, params: &ParamVector, inputs: &[f64], labels: &[usize]) -> f64 {
    let batch = Batch::new(inputs, labels);
    let (_, grad) = loss_and_grad(spec, params, &batch).unwrap();
    let mut p = params.clone();
    (0..params.len())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + FD_STEP;
            let up = loss_and_grad(spec, &p, &batch).unwrap().0;
            p[j] = orig - FD_STEP;
            let down = loss_and_grad(spec, &p, &batch).unwrap().0;
            p[j] = orig;
            (grad[j] - (up - down) / (2.0 * FD_STEP)).abs()
        })
        .fold(0.0, f64::max)
}

/// Smallest |pre-activation| over every hidden unit and row. Layout per
/// layer: weights row-major `n_out × n_in`, then `n_out` biases.
pub fn hidden_margin(spec: &ModelSpec, params: &ParamVector, inputs: &[f64]) -> f64 {
    let sizes = spec.layer_sizes();
    let mut margin = f64::INFINITY;
    for x in inputs.chunks(sizes[0]) {
        let mut act = x.to_vec();
        let mut offset = 0;
        for l in 0..sizes.len() - 2 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &params.as_slice()[offset..offset + n_in * n_out];
            let b = &params.as_slice()[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let z: Vec<f64> = (0..n_out)
                .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * act[i]).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            act = match spec.activation() {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
            };
        }
    }
    margin
}

/// Differences straddling a ReLU kink measure the average slope, not the
/// derivative, so such cases are not gradient checks.
pub fn differentiable_here(spec: &ModelSpec, params: &ParamVector, inputs: &[f64]) -> bool {
    spec.activation() == Activation::Tanh || hidden_margin(spec, params, inputs) > 1e-3
}

/// A random architecture with parameters, inputs and labels to match.
pub fn arb_network_case() -> impl Strategy<Value = (ModelSpec, ParamVector, Vec<f64>, Vec<usize>)> {
    (
        prop::collection::vec(1usize..5, 0..3),
        1usize..5,
        2usize..5,
        prop_oneof![Just(Activation::Tanh), Just(Activation::Relu)],
        1usize..5,
    )
        .prop_flat_map(|(hidden, input, classes, act, rows)| {
            let mut sizes = vec![input];
            sizes.extend(hidden);
            sizes.push(classes);
            let spec = ModelSpec::new(sizes, act).unwrap();
            let p = param_count(&spec);
            (
                Just(spec),
                prop::collection::vec(-1.5f64..1.5, p).prop_map(ParamVector::from),
                prop::collection::vec(-2.0f64..2.0, rows * input),
                prop::collection::vec(0..classes, rows),
            )
        })
}

pub fn contribution(means: &[f64], hs: &[f64], n: usize) -> ClientContribution {
    ClientContribution {
        mean: means.to_vec().into(),
        hessian: hs.to_vec().into(),
        n_examples: n,
    }
}

/// One to five clients over one to four coordinates.
pub fn arb_contribs() -> impl Strategy<Value = Vec<ClientContribution>> {
    (1usize..6, 1usize..5).prop_flat_map(|(k, p)| {
        prop::collection::vec(
            (
                prop::collection::vec(-100.0f64..100.0, p),
                prop::collection::vec(1e-6f64..1e3, p),
                1usize..10_000,
            )
                .prop_map(|(m, h, n)| contribution(&m, &h, n)),
            k,
        )
    })
}

/// Strictly positive predictive rows with a bin count for calibration.
pub fn arb_batch() -> impl Strategy<Value = (PredictiveBatch, usize)> {
    (1usize..30, 2usize..6, 1usize..12).prop_flat_map(|(n, c, bins)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), n),
            prop::collection::vec(0..c, n),
            Just(c),
            Just(bins),
        )
            .prop_map(|(rows, labels, c, bins)| {
                let probs = rows
                    .iter()
                    .flat_map(|r| {
                        let s: f64 = r.iter().sum::<f64>() + 1e-3;
                        r.iter().map(move |v| (v + 1e-3 / c as f64) / s).collect::<Vec<_>>()
                    })
                    .collect();
                (PredictiveBatch::new(probs, labels, c).unwrap(), bins)
            })
    })
}

/// Small integer-valued scores, so ties are common.
pub fn arb_scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let score = (0u8..6).prop_map(f64::from);
    (
        prop::collection::vec(score.clone(), 1..11),
        prop::collection::vec(score, 1..11),
    )
}
