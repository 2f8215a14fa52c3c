//! Label-driven non-IID splits. Partitioners only ever read labels.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, Purpose, Stream};

/// Smallest client dataset a randomized split may produce.
pub const MIN_CLIENT_SIZE: usize = 2;
const MAX_SPLIT_ATTEMPTS: usize = 200;

/// Per-client index lists into a dataset, plus the labels each client is
/// matched to for personalized evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    /// Original label ids each client draws from: its classes under class
    /// skew, its chosen subclasses under concept drift.
    pub client_labels: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness, range, and that no client is empty.
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let mut seen = vec![false; n_examples];
        for (k, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Partition(format!("client {k} is empty")));
            }
            for &i in idx {
                if i >= n_examples {
                    return Err(Error::Partition(format!("client {k}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn distinct_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Sorts indices by label, cuts them into `n_clients · shards_per_client`
/// equal contiguous shards, and deals `shards_per_client` random shards to
/// each client. Remainder examples past the last full shard are unused.
pub fn shard_partition(data: &Dataset, n_clients: usize, shards_per_client: usize, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 || shards_per_client == 0 {
        return Err(Error::Partition("need at least one client and one shard per client".into()));
    }
    let n_shards = n_clients * shards_per_client;
    let shard_size = data.len() / n_shards;
    if shard_size == 0 {
        return Err(Error::Partition(format!(
            "{} examples cannot fill {n_shards} shards",
            data.len()
        )));
    }
    let labels = data.labels();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| labels[i]);

    let mut rng = seed::stream(seed, Purpose::Partition, &[0]);
    let mut shard_ids: Vec<usize> = (0..n_shards).collect();
    shard_ids.shuffle(&mut rng);

    let clients: Vec<Vec<usize>> = shard_ids
        .chunks(shards_per_client)
        .map(|shards| {
            shards
                .iter()
                .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    let client_labels = clients.iter().map(|idx| distinct_labels(labels, idx)).collect();
    Ok(PartitionPlan { clients, client_labels })
}

/// Splits `items` among `n` owners at uniformly drawn cut points.
fn uniform_slices(rng: &mut Stream, items: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut cuts: Vec<usize> = (0..n - 1).map(|_| rng.random_range(0..=items.len())).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for &c in cuts.iter().chain(std::iter::once(&items.len())) {
        out.push(items[start..c].to_vec());
        start = c;
    }
    out
}

/// Shared machinery: each client owns a set of source labels; every source
/// label's examples are shuffled and sliced among its owners.
fn split_by_owned_labels(
    data: &Dataset,
    rng: &mut Stream,
    owned: &[Vec<usize>],
) -> Vec<Vec<usize>> {
    let labels = data.labels();
    let n_sources = data.n_classes();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_sources];
    for (i, &y) in labels.iter().enumerate() {
        by_label[y].push(i);
    }
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_sources];
    for (k, ls) in owned.iter().enumerate() {
        for &l in ls {
            owners[l].push(k);
        }
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); owned.len()];
    for (label, who) in owners.iter().enumerate() {
        if who.is_empty() {
            continue;
        }
        let mut items = by_label[label].clone();
        items.shuffle(rng);
        for (k, slice) in who.iter().zip(uniform_slices(rng, &items, who.len())) {
            clients[*k].extend(slice);
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    clients
}

/// Uniform random split: a seeded shuffle dealt round-robin, so client
/// sizes differ by at most one.
pub fn iid_partition(data: &Dataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    let n = data.len();
    if n_clients == 0 || n < n_clients {
        return Err(Error::Partition(format!("{n} examples cannot cover {n_clients} clients")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, Purpose::Partition, &[3]));
    let mut clients = vec![Vec::new(); n_clients];
    for (i, idx) in order.into_iter().enumerate() {
        clients[i % n_clients].push(idx);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    let client_labels = clients.iter().map(|idx| distinct_labels(data.labels(), idx)).collect();
    Ok(PartitionPlan { clients, client_labels })
}

/// Each client gets `classes_per_client` random classes; every class's
/// examples are divided among its owners at uniformly sampled slice
/// indices, which produces strongly unequal client sizes.
pub fn class_skew_partition(data: &Dataset, n_clients: usize, classes_per_client: usize, seed: u64) -> Result<PartitionPlan> {
    let c = data.n_classes();
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Partition(format!(
            "classes_per_client must be in 1..={c}, got {classes_per_client}"
        )));
    }
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let mut rng = seed::stream(seed, Purpose::Partition, &[1]);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let owned: Vec<Vec<usize>> = (0..n_clients)
            .map(|_| {
                let mut v = index::sample(&mut rng, c, classes_per_client).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let clients = split_by_owned_labels(data, &mut rng, &owned);
        if clients.iter().all(|c| c.len() >= MIN_CLIENT_SIZE) {
            return Ok(PartitionPlan {
                clients,
                client_labels: owned,
            });
        }
    }
    Err(Error::Partition(format!(
        "could not give all {n_clients} clients at least {MIN_CLIENT_SIZE} examples after {MAX_SPLIT_ATTEMPTS} draws"
    )))
}

/// Each client picks one subclass per superclass and draws data only from
/// its picks. Training labels for this split are superclass ids (see
/// [`Dataset::to_superclass_task`]); `client_labels` holds the subclass picks.
pub fn concept_drift_partition(data: &Dataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    let map = data
        .superclasses()
        .ok_or_else(|| Error::Partition("concept drift needs a superclass map".into()))?;
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let n_super = map.iter().max().map_or(0, |m| m + 1);
    let mut subs: Vec<Vec<usize>> = vec![Vec::new(); n_super];
    for (sub, &s) in map.iter().enumerate() {
        subs[s].push(sub);
    }
    let mut rng = seed::stream(seed, Purpose::Partition, &[2]);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let owned: Vec<Vec<usize>> = (0..n_clients)
            .map(|_| {
                subs.iter()
                    .filter(|group| !group.is_empty())
                    .map(|group| group[rng.random_range(0..group.len())])
                    .collect()
            })
            .collect();
        let clients = split_by_owned_labels(data, &mut rng, &owned);
        if clients.iter().all(|c| c.len() >= MIN_CLIENT_SIZE) {
            return Ok(PartitionPlan {
                clients,
                client_labels: owned,
            });
        }
    }
    Err(Error::Partition(format!(
        "could not give all {n_clients} clients at least {MIN_CLIENT_SIZE} examples after {MAX_SPLIT_ATTEMPTS} draws"
    )))
}

/// Indices of examples whose label is in `allowed`.
pub fn matched_test_indices(test: &Dataset, allowed: &[usize]) -> Vec<usize> {
    test.labels()
        .iter()
        .enumerate()
        .filter(|(_, y)| allowed.contains(y))
        .map(|(i, _)| i)
        .collect()
}
