use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, Purpose, Stream};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn gaussian_vec(rng: &mut Stream, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Places `n` points on a sphere so every pair is at least `min_dist`
/// apart. The radius grows by 10% whenever rejection sampling stalls.
fn place_centers(rng: &mut Stream, n: usize, dim: usize, min_dist: f64) -> Vec<Vec<f64>> {
    let mut radius = min_dist;
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut attempts = 0;
        while centers.len() < n && attempts < MAX_PLACEMENT_ATTEMPTS {
            attempts += 1;
            let v = gaussian_vec(rng, dim, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let c: Vec<f64> = v.iter().map(|x| x * radius / norm).collect();
            if centers.iter().all(|o| dist(o, &c) >= min_dist) {
                centers.push(c);
            }
        }
        if centers.len() == n {
            return centers;
        }
        radius *= 1.1;
    }
}

fn sample_around(rng: &mut Stream, center: &[f64], std: f64, out: &mut Vec<f64>) {
    for &c in center {
        out.push(c + std * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Isotropic unit-variance Gaussian clusters, one per class, with class
/// means at pairwise distance at least `separation`.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    centers: Vec<Vec<f64>>,
    dim: usize,
    std: f64,
}

impl BlobGenerator {
    pub fn new(n_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if n_classes < 2 || dim == 0 || !(separation > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blobs need ≥ 2 classes, positive dim and separation (got {n_classes}, {dim}, {separation})"
            )));
        }
        let mut rng = seed::stream(seed, Purpose::Data, &[0]);
        Ok(Self {
            centers: place_centers(&mut rng, n_classes, dim, separation),
            dim,
            std: 1.0,
        })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    /// `n_per_class` draws from every class, class-major order.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Dataset {
        let mut rng = seed::stream(seed, Purpose::Data, &[1]);
        let c = self.centers.len();
        let mut inputs = Vec::with_capacity(c * n_per_class * self.dim);
        let mut labels = Vec::with_capacity(c * n_per_class);
        for (label, center) in self.centers.iter().enumerate() {
            for _ in 0..n_per_class {
                sample_around(&mut rng, center, self.std, &mut inputs);
                labels.push(label);
            }
        }
        Dataset::new(inputs, labels, self.dim, c).expect("generator produces consistent shapes")
    }
}

/// `n_classes · n_per_class` examples from well-separated Gaussian blobs.
pub fn synth_blobs(n_classes: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    Ok(BlobGenerator::new(n_classes, dim, separation, seed)?.sample(n_per_class, seed))
}

/// Orthonormal basis of the span of `vectors` (Gram-Schmidt, dropping
/// near-dependent directions).
fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for b in &basis {
            let proj: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        if norm > 1e-9 * scale {
            basis.push(r.iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Out-of-distribution clusters, labeled 0 (labels are not meaningful for
/// OOD data). Each center sits at the centroid of the reference centers,
/// offset along a random direction orthogonal to their affine span by the
/// smallest step that leaves every reference center at least `distance`
/// away. The clusters thus fill the gap between classes rather than the
/// far exterior, where piecewise-linear networks extrapolate confidently.
/// Needs `dim` larger than the span's rank.
pub fn ood_clusters(
    reference: &[Vec<f64>],
    n_clusters: usize,
    n_per_cluster: usize,
    distance: f64,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    let dim = reference.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
    if !(distance > 0.0) {
        return Err(Error::InvalidArgument(format!("OOD distance must be positive, got {distance}")));
    }
    let k = reference.len() as f64;
    let centroid: Vec<f64> = (0..dim).map(|j| reference.iter().map(|c| c[j]).sum::<f64>() / k).collect();
    let offsets: Vec<Vec<f64>> = reference
        .iter()
        .map(|c| c.iter().zip(&centroid).map(|(x, m)| x - m).collect())
        .collect();
    let span = orthonormal_basis(&offsets);
    if span.len() >= dim {
        return Err(Error::InvalidArgument(format!(
            "OOD clusters need dim > {} to leave the span of the class centers, got {dim}",
            span.len()
        )));
    }
    // Orthogonality makes the squared distance to center i equal
    // |offset_i|² + step².
    let nearest = offsets
        .iter()
        .map(|o| o.iter().map(|x| x * x).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let step = (distance * distance - nearest).max(0.0).sqrt();
    let mut rng = seed::stream(seed, Purpose::Data, &[2]);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    while centers.len() < n_clusters {
        let mut v = gaussian_vec(&mut rng, dim, 1.0);
        for b in &span {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        centers.push(centroid.iter().zip(&v).map(|(m, x)| m + step * x / norm).collect());
    }
    let mut inputs = Vec::with_capacity(n_clusters * n_per_cluster * dim);
    for center in &centers {
        for _ in 0..n_per_cluster {
            sample_around(&mut rng, center, 1.0, &mut inputs);
        }
    }
    Dataset::new(inputs, vec![0; n_clusters * n_per_cluster], dim, n_classes)
}

/// Hierarchical blobs: superclass centers far apart, subclass centers
/// scattered around them.
#[derive(Debug, Clone)]
pub struct SuperclassGenerator {
    sub_centers: Vec<Vec<f64>>,
    map: Vec<usize>,
    dim: usize,
}

impl SuperclassGenerator {
    /// Superclass centers are at least `separation` apart; subclass offsets
    /// have per-coordinate standard deviation `sub_spread`.
    pub fn new(
        n_super: usize,
        n_sub_per_super: usize,
        dim: usize,
        separation: f64,
        sub_spread: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_super < 2 || n_sub_per_super == 0 || dim == 0 || !(separation > 0.0) || !(sub_spread >= 0.0) {
            return Err(Error::InvalidArgument(
                "superclass generator needs ≥ 2 superclasses and positive sizes".into(),
            ));
        }
        let mut rng = seed::stream(seed, Purpose::Data, &[3]);
        let supers = place_centers(&mut rng, n_super, dim, separation);
        let mut sub_centers = Vec::with_capacity(n_super * n_sub_per_super);
        let mut map = Vec::with_capacity(n_super * n_sub_per_super);
        for (s, center) in supers.iter().enumerate() {
            for _ in 0..n_sub_per_super {
                let off = gaussian_vec(&mut rng, dim, sub_spread);
                sub_centers.push(center.iter().zip(off).map(|(c, o)| c + o).collect());
                map.push(s);
            }
        }
        Ok(Self { sub_centers, map, dim })
    }

    pub fn sub_centers(&self) -> &[Vec<f64>] {
        &self.sub_centers
    }

    pub fn superclass_map(&self) -> &[usize] {
        &self.map
    }

    /// `n_per_sub` draws per subclass; labels are subclass ids.
    pub fn sample(&self, n_per_sub: usize, seed: u64) -> Dataset {
        let mut rng = seed::stream(seed, Purpose::Data, &[4]);
        let n = self.sub_centers.len();
        let mut inputs = Vec::with_capacity(n * n_per_sub * self.dim);
        let mut labels = Vec::with_capacity(n * n_per_sub);
        for (label, center) in self.sub_centers.iter().enumerate() {
            for _ in 0..n_per_sub {
                sample_around(&mut rng, center, 1.0, &mut inputs);
                labels.push(label);
            }
        }
        Dataset::new(inputs, labels, self.dim, n)
            .and_then(|d| d.with_superclasses(self.map.clone()))
            .expect("generator produces consistent shapes")
    }
}

/// Hierarchical blob dataset with superclass separation `4·√dim` and
/// subclass spread 1.
pub fn synth_superclass(n_super: usize, n_sub_per_super: usize, n_per_sub: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let sep = 4.0 * (dim as f64).sqrt();
    Ok(SuperclassGenerator::new(n_super, n_sub_per_super, dim, sep, 1.0, seed)?.sample(n_per_sub, seed))
}
