//! Global descriptors: soft-assignment VLAD pooling, k-means fitting of the
//! cluster parameters, PCA compression and the lazy triplet loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};
use crate::math::{expf, normalize, sq, sq_dist, sqrt};
use crate::rem::FeatureMap;

/// Default softmax sharpness for k-means-initialized assignment.
pub const DEFAULT_SHARPNESS: f32 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VladProvenance {
    KMeans,
    Loaded,
}

/// Cluster centers and soft-assignment parameters, each `[K][C]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    pub clusters: usize,
    pub channels: usize,
    pub centers: Vec<f32>,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
    pub provenance: VladProvenance,
}

impl VladParams {
    /// Assignment parameters `w_k = 2a c_k`, `b_k = -a |c_k|^2`, so the
    /// softmax ranks clusters by distance to their centers.
    pub fn from_centers(clusters: usize, channels: usize, centers: Vec<f32>, sharpness: f32) -> Result<Self> {
        if clusters < 2 {
            return Err(invalid("VLAD needs at least two clusters"));
        }
        if centers.len() != clusters * channels {
            return Err(shape("center block length is not K * C"));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(invalid("non-finite cluster center"));
        }
        let weights = centers.iter().map(|&c| 2.0 * sharpness * c).collect();
        let biases = centers
            .chunks(channels)
            .map(|c| -sharpness * c.iter().map(|x| x * x).sum::<f32>())
            .collect();
        Ok(Self {
            clusters,
            channels,
            centers,
            weights,
            biases,
            provenance: VladProvenance::KMeans,
        })
    }

    pub fn check(&self) -> Result<()> {
        let kc = self.clusters * self.channels;
        if self.clusters < 2 || self.centers.len() != kc || self.weights.len() != kc || self.biases.len() != self.clusters {
            return Err(shape("VLAD parameter blocks have inconsistent lengths"));
        }
        Ok(())
    }

    pub fn center(&self, k: usize) -> &[f32] {
        &self.centers[k * self.channels..(k + 1) * self.channels]
    }

    pub fn output_dim(&self) -> usize {
        self.clusters * self.channels
    }

    /// Soft assignment of one feature to every cluster.
    pub fn assign(&self, f: &[f32], out: &mut [f32]) {
        let c = self.channels;
        let mut max = f32::NEG_INFINITY;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * c..(k + 1) * c];
            *o = w.iter().zip(f).map(|(a, b)| a * b).sum::<f32>() + self.biases[k];
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = expf(*o - max);
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// A pooled scene descriptor. `raw` is the intra- and L2-normalized
/// `K * C` VLAD vector; `reduced` is its normalized PCA projection.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub raw: Vec<f32>,
    pub reduced: Option<Vec<f32>>,
    /// Every residual block was zero.
    pub degenerate: bool,
}

impl GlobalDescriptor {
    /// The reduced form when present, else the raw vector.
    pub fn vector(&self) -> &[f32] {
        self.reduced.as_deref().unwrap_or(&self.raw)
    }
}

/// Pools a list of local features. Each feature is L2-normalized before
/// assignment, matching the descriptors the clusters are fitted on.
pub fn pool_features(features: &[f32], params: &VladParams) -> Result<GlobalDescriptor> {
    params.check()?;
    let (k, c) = (params.clusters, params.channels);
    if !features.len().is_multiple_of(c) {
        return Err(shape(format!("feature list length {} is not a multiple of {c}", features.len())));
    }
    let mut acc = vec![0.0f32; k * c];
    let mut mass = vec![0.0f32; k];
    let mut f = vec![0.0f32; c];
    let mut a = vec![0.0f32; k];
    for chunk in features.chunks(c) {
        f.copy_from_slice(chunk);
        normalize(&mut f);
        params.assign(&f, &mut a);
        for j in 0..k {
            let w = a[j];
            mass[j] += w;
            let row = &mut acc[j * c..(j + 1) * c];
            for (r, x) in row.iter_mut().zip(&f) {
                *r += w * x;
            }
        }
    }
    let mut any = false;
    for j in 0..k {
        let center = params.center(j);
        let row = &mut acc[j * c..(j + 1) * c];
        for (r, &cj) in row.iter_mut().zip(center) {
            *r -= mass[j] * cj;
        }
        any |= normalize(row);
    }
    normalize(&mut acc);
    Ok(GlobalDescriptor {
        raw: acc,
        reduced: None,
        degenerate: !any,
    })
}

/// VLAD over every cell of a feature map.
pub fn pool_vlad(map: &FeatureMap, params: &VladParams) -> Result<GlobalDescriptor> {
    if map.channels() != params.channels {
        return Err(shape(format!(
            "feature map has {} channels, VLAD expects {}",
            map.channels(),
            params.channels
        )));
    }
    pool_features(map.tensor.data(), params)
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub params: VladParams,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations on `samples` (`dim`
/// floats each). Empty clusters keep their previous center.
pub fn fit_kmeans(samples: &[f32], dim: usize, k: usize, seed: u64, iters: usize, sharpness: f32) -> Result<KMeansFit> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(shape("sample block is not a multiple of the dimension"));
    }
    let n = samples.len() / dim;
    if k < 2 {
        return Err(invalid("k-means needs k >= 2"));
    }
    if n < k {
        return Err(invalid(format!("{n} samples for {k} clusters")));
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)) as f64).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while nearest[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.extend_from_slice(row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)) as f64);
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = Vec::new();
    let mut dots = vec![0.0f32; n * k];
    let mut sample_sq: Vec<f32> = (0..n).map(|i| row(i).iter().map(|x| x * x).sum()).collect();
    sample_sq.shrink_to_fit();
    for it in 0..iters.max(1) {
        // |x - c|^2 = |x|^2 - 2 x.c + |c|^2, with x.c from one GEMM.
        let center_sq: Vec<f32> = centers.chunks(dim).map(|c| c.iter().map(|x| x * x).sum()).collect();
        // SAFETY: samples is n x dim, centers is k x dim read transposed
        // (row stride 1, column stride dim), dots is n x k.
        unsafe {
            matrixmultiply::sgemm(
                n,
                dim,
                k,
                1.0,
                samples.as_ptr(),
                dim as isize,
                1,
                centers.as_ptr(),
                1,
                dim as isize,
                0.0,
                dots.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut total = 0.0f64;
        for i in 0..n {
            let mut best = (f32::INFINITY, 0usize);
            for j in 0..k {
                let d = (sample_sq[i] - 2.0 * dots[i * k + j] + center_sq[j]).max(0.0);
                if d < best.0 {
                    best = (d, j);
                }
            }
            labels[i] = best.1;
            // Exact distance for the reported inertia.
            total += sq_dist(row(i), &centers[best.1 * dim..(best.1 + 1) * dim]) as f64;
        }
        inertia.push(total);
        if it + 1 == iters.max(1) {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let l = labels[i];
            counts[l] += 1;
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            for d in 0..dim {
                let v = (sums[j * dim + d] / counts[j] as f64) as f32;
                if v != centers[j * dim + d] {
                    moved = true;
                }
                centers[j * dim + d] = v;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(KMeansFit {
        params: VladParams::from_centers(k, dim, centers, sharpness)?,
        inertia,
    })
}

/// Mean vector and orthonormal projection rows (`out_dim x in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f32>,
    pub components: Vec<f32>,
}

impl PcaProjection {
    pub fn project(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim {
            return Err(shape(format!("PCA expects {} inputs, got {}", self.in_dim, x.len())));
        }
        let centered: Vec<f32> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .components
            .chunks(self.in_dim)
            .map(|row| row.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Projects and L2-normalizes.
    pub fn reduce(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut y = self.project(x)?;
        normalize(&mut y);
        Ok(y)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.components[i * self.in_dim..(i + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub projection: PcaProjection,
    /// Fraction of total variance along each output row (zero for rows
    /// added to complete the basis).
    pub explained_variance_ratio: Vec<f64>,
    /// Eigenvalues of the sample covariance, descending, for every
    /// principal direction found.
    pub eigenvalues: Vec<f64>,
    /// The data had no variance at all.
    pub degenerate: bool,
    /// Fewer informative directions than `out_dim`; the remaining rows were
    /// filled with an orthonormal completion.
    pub completed: bool,
}

/// Principal directions of `n` samples of `dim` floats.
///
/// Works on the `n x n` Gram matrix when `n < dim`. When the data span fewer
/// than `out_dim` directions, the projection is completed with orthonormal
/// directions from the coordinate axes, so the output dimension is always
/// `out_dim`.
pub fn fit_pca(samples: &[f32], dim: usize, out_dim: usize) -> Result<PcaFit> {
    if dim == 0 || !samples.len().is_multiple_of(dim) || samples.is_empty() {
        return Err(shape("PCA needs a non-empty sample block of whole rows"));
    }
    if out_dim == 0 || out_dim > dim {
        return Err(invalid(format!("PCA output dimension {out_dim} not in 1..={dim}")));
    }
    let n = samples.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for r in samples.chunks(dim) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| samples[i * dim + j] as f64 - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };

    // (eigenvalue, unit direction in R^dim)
    let mut directions: Vec<(f64, Vec<f64>)> = Vec::new();
    let total_var;
    if n < dim {
        let gram = &centered * centered.transpose() / denom;
        total_var = gram.trace();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for i in order {
            let lambda = eig.eigenvalues[i];
            let v = centered.transpose() * eig.eigenvectors.column(i);
            let norm = v.norm();
            directions.push((lambda, v.iter().map(|x| x / norm).collect()));
        }
    } else {
        let cov = centered.transpose() * &centered / denom;
        total_var = cov.trace();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for i in order {
            directions.push((eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()));
        }
    }
    let scale = total_var.abs().max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let informative: Vec<(f64, Vec<f64>)> = directions
        .into_iter()
        .filter(|(l, v)| *l > tol && v.iter().all(|x| x.is_finite()))
        .take(out_dim)
        .collect();
    let degenerate = informative.is_empty();
    let eigenvalues: Vec<f64> = informative.iter().map(|(l, _)| *l).collect();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut ratios = Vec::with_capacity(out_dim);
    for (l, v) in informative {
        push_orthonormal(&mut basis, v);
        ratios.push(if total_var > 0.0 { l / total_var } else { 0.0 });
    }
    let completed = basis.len() < out_dim;
    let mut axis = 0;
    while basis.len() < out_dim && axis < dim {
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        if push_orthonormal(&mut basis, e) {
            ratios.push(0.0);
        }
        axis += 1;
    }
    let components = basis.iter().flatten().map(|&x| x as f32).collect();
    Ok(PcaFit {
        projection: PcaProjection {
            in_dim: dim,
            out_dim,
            mean: mean.into_iter().map(|m| m as f32).collect(),
            components,
        },
        explained_variance_ratio: ratios,
        eigenvalues,
        degenerate,
        completed,
    })
}

/// Gram-Schmidt (applied twice) against `basis`; appends the result if it
/// keeps a meaningful norm.
fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) -> bool {
    let orig = sqrt(v.iter().map(|x| x * x).sum());
    for _ in 0..2 {
        for b in basis.iter() {
            let d: f64 = b.iter().zip(&v).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(x, bb)| *x -= d * bb);
        }
    }
    let norm = sqrt(v.iter().map(|x| x * x).sum());
    if norm <= 1e-6 * orig.max(1e-300) || norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    basis.push(v);
    true
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| sq((x - y) as f64)).sum())
}

/// `max_j max(margin + |q - p| - |q - n_j|, 0)`, evaluated on each
/// descriptor's [`GlobalDescriptor::vector`].
pub fn lazy_triplet_loss(
    query: &GlobalDescriptor,
    positive: &GlobalDescriptor,
    negatives: &[GlobalDescriptor],
    margin: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(invalid("lazy triplet loss needs at least one negative"));
    }
    let q = query.vector();
    if positive.vector().len() != q.len() || negatives.iter().any(|n| n.vector().len() != q.len()) {
        return Err(shape("descriptors differ in dimension"));
    }
    let pos = l2(q, positive.vector());
    Ok(negatives
        .iter()
        .map(|n| (margin + pos - l2(q, n.vector())).max(0.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Tensor;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn desc(v: Vec<f32>) -> GlobalDescriptor {
        GlobalDescriptor {
            raw: v,
            reduced: None,
            degenerate: false,
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize, c: usize) -> VladParams {
        let centers = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = VladParams::from_centers(k, c, centers, 1.0).unwrap();
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-2.0..2.0));
        p.biases.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        p.provenance = VladProvenance::Loaded;
        p
    }

    // Literal double-loop softmax-residual sum followed by the normalizations.
    fn vlad_oracle(features: &[Vec<f32>], p: &VladParams) -> Vec<f32> {
        let (k, c) = (p.clusters, p.channels);
        let mut v = vec![vec![0.0f64; c]; k];
        for f in features {
            let n = f.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let f: Vec<f64> = f.iter().map(|x| *x as f64 / n).collect();
            let logits: Vec<f64> = (0..k)
                .map(|j| (0..c).map(|d| p.weights[j * c + d] as f64 * f[d]).sum::<f64>() + p.biases[j] as f64)
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..k {
                let a = logits[j].exp() / denom;
                for d in 0..c {
                    v[j][d] += a * (f[d] - p.centers[j * c + d] as f64);
                }
            }
        }
        for row in v.iter_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let mut flat: Vec<f64> = v.into_iter().flatten().collect();
        let n = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        flat.iter_mut().for_each(|x| *x /= n);
        flat.into_iter().map(|x| x as f32).collect()
    }

    #[test]
    fn pooling_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_params(&mut rng, 3, 8);
            let data: Vec<f32> = (0..4 * 4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let map = FeatureMap {
                tensor: Tensor::from_vec(4, 4, 8, data.clone()).unwrap(),
                stride: 8,
                rotations: 1,
                source_size: 32,
            };
            let got = pool_vlad(&map, &p).unwrap();
            let feats: Vec<Vec<f32>> = data.chunks(8).map(|c| c.to_vec()).collect();
            let want = vlad_oracle(&feats, &p);
            for (a, b) in got.raw.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_residual_block() {
        // One feature sitting on center 0 with a (practically) hard assignment.
        let centers = vec![1.0, 0.0, 0.0, 1.0];
        let p = VladParams::from_centers(2, 2, centers, 200.0).unwrap();
        let d = pool_features(&[1.0, 0.0], &p).unwrap();
        assert!(d.raw[0].abs() < 1e-6 && d.raw[1].abs() < 1e-6);
    }

    #[test]
    fn pooling_is_deterministic_and_checks_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 4, 6);
        let data: Vec<f32> = (0..5 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = FeatureMap {
            tensor: Tensor::from_vec(5, 5, 6, data).unwrap(),
            stride: 8,
            rotations: 1,
            source_size: 40,
        };
        assert_eq!(pool_vlad(&map, &p).unwrap(), pool_vlad(&map, &p).unwrap());
        let wrong = random_params(&mut rng, 4, 5);
        assert!(pool_vlad(&map, &wrong).is_err());
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 5, 16);
        let feats: Vec<Vec<f32>> = (0..64).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let base = pool_features(&feats.concat(), &p).unwrap();
        let mut shuffled = feats.clone();
        for _ in 0..20 {
            shuffled.shuffle(&mut rng);
            let d = pool_features(&shuffled.concat(), &p).unwrap();
            for (a, b) in base.raw.iter().zip(&d.raw) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn kmeans_on_k_samples_recovers_them() {
        let samples = vec![0.0, 0.0, 5.0, 5.0, -3.0, 4.0];
        let fit = fit_kmeans(&samples, 2, 3, 7, 10, 1.0).unwrap();
        let mut got: Vec<Vec<f32>> = fit.params.centers.chunks(2).map(|c| c.to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, vec![vec![-3.0, 4.0], vec![0.0, 0.0], vec![5.0, 5.0]]);
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut samples = vec![];
        let mut means = [[0.0f64; 3]; 2];
        for i in 0..400 {
            let center = if i % 2 == 0 { [10.0, 0.0, 0.0] } else { [-10.0, 5.0, 2.0] };
            for d in 0..3 {
                let x: f64 = center[d] + rng.gen_range(-1.0..1.0);
                samples.push(x as f32);
                means[i % 2][d] += x / 200.0;
            }
        }
        let fit = fit_kmeans(&samples, 3, 2, 1, 20, 1.0).unwrap();
        for m in means {
            let hit = fit.params.centers.chunks(3).any(|c| c.iter().zip(m).all(|(a, b)| (*a as f64 - b).abs() < 0.1));
            assert!(hit, "no center near {m:?}");
        }
    }

    #[test]
    fn kmeans_inertia_is_non_increasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f32> = (0..2000 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = fit_kmeans(&samples, 4, 8, 3, 30, 30.0).unwrap();
        for w in a.inertia.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", a.inertia);
        }
        let b = fit_kmeans(&samples, 4, 8, 3, 30, 30.0).unwrap();
        assert_eq!(a.params, b.params);
        assert!(fit_kmeans(&samples[..8], 4, 3, 0, 5, 1.0).is_err());
    }

    #[test]
    fn pca_rank_one_line() {
        let dir = [1.0f64, 2.0, -2.0, 4.0];
        let n = (dir.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let mut samples = vec![];
        for i in 0..20 {
            let t = i as f64 * 0.37 - 3.0;
            samples.extend(dir.iter().map(|d| (1.0 + t * d) as f32));
        }
        let fit = fit_pca(&samples, 4, 1).unwrap();
        let row = fit.projection.row(0);
        let cos: f64 = row.iter().zip(&dir).map(|(a, b)| *a as f64 * b / n).sum();
        assert!(1.0 - cos.abs() < 1e-6, "cos {cos}");
        assert!((fit.explained_variance_ratio[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pca_isotropic_ratios_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dim = 4;
        let samples: Vec<f32> = (0..20_000 * dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        let fit = fit_pca(&samples, dim, dim).unwrap();
        for r in &fit.explained_variance_ratio {
            assert!((r * dim as f64 - 1.0).abs() < 0.2, "{:?}", fit.explained_variance_ratio);
        }
    }

    #[test]
    fn pca_reconstruction_error_equals_tail_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, dim, keep) = (60, 10, 4);
        // Anisotropic cloud.
        let samples: Vec<f32> = (0..n * dim)
            .map(|i| {
                let x: f64 = StandardNormal.sample(&mut rng);
                (x * (1.0 + (i % dim) as f64)) as f32
            })
            .collect();
        let full = fit_pca(&samples, dim, dim).unwrap();
        let fit = fit_pca(&samples, dim, keep).unwrap();
        let p = &fit.projection;
        let mut err = 0.0f64;
        for x in samples.chunks(dim) {
            let y = p.project(x).unwrap();
            for d in 0..dim {
                let recon: f64 = (0..keep).map(|k| y[k] as f64 * p.row(k)[d] as f64).sum::<f64>() + p.mean[d] as f64;
                err += (x[d] as f64 - recon).powi(2);
            }
        }
        let per_sample = err / (n - 1) as f64;
        let tail: f64 = full.eigenvalues[keep..].iter().sum();
        assert!((per_sample - tail).abs() <= 1e-4 * tail.max(1.0), "{per_sample} vs {tail}");
    }

    #[test]
    fn pca_rows_are_orthonormal_and_completed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, dim, out) = (12, 40, 20);
        let samples: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fit = fit_pca(&samples, dim, out).unwrap();
        assert!(fit.completed);
        assert_eq!(fit.projection.out_dim, out);
        for i in 0..out {
            for j in 0..out {
                let d: f32 = fit.projection.row(i).iter().zip(fit.projection.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-4, "rows {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn pca_zero_variance_is_degenerate() {
        let samples = vec![1.0f32; 5 * 6];
        let fit = fit_pca(&samples, 6, 3).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.projection.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(fit.projection.row(2), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn triplet_examples() {
        let q = desc(vec![0.0, 0.0]);
        assert_eq!(lazy_triplet_loss(&q, &q, &[desc(vec![1.0, 0.0])], 0.3).unwrap(), 0.0);
        let p = desc(vec![1.0, 0.0]);
        let n = vec![desc(vec![0.0, 0.2]), desc(vec![0.0, 3.0])];
        assert!((lazy_triplet_loss(&q, &p, &n, 0.3).unwrap() - 1.1).abs() < 1e-6);
        assert!(lazy_triplet_loss(&q, &p, &[], 0.3).is_err());
    }

    #[test]
    fn triplet_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut v = || desc((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (q, p) = (v(), v());
            let negs: Vec<_> = (0..3).map(|_| v()).collect();
            assert!(lazy_triplet_loss(&q, &p, &negs, 0.3).unwrap() >= 0.0);
        }
    }
}
