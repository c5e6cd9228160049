//! Pseudo-category prediction: a confidence-ranked memory bank of weak
//! instance features, EMA prototypes, nearest-centroid labels refined by
//! weighted K-means, and the warm-up blend between feature and embedding
//! space.
//!
//! Index `K` (the last one) is the background category throughout.

use crate::error::{config, Result};
use crate::nn::cosine::cosine_distance;
use crate::nn::scalar::softmax;
use crate::nn::Matrix;

pub const DEFAULT_BANK_CAPACITY: usize = 10;
pub const DEFAULT_PROTO_MOMENTUM: f64 = 0.4;
pub const DEFAULT_KMEANS_ROUNDS: usize = 2;
/// Distance assigned to a missing centroid; larger than any cosine distance.
pub const MISSING_DISTANCE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub feature: Vec<f64>,
    pub confidence: f64,
}

/// `K` queues holding the most confident weak instance features per class,
/// ordered by descending confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    queues: Vec<Vec<BankEntry>>,
}

impl MemoryBank {
    pub fn new(classes: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || classes == 0 {
            return Err(config("memory bank needs positive capacity and class count"));
        }
        Ok(Self { capacity, queues: vec![Vec::new(); classes] })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, k: usize) -> &[BankEntry] {
        &self.queues[k]
    }

    /// Merges `(class, feature, confidence)` candidates, keeping the top
    /// `capacity` per class. Existing entries win confidence ties.
    pub fn update(&mut self, candidates: &[(usize, Vec<f64>, f64)]) -> Result<()> {
        for (k, f, c) in candidates {
            if *k >= self.queues.len() {
                return Err(config(format!("class {k} outside memory bank")));
            }
            if !c.is_finite() {
                return Err(config("non-finite bank confidence"));
            }
            self.queues[*k].push(BankEntry { feature: f.clone(), confidence: *c });
        }
        for q in &mut self.queues {
            q.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            q.truncate(self.capacity);
        }
        Ok(())
    }

    /// Restores queues from serialized entries.
    pub fn from_queues(capacity: usize, queues: Vec<Vec<BankEntry>>) -> Result<Self> {
        let mut bank = Self::new(queues.len(), capacity)?;
        for (k, q) in queues.into_iter().enumerate() {
            if q.len() > capacity {
                return Err(config(format!("queue {k} exceeds capacity")));
            }
            bank.queues[k] = q;
        }
        Ok(bank)
    }
}

/// Foreground prototypes (absent until their queue first fills) and the
/// background prototype.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PrototypeSet {
    pub foreground: Vec<Option<Vec<f64>>>,
    pub background: Option<Vec<f64>>,
    pub step: u64,
}

/// What an update could not do.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeFlags {
    /// Classes whose queue held fewer than `D` entries.
    pub partial: Vec<usize>,
    /// Classes with an empty queue, left unchanged.
    pub empty: Vec<usize>,
    /// Every background weight was zero; the previous background is kept.
    pub background_undefined: bool,
}

impl PrototypeSet {
    pub fn new(classes: usize) -> Self {
        Self { foreground: vec![None; classes], background: None, step: 0 }
    }

    pub fn classes(&self) -> usize {
        self.foreground.len()
    }

    /// All `K + 1` centroids, background last.
    pub fn centroids(&self) -> Vec<Option<Vec<f64>>> {
        let mut c = self.foreground.clone();
        c.push(self.background.clone());
        c
    }
}

/// `P_k ← (1 − η)·P_k + η·mean(map(bank_k))` for every nonempty queue (a
/// class's first update sets it to the mean), and the background prototype
/// as the background-probability-weighted mean of `weak_embs`.
pub fn update_prototypes(
    protos: &mut PrototypeSet,
    bank: &MemoryBank,
    map: &dyn Fn(&Matrix) -> Result<Matrix>,
    weak_embs: &Matrix,
    background_probs: &[f64],
    eta: f64,
) -> Result<PrototypeFlags> {
    if !(0.0..1.0).contains(&eta) {
        return Err(config(format!("prototype momentum {eta} outside [0, 1)")));
    }
    if bank.classes() != protos.classes() {
        return Err(config("bank and prototype class counts differ"));
    }
    if weak_embs.rows() != background_probs.len() {
        return Err(config("one background probability per embedding required"));
    }
    let mut flags = PrototypeFlags::default();
    for k in 0..bank.classes() {
        let q = bank.queue(k);
        if q.is_empty() {
            flags.empty.push(k);
            continue;
        }
        if q.len() < bank.capacity() {
            flags.partial.push(k);
        }
        let rows: Vec<&[f64]> = q.iter().map(|e| e.feature.as_slice()).collect();
        let mapped = map(&Matrix::from_rows(&rows, rows[0].len())?)?;
        let inv = 1.0 / mapped.rows() as f64;
        let mean: Vec<f64> = mapped.column_sums().into_iter().map(|s| s * inv).collect();
        protos.foreground[k] = Some(match &protos.foreground[k] {
            Some(prev) => prev.iter().zip(&mean).map(|(&p, &m)| (1.0 - eta) * p + eta * m).collect(),
            None => mean,
        });
    }
    let total: f64 = background_probs.iter().sum();
    if total > 0.0 {
        let mut bg = vec![0.0; weak_embs.cols()];
        for (row, &w) in weak_embs.iter_rows().zip(background_probs) {
            for (b, &v) in bg.iter_mut().zip(row) {
                *b += w * v;
            }
        }
        protos.background = Some(bg.into_iter().map(|v| v / total).collect());
    } else {
        flags.background_undefined = true;
    }
    protos.step += 1;
    Ok(flags)
}

/// Cosine distance to each centroid; missing ones get [`MISSING_DISTANCE`].
pub fn centroid_distances(z: &[f64], centroids: &[Option<Vec<f64>>]) -> Vec<f64> {
    centroids.iter().map(|c| c.as_ref().map_or(MISSING_DISTANCE, |c| cosine_distance(z, c))).collect()
}

/// Index of the minimum, ties to the lowest index.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v < xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub labels: Vec<usize>,
    /// Rows whose embedding had zero norm (all distances 1).
    pub zero_norm: Vec<usize>,
}

/// Nearest prototype by cosine distance over the `K + 1` centroids.
pub fn nearest_centroid_labels(weak_embs: &Matrix, protos: &PrototypeSet) -> Labels {
    nearest_labels(weak_embs, &protos.centroids())
}

pub fn nearest_labels(embs: &Matrix, centroids: &[Option<Vec<f64>>]) -> Labels {
    let mut out = Labels { labels: Vec::with_capacity(embs.rows()), zero_norm: Vec::new() };
    for (i, z) in embs.iter_rows().enumerate() {
        if z.iter().all(|&v| v == 0.0) {
            out.zero_norm.push(i);
        }
        out.labels.push(argmin(&centroid_distances(z, centroids)));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    /// Centroids used for the final assignment.
    pub centroids: Vec<Option<Vec<f64>>>,
    /// Classes that lost all members and were removed.
    pub dropped: Vec<usize>,
    pub rounds: usize,
}

fn unit(z: &[f64]) -> Vec<f64> {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        z.iter().map(|v| v / n).collect()
    } else {
        z.to_vec()
    }
}

/// Refines `initial` labels by weighted spherical K-means. The first round
/// weights each embedding toward its initial class by its softmax over
/// negative cosine distances to `seeds`; later rounds use hard assignments.
/// Every round recomputes centroids and relabels each embedding to the
/// nearest one. Stops after `rounds` or once labels are stable.
pub fn weighted_kmeans_refine(
    weak_embs: &Matrix,
    initial: &[usize],
    seeds: &[Option<Vec<f64>>],
    rounds: usize,
) -> Result<KmeansResult> {
    let n_cent = seeds.len();
    if initial.len() != weak_embs.rows() {
        return Err(config("one initial label per embedding required"));
    }
    if initial.iter().any(|&l| l >= n_cent) {
        return Err(config("initial label outside the centroid range"));
    }
    let units: Vec<Vec<f64>> = weak_embs.iter_rows().map(unit).collect();
    let mut labels = initial.to_vec();
    let mut centroids = seeds.to_vec();
    let mut dropped = Vec::new();
    let mut done = 0;
    for round in 0..rounds {
        let mut sums = vec![vec![0.0; weak_embs.cols()]; n_cent];
        let mut weights = vec![0.0; n_cent];
        for (i, z) in units.iter().enumerate() {
            let j = labels[i];
            let w = if round == 0 {
                let d = centroid_distances(z, seeds);
                softmax(&d.iter().map(|v| -v).collect::<Vec<_>>())[j]
            } else {
                1.0
            };
            weights[j] += w;
            for (s, &v) in sums[j].iter_mut().zip(z) {
                *s += w * v;
            }
        }
        for j in 0..n_cent {
            if weights[j] > 0.0 {
                centroids[j] = Some(sums[j].iter().map(|s| s / weights[j]).collect());
            } else {
                if centroids[j].is_some() {
                    dropped.push(j);
                }
                centroids[j] = None;
            }
        }
        let next: Vec<usize> = units.iter().map(|z| argmin(&centroid_distances(z, &centroids))).collect();
        done = round + 1;
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
    }
    dropped.sort_unstable();
    Ok(KmeansResult { labels, centroids, dropped, rounds: done })
}

/// `argmin_j (1 − ω)·d_x[j] + ω·d_z[j]`.
pub fn warmup_blend(feature_dists: &[f64], embedding_dists: &[f64], omega: f64) -> Result<usize> {
    if feature_dists.len() != embedding_dists.len() || feature_dists.is_empty() {
        return Err(config("blend needs two equally long, nonempty distance vectors"));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(config(format!("warm-up weight {omega} outside [0, 1]")));
    }
    let blend: Vec<f64> =
        feature_dists.iter().zip(embedding_dists).map(|(&x, &z)| (1.0 - omega) * x + omega * z).collect();
    Ok(argmin(&blend))
}

/// Warm-up weight `t / T₁` during the first epoch, 1 afterwards.
pub fn warmup_weight(epoch: usize, iteration: usize, iterations_per_epoch: usize) -> f64 {
    if epoch > 0 || iterations_per_epoch == 0 {
        1.0
    } else {
        (iteration as f64 / iterations_per_epoch as f64).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(m: &Matrix) -> Result<Matrix> {
        Ok(m.clone())
    }

    #[test]
    fn bank_keeps_top_confidences() {
        let mut bank = MemoryBank::new(1, 2).unwrap();
        bank.update(&[(0, vec![1.0], 0.95), (0, vec![2.0], 0.92)]).unwrap();
        bank.update(&[(0, vec![3.0], 0.93)]).unwrap();
        let c: Vec<f64> = bank.queue(0).iter().map(|e| e.confidence).collect();
        assert_eq!(c, vec![0.95, 0.93]);
        let before = bank.clone();
        bank.update(&[]).unwrap();
        assert_eq!(bank, before);
        assert_eq!(DEFAULT_BANK_CAPACITY, 10);
    }

    #[test]
    fn prototype_ema_arithmetic() {
        let mut bank = MemoryBank::new(1, 1).unwrap();
        bank.update(&[(0, vec![0.0, 1.0], 0.99)]).unwrap();
        let mut p = PrototypeSet { foreground: vec![Some(vec![1.0, 0.0])], background: None, step: 0 };
        let z = Matrix::from_rows(&[vec![0.3, 0.3]], 2).unwrap();
        update_prototypes(&mut p, &bank, &ident, &z, &[1.0], 0.5).unwrap();
        assert_eq!(p.foreground[0], Some(vec![0.5, 0.5]));
        assert_eq!(p.background, Some(vec![0.3, 0.3]));

        let before = p.foreground.clone();
        update_prototypes(&mut p, &bank, &ident, &z, &[0.0], 0.0).unwrap();
        assert_eq!(p.foreground, before);
        assert!(update_prototypes(&mut p, &bank, &ident, &z, &[0.0], 1.0).is_err());
        assert_eq!(DEFAULT_PROTO_MOMENTUM, 0.4);
    }

    #[test]
    fn undefined_background_keeps_previous() {
        let bank = MemoryBank::new(2, 3).unwrap();
        let mut p = PrototypeSet::new(2);
        p.background = Some(vec![1.0, 2.0]);
        let z = Matrix::from_rows(&[vec![0.3, 0.3]], 2).unwrap();
        let flags = update_prototypes(&mut p, &bank, &ident, &z, &[0.0], 0.4).unwrap();
        assert!(flags.background_undefined);
        assert_eq!(flags.empty, vec![0, 1]);
        assert_eq!(p.background, Some(vec![1.0, 2.0]));
    }

    #[test]
    fn nearest_centroid_examples() {
        let p = PrototypeSet {
            foreground: vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0]), Some(vec![-1.0, 0.0])],
            background: Some(vec![0.0, -1.0]),
            step: 1,
        };
        let z = Matrix::from_rows(&[vec![0.0, -3.0], vec![1.0, 1.0], vec![0.0, 0.0]], 2).unwrap();
        let l = nearest_centroid_labels(&z, &p);
        assert_eq!(l.labels, vec![3, 0, 0]);
        assert_eq!(l.zero_norm, vec![2]);
    }

    #[test]
    fn kmeans_fixed_point_and_flip() {
        let z = Matrix::from_rows(
            &[vec![1.0, 0.1], vec![1.0, -0.1], vec![0.1, 1.0], vec![-0.1, 1.0], vec![0.2, 1.0]],
            2,
        )
        .unwrap();
        let seeds = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let r = weighted_kmeans_refine(&z, &[0, 0, 1, 1, 1], &seeds, 2).unwrap();
        assert_eq!(r.labels, vec![0, 0, 1, 1, 1]);
        let r = weighted_kmeans_refine(&z, &[0, 0, 1, 1, 0], &seeds, 2).unwrap();
        assert_eq!(r.labels, vec![0, 0, 1, 1, 1]);
        let r = weighted_kmeans_refine(&z, &[0, 0, 1, 1, 0], &seeds, 0).unwrap();
        assert_eq!(r.labels, vec![0, 0, 1, 1, 0]);
    }

    #[test]
    fn kmeans_drops_empty_class() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]], 2).unwrap();
        let seeds = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let r = weighted_kmeans_refine(&z, &[0, 0], &seeds, 2).unwrap();
        assert_eq!(r.dropped, vec![1]);
        assert_eq!(r.centroids[1], None);
    }

    #[test]
    fn blend_examples() {
        assert_eq!(warmup_blend(&[0.2, 0.8], &[0.9, 0.1], 0.5).unwrap(), 1);
        assert_eq!(warmup_blend(&[0.2, 0.8], &[0.9, 0.1], 0.0).unwrap(), 0);
        assert_eq!(warmup_blend(&[0.2, 0.8], &[0.9, 0.1], 1.0).unwrap(), 1);
        assert_eq!(warmup_weight(0, 5, 10), 0.5);
        assert_eq!(warmup_weight(1, 0, 10), 1.0);
    }
}
