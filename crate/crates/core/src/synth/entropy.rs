//! Plug-in estimate of the predictive entropy `H(Y | X)` of a classifier,
//! with and without strong augmentation of its inputs.

use rand::Rng;

use super::augment::{apply_mask, augment_feature, MaskOperator, StrongLevel};
use crate::error::{config, Error, Result};
use crate::nn::loss::cross_entropy;
use crate::nn::scalar::softmax;
use crate::nn::{Activation, DenseNet, LayerSpec, Matrix, Sgd};
use super::{Domain, SynthConfig, World};
use crate::rng::{derive_seed, rng_for};

/// Anything that maps a batch of features to per-row class probabilities.
pub trait Classifier {
    fn probabilities(&self, batch: &Matrix) -> Result<Matrix>;
}

impl<F> Classifier for F
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    fn probabilities(&self, batch: &Matrix) -> Result<Matrix> {
        self(batch)
    }
}

/// Linear softmax classifier over raw features.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    pub net: DenseNet,
}

impl SoftmaxClassifier {
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let p = self.probabilities(batch)?;
        Ok(p.iter_rows()
            .map(|r| r.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect())
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let x = Matrix::from_rows(features, self.net.input_width())?;
        let pred = self.predict(&x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }
}

impl Classifier for SoftmaxClassifier {
    fn probabilities(&self, batch: &Matrix) -> Result<Matrix> {
        let (logits, _) = self.net.forward_traced(batch)?;
        let rows: Vec<Vec<f64>> = logits.iter_rows().map(softmax).collect();
        Matrix::from_rows(&rows, logits.cols())
    }
}

/// Full-batch momentum SGD on mean cross-entropy.
pub fn train_feature_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<SoftmaxClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(config("classifier training needs matching, nonempty features and labels"));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(config("label out of range"));
    }
    let d = features[0].len();
    let x = Matrix::from_rows(features, d)?;
    let mut rng = rng_for(seed, &[0x636c]);
    let mut net = DenseNet::new(&[LayerSpec::new(d, classes, Activation::Identity, false)], &mut rng)?;
    let mut opt = Sgd::new(0.05, 0.9)?;
    let rows: Vec<usize> = (0..features.len()).collect();
    for _ in 0..epochs {
        let (logits, trace) = net.forward_traced(&x)?;
        let (_, grad) = cross_entropy(&logits, &rows, labels);
        net.backward_traced(&trace, &grad)?;
        opt.step(net.params_mut())?;
    }
    Ok(SoftmaxClassifier { net })
}

/// `−Σ p ln p` in nats; the input must be a distribution within 1e-6.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= -1e-12)) {
        return Err(Error::Computation(format!("classifier output sums to {sum}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// How inputs are perturbed before classification.
#[derive(Clone, Debug)]
pub enum FeatureAugment {
    None,
    /// `draws` strong-augmentation samples per instance.
    Strong { level: StrongLevel, draws: usize, seed: u64 },
    /// Every mask applied to every instance, no noise.
    Masks(Vec<MaskOperator>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyEstimate {
    /// Mean over instances of the (augmentation-averaged) entropy.
    pub mean: f64,
    pub per_instance: Vec<f64>,
    /// Standard error of `mean` across instances.
    pub std_error: f64,
}

pub fn estimate_conditional_entropy<C: Classifier + ?Sized>(
    classifier: &C,
    features: &[Vec<f64>],
    augment: &FeatureAugment,
) -> Result<EntropyEstimate> {
    if features.is_empty() {
        return Err(config("entropy estimate needs at least one instance"));
    }
    let d = features[0].len();
    let mut per_instance = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let views: Vec<Vec<f64>> = match augment {
            FeatureAugment::None => vec![f.clone()],
            FeatureAugment::Strong { level, draws, seed } => {
                if *draws == 0 {
                    return Err(config("need at least one augmentation draw"));
                }
                let mut rng = rng_for(*seed, &[i as u64]);
                (0..*draws).map(|_| augment_feature(f, level, &mut rng).0).collect()
            }
            FeatureAugment::Masks(masks) => masks.iter().map(|m| apply_mask(f, m)).collect(),
        };
        let probs = classifier.probabilities(&Matrix::from_rows(&views, d)?)?;
        let mut h = 0.0;
        for row in probs.iter_rows() {
            h += predictive_entropy(row)?;
        }
        per_instance.push(h / views.len() as f64);
    }
    let n = per_instance.len() as f64;
    let mean = per_instance.iter().sum::<f64>() / n;
    let var = if per_instance.len() > 1 {
        per_instance.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(EntropyEstimate { mean, per_instance, std_error: (var / n).sqrt() })
}

/// Random nested pair of masks `inner ≤ outer` for monotonicity checks.
pub fn nested_masks<R: Rng + ?Sized>(d: usize, keep_outer: f64, keep_inner: f64, rng: &mut R) -> (MaskOperator, MaskOperator) {
    let mut outer = MaskOperator::ones(d);
    let mut inner = MaskOperator::ones(d);
    for j in 0..d {
        let u: f64 = rng.random();
        if u >= keep_outer {
            outer.keep[j] = 0;
        }
        if u >= keep_inner.min(keep_outer) {
            inner.keep[j] = 0;
        }
    }
    (inner, outer)
}

/// Entropy at every augmentation level for one seeded world.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropySweep {
    /// Held-out accuracy of the classifier on clean features.
    pub accuracy: f64,
    /// Index 0 is the unaugmented estimate, index `l` is strong level `l`.
    pub levels: Vec<EntropyEstimate>,
}

/// Trains a linear classifier on clean source-domain instance features of a
/// freshly generated world, then estimates its predictive entropy on
/// `instances` held-out features with no augmentation and at strong levels
/// 1 through 5, `draws` samples per instance.
pub fn entropy_sweep(cfg: &SynthConfig, seed: u64, instances: usize, draws: usize, p_erase: f64) -> Result<EntropySweep> {
    if instances == 0 {
        return Err(config("entropy sweep needs at least one instance"));
    }
    cfg.validate()?;
    let world = World::sample(cfg, &mut rng_for(seed, &[0]));
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let need = 2 * instances;
    let mut img = 0u64;
    while feats.len() < need {
        let s = world.scenario(cfg, Domain::Source, img, &mut rng_for(seed, &[0x656e, img]));
        for inst in s.instances {
            feats.push(inst.feature);
            labels.push(inst.class_id);
        }
        img += 1;
    }
    feats.truncate(need);
    labels.truncate(need);
    let (train_x, test_x) = feats.split_at(instances);
    let (train_y, test_y) = labels.split_at(instances);
    let clf = train_feature_classifier(train_x, train_y, cfg.classes, 300, seed)?;
    let accuracy = clf.accuracy(test_x, test_y)?;
    let mut levels = vec![estimate_conditional_entropy(&clf, test_x, &FeatureAugment::None)?];
    for l in 1..=StrongLevel::MAX {
        let level = StrongLevel::new(l, p_erase)?;
        let aug = FeatureAugment::Strong { level, draws, seed: derive_seed(seed, &[0x6175, l as u64]) };
        levels.push(estimate_conditional_entropy(&clf, test_x, &aug)?);
    }
    Ok(EntropySweep { accuracy, levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_uniform_entropy() {
        let one_hot = |b: &Matrix| -> Result<Matrix> {
            let rows: Vec<Vec<f64>> = (0..b.rows()).map(|_| vec![1.0, 0.0, 0.0, 0.0]).collect();
            Matrix::from_rows(&rows, 4)
        };
        let uniform = |b: &Matrix| -> Result<Matrix> { Matrix::from_vec(b.rows(), 4, vec![0.25; b.rows() * 4]) };
        let feats = vec![vec![0.0; 8]; 5];
        assert_eq!(estimate_conditional_entropy(&one_hot, &feats, &FeatureAugment::None).unwrap().mean, 0.0);
        let h = estimate_conditional_entropy(&uniform, &feats, &FeatureAugment::None).unwrap().mean;
        assert!((h - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_output_rejected() {
        let bad = |b: &Matrix| -> Result<Matrix> { Matrix::from_vec(b.rows(), 2, vec![0.7; b.rows() * 2]) };
        let err = estimate_conditional_entropy(&bad, &[vec![0.0; 8]], &FeatureAugment::None).unwrap_err();
        assert!(matches!(err, Error::Computation(_)));
    }

    #[test]
    fn nested_masks_are_nested() {
        let mut rng = rng_for(1, &[]);
        for _ in 0..50 {
            let (inner, outer) = nested_masks(16, 0.8, 0.5, &mut rng);
            assert!(inner.is_within(&outer));
        }
    }
}
