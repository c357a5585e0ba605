//! Synthetic Gaussian-cluster data, labeled/unlabeled splits and the
//! weak/strong vector augmentations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// Class sizes `round(largest · decay^c)` for `c = 0..k`, each at least 1.
pub fn geometric_counts(num_classes: usize, largest: usize, decay: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| ((largest as f64) * decay.powi(c as i32)).round().max(1.0) as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    /// Radius of the sphere the class centers are drawn on.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Seven imbalanced classes (decay 0.7) in 32 dimensions, about 7000
    /// training samples once the 20% test split is removed.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            num_classes: 7,
            dim: 32,
            class_counts: geometric_counts(7, 2861, 0.7),
            separation: 3.0,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(LeafError::param("need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(LeafError::param("dim must be >= 1"));
        }
        if self.class_counts.len() != self.num_classes {
            return Err(LeafError::param(format!(
                "{} class counts for {} classes",
                self.class_counts.len(),
                self.num_classes
            )));
        }
        if self.class_counts.contains(&0) {
            return Err(LeafError::param("every class needs at least one sample"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(LeafError::param("cluster separation must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(LeafError::param("noise sigma must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Class centers, `k x dim`; empty for datasets read from disk.
    pub centers: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Draws class centers uniformly on the sphere of radius `separation`, then
/// `count_c` samples `center_c + N(0, σ² I)` per class, stored class by class.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = Tensor::zeros(spec.num_classes, spec.dim);
    for c in 0..spec.num_classes {
        let mut dir: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for v in dir.iter_mut() {
            *v *= spec.separation / norm;
        }
        centers.row_mut(c).copy_from_slice(&dir);
    }

    let total = spec.total();
    let mut data = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &count) in spec.class_counts.iter().enumerate() {
        for _ in 0..count {
            for &mu in centers.row(c) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + spec.noise_sigma * z);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: Tensor::new(total, spec.dim, data)?,
        labels,
        num_classes: spec.num_classes,
        centers,
    })
}

/// Labeled, unlabeled and test partitions of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SslSplit {
    pub num_classes: usize,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Tensor,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl SslSplit {
    pub fn num_labeled(&self) -> usize {
        self.labeled_idx.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled_idx.len()
    }

    pub fn dim(&self) -> usize {
        self.labeled_x.cols()
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labeled_y {
            counts[y] += 1;
        }
        counts
    }
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Holds out `test_fraction` of the data, then picks a class-stratified
/// labeled set from the rest: `n_labeled / k` per class, with the remainder
/// going one each to the classes with the most training samples.
pub fn split(dataset: &Dataset, n_labeled: usize, test_fraction: f64, seed: u64) -> Result<SslSplit> {
    let n = dataset.len();
    let k = dataset.num_classes;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(LeafError::param(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    if n_labeled < k {
        return Err(LeafError::param(format!(
            "n_labeled = {n_labeled} is below the class count {k}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = (test_fraction * n as f64).round() as usize;
    let (test_part, train_part) = order.split_at(n_test);
    if n_labeled > train_part.len() {
        return Err(LeafError::param(format!(
            "n_labeled = {n_labeled} exceeds the {} training samples",
            train_part.len()
        )));
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in train_part {
        pools[dataset.labels[i]].push(i);
    }
    let mut quota = vec![n_labeled / k; k];
    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| pools[b].len().cmp(&pools[a].len()).then(a.cmp(&b)));
    for &c in by_size.iter().take(n_labeled % k) {
        quota[c] += 1;
    }
    for c in 0..k {
        if quota[c] > pools[c].len() {
            return Err(LeafError::param(format!(
                "class {c} has {} training samples but needs {} labels",
                pools[c].len(),
                quota[c]
            )));
        }
    }

    let mut is_labeled = vec![false; n];
    for c in 0..k {
        for &i in &pools[c][..quota[c]] {
            is_labeled[i] = true;
        }
    }
    let mut labeled_idx: Vec<usize> = train_part.iter().copied().filter(|&i| is_labeled[i]).collect();
    let mut unlabeled_idx: Vec<usize> = train_part.iter().copied().filter(|&i| !is_labeled[i]).collect();
    let mut test_idx = test_part.to_vec();
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok(SslSplit {
        num_classes: k,
        labeled_x: dataset.features.select_rows(&labeled_idx),
        labeled_y: labeled_idx.iter().map(|&i| dataset.labels[i]).collect(),
        unlabeled_x: dataset.features.select_rows(&unlabeled_idx),
        test_x: dataset.features.select_rows(&test_idx),
        test_y: test_idx.iter().map(|&i| dataset.labels[i]).collect(),
        labeled_idx,
        unlabeled_idx,
        test_idx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strength {
    Weak,
    Strong,
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strength::Weak => "weak",
            Strength::Strong => "strong",
        })
    }
}

impl FromStr for Strength {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Strength::Weak),
            "strong" => Ok(Strength::Strong),
            other => Err(LeafError::config(format!("unknown augmentation strength '{other}'"))),
        }
    }
}

/// Noise levels for the two views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Fraction of coordinates the strong view zeroes.
    pub mask_fraction: f64,
}

impl AugmentConfig {
    /// Weak noise at 5% and strong noise at 50% of the data's within-class
    /// spread, with 20% of coordinates masked in the strong view.
    pub fn for_noise(noise_sigma: f64) -> Self {
        Self::scaled(noise_sigma, 0.05, 0.5, 0.2)
    }

    pub fn scaled(noise_sigma: f64, weak_scale: f64, strong_scale: f64, mask_fraction: f64) -> Self {
        Self {
            weak_sigma: weak_scale * noise_sigma,
            strong_sigma: strong_scale * noise_sigma,
            mask_fraction,
        }
    }

    pub fn masked_coords(&self, dim: usize) -> usize {
        ((self.mask_fraction * dim as f64).floor() as usize).min(dim)
    }
}

/// One augmented copy of `x`.
pub fn augment<R: Rng>(x: &[f64], strength: Strength, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let sigma = match strength {
        Strength::Weak => cfg.weak_sigma,
        Strength::Strong => cfg.strong_sigma,
    };
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect();
    if strength == Strength::Strong {
        let n_mask = cfg.masked_coords(x.len());
        for i in sample(rng, x.len(), n_mask) {
            out[i] = 0.0;
        }
    }
    out
}

/// Augments every row of `x` independently.
pub fn augment_rows<R: Rng>(x: &Tensor, strength: Strength, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        data.extend(augment(x.row(r), strength, cfg, rng));
    }
    Tensor::new(x.rows(), x.cols(), data).expect("shape preserved")
}

/// Writes headerless CSV rows: `dim` feature columns, then the label
/// (`-1` marks an unlabeled sample).
pub fn write_csv(path: impl AsRef<Path>, features: &Tensor, labels: &[Option<usize>]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(LeafError::contract("one label per row required"));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (r, label) in labels.iter().enumerate() {
        let mut record: Vec<String> = features.row(r).iter().map(|v| format!("{v:e}")).collect();
        record.push(label.map_or_else(|| "-1".to_string(), |y| y.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<(Tensor, Vec<Option<usize>>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(LeafError::Format(format!("row {line}: need features and a label")));
        }
        let d = record.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(LeafError::Format(format!("row {line}: ragged row")));
        }
        for field in record.iter().take(d) {
            data.push(field.trim().parse::<f64>().map_err(|e| {
                LeafError::Format(format!("row {line}: bad float '{field}': {e}"))
            })?);
        }
        let label_field = record[d].trim();
        let label: i64 = label_field
            .parse()
            .map_err(|e| LeafError::Format(format!("row {line}: bad label '{label_field}': {e}")))?;
        labels.push(match label {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => return Err(LeafError::Format(format!("row {line}: label {y} < -1"))),
        });
    }
    let dim = dim.unwrap_or(0);
    Ok((Tensor::new(labels.len(), dim, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            dim: 5,
            class_counts: vec![40, 30, 20],
            separation: 10.0,
            noise_sigma: sigma,
            seed: 5,
        }
    }

    #[test]
    fn zero_noise_collapses_to_centers() {
        let d = generate(&small_spec(0.0)).unwrap();
        for (r, &y) in d.labels.iter().enumerate() {
            assert_eq!(d.features.row(r), d.centers.row(y));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small_spec(1.0)).unwrap(), generate(&small_spec(1.0)).unwrap());
    }

    #[test]
    fn centers_lie_on_the_sphere() {
        let d = generate(&small_spec(1.0)).unwrap();
        for c in 0..3 {
            let norm = d.centers.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_center_is_perfect_when_well_separated() {
        let mut spec = small_spec(0.05);
        spec.separation = 20.0;
        let d = generate(&spec).unwrap();
        for (r, &y) in d.labels.iter().enumerate() {
            let x = d.features.row(r);
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(d.centers.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(d.centers.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, y);
        }
    }

    #[test]
    fn desk_default_is_about_seven_thousand_train() {
        let spec = SyntheticSpec::desk_default(0);
        let train = spec.total() as f64 * (1.0 - DEFAULT_TEST_FRACTION);
        assert!((train - 7000.0).abs() < 50.0, "train = {train}");
        assert!(spec.class_counts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec(1.0);
        s.num_classes = 1;
        s.class_counts = vec![5];
        assert!(generate(&s).is_err());
        let mut s = small_spec(1.0);
        s.class_counts[1] = 0;
        assert!(generate(&s).is_err());
        let mut s = small_spec(1.0);
        s.separation = 0.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn one_label_per_class() {
        let d = generate(&small_spec(1.0)).unwrap();
        let s = split(&d, 3, 0.2, 1).unwrap();
        assert_eq!(s.labeled_counts(), vec![1, 1, 1]);
        assert_eq!(s.test_idx.len(), 18);
    }

    #[test]
    fn split_sets_are_disjoint_and_cover() {
        let d = generate(&small_spec(1.0)).unwrap();
        let s = split(&d, 10, 0.2, 2).unwrap();
        let mut all: Vec<usize> = s
            .labeled_idx
            .iter()
            .chain(&s.unlabeled_idx)
            .chain(&s.test_idx)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        // 10 = 3·3 + 1; the extra label goes to the largest class
        assert_eq!(s.labeled_counts(), vec![4, 3, 3]);
    }

    #[test]
    fn split_is_deterministic() {
        let d = generate(&small_spec(1.0)).unwrap();
        assert_eq!(split(&d, 9, 0.2, 7).unwrap(), split(&d, 9, 0.2, 7).unwrap());
    }

    #[test]
    fn infeasible_splits_are_rejected() {
        let d = generate(&small_spec(1.0)).unwrap();
        assert!(split(&d, 2, 0.2, 0).is_err());
        assert!(split(&d, 1000, 0.2, 0).is_err());
        assert!(split(&d, 60, 0.2, 0).is_err());
    }

    #[test]
    fn weak_with_zero_sigma_is_identity() {
        let cfg = AugmentConfig::for_noise(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(augment(&x, Strength::Weak, &cfg, &mut rng), x);
    }

    #[test]
    fn strong_masks_floor_fifth_of_coords() {
        let cfg = AugmentConfig::for_noise(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dim in [4, 5, 11, 32] {
            let x = vec![1.0; dim];
            let y = augment(&x, Strength::Strong, &cfg, &mut rng);
            assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), dim / 5);
        }
    }

    #[test]
    fn weak_noise_energy_matches_chi_square_mean() {
        let cfg = AugmentConfig::for_noise(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = vec![0.5; 32];
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let y = augment(&x, Strength::Weak, &cfg, &mut rng);
            total += y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let mean = total / trials as f64;
        let expected = 32.0 * cfg.weak_sigma.powi(2);
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let x = Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 123456.789]]).unwrap();
        let labels = vec![Some(2), None];
        write_csv(&path, &x, &labels).unwrap();
        let (x2, l2) = read_csv(&path).unwrap();
        assert_eq!(x2, x);
        assert_eq!(l2, labels);
    }
}
