//! Randomized structural properties: fold partitions and row-order invariance.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

use stratssl::cv::{partition, CvConfig};
use stratssl::estimators::{Flavor, ThetaVariant, Variant};
use stratssl::pipeline::{analyze, AnalysisConfig, EstimatorSet};
use stratssl::rng::stream_rng;
use stratssl::simulation::{generate, Sampling, ScenarioId, ScenarioSpec};
use stratssl::{AccuracyMetric, SemiSupervisedDataset};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_labeled_units(
        sizes in prop::collection::vec(6usize..40, 1..4),
        folds in 2usize..7,
        seed in any::<u64>(),
        within in any::<bool>(),
    ) {
        let strata: Vec<usize> = sizes.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s + 1, n)).collect();
        let units: Vec<usize> = (0..strata.len()).filter(|i| i % 3 != 1).collect();
        let cfg = CvConfig { folds, replications: 1, within_stratum: within, seed };
        let Ok(parts) = partition(&units, &strata, &cfg, 0) else {
            // only legal when some stratum has fewer labeled units than folds
            let min = (1..=sizes.len()).map(|s| units.iter().filter(|&&i| strata[i] == s).count()).min().unwrap();
            prop_assert!(min < folds || units.len() < folds);
            return Ok(());
        };
        prop_assert_eq!(parts.len(), folds);
        let mut all: Vec<usize> = parts.iter().flatten().cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &units);
        if within {
            for s in 1..=sizes.len() {
                let counts: Vec<usize> = parts.iter().map(|f| f.iter().filter(|&&i| strata[i] == s).count()).collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
        }
    }
}

fn permuted(data: &SemiSupervisedDataset, perm: &[usize]) -> SemiSupervisedDataset {
    let x = data.features();
    let features = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(perm[i], j)]);
    let strata = perm.iter().map(|&i| data.strata()[i]).collect();
    let mask: Vec<bool> = perm.iter().map(|&i| data.labeled_mask()[i]).collect();
    let y_of: std::collections::HashMap<usize, f64> =
        data.labeled_index().iter().cloned().zip(data.outcomes().iter().cloned()).collect();
    let outcomes = perm.iter().filter_map(|i| y_of.get(i).cloned()).collect();
    SemiSupervisedDataset::new(features, strata, mask, outcomes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fits_ignore_row_order(seed in 0u64..1000) {
        let mut spec = ScenarioSpec::preset(ScenarioId::MainI);
        spec.big_n = 2000;
        spec.sampling = Sampling::Stratified { n_per_stratum: vec![60] };
        let data = generate(&spec, seed).unwrap().dataset;
        let mut perm: Vec<usize> = (0..data.big_n()).collect();
        perm.shuffle(&mut stream_rng(seed, 99));
        let shuffled = permuted(&data, &perm);

        let cfg = AnalysisConfig {
            basis: spec.default_basis(),
            metrics: spec.metrics(),
            perturbation: None,
            estimators: EstimatorSet { cross_validated: false, ..EstimatorSet::default() },
            ..AnalysisConfig::default()
        };
        let a = analyze(&data, &cfg).unwrap();
        let b = analyze(&shuffled, &cfg).unwrap();
        for variant in [ThetaVariant::Sl, ThetaVariant::SslCheck] {
            let ta = &a.theta_fit(variant).unwrap().coefficients;
            let tb = &b.theta_fit(variant).unwrap().coefficients;
            prop_assert!((ta - tb).amax() < 1e-9, "{:?}: {} vs {}", variant, ta, tb);
        }
        for m in [AccuracyMetric::brier(), AccuracyMetric::omr(0.5).unwrap()] {
            let va = a.estimate(&m, Variant::Sl, Flavor::Apparent).unwrap().value;
            let vb = b.estimate(&m, Variant::Sl, Flavor::Apparent).unwrap().value;
            prop_assert!((va - vb).abs() < 1e-12);
        }
    }
}
