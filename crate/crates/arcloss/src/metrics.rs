//! Accuracy, clustering quality (homogeneity / completeness), the pooled
//! two-sample t-test used for run comparisons, and a seeded k-means for
//! clustering embeddings.

use crate::error::{Error, Result};
use crate::util::{stream_rng, Stream};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Classification accuracy in percent.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "accuracy over {} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity and completeness from the joint contingency table,
/// natural-log entropies. Defined as 1 when the reference entropy is zero.
pub fn homogeneity_completeness(class_labels: &[usize], cluster_labels: &[usize]) -> Result<(f64, f64)> {
    if class_labels.is_empty() || class_labels.len() != cluster_labels.len() {
        return Err(Error::Shape(format!(
            "{} class labels vs {} cluster labels",
            class_labels.len(),
            cluster_labels.len()
        )));
    }
    let n = class_labels.len() as f64;
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&cl, &ku) in class_labels.iter().zip(cluster_labels) {
        *class_counts.entry(cl).or_insert(0) += 1;
        *cluster_counts.entry(ku).or_insert(0) += 1;
        *joint.entry((cl, ku)).or_insert(0) += 1;
    }
    let h_class = entropy(&class_counts, n);
    let h_cluster = entropy(&cluster_counts, n);

    // H(class | cluster) = sum over cells -(n_ck/N) ln(n_ck / n_cluster)
    let mut h_class_given = 0.0;
    let mut h_cluster_given = 0.0;
    for (&(cl, ku), &c) in &joint {
        let p = c as f64 / n;
        h_class_given -= p * (c as f64 / cluster_counts[&ku] as f64).ln();
        h_cluster_given -= p * (c as f64 / class_counts[&cl] as f64).ln();
    }
    let h = if h_class == 0.0 { 1.0 } else { 1.0 - h_class_given / h_class };
    let c = if h_cluster == 0.0 { 1.0 } else { 1.0 - h_cluster_given / h_cluster };
    Ok((h.clamp(0.0, 1.0), c.clamp(0.0, 1.0)))
}

/// Mean and sample (n-1) standard deviation of repeated-run results.
pub fn run_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config(format!("run summary needs >= 2 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// One sample of a repeated experiment, by summary statistics.
#[derive(Debug, Clone, Copy)]
pub struct SampleStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl SampleStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let (mean, sd) = run_summary(values)?;
        Ok(SampleStats { mean, sd, n: values.len() })
    }
}

/// Pooled-variance two-sample Student's t-test; returns the two-sided
/// p-value (area of the t distribution outside +-t), df = n_a + n_b - 2.
pub fn two_sided_t_test(a: SampleStats, b: SampleStats) -> Result<f64> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::Config("t-test needs n >= 2 per sample".into()));
    }
    if a.sd < 0.0 || b.sd < 0.0 {
        return Err(Error::Config("standard deviations must be >= 0".into()));
    }
    let df = (a.n + b.n - 2) as f64;
    let pooled_var = ((a.n as f64 - 1.0) * a.sd * a.sd + (b.n as f64 - 1.0) * b.sd * b.sd) / df;
    if pooled_var == 0.0 {
        return Ok(if a.mean == b.mean { 1.0 } else { 0.0 });
    }
    let se = (pooled_var * (1.0 / a.n as f64 + 1.0 / b.n as f64)).sqrt();
    let t = (a.mean - b.mean) / se;
    // P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    Ok(incomplete_beta(df / 2.0, 0.5, df / (df + t * t)))
}

/// ln Gamma via the Lanczos approximation.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b), absolute error well under 1e-6.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Lloyd's k-means with seeded initial centers; returns cluster labels.
/// Ties in the nearest-center search break toward the lowest index.
pub fn kmeans(features: &[f64], n: usize, dim: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || k == 0 || k > n {
        return Err(Error::Config(format!("kmeans with n={n}, k={k}")));
    }
    if features.len() != n * dim {
        return Err(Error::Shape(format!("{} values for {n}x{dim} features", features.len())));
    }
    let mut rng = stream_rng(seed, Stream::KMeans, 0, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    for &i in order.iter().take(k) {
        centers.extend_from_slice(&features[i * dim..(i + 1) * dim]);
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let row = &features[i * dim..(i + 1) * dim];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.chunks(dim).enumerate() {
                let d: f64 = row.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..dim {
                sums[l * dim + j] += features[i * dim + j];
            }
        }
        for (c, count) in counts.iter().enumerate() {
            if *count > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / *count as f64;
                }
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basic_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 75.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    // fixtures frozen from an independent implementation (scikit-learn)
    const FIXTURES: &[(&[usize], &[usize], f64, f64)] = &[
        (&[0, 0, 1, 1], &[0, 1, 2, 3], 1.0, 0.5),
        (&[0, 0, 1, 1], &[0, 0, 0, 0], 0.0, 1.0),
        (&[0, 0, 1, 1], &[0, 0, 1, 1], 1.0, 1.0),
        (&[0, 0, 1, 1, 2, 2, 2, 2], &[0, 1, 0, 1, 2, 2, 3, 3], 0.666666666666667, 0.5),
        (&[0, 1, 1, 2, 2, 2], &[1, 1, 0, 0, 2, 2], 0.543112347358942, 0.5),
    ];

    #[test]
    fn homogeneity_completeness_match_frozen_fixtures() {
        for (classes, clusters, want_h, want_c) in FIXTURES {
            let (h, c) = homogeneity_completeness(classes, clusters).unwrap();
            assert!((h - want_h).abs() < 1e-9, "h {h} vs {want_h} for {classes:?}/{clusters:?}");
            assert!((c - want_c).abs() < 1e-9, "c {c} vs {want_c}");
        }
    }

    #[test]
    fn swapping_arguments_swaps_h_and_c() {
        for (classes, clusters, want_h, want_c) in FIXTURES {
            let (h, c) = homogeneity_completeness(clusters, classes).unwrap();
            assert!((h - want_c).abs() < 1e-12, "swap h {h} vs {want_c}");
            assert!((c - want_h).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_under_cluster_relabeling() {
        let classes = [0, 0, 1, 1, 2, 2, 2, 2];
        let clusters = [0, 1, 0, 1, 2, 2, 3, 3];
        let permuted: Vec<usize> = clusters.iter().map(|&c| [7, 3, 9, 0][c]).collect();
        let a = homogeneity_completeness(&classes, &clusters).unwrap();
        let b = homogeneity_completeness(&classes, &permuted).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn run_summary_cases() {
        assert_eq!(run_summary(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        let (m, s) = run_summary(&[0.0, 2.0]).unwrap();
        assert_eq!(m, 1.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        // hand-computed five-value case
        let vals = [3.0, 5.0, 7.0, 9.0, 11.0];
        let (m, s) = run_summary(&vals).unwrap();
        assert_eq!(m, 7.0);
        assert!((s - 10f64.sqrt()).abs() < 1e-12);
        assert!(run_summary(&[1.0]).is_err());
    }

    fn stats(mean: f64, sd: f64, n: usize) -> SampleStats {
        SampleStats { mean, sd, n }
    }

    #[test]
    fn t_test_reproduces_published_table_cells() {
        // (eucd, amc, printed p), n = 5 runs each
        let cells = [
            (stats(99.65, 0.01, 5), stats(99.66, 0.01, 5), 0.1525),
            (stats(82.60, 0.21, 5), stats(82.97, 0.20, 5), 0.0214),
            (stats(95.29, 0.06, 5), stats(95.52, 0.05, 5), 0.0002),
            (stats(65.57, 0.20, 5), stats(66.19, 0.22, 5), 0.0016),
        ];
        for (a, b, want) in cells {
            let p = two_sided_t_test(a, b).unwrap();
            assert!((p - want).abs() <= 5e-4, "p {p} vs {want}");
        }
    }

    #[test]
    fn t_test_matches_frozen_reference_values() {
        // frozen from scipy.stats.ttest_ind_from_stats(equal_var=True)
        let cases = [
            (stats(10.0, 1.0, 4), stats(11.5, 1.2, 6), 0.073590185957),
            (stats(3.3, 0.4, 5), stats(3.3, 0.5, 5), 1.0),
            (stats(50.0, 2.0, 3), stats(44.0, 1.0, 3), 0.009678951648),
        ];
        for (a, b, want) in cases {
            let p = two_sided_t_test(a, b).unwrap();
            assert!((p - want).abs() < 1e-6, "p {p} vs {want}");
        }
    }

    #[test]
    fn t_test_symmetry_and_monotonicity() {
        let a = stats(10.0, 0.5, 5);
        for delta in [0.1, 0.4, 0.9] {
            let b = stats(10.0 + delta, 0.5, 5);
            assert_eq!(two_sided_t_test(a, b).unwrap(), two_sided_t_test(b, a).unwrap());
        }
        let mut last = 2.0;
        for delta in [0.0, 0.1, 0.2, 0.5, 1.0, 2.0] {
            let p = two_sided_t_test(a, stats(10.0 + delta, 0.5, 5)).unwrap();
            assert!(p <= last + 1e-12, "p must fall as the gap grows");
            last = p;
        }
    }

    #[test]
    fn t_test_degenerate_variance() {
        assert_eq!(two_sided_t_test(stats(5.0, 0.0, 5), stats(5.0, 0.0, 5)).unwrap(), 1.0);
        assert_eq!(two_sided_t_test(stats(5.0, 0.0, 5), stats(6.0, 0.0, 5)).unwrap(), 0.0);
        assert!(two_sided_t_test(stats(5.0, 0.1, 1), stats(6.0, 0.1, 5)).is_err());
    }

    #[test]
    fn incomplete_beta_endpoints() {
        assert_eq!(incomplete_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(incomplete_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(1, 1) = x (uniform cdf)
        for x in [0.1, 0.5, 0.9] {
            assert!((incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_obvious_blobs() {
        // two tight blobs on a line
        let mut feats = Vec::new();
        for i in 0..10 {
            feats.push(if i < 5 { 0.0 + i as f64 * 0.01 } else { 10.0 + i as f64 * 0.01 });
            feats.push(0.0);
        }
        let labels = kmeans(&feats, 10, 2, 2, 1).unwrap();
        let (h, c) = homogeneity_completeness(
            &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1],
            &labels,
        )
        .unwrap();
        assert_eq!((h, c), (1.0, 1.0));
        // seeded determinism
        assert_eq!(labels, kmeans(&feats, 10, 2, 2, 1).unwrap());
    }
}
