//! Labeling designs, inverse-probability weights and bootstrap resamplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::WeightVector;
use crate::linalg::Matrix;
use crate::rng::StreamRng;

/// Strata with fewer labeled rows than this trigger a warning.
pub const SMALL_STRATUM: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LabelingDesign {
    UniformBernoulli {
        pi: f64,
    },
    /// Per-row labeling probabilities, typically a function of the proxies.
    WeightedBernoulli {
        pi: Vec<f64>,
    },
    /// Whole clusters are labeled together with probability `pi[k]`.
    Clustered {
        cluster_of: Vec<usize>,
        pi: Vec<f64>,
    },
    /// Rows are only the sampled ones: labeled rows form the complete sample
    /// and unlabeled rows the incomplete sample of each stratum.
    /// `stratum_sizes[k]` is the population size |S_k|.
    Stratified {
        stratum_of: Vec<usize>,
        stratum_sizes: Vec<f64>,
        n_complete: Vec<usize>,
        n_incomplete: Vec<usize>,
    },
}

impl LabelingDesign {
    pub fn name(&self) -> &'static str {
        match self {
            LabelingDesign::UniformBernoulli { .. } => "uniform",
            LabelingDesign::WeightedBernoulli { .. } => "weighted",
            LabelingDesign::Clustered { .. } => "clustered",
            LabelingDesign::Stratified { .. } => "stratified",
        }
    }

    pub fn is_bernoulli(&self) -> bool {
        matches!(self, LabelingDesign::UniformBernoulli { .. } | LabelingDesign::WeightedBernoulli { .. })
    }
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDesign(format!("{what} probability {p} outside (0, 1)")))
    }
}

/// Number of groups implied by a label vector, checking every id in `0..k`
/// is used.
fn group_count(ids: &[usize], declared: usize, what: &str) -> Result<usize> {
    let mut seen = vec![false; declared];
    for &g in ids {
        if g >= declared {
            return Err(Error::InvalidDesign(format!("{what} id {g} has no parameters ({declared} declared)")));
        }
        seen[g] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidDesign(format!("{what} {k} has no rows")));
    }
    Ok(declared)
}

/// Proxy data for every row, truth only where labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    proxy: Matrix,
    truth: Matrix,
    labeled: Vec<bool>,
    design: LabelingDesign,
}

impl Dataset {
    /// Validates the design against the labels. Truth cells of unlabeled
    /// rows are overwritten with NaN so an accidental read poisons the fit.
    pub fn new(proxy: Matrix, mut truth: Matrix, labeled: Vec<bool>, design: LabelingDesign) -> Result<Self> {
        let n = proxy.rows();
        if truth.rows() != n || truth.cols() != proxy.cols() {
            return Err(Error::ShapeMismatch(format!(
                "truth is {}x{}, proxy is {}x{}",
                truth.rows(),
                truth.cols(),
                n,
                proxy.cols()
            )));
        }
        if labeled.len() != n {
            return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labeled.len())));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if !labeled.iter().any(|&l| l) {
            return Err(Error::InvalidDesign("no labeled rows".into()));
        }
        validate_design(&design, &labeled)?;
        for (i, &l) in labeled.iter().enumerate() {
            if !l {
                truth.row_mut(i).fill(f64::NAN);
            }
        }
        Ok(Self { proxy, truth, labeled, design })
    }

    pub fn proxy(&self) -> &Matrix {
        &self.proxy
    }

    pub fn truth(&self) -> &Matrix {
        &self.truth
    }

    pub fn labeled(&self) -> &[bool] {
        &self.labeled
    }

    pub fn design(&self) -> &LabelingDesign {
        &self.design
    }

    pub fn n_rows(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    /// Truth where labeled, proxy elsewhere.
    pub fn imputed(&self) -> Matrix {
        let mut out = self.proxy.clone();
        for (i, &l) in self.labeled.iter().enumerate() {
            if l {
                out.row_mut(i).copy_from_slice(self.truth.row(i));
            }
        }
        out
    }

    /// Member rows of each cluster, in row order.
    pub fn clusters(&self) -> Result<Vec<Vec<usize>>> {
        match &self.design {
            LabelingDesign::Clustered { cluster_of, pi } => Ok(group_rows(cluster_of, pi.len())),
            _ => Err(Error::InvalidDesign("design is not clustered".into())),
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let LabelingDesign::Stratified { n_complete, .. } = &self.design {
            for (k, &c) in n_complete.iter().enumerate() {
                if c < SMALL_STRATUM {
                    out.push(format!("stratum {k} has only {c} labeled rows; stratified bootstrap may be unreliable"));
                }
            }
        }
        out
    }
}

fn group_rows(ids: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    for (i, &g) in ids.iter().enumerate() {
        out[g].push(i);
    }
    out
}

fn validate_design(design: &LabelingDesign, labeled: &[bool]) -> Result<()> {
    let n = labeled.len();
    match design {
        LabelingDesign::UniformBernoulli { pi } => check_probability(*pi, "labeling"),
        LabelingDesign::WeightedBernoulli { pi } => {
            if pi.len() != n {
                return Err(Error::InvalidDesign(format!("{} probabilities for {n} rows", pi.len())));
            }
            pi.iter().try_for_each(|&p| check_probability(p, "labeling"))
        }
        LabelingDesign::Clustered { cluster_of, pi } => {
            if cluster_of.len() != n {
                return Err(Error::InvalidDesign(format!("{} cluster ids for {n} rows", cluster_of.len())));
            }
            pi.iter().try_for_each(|&p| check_probability(p, "cluster"))?;
            let k = group_count(cluster_of, pi.len(), "cluster")?;
            let mut state: Vec<Option<bool>> = vec![None; k];
            for (&c, &l) in cluster_of.iter().zip(labeled) {
                match state[c] {
                    None => state[c] = Some(l),
                    Some(s) if s != l => {
                        return Err(Error::InvalidDesign(format!("cluster {c} is only partially labeled")))
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        LabelingDesign::Stratified { stratum_of, stratum_sizes, n_complete, n_incomplete } => {
            if stratum_of.len() != n {
                return Err(Error::InvalidDesign(format!("{} stratum ids for {n} rows", stratum_of.len())));
            }
            let k = stratum_sizes.len();
            if n_complete.len() != k || n_incomplete.len() != k {
                return Err(Error::InvalidDesign("stratum count tables differ in length".into()));
            }
            group_count(stratum_of, k, "stratum")?;
            let mut seen_c = vec![0usize; k];
            let mut seen_i = vec![0usize; k];
            for (&s, &l) in stratum_of.iter().zip(labeled) {
                if l {
                    seen_c[s] += 1;
                } else {
                    seen_i[s] += 1;
                }
            }
            for s in 0..k {
                if n_complete[s] == 0 || n_incomplete[s] == 0 {
                    return Err(Error::InvalidDesign(format!("stratum {s} has a zero sample count")));
                }
                if !(stratum_sizes[s].is_finite()) || ((n_complete[s] + n_incomplete[s]) as f64) > stratum_sizes[s] {
                    return Err(Error::InvalidDesign(format!("stratum {s} samples exceed its size {}", stratum_sizes[s])));
                }
                if seen_c[s] != n_complete[s] || seen_i[s] != n_incomplete[s] {
                    return Err(Error::InvalidDesign(format!(
                        "stratum {s} has {}/{} complete/incomplete rows, declared {}/{}",
                        seen_c[s], seen_i[s], n_complete[s], n_incomplete[s]
                    )));
                }
            }
            Ok(())
        }
    }
}

/// `(W, W̄)`: complete-sample and incomplete-sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPair {
    pub w_complete: WeightVector,
    pub w_incomplete: WeightVector,
}

pub fn compute_weights(ds: &Dataset) -> Result<WeightPair> {
    validate_design(&ds.design, &ds.labeled)?;
    let n = ds.n_rows();
    let mut w = vec![0.0; n];
    let mut wbar = vec![0.0; n];
    for i in 0..n {
        let l = ds.labeled[i];
        let (a, b) = match &ds.design {
            LabelingDesign::UniformBernoulli { pi } => (1.0 / pi, 1.0 / (1.0 - pi)),
            LabelingDesign::WeightedBernoulli { pi } => (1.0 / pi[i], 1.0 / (1.0 - pi[i])),
            LabelingDesign::Clustered { cluster_of, pi } => {
                let p = pi[cluster_of[i]];
                (1.0 / p, 1.0 / (1.0 - p))
            }
            LabelingDesign::Stratified { stratum_of, stratum_sizes, n_complete, n_incomplete } => {
                let s = stratum_of[i];
                (stratum_sizes[s] / n_complete[s] as f64, stratum_sizes[s] / n_incomplete[s] as f64)
            }
        };
        if l {
            w[i] = a;
        } else {
            wbar[i] = b;
        }
    }
    Ok(WeightPair { w_complete: WeightVector::new(w)?, w_incomplete: WeightVector::new(wbar)? })
}

/// `n_rows` row indices drawn uniformly with replacement (0-based).
pub fn resample_iid(n_rows: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..n_rows).map(|_| rng.random_range(0..n_rows)).collect()
}

/// Draws as many clusters as there are, with replacement, and concatenates
/// their members. Singleton clusters reproduce [`resample_iid`] exactly.
pub fn resample_clusters(clusters: &[Vec<usize>], rng: &mut StreamRng) -> Vec<usize> {
    let k = clusters.len();
    let mut out = Vec::new();
    for _ in 0..k {
        out.extend_from_slice(&clusters[rng.random_range(0..k)]);
    }
    out
}

/// Per-stratum row lists for the stratified bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataIndex {
    complete: Vec<Vec<usize>>,
    incomplete: Vec<Vec<usize>>,
}

impl StrataIndex {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let LabelingDesign::Stratified { stratum_of, stratum_sizes, .. } = &ds.design else {
            return Err(Error::InvalidDesign("design is not stratified".into()));
        };
        let k = stratum_sizes.len();
        let mut complete = vec![Vec::new(); k];
        let mut incomplete = vec![Vec::new(); k];
        for (i, &s) in stratum_of.iter().enumerate() {
            if ds.labeled[i] {
                complete[s].push(i);
            } else {
                incomplete[s].push(i);
            }
        }
        if let Some(s) = complete.iter().position(|c| c.is_empty()) {
            return Err(Error::InvalidDesign(format!("stratum {s} has no labeled rows")));
        }
        Ok(Self { complete, incomplete })
    }

    /// Within each stratum, `n_k•` draws from its complete rows then `n_k°`
    /// from its incomplete rows.
    pub fn resample(&self, rng: &mut StreamRng) -> (Vec<usize>, Vec<usize>) {
        let mut comp = Vec::new();
        let mut inc = Vec::new();
        for (c, i) in self.complete.iter().zip(&self.incomplete) {
            for _ in 0..c.len() {
                comp.push(c[rng.random_range(0..c.len())]);
            }
            for _ in 0..i.len() {
                inc.push(i[rng.random_range(0..i.len())]);
            }
        }
        (comp, inc)
    }
}

pub fn resample_stratified(ds: &Dataset, rng: &mut StreamRng) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(StrataIndex::new(ds)?.resample(rng))
}

/// Independent Bernoulli(π_i) labels.
pub fn draw_bernoulli_labels(pi: &[f64], rng: &mut StreamRng) -> Vec<bool> {
    pi.iter().map(|&p| rng.random::<f64>() < p).collect()
}

/// One Bernoulli(π_k) draw per cluster, shared by its members.
pub fn draw_cluster_labels(cluster_of: &[usize], pi: &[f64], rng: &mut StreamRng) -> Vec<bool> {
    let xi: Vec<bool> = pi.iter().map(|&p| rng.random::<f64>() < p).collect();
    cluster_of.iter().map(|&c| xi[c]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn toy(labeled: Vec<bool>, design: LabelingDesign) -> Result<Dataset> {
        let n = labeled.len();
        let m = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(m.clone(), m, labeled, design)
    }

    #[test]
    fn uniform_weights() {
        let ds = toy(vec![true, false], LabelingDesign::UniformBernoulli { pi: 0.25 }).unwrap();
        let w = compute_weights(&ds).unwrap();
        assert_eq!(w.w_complete.as_slice(), &[4.0, 0.0]);
        assert_eq!(w.w_incomplete.as_slice(), &[0.0, 4.0 / 3.0]);
    }

    #[test]
    fn cluster_weights() {
        let design = LabelingDesign::Clustered { cluster_of: vec![0, 0, 1, 1, 1], pi: vec![0.5, 0.2] };
        let ds = toy(vec![true, true, false, false, false], design).unwrap();
        let w = compute_weights(&ds).unwrap();
        assert_eq!(w.w_complete.as_slice(), &[2.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(w.w_incomplete.as_slice()[2], 1.25);
    }

    #[test]
    fn stratified_weights() {
        let design = LabelingDesign::Stratified {
            stratum_of: vec![0, 0, 0, 1, 1],
            stratum_sizes: vec![10.0, 4.0],
            n_complete: vec![1, 1],
            n_incomplete: vec![2, 1],
        };
        let ds = toy(vec![true, false, false, false, true], design).unwrap();
        let w = compute_weights(&ds).unwrap();
        assert_eq!(w.w_complete.as_slice(), &[10.0, 0.0, 0.0, 0.0, 4.0]);
        assert_eq!(w.w_incomplete.as_slice(), &[0.0, 5.0, 5.0, 4.0, 0.0]);
    }

    #[test]
    fn design_errors() {
        assert!(matches!(toy(vec![true], LabelingDesign::UniformBernoulli { pi: 1.0 }), Err(Error::InvalidDesign(_))));
        assert!(matches!(
            toy(vec![true, false], LabelingDesign::WeightedBernoulli { pi: vec![0.5, 0.0] }),
            Err(Error::InvalidDesign(_))
        ));
        let partial = LabelingDesign::Clustered { cluster_of: vec![0, 0], pi: vec![0.5] };
        assert!(matches!(toy(vec![true, false], partial), Err(Error::InvalidDesign(_))));
        let zero = LabelingDesign::Stratified {
            stratum_of: vec![0, 0],
            stratum_sizes: vec![5.0],
            n_complete: vec![2],
            n_incomplete: vec![0],
        };
        assert!(matches!(toy(vec![true, true], zero), Err(Error::InvalidDesign(_))));
    }

    #[test]
    fn unlabeled_truth_is_poisoned() {
        let ds = toy(vec![true, false], LabelingDesign::UniformBernoulli { pi: 0.5 }).unwrap();
        assert!(ds.truth()[(1, 0)].is_nan());
        assert_eq!(ds.imputed()[(1, 0)], 1.0);
    }

    #[test]
    fn disjoint_weight_support() {
        let mut rng = Stream::new(3).rng();
        let pi: Vec<f64> = (0..200).map(|i| 0.1 + 0.8 * (i as f64 / 200.0)).collect();
        let labels = draw_bernoulli_labels(&pi, &mut rng);
        let ds = toy(labels, LabelingDesign::WeightedBernoulli { pi }).unwrap();
        let w = compute_weights(&ds).unwrap();
        for (a, b) in w.w_complete.as_slice().iter().zip(w.w_incomplete.as_slice()) {
            assert_eq!(a * b, 0.0);
            assert!(a + b > 0.0);
        }
    }

    #[test]
    fn ipw_labeled_count_has_unit_mean() {
        let n = 100;
        let pi: Vec<f64> = (0..n).map(|i| 0.15 + 0.7 * ((i * 37 % n) as f64 / n as f64)).collect();
        let stream = Stream::new(11);
        let means: Vec<f64> = (0..1000)
            .map(|s| {
                let labels = draw_bernoulli_labels(&pi, &mut stream.derive(s).rng());
                labels.iter().zip(&pi).map(|(&l, p)| if l { 1.0 / p } else { 0.0 }).sum::<f64>() / n as f64
            })
            .collect();
        let m = means.iter().sum::<f64>() / 1000.0;
        let sd = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((m - 1.0).abs() < 3.0 * sd / 1000f64.sqrt(), "mean {m}");
    }

    #[test]
    fn iid_resampling() {
        assert_eq!(resample_iid(1, &mut Stream::new(0).rng()), vec![0]);
        let a = resample_iid(50, &mut Stream::new(5).rng());
        assert_eq!(a, resample_iid(50, &mut Stream::new(5).rng()));
        assert!(a.iter().all(|&i| i < 50));
    }

    #[test]
    fn iid_resampling_is_uniform() {
        // χ² frequency test: 10⁴ cells, 10⁶ draws, critical value at level
        // 1e-3 for 9999 degrees of freedom is about 10535.
        let n = 10_000;
        let mut rng = Stream::new(17).rng();
        let mut counts = vec![0u32; n];
        for _ in 0..100 {
            for i in resample_iid(n, &mut rng) {
                counts[i] += 1;
            }
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 10_535.0, "chi2 = {chi2}");
    }

    #[test]
    fn cluster_resampling() {
        let one = vec![vec![3, 4, 5]];
        assert_eq!(resample_clusters(&one, &mut Stream::new(1).rng()), vec![3, 4, 5]);
        let equal = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
        for s in 0..20 {
            let out = resample_clusters(&equal, &mut Stream::new(s).rng());
            assert_eq!(out.len(), 6);
            // whole clusters only
            for pair in out.chunks(2) {
                assert!(equal.contains(&pair.to_vec()));
            }
        }
        let singletons: Vec<Vec<usize>> = (0..40).map(|i| vec![i]).collect();
        assert_eq!(
            resample_clusters(&singletons, &mut Stream::new(9).rng()),
            resample_iid(40, &mut Stream::new(9).rng())
        );
    }

    #[test]
    fn cluster_length_distribution_matches_enumeration() {
        // clusters {0,1} and {2}: the 4 equally likely draw pairs give
        // lengths 4, 3, 3, 2
        let clusters = vec![vec![0, 1], vec![2]];
        let mut hist = [0usize; 5];
        let draws = 40_000;
        let stream = Stream::new(23);
        for s in 0..draws {
            hist[resample_clusters(&clusters, &mut stream.derive(s).rng()).len()] += 1;
        }
        for (len, p) in [(2, 0.25), (3, 0.5), (4, 0.25)] {
            let freq = hist[len] as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "length {len}: {freq}");
        }
    }

    fn stratified_toy() -> Dataset {
        let stratum_of = vec![0, 0, 0, 0, 1, 1, 1, 1, 1];
        let labeled = vec![true, false, true, false, false, true, false, false, true];
        let design = LabelingDesign::Stratified {
            stratum_of,
            stratum_sizes: vec![40.0, 50.0],
            n_complete: vec![2, 2],
            n_incomplete: vec![2, 3],
        };
        toy(labeled, design).unwrap()
    }

    #[test]
    fn stratified_resampling_membership() {
        let ds = stratified_toy();
        let LabelingDesign::Stratified { stratum_of, .. } = ds.design().clone() else { unreachable!() };
        let index = StrataIndex::new(&ds).unwrap();
        let stream = Stream::new(2);
        for s in 0..1000 {
            let (c, i) = index.resample(&mut stream.derive(s).rng());
            assert_eq!((c.len(), i.len()), (4, 5));
            assert!(c.iter().all(|&r| ds.labeled()[r]));
            assert!(i.iter().all(|&r| !ds.labeled()[r]));
            assert!(c[..2].iter().chain(&i[..2]).all(|&r| stratum_of[r] == 0));
            assert!(c[2..].iter().chain(&i[2..]).all(|&r| stratum_of[r] == 1));
        }
        assert!(ds.warnings().len() == 2);
    }

    #[test]
    fn stratified_single_labeled_row() {
        let design = LabelingDesign::Stratified {
            stratum_of: vec![0, 0, 1, 1],
            stratum_sizes: vec![10.0, 10.0],
            n_complete: vec![1, 1],
            n_incomplete: vec![1, 1],
        };
        let ds = toy(vec![true, false, false, true], design).unwrap();
        let (c, _) = resample_stratified(&ds, &mut Stream::new(0).rng()).unwrap();
        assert_eq!(c, vec![0, 3]);
    }
}
