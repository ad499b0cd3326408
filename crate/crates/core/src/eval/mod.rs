//! Clustering scores, episodic evaluation and classical baselines.

pub mod baselines;
mod hungarian;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use baselines::{
    dbscan, kmeans, random_labels, run_baseline, tune_dbscan, Baseline, BaselineClusterer, DbscanParams,
};
pub use hungarian::min_cost_assignment;

use crate::data::{generate_set, Family, GeneratorSpec, LabeledSet};
use crate::error::{Error, Result};
use crate::model::{ClusteringOutput, Model};
use crate::real::Real;
use crate::seed::{self, Stream};

/// Maps arbitrary label values to `0..m` in order of first appearance.
fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        out.push(*map.entry(l).or_insert(next));
    }
    (out, map.len())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<(Vec<Vec<usize>>, usize, usize)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    let (p, rp) = dense_labels(pred);
    let (t, rt) = dense_labels(truth);
    let mut table = vec![vec![0usize; rt]; rp];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    Ok((table, rp, rt))
}

/// Optimal one-to-one matching of predicted to true clusters on the contingency
/// table (padded to square). Returns `(table, matching)` with `matching[p] = Some(t)`
/// for dense predicted id `p` matched to dense true id `t`.
type Matching = (Vec<Vec<usize>>, Vec<Option<usize>>);

fn optimal_matching(pred: &[usize], truth: &[usize]) -> Result<Matching> {
    let (table, rp, rt) = contingency(pred, truth)?;
    let size = rp.max(rt);
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    let c = if i < rp && j < rt { table[i][j] } else { 0 };
                    -(c as f64)
                })
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let matching = (0..rp).map(|i| (assign[i] < rt).then_some(assign[i])).collect();
    Ok((table, matching))
}

/// Fraction of elements left unmatched under the best one-to-one label mapping.
pub fn misclassification_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (table, matching) = optimal_matching(pred, truth)?;
    let matched: usize = matching
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| table[i][j]))
        .sum();
    Ok(1.0 - matched as f64 / pred.len() as f64)
}

/// Relabels `pred` with the true ids of the optimal matching; predicted clusters
/// left unmatched get fresh ids above every true id.
pub fn align_labels(pred: &[usize], truth: &[usize]) -> Result<Vec<usize>> {
    let (_, matching) = optimal_matching(pred, truth)?;
    let (dense_pred, _) = dense_labels(pred);
    let (dense_truth, rt) = dense_labels(truth);
    let mut truth_id = vec![0; rt];
    for (&d, &t) in dense_truth.iter().zip(truth) {
        truth_id[d] = t;
    }
    let fresh = truth.iter().max().map_or(0, |m| m + 1);
    Ok(dense_pred
        .iter()
        .map(|&p| matching[p].map_or(fresh + p, |t| truth_id[t]))
        .collect())
}

/// Normalized mutual information `2 I(U;V) / (H(U) + H(V))`, natural logs.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (table, rp, rt) = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..rt).map(|j| (0..rp).map(|i| table[i][j]).sum::<usize>() as f64).collect();
    let entropy = |m: &[f64]| -m.iter().filter(|&&c| c > 0.0).map(|&c| c / n * (c / n).ln()).sum::<f64>();
    let (hu, hv) = (entropy(&rows), entropy(&cols));
    if hu + hv == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for i in 0..rp {
        for j in 0..rt {
            let c = table[i][j] as f64;
            if c > 0.0 {
                mi += c / n * (n * c / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (hu + hv)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPartition {
    pub k: usize,
    pub probability: f64,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub k_pred: usize,
    pub labels: Vec<usize>,
    pub per_k: Vec<KPartition>,
}

fn argmax<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Most probable cluster count and its row-wise argmax partition (ties go low).
pub fn predict_partition<T: Real>(out: &ClusteringOutput<T>) -> Prediction {
    let per_k: Vec<KPartition> = out
        .assignments
        .iter()
        .enumerate()
        .map(|(idx, a)| KPartition {
            k: idx + 1,
            probability: out.count_dist[idx].as_f64(),
            labels: a.rows().into_iter().map(|r| argmax(r.iter().map(|v| v.as_f64()))).collect(),
        })
        .collect();
    let k_pred = argmax(out.count_dist.iter().map(|v| v.as_f64())) + 1;
    Prediction {
        k_pred,
        labels: per_k[k_pred - 1].labels.clone(),
        per_k,
    }
}

/// Anything that partitions a generated set.
pub trait SetClusterer {
    fn name(&self) -> String;

    /// Returns `(k_pred, labels)` for one set.
    fn cluster(&self, set: &LabeledSet, seed: u64) -> Result<(usize, Vec<usize>)>;

    /// Batched variant; `seeds[i]` belongs to `sets[i]`.
    fn cluster_many(&self, sets: &[LabeledSet], seeds: &[u64]) -> Result<Vec<(usize, Vec<usize>)>> {
        sets.iter().zip(seeds).map(|(s, &seed)| self.cluster(s, seed)).collect()
    }
}

fn to_real<T: Real>(m: &Array2<f64>) -> Array2<T> {
    m.mapv(T::from_f64_lossy)
}

impl<T: Real> SetClusterer for Model<T> {
    fn name(&self) -> String {
        "model".into()
    }

    fn cluster(&self, set: &LabeledSet, seed: u64) -> Result<(usize, Vec<usize>)> {
        Ok(self.cluster_many(std::slice::from_ref(set), &[seed])?.remove(0))
    }

    fn cluster_many(&self, sets: &[LabeledSet], _seeds: &[u64]) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut result = Vec::with_capacity(sets.len());
        // Sets of equal size share one batched pass.
        for chunk in sets.chunk_by(|a, b| a.len() == b.len()) {
            let mats: Vec<Array2<T>> = chunk.iter().map(|s| to_real(&s.point_matrix())).collect();
            let views: Vec<ArrayView2<T>> = mats.iter().map(|m| m.view()).collect();
            for out in self.forward_batch(&views)? {
                let p = predict_partition(&out);
                result.push((p.k_pred, p.labels));
            }
        }
        Ok(result)
    }
}

/// Emits uniform count and assignment distributions for every input.
#[derive(Debug, Clone, Copy)]
pub struct UniformStub {
    pub k_max: usize,
}

impl UniformStub {
    pub fn output(&self, n: usize) -> ClusteringOutput<f64> {
        ClusteringOutput {
            count_dist: ndarray::Array1::from_elem(self.k_max, 1.0 / self.k_max as f64),
            assignments: (1..=self.k_max)
                .map(|k| Array2::from_elem((n, k), 1.0 / k as f64))
                .collect(),
        }
    }
}

impl SetClusterer for UniformStub {
    fn name(&self) -> String {
        "uniform".into()
    }

    fn cluster(&self, set: &LabeledSet, _seed: u64) -> Result<(usize, Vec<usize>)> {
        let p = predict_partition(&self.output(set.len()));
        Ok((p.k_pred, p.labels))
    }
}

/// Guesses the count uniformly from `1..=k_max` and labels points uniformly over
/// the true number of clusters.
#[derive(Debug, Clone, Copy)]
pub struct RandomStub {
    pub k_max: usize,
}

impl SetClusterer for RandomStub {
    fn name(&self) -> String {
        "random-stub".into()
    }

    fn cluster(&self, set: &LabeledSet, seed: u64) -> Result<(usize, Vec<usize>)> {
        use rand::Rng as _;
        let mut rng = seed::rng(seed::child(seed, 1));
        let k_pred = rng.random_range(1..=self.k_max);
        Ok((k_pred, random_labels(set.len(), set.k, seed)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub family: Family,
    pub k_true: usize,
    pub k_pred: usize,
    pub mr: f64,
    pub nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub episodes: usize,
    pub mr_mean: f64,
    pub nmi_mean: f64,
    pub count_accuracy: f64,
    /// Base seed of the evaluation stream; episode `e` uses `stream_seed(evaluation, seed, e)`.
    pub seed: u64,
    pub per_episode: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn from_records(method: String, seed: u64, per_episode: Vec<EpisodeRecord>) -> Result<Self> {
        if per_episode.is_empty() {
            return Err(Error::Empty("evaluation episodes"));
        }
        let m = per_episode.len() as f64;
        let mr_mean = per_episode.iter().map(|r| r.mr).sum::<f64>() / m;
        let nmi_mean = per_episode.iter().map(|r| r.nmi).sum::<f64>() / m;
        let hits = per_episode.iter().filter(|r| r.k_pred == r.k_true).count();
        Ok(Self {
            method,
            episodes: per_episode.len(),
            mr_mean,
            nmi_mean,
            count_accuracy: hits as f64 / m,
            seed,
            per_episode,
        })
    }

    /// Seeds of the first and last episode.
    pub fn seed_range(&self) -> (u64, u64) {
        (
            seed::stream_seed(Stream::Evaluation, self.seed, 0),
            seed::stream_seed(Stream::Evaluation, self.seed, self.episodes as u64 - 1),
        )
    }

    /// Mean MR per family.
    pub fn family_mr(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &self.per_episode {
            let e = acc.entry(r.family.name().to_string()).or_default();
            e.0 += r.mr;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "episode,family,k_true,k_pred,mr,nmi")?;
        for r in &self.per_episode {
            writeln!(f, "{},{},{},{},{},{}", r.episode, r.family, r.k_true, r.k_pred, r.mr, r.nmi)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// The `episode`-th set of a stream: `k` uniform over `1..=k_max`.
pub fn episode_set(spec: &GeneratorSpec, n: usize, stream: Stream, base: u64, episode: u64) -> Result<LabeledSet> {
    let s = seed::stream_seed(stream, base, episode);
    let k = 1 + (seed::mix64(s) % spec.k_max as u64) as usize;
    generate_set(spec, n, k, seed::child(s, 0))
}

pub fn episode_sets(spec: &GeneratorSpec, n: usize, stream: Stream, base: u64, episodes: usize) -> Result<Vec<LabeledSet>> {
    (0..episodes as u64).map(|e| episode_set(spec, n, stream, base, e)).collect()
}

/// Scores a clusterer on pre-generated episodes.
pub fn evaluate_sets(clusterer: &dyn SetClusterer, sets: &[LabeledSet], seed: u64) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::Empty("evaluation episodes"));
    }
    let seeds: Vec<u64> = (0..sets.len() as u64).map(|e| seed::derive(seed, e)).collect();
    let preds = clusterer.cluster_many(sets, &seeds)?;
    let mut records = Vec::with_capacity(sets.len());
    for (e, (set, (k_pred, labels))) in sets.iter().zip(preds).enumerate() {
        records.push(EpisodeRecord {
            episode: e,
            family: set.family,
            k_true: set.k,
            k_pred,
            mr: misclassification_rate(&labels, &set.labels)?,
            nmi: nmi(&labels, &set.labels)?,
        });
    }
    EvalReport::from_records(clusterer.name(), seed, records)
}

/// Generates `episodes` fresh sets of size `n` from the evaluation stream and scores them.
pub fn evaluate_model(
    clusterer: &dyn SetClusterer,
    spec: &GeneratorSpec,
    episodes: usize,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes < 1 {
        return Err(Error::InvalidParameter("episodes must be >= 1".into()));
    }
    let sets = episode_sets(spec, n, Stream::Evaluation, seed, episodes)?;
    evaluate_sets(clusterer, &sets, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Family;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    #[test]
    fn mr_examples() {
        assert_eq!(misclassification_rate(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        let mr = misclassification_rate(&[0, 0, 0], &[0, 1, 2]).unwrap();
        assert!((mr - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            misclassification_rate(&[0], &[0, 1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(misclassification_rate(&[], &[]).is_err());
    }

    #[test]
    fn aligned_labels_follow_truth() {
        assert_eq!(align_labels(&[1, 1, 0, 0], &[5, 5, 7, 7]).unwrap(), vec![5, 5, 7, 7]);
        let a = align_labels(&[0, 1, 2, 2], &[0, 0, 1, 1]).unwrap();
        assert_eq!(a[2..], [1, 1]);
        assert!(a[..2].iter().filter(|&&l| l == 0).count() == 1 && a[..2].iter().any(|&l| l >= 2));
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3, 3], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn predict_partition_examples() {
        let out = ClusteringOutput {
            count_dist: arr1(&[0.1, 0.7, 0.2]),
            assignments: vec![
                arr2(&[[1.0], [1.0], [1.0]]),
                arr2(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]),
                Array2::from_elem((3, 3), 1.0 / 3.0),
            ],
        };
        let p = predict_partition(&out);
        assert_eq!(p.k_pred, 2);
        assert_eq!(p.labels, vec![0, 1, 0]);
        assert_eq!(p.per_k[2].labels, vec![0, 0, 0]);
        let uniform = UniformStub { k_max: 4 }.output(3);
        assert_eq!(predict_partition(&uniform).k_pred, 1);
    }

    fn spec() -> GeneratorSpec {
        GeneratorSpec::new(vec![Family::GaussianBlobs, Family::ConcentricRings], 3)
    }

    #[test]
    fn single_episode_report() {
        let r = evaluate_model(&UniformStub { k_max: 3 }, &spec(), 1, 10, 0).unwrap();
        assert_eq!(r.per_episode.len(), 1);
        assert_eq!(r.episodes, 1);
        assert!(evaluate_model(&UniformStub { k_max: 3 }, &spec(), 0, 10, 0).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = Model::<f32>::new(crate::model::ModelConfig {
            k_max: 3,
            layers: 1,
            fc_units: 8,
            count_units: 4,
            ..Default::default()
        })
        .unwrap();
        let a = evaluate_model(&model, &spec(), 12, 10, 5).unwrap();
        let b = evaluate_model(&model, &spec(), 12, 10, 5).unwrap();
        assert_eq!(a, b);
        for r in &a.per_episode {
            assert!((0.0..=1.0).contains(&r.mr) && (0.0..=1.0).contains(&r.nmi));
        }
    }

    #[test]
    fn uniform_stub_count_accuracy() {
        let r = evaluate_model(&UniformStub { k_max: 3 }, &spec(), 600, 12, 1).unwrap();
        // Always predicts k=1; k_true is uniform on {1,2,3}.
        let se = (1.0f64 / 3.0 * 2.0 / 3.0 / 600.0).sqrt();
        assert!((r.count_accuracy - 1.0 / 3.0).abs() < 4.0 * se, "{}", r.count_accuracy);
    }

    #[test]
    fn random_stub_matches_random_baseline() {
        let sets = episode_sets(&spec(), 16, Stream::Validation, 3, 400).unwrap();
        let stub = evaluate_sets(&RandomStub { k_max: 3 }, &sets, 8).unwrap();
        let base = evaluate_sets(&BaselineClusterer::new(Baseline::Random), &sets, 9).unwrap();
        let sd = |r: &EvalReport| {
            let m = r.mr_mean;
            (r.per_episode.iter().map(|e| (e.mr - m).powi(2)).sum::<f64>() / r.episodes as f64).sqrt()
        };
        let se = ((sd(&stub).powi(2) + sd(&base).powi(2)) / 400.0).sqrt();
        assert!((stub.mr_mean - base.mr_mean).abs() < 4.0 * se);
        assert!((stub.count_accuracy - 1.0 / 3.0).abs() < 0.1);
    }

    #[test]
    fn csv_has_one_row_per_episode() {
        let r = evaluate_model(&UniformStub { k_max: 3 }, &spec(), 7, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("episode,family,k_true,k_pred,mr,nmi"));
        let json = dir.path().join("r.json");
        r.write_json(&json).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..12).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
    }

    proptest! {
        #[test]
        fn scores_are_relabeling_invariant((pred, truth) in labels_strategy(), shift in 1usize..7) {
            let relabeled: Vec<usize> = pred.iter().map(|l| (l * 3 + shift) % 17).collect();
            let mr = misclassification_rate(&pred, &truth).unwrap();
            prop_assert!((mr - misclassification_rate(&relabeled, &truth).unwrap()).abs() < 1e-12);
            let v = nmi(&pred, &truth).unwrap();
            prop_assert!((v - nmi(&relabeled, &truth).unwrap()).abs() < 1e-12);
            prop_assert!((v - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&mr) && (0.0..=1.0).contains(&v));
        }

        #[test]
        fn perfect_scores_iff_same_partition((pred, truth) in labels_strategy()) {
            let same = dense_labels(&pred).0 == dense_labels(&truth).0;
            let mr = misclassification_rate(&pred, &truth).unwrap();
            prop_assert_eq!(mr == 0.0, same);
            let v = nmi(&pred, &truth).unwrap();
            prop_assert_eq!((v - 1.0).abs() < 1e-12, same);
        }
    }
}
