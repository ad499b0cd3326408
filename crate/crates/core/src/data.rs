//! Episodic synthetic 2D cluster sets.
//!
//! Each call to [`generate_set`] draws one set of `n` points from `k` shape clusters of
//! a randomly chosen family. Points are rescaled per set so that the set fits in
//! `[-1, 1]^2` with its bounding box centred on the origin (aspect ratio preserved).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianBlobs,
    ConcentricRings,
    Moons,
    AnisotropicBlobs,
    UniformBoxes,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::GaussianBlobs,
        Family::ConcentricRings,
        Family::Moons,
        Family::AnisotropicBlobs,
        Family::UniformBoxes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianBlobs => "gaussian-blobs",
            Family::ConcentricRings => "concentric-rings",
            Family::Moons => "moons",
            Family::AnisotropicBlobs => "anisotropic-blobs",
            Family::UniformBoxes => "uniform-boxes",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown family `{s}`")))
    }
}

/// How the `n` points of a set are split among its `k` clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizePolicy {
    /// Each point picks a cluster uniformly at random; redrawn while any cluster is empty.
    IndependentUniform,
    /// Sizes differ by at most one.
    Balanced,
}

/// Shape parameters of the generator families, in pre-normalization units where
/// the layout spans roughly `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyParams {
    pub blob_std_min: f64,
    pub blob_std_max: f64,
    /// Minimum distance between two blob centres.
    pub blob_min_separation: f64,
    /// Major/minor axis ratio range of anisotropic blobs.
    pub aniso_ratio_min: f64,
    pub aniso_ratio_max: f64,
    /// Radial noise of ring points; ring `c` of `k` has radius `(c + 1) / k`.
    pub ring_noise: f64,
    pub moon_noise: f64,
    pub box_size_min: f64,
    pub box_size_max: f64,
    /// Minimum gap between two boxes.
    pub box_gap: f64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            blob_std_min: 0.04,
            blob_std_max: 0.10,
            blob_min_separation: 0.7,
            aniso_ratio_min: 2.0,
            aniso_ratio_max: 4.0,
            ring_noise: 0.03,
            moon_noise: 0.06,
            box_size_min: 0.15,
            box_size_max: 0.5,
            box_gap: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub families: Vec<Family>,
    pub params: FamilyParams,
    pub size_policy: SizePolicy,
    pub k_max: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            params: FamilyParams::default(),
            size_policy: SizePolicy::IndependentUniform,
            k_max: 5,
        }
    }
}

impl GeneratorSpec {
    pub fn new(families: Vec<Family>, k_max: usize) -> Self {
        Self {
            families,
            k_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidSpec("families must be non-empty".into()));
        }
        if self.k_max < 1 {
            return Err(Error::InvalidSpec("k_max must be at least 1".into()));
        }
        let p = &self.params;
        let positive = [
            ("blob_std_min", p.blob_std_min),
            ("blob_std_max", p.blob_std_max),
            ("aniso_ratio_min", p.aniso_ratio_min),
            ("aniso_ratio_max", p.aniso_ratio_max),
            ("ring_noise", p.ring_noise),
            ("moon_noise", p.moon_noise),
            ("box_size_min", p.box_size_min),
            ("box_size_max", p.box_size_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be > 0, got {v}")));
            }
        }
        if p.blob_min_separation < 0.0 || p.box_gap < 0.0 {
            return Err(Error::InvalidSpec("separations must be non-negative".into()));
        }
        if p.blob_std_min > p.blob_std_max
            || p.aniso_ratio_min > p.aniso_ratio_max
            || p.box_size_min > p.box_size_max
        {
            return Err(Error::InvalidSpec("parameter range has min > max".into()));
        }
        Ok(())
    }
}

/// One set of points with ground-truth cluster ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub family: Family,
    pub k: usize,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as an `n x 2` matrix.
    pub fn point_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.points.len(), 2));
        for (i, p) in self.points.iter().enumerate() {
            m[[i, 0]] = p[0];
            m[[i, 1]] = p[1];
        }
        m
    }
}

/// Symmetric 0/1 same-cluster matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseLabels {
    pub y: Array2<u8>,
}

impl PairwiseLabels {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn same(&self, i: usize, j: usize) -> bool {
        self.y[[i, j]] == 1
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub sets: Vec<LabeledSet>,
    pub pairwise: Vec<PairwiseLabels>,
    pub seed: u64,
}

impl MiniBatch {
    pub fn set_size(&self) -> usize {
        self.sets.first().map_or(0, LabeledSet::len)
    }
}

pub fn pairwise_labels(labels: &[usize]) -> PairwiseLabels {
    let n = labels.len();
    let y = Array2::from_shape_fn((n, n), |(i, j)| u8::from(labels[i] == labels[j]));
    PairwiseLabels { y }
}

pub fn generate_set(spec: &GeneratorSpec, n: usize, k: usize, seed: u64) -> Result<LabeledSet> {
    spec.validate()?;
    if k < 1 || k > n || k > spec.k_max || n < 2 {
        return Err(Error::InvalidK {
            k,
            n,
            k_max: spec.k_max,
        });
    }
    let mut rng = seed::rng(seed);
    let family = spec.families[rng.random_range(0..spec.families.len())];
    let labels = draw_labels(spec.size_policy, n, k, &mut rng);
    let mut points = sample_family(family, &spec.params, &labels, k, &mut rng);
    normalize(&mut points);
    Ok(LabeledSet {
        family,
        k,
        points,
        labels,
        seed,
    })
}

/// Permutes points and labels with one shared permutation.
pub fn shuffle_set(set: &LabeledSet, seed: u64) -> LabeledSet {
    let perm = permutation(set.len(), seed);
    LabeledSet {
        points: perm.iter().map(|&i| set.points[i]).collect(),
        labels: perm.iter().map(|&i| set.labels[i]).collect(),
        ..set.clone()
    }
}

/// The permutation applied by [`shuffle_set`]: output position `p` holds input `perm[p]`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// `count` shuffled sets whose cluster counts are uniform over `1..=k_max`.
pub fn compose_minibatch(
    spec: &GeneratorSpec,
    count: usize,
    n: usize,
    seed: u64,
) -> Result<MiniBatch> {
    if count < 1 {
        return Err(Error::InvalidParameter("mini-batch needs at least one set".into()));
    }
    if n < 2 || n < spec.k_max {
        return Err(Error::InvalidK {
            k: spec.k_max,
            n,
            k_max: spec.k_max,
        });
    }
    let mut rng = seed::rng(seed);
    let mut sets = Vec::with_capacity(count);
    for b in 0..count as u64 {
        let k = rng.random_range(1..=spec.k_max);
        let set = generate_set(spec, n, k, seed::child(seed, 2 * b))?;
        sets.push(shuffle_set(&set, seed::child(seed, 2 * b + 1)));
    }
    let pairwise = sets.iter().map(|s| pairwise_labels(&s.labels)).collect();
    Ok(MiniBatch {
        sets,
        pairwise,
        seed,
    })
}

const MAX_REJECTIONS: usize = 10_000;

fn draw_labels(policy: SizePolicy, n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    match policy {
        SizePolicy::IndependentUniform => {
            for _ in 0..MAX_REJECTIONS {
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let mut seen = vec![false; k];
                labels.iter().for_each(|&l| seen[l] = true);
                if seen.iter().all(|&s| s) {
                    return labels;
                }
            }
            // Only reachable when k is close to n: seed one point per cluster.
            let mut labels: Vec<usize> = (0..k)
                .chain((k..n).map(|_| rng.random_range(0..k)))
                .collect();
            labels.shuffle(rng);
            labels
        }
        SizePolicy::Balanced => {
            let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            labels.shuffle(rng);
            labels
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// `k` points in `[-lim, lim]^2` at least `sep` apart (best effort).
fn spread_centres(k: usize, lim: f64, sep: f64, rng: &mut Rng) -> Vec<[f64; 2]> {
    let mut best: Vec<[f64; 2]> = Vec::new();
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..200 {
        let cands: Vec<[f64; 2]> = (0..k)
            .map(|_| [uniform(rng, -lim, lim), uniform(rng, -lim, lim)])
            .collect();
        let mut gap = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let d = ((cands[a][0] - cands[b][0]).powi(2) + (cands[a][1] - cands[b][1]).powi(2))
                    .sqrt();
                gap = gap.min(d);
            }
        }
        if gap >= sep {
            return cands;
        }
        if gap > best_gap {
            best_gap = gap;
            best = cands;
        }
    }
    best
}

fn sample_family(
    family: Family,
    p: &FamilyParams,
    labels: &[usize],
    k: usize,
    rng: &mut Rng,
) -> Vec<[f64; 2]> {
    match family {
        Family::GaussianBlobs => {
            let centres = spread_centres(k, 1.0, p.blob_min_separation, rng);
            let stds: Vec<f64> = (0..k)
                .map(|_| uniform(rng, p.blob_std_min, p.blob_std_max))
                .collect();
            labels
                .iter()
                .map(|&l| {
                    let c = centres[l];
                    [c[0] + stds[l] * normal(rng), c[1] + stds[l] * normal(rng)]
                })
                .collect()
        }
        Family::AnisotropicBlobs => {
            let centres = spread_centres(k, 1.0, p.blob_min_separation, rng);
            let shapes: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let minor = uniform(rng, p.blob_std_min, p.blob_std_max);
                    let major = minor * uniform(rng, p.aniso_ratio_min, p.aniso_ratio_max);
                    (minor, major, uniform(rng, 0.0, PI))
                })
                .collect();
            labels
                .iter()
                .map(|&l| {
                    let (minor, major, angle) = shapes[l];
                    let (a, b) = (major * normal(rng), minor * normal(rng));
                    let (s, c) = angle.sin_cos();
                    [centres[l][0] + c * a - s * b, centres[l][1] + s * a + c * b]
                })
                .collect()
        }
        Family::ConcentricRings => labels
            .iter()
            .map(|&l| {
                let r = (l + 1) as f64 / k as f64 + p.ring_noise * normal(rng);
                let t = uniform(rng, 0.0, 2.0 * PI);
                [r * t.cos(), r * t.sin()]
            })
            .collect(),
        Family::Moons => labels
            .iter()
            .map(|&l| {
                let t = uniform(rng, 0.0, PI);
                let flip = if l % 2 == 0 { 1.0 } else { -1.0 };
                let x = l as f64 + t.cos();
                let y = 0.5 * (l % 2) as f64 + flip * t.sin();
                [x + p.moon_noise * normal(rng), y + p.moon_noise * normal(rng)]
            })
            .collect(),
        Family::UniformBoxes => {
            let boxes = place_boxes(k, p, rng);
            labels
                .iter()
                .map(|&l| {
                    let [x0, y0, x1, y1] = boxes[l];
                    [uniform(rng, x0, x1), uniform(rng, y0, y1)]
                })
                .collect()
        }
    }
}

fn place_boxes(k: usize, p: &FamilyParams, rng: &mut Rng) -> Vec<[f64; 4]> {
    let overlaps = |a: &[f64; 4], b: &[f64; 4]| {
        a[0] < b[2] + p.box_gap
            && b[0] < a[2] + p.box_gap
            && a[1] < b[3] + p.box_gap
            && b[1] < a[3] + p.box_gap
    };
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(k);
    let mut attempts = 0;
    while boxes.len() < k {
        let w = uniform(rng, p.box_size_min, p.box_size_max);
        let h = uniform(rng, p.box_size_min, p.box_size_max);
        let x0 = uniform(rng, -1.0, 1.0 - w);
        let y0 = uniform(rng, -1.0, 1.0 - h);
        let cand = [x0, y0, x0 + w, y0 + h];
        attempts += 1;
        if attempts > 2_000 || !boxes.iter().any(|b| overlaps(b, &cand)) {
            // Too crowded: fall back to a row of boxes.
            if attempts > 2_000 {
                let i = boxes.len() as f64;
                let side = p.box_size_min;
                let step = side + p.box_gap;
                boxes.push([i * step, 0.0, i * step + side, side]);
            } else {
                boxes.push(cand);
            }
        }
    }
    boxes
}

/// Centres the bounding box on the origin and scales the larger half-extent to 1.
pub fn normalize(points: &mut [[f64; 2]]) {
    if points.is_empty() {
        return;
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points.iter() {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = ((hi[0] - lo[0]) / 2.0).max((hi[1] - lo[1]) / 2.0);
    let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
    for p in points.iter_mut() {
        for d in 0..2 {
            p[d] = ((p[d] - mid[d]) * scale).clamp(-1.0, 1.0);
        }
    }
}

/// Writes sets as line-delimited JSON, one record per line.
pub fn write_dataset(path: &Path, sets: &[LabeledSet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for set in sets {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut sets = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: LabeledSet = serde_json::from_str(&line)?;
        if set.points.len() != set.labels.len() {
            return Err(Error::LengthMismatch {
                pred: set.labels.len(),
                truth: set.points.len(),
            });
        }
        sets.push(set);
    }
    Ok(sets)
}
