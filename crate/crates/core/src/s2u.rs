//! Speech2Unit: K-means codebook over native frames, nearest-centroid
//! quantization and run-length reduction into discrete units.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::corpus::{join_ids, parse_ids, PhonemeId};
use crate::error::{Error, Result};
use crate::synth::{sq_dist, FeatureSequence};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"UACB";

pub type UnitId = usize;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub iterations: usize,
    pub objective: f64,
    /// Objective after each assignment step, in order.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f64>,
    pub fit_stats: FitStats,
}

impl Codebook {
    pub fn new(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) {
            return Err(Error::data("centroid matrix shape"));
        }
        let k = centroids.len() / dim;
        if k < 2 {
            return Err(Error::config(format!("codebook needs K >= 2, got {k}")));
        }
        if centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::data("non-finite centroid"));
        }
        Ok(Self {
            dim,
            centroids,
            fit_stats: FitStats::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, k: UnitId) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (UnitId, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn min_centroid_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.k() {
            for b in a + 1..self.k() {
                best = best.min(sq_dist(self.centroid(a), self.centroid(b)));
            }
        }
        best.sqrt()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_matrix(w, CODEBOOK_MAGIC, self.k(), self.dim, &self.centroids)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (_, cols, data) = binio::read_matrix(r, CODEBOOK_MAGIC)?;
        Self::new(cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 100,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

fn assign(points: &[f64], dim: usize, centroids: &[f64]) -> Vec<(UnitId, f64)> {
    let cb = Codebook {
        dim,
        centroids: centroids.to_vec(),
        fit_stats: FitStats::default(),
    };
    points.par_chunks(dim).map(|x| cb.nearest(x)).collect()
}

/// Greedy k-means++: each new centre is the best of several D²-weighted
/// candidates by resulting potential.
fn kmeanspp_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, d) in dist.iter().enumerate() {
                    if r < *d {
                        pick = i;
                        break;
                    }
                    r -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let new_dist: Vec<f64> = (0..n).map(|i| dist[i].min(sq_dist(row(i), row(cand)))).collect();
            let pot: f64 = new_dist.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, new_dist));
            }
        }
        let (_, cand, new_dist) = best.expect("at least one trial");
        centroids.extend_from_slice(row(cand));
        dist = new_dist;
    }
    centroids
}

/// Lloyd's algorithm from a greedy k-means++ start. Empty clusters are moved
/// onto the points farthest from their current centroid.
pub fn fit_kmeans(points: &[f64], dim: usize, config: &KMeansConfig) -> Result<Codebook> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::data("frame matrix shape"));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("non-finite frame value"));
    }
    let n = points.len() / dim;
    let k = config.k;
    if k < 2 {
        return Err(Error::config(format!("K must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::config(format!("{n} frames cannot fit K = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeanspp_init(points, dim, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assignment = assign(points, dim, &centroids);
    history.push(assignment.iter().map(|a| a.1).sum());
    while iterations < config.max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    next[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(b.cmp(&a)))
                    .expect("n >= k leaves a free point");
                taken[far] = true;
                next[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
        }
        let shift = next
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign(points, dim, &centroids);
        history.push(assignment.iter().map(|a| a.1).sum());
        if shift < config.tol {
            break;
        }
    }
    let objective = *history.last().expect("nonempty");
    let mut cb = Codebook::new(dim, centroids)?;
    cb.fit_stats = FitStats {
        iterations,
        objective,
        history,
    };
    Ok(cb)
}

/// Fits on every frame of `corpus`.
pub fn fit_kmeans_on(corpus: &[FeatureSequence], config: &KMeansConfig) -> Result<Codebook> {
    let dim = corpus.first().ok_or_else(|| Error::data("empty feature corpus"))?.dim();
    if corpus.iter().any(|f| f.dim() != dim) {
        return Err(Error::data("feature dimensions differ across corpus"));
    }
    let points: Vec<f64> = corpus.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    fit_kmeans(&points, dim, config)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<UnitId>,
    pub reduced: bool,
}

impl UnitSequence {
    pub fn raw(units: Vec<UnitId>) -> Self {
        Self { units, reduced: false }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub fn quantize(features: &FeatureSequence, codebook: &Codebook) -> Result<UnitSequence> {
    if features.dim() != codebook.dim() {
        return Err(Error::data(format!(
            "feature dim {} does not match codebook dim {}",
            features.dim(),
            codebook.dim()
        )));
    }
    Ok(UnitSequence::raw(features.frames().map(|x| codebook.nearest(x).0).collect()))
}

/// Collapses runs of equal adjacent units.
pub fn reduce(units: &UnitSequence) -> UnitSequence {
    let mut out: Vec<UnitId> = Vec::with_capacity(units.len());
    for &u in &units.units {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    UnitSequence { units: out, reduced: true }
}

/// `reduce(quantize(features))`.
pub fn speech_to_units(features: &FeatureSequence, codebook: &Codebook) -> Result<UnitSequence> {
    quantize(features, codebook).map(|u| reduce(&u))
}

/// Majority phoneme per unit over labelled frames; ties go to the lowest
/// phoneme id and units never assigned map to `None`.
pub fn unit_phoneme_map(codebook: &Codebook, corpus: &[FeatureSequence]) -> Result<Vec<Option<PhonemeId>>> {
    if corpus.is_empty() {
        return Err(Error::data("empty corpus"));
    }
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); codebook.k()];
    for f in corpus {
        let labels = f
            .labels
            .as_ref()
            .ok_or_else(|| Error::data("unit-phoneme map needs labelled frames"))?;
        let units = quantize(f, codebook)?;
        for (&u, &p) in units.units.iter().zip(labels) {
            let c = &mut counts[u];
            if c.len() <= p {
                c.resize(p + 1, 0);
            }
            c[p] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| {
            let best = c.iter().copied().max().unwrap_or(0);
            (best > 0).then(|| c.iter().position(|&x| x == best).expect("max exists"))
        })
        .collect())
}

pub fn write_unit_lines(path: &Path, seqs: &[UnitSequence]) -> Result<()> {
    let text: String = seqs.iter().map(|s| join_ids(&s.units) + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One utterance per line. Blank lines are empty sequences.
pub fn read_unit_lines(path: &Path, reduced: bool) -> Result<Vec<UnitSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_ids(line)
                .map(|units| UnitSequence { units, reduced })
                .map_err(|msg| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg,
                })
        })
        .collect()
}
