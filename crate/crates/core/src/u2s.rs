//! Unit2Speech: a statistical decoder from reduced units plus a speaker
//! embedding back to feature frames.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::s2u::{Codebook, UnitId, UnitSequence};
use crate::synth::FeatureSequence;

pub const DECODER_MAGIC: &[u8; 4] = b"UADC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn zero(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity. Two zero vectors count as identical; one zero
    /// vector against a nonzero one scores 0.
    pub fn cosine(&self, other: &Self) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        match (na == 0.0, nb == 0.0) {
            (true, true) => 1.0,
            (false, false) => self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>() / (na * nb),
            _ => 0.0,
        }
    }
}

/// Mean quantization residual `frame[t] - nearest_centroid(frame[t])`.
pub fn speaker_embed(features: &FeatureSequence, codebook: &Codebook) -> Result<SpeakerEmbedding> {
    if features.is_empty() {
        return Err(Error::data("cannot embed an empty feature sequence"));
    }
    if features.dim() != codebook.dim() {
        return Err(Error::data("feature and codebook dimensions differ"));
    }
    let mut acc = vec![0.0; features.dim()];
    for x in features.frames() {
        let c = codebook.centroid(codebook.nearest(x).0);
        for ((a, xi), ci) in acc.iter_mut().zip(x).zip(c) {
            *a += xi - ci;
        }
    }
    let n = features.len() as f64;
    Ok(SpeakerEmbedding(acc.into_iter().map(|a| a / n).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitDecoder {
    dim: usize,
    unit_means: Vec<f64>,
    pub unit_durations: Vec<usize>,
}

impl UnitDecoder {
    pub fn new(dim: usize, unit_means: Vec<f64>, unit_durations: Vec<usize>) -> Result<Self> {
        if dim == 0 || unit_means.len() != dim * unit_durations.len() {
            return Err(Error::data("decoder means and durations disagree on K"));
        }
        if unit_durations.contains(&0) {
            return Err(Error::data("unit durations must be at least 1"));
        }
        if unit_means.iter().any(|x| !x.is_finite()) {
            return Err(Error::data("non-finite unit mean"));
        }
        Ok(Self {
            dim,
            unit_means,
            unit_durations,
        })
    }

    /// Means equal to the centroids, every duration `duration`.
    pub fn from_codebook(codebook: &Codebook, duration: usize) -> Result<Self> {
        Self::new(codebook.dim(), codebook.as_slice().to_vec(), vec![duration; codebook.k()])
    }

    pub fn k(&self) -> usize {
        self.unit_durations.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit_mean(&self, k: UnitId) -> &[f64] {
        &self.unit_means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_matrix(w, DECODER_MAGIC, self.k(), self.dim, &self.unit_means)?;
        let mut buf = Vec::with_capacity(4 * self.k());
        for &d in &self.unit_durations {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (rows, cols, means) = binio::read_matrix(r, DECODER_MAGIC)?;
        let durations = (0..rows)
            .map(|_| binio::read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cols, means, durations)
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

/// Per-unit mean frame and median run length over aligned native data.
/// Units that never occur fall back to their centroid and a duration of 1.
pub fn fit_unit_decoder(codebook: &Codebook, corpus: &[(FeatureSequence, UnitSequence)]) -> Result<UnitDecoder> {
    if corpus.is_empty() {
        return Err(Error::data("empty native corpus"));
    }
    let (k, dim) = (codebook.k(), codebook.dim());
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    let mut runs: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (f, u) in corpus {
        if u.reduced || f.len() != u.len() {
            return Err(Error::data("decoder fitting needs frame-aligned unreduced units"));
        }
        if f.dim() != dim {
            return Err(Error::data("feature and codebook dimensions differ"));
        }
        for (x, &unit) in f.frames().zip(&u.units) {
            if unit >= k {
                return Err(Error::data(format!("unit {unit} outside codebook of {k}")));
            }
            counts[unit] += 1;
            for (s, xi) in sums[unit * dim..(unit + 1) * dim].iter_mut().zip(x) {
                *s += xi;
            }
        }
        let mut t = 0;
        while t < u.len() {
            let start = t;
            while t < u.len() && u.units[t] == u.units[start] {
                t += 1;
            }
            runs[u.units[start]].push(t - start);
        }
    }
    let mut means = codebook.as_slice().to_vec();
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                means[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
    }
    let durations = runs
        .into_iter()
        .map(|mut r| {
            if r.is_empty() {
                1
            } else {
                r.sort_unstable();
                r[r.len() / 2]
            }
        })
        .collect();
    UnitDecoder::new(dim, means, durations)
}

/// Emits `unit_durations[k]` copies of `unit_means[k] + embedding` per unit.
pub fn synthesize(units: &UnitSequence, embedding: &SpeakerEmbedding, decoder: &UnitDecoder) -> Result<FeatureSequence> {
    if embedding.0.len() != decoder.dim() {
        return Err(Error::data("embedding and decoder dimensions differ"));
    }
    let mut out = FeatureSequence::empty(decoder.dim());
    let mut frame = vec![0.0; decoder.dim()];
    for &u in &units.units {
        if u >= decoder.k() {
            return Err(Error::data(format!("unit {u} outside decoder of {}", decoder.k())));
        }
        for ((f, m), e) in frame.iter_mut().zip(decoder.unit_mean(u)).zip(&embedding.0) {
            *f = m + e;
        }
        for _ in 0..decoder.unit_durations[u] {
            out.push_frame(&frame);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::s2u::{quantize, reduce};

    fn codebook() -> Codebook {
        Codebook::new(2, vec![0.0, 0.0, 4.0, 0.0, 0.0, 4.0, 4.0, 4.0]).unwrap()
    }

    #[test]
    fn single_unit_synthesis() {
        let dec = UnitDecoder::new(2, vec![0.0, 0.0, 1.0, 2.0], vec![1, 2]).unwrap();
        let e = SpeakerEmbedding(vec![0.5, -0.5]);
        let f = synthesize(&UnitSequence::raw(vec![1]), &e, &dec).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.frame(0), &[1.5, 1.5]);
        assert_eq!(f.frame(1), &[1.5, 1.5]);
        assert!(synthesize(&UnitSequence::raw(vec![]), &e, &dec).unwrap().is_empty());
        assert!(matches!(
            synthesize(&UnitSequence::raw(vec![2]), &e, &dec),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn embedding_recovers_exact_offset() {
        let cb = codebook();
        let dec = UnitDecoder::from_codebook(&cb, 3).unwrap();
        let e = SpeakerEmbedding(vec![0.3, -0.2]);
        let f = synthesize(&UnitSequence::raw(vec![0, 3, 1, 2]), &e, &dec).unwrap();
        let got = speaker_embed(&f, &cb).unwrap();
        for (a, b) in got.0.iter().zip(&e.0) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = synthesize(&UnitSequence::raw(vec![0, 3]), &SpeakerEmbedding::zero(2), &dec).unwrap();
        assert_eq!(speaker_embed(&z, &cb).unwrap(), SpeakerEmbedding::zero(2));
        assert!(speaker_embed(&FeatureSequence::empty(2), &cb).is_err());
    }

    #[test]
    fn decoder_statistics() {
        let cb = codebook();
        let f = FeatureSequence::new(2, vec![0.1, 0.0, -0.1, 0.0, 4.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let u = quantize(&f, &cb).unwrap();
        assert_eq!(u.units, vec![0, 0, 1, 0, 0, 0]);
        let dec = fit_unit_decoder(&cb, &[(f, u)]).unwrap();
        assert_eq!(dec.unit_mean(0), &[0.0, 0.0]);
        assert_eq!(dec.unit_mean(1), &[4.0, 0.2]);
        assert_eq!(dec.unit_mean(2), cb.centroid(2));
        // runs of unit 0 are [2, 3]; upper median is 3
        assert_eq!(dec.unit_durations, vec![3, 1, 1, 1]);
        assert!(fit_unit_decoder(&cb, &[]).is_err());
    }

    #[test]
    fn reduced_units_are_rejected_for_fitting() {
        let cb = codebook();
        let f = FeatureSequence::new(2, vec![0.0; 2]).unwrap();
        let u = reduce(&quantize(&f, &cb).unwrap());
        assert!(fit_unit_decoder(&cb, &[(f, u)]).is_err());
    }

    #[test]
    fn decoder_file_round_trip() {
        let dec = UnitDecoder::new(2, vec![0.5, 1.0, -2.0, 4.25], vec![3, 7]).unwrap();
        let mut buf = Vec::new();
        dec.write_to(&mut buf).unwrap();
        assert_eq!(UnitDecoder::read_from(&mut buf.as_slice()).unwrap(), dec);
    }

    #[test]
    fn cosine_conventions() {
        let z = SpeakerEmbedding::zero(3);
        let a = SpeakerEmbedding(vec![1.0, 0.0, 0.0]);
        assert_eq!(z.cosine(&z), 1.0);
        assert_eq!(z.cosine(&a), 0.0);
        assert!((a.cosine(&SpeakerEmbedding(vec![2.0, 0.0, 0.0])) - 1.0).abs() < 1e-15);
    }
}
