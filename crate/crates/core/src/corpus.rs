//! Synthetic content space: phoneme inventory, sentence sampling, splits and
//! line-delimited manifests.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PhonemeId = usize;

/// Dense phoneme ids `0..size`. The last id is the filler symbol used for
/// disfluent insertions; every other id is a content phoneme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    size: usize,
    confusion_map: Vec<Vec<PhonemeId>>,
}

impl PhonemeInventory {
    /// Validates that every confusable is a content phoneme different from its key.
    /// The filler's entry must be empty.
    pub fn new(size: usize, confusion_map: Vec<Vec<PhonemeId>>) -> Result<Self> {
        if size < 2 {
            return Err(Error::config("inventory needs at least one content phoneme and the filler"));
        }
        if confusion_map.len() != size {
            return Err(Error::config(format!(
                "confusion map has {} entries for {size} phonemes",
                confusion_map.len()
            )));
        }
        let filler = size - 1;
        for (p, list) in confusion_map.iter().enumerate() {
            if p == filler && !list.is_empty() {
                return Err(Error::config("the filler phoneme cannot have confusables"));
            }
            for &q in list {
                if q >= filler || q == p {
                    return Err(Error::config(format!("invalid confusable {q} for phoneme {p}")));
                }
            }
        }
        Ok(Self { size, confusion_map })
    }

    /// Random inventory where each content phoneme gets `confusables` distinct
    /// confusable partners.
    pub fn generate(size: usize, confusables: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(Error::config("inventory needs at least one content phoneme and the filler"));
        }
        let content = size - 1;
        if confusables >= content {
            return Err(Error::config(format!(
                "{confusables} confusables impossible with {content} content phonemes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = Vec::with_capacity(size);
        for p in 0..content {
            let others: Vec<PhonemeId> = (0..content).filter(|&q| q != p).collect();
            let mut picks: Vec<PhonemeId> = others.choose_multiple(&mut rng, confusables).copied().collect();
            picks.sort_unstable();
            map.push(picks);
        }
        map.push(Vec::new());
        Self::new(size, map)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn filler(&self) -> PhonemeId {
        self.size - 1
    }

    pub fn content_len(&self) -> usize {
        self.size - 1
    }

    pub fn is_filler(&self, p: PhonemeId) -> bool {
        p == self.filler()
    }

    pub fn confusables(&self, p: PhonemeId) -> &[PhonemeId] {
        &self.confusion_map[p]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u64,
    pub phonemes: Vec<PhonemeId>,
}

/// `n` sentences with uniform lengths in `len_range` and phonemes uniform over
/// the content phonemes. Ids are `0..n`.
pub fn sample_sentences(
    n: usize,
    len_range: (usize, usize),
    inventory: &PhonemeInventory,
    seed: u64,
) -> Result<Vec<Sentence>> {
    let (min, max) = len_range;
    if n == 0 {
        return Err(Error::config("need at least one sentence"));
    }
    if min == 0 || max < min {
        return Err(Error::config(format!("invalid length range ({min}, {max})")));
    }
    let content = inventory.content_len();
    if content == 0 {
        return Err(Error::config("inventory has no content phonemes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n as u64)
        .map(|id| {
            let len = rng.random_range(min..=max);
            let phonemes = (0..len).map(|_| rng.random_range(0..content)).collect();
            Sentence { id, phonemes }
        })
        .collect())
}

/// Random partition in the ratio `train_parts : val_parts`. The validation
/// side gets `floor(n * val / (train + val))` sentences; the remainder goes to
/// train. Both halves keep input order.
pub fn split_train_val(
    sentences: &[Sentence],
    ratio: (usize, usize),
    seed: u64,
) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    let (tp, vp) = ratio;
    if tp == 0 || vp == 0 {
        return Err(Error::config(format!("ratio parts must be positive, got {tp}:{vp}")));
    }
    if sentences.len() < tp + vp {
        return Err(Error::config(format!(
            "{} sentences cannot be split {tp}:{vp}",
            sentences.len()
        )));
    }
    let n = sentences.len();
    let n_val = n * vp / (tp + vp);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (s, v) in sentences.iter().zip(is_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub sentence_id: u64,
    pub role: Role,
    pub phonemes: Vec<PhonemeId>,
}

impl ManifestRecord {
    pub fn sentence(&self) -> Sentence {
        Sentence {
            id: self.sentence_id,
            phonemes: self.phonemes.clone(),
        }
    }
}

/// One record per sentence; sentence ids are unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn from_roles<'a>(parts: impl IntoIterator<Item = (Role, &'a [Sentence])>) -> Result<Self> {
        let mut records = Vec::new();
        for (role, sentences) in parts {
            records.extend(sentences.iter().map(|s| ManifestRecord {
                sentence_id: s.id,
                role,
                phonemes: s.phonemes.clone(),
            }));
        }
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.sentence_id) {
                return Err(Error::data(format!("sentence id {} appears twice", r.sentence_id)));
            }
            if r.phonemes.is_empty() {
                return Err(Error::data(format!("sentence {} is empty", r.sentence_id)));
            }
        }
        Ok(())
    }

    pub fn sentences(&self, role: Role) -> Vec<Sentence> {
        self.records
            .iter()
            .filter(|r| r.role == role)
            .map(ManifestRecord::sentence)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.sentence_id, r.role, join_ids(&r.phonemes)));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(perr(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let sentence_id = fields[0]
                .parse()
                .map_err(|e| perr(lineno, format!("bad sentence id {:?}: {e}", fields[0])))?;
            let role = fields[1].parse().map_err(|e| perr(lineno, e))?;
            let phonemes = parse_ids(fields[2]).map_err(|e| perr(lineno, e))?;
            records.push(ManifestRecord {
                sentence_id,
                role,
                phonemes,
            });
        }
        let m = Self { records };
        m.validate().map_err(|e| perr(0, e.to_string()))?;
        Ok(m)
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path)
}

pub(crate) fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_ids(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad integer {t:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::generate(40, 3, 1).unwrap()
    }

    #[test]
    fn generated_inventory_is_valid() {
        let inv = inv();
        assert_eq!(inv.size(), 40);
        assert_eq!(inv.filler(), 39);
        for p in 0..39 {
            assert_eq!(inv.confusables(p).len(), 3);
            assert!(inv.confusables(p).iter().all(|&q| q != p && q < 39));
        }
        assert!(inv.confusables(39).is_empty());
    }

    #[test]
    fn inventory_rejects_self_confusion() {
        assert!(PhonemeInventory::new(3, vec![vec![0], vec![0], vec![]]).is_err());
        assert!(PhonemeInventory::new(3, vec![vec![2], vec![0], vec![]]).is_err());
    }

    #[test]
    fn degenerate_length_range() {
        let s = sample_sentences(1, (3, 3), &inv(), 7).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].phonemes.len(), 3);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_sentences(1000, (5, 30), &inv(), 42).unwrap();
        let b = sample_sentences(1000, (5, 30), &inv(), 42).unwrap();
        assert_eq!(a, b);
        let c = sample_sentences(1000, (5, 30), &inv(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mean_length_matches_uniform_expectation() {
        // E[uniform{5..30}] = 17.5
        let s = sample_sentences(10_000, (5, 30), &inv(), 3).unwrap();
        let mean = s.iter().map(|x| x.phonemes.len()).sum::<usize>() as f64 / s.len() as f64;
        assert!((mean - 17.5).abs() < 0.5, "mean {mean}");
        assert!(s.iter().all(|x| x.phonemes.iter().all(|&p| p < 39)));
    }

    #[test]
    fn sampling_rejects_bad_ranges() {
        assert!(matches!(sample_sentences(1, (0, 3), &inv(), 0), Err(Error::Config(_))));
        assert!(matches!(sample_sentences(1, (4, 3), &inv(), 0), Err(Error::Config(_))));
        assert!(matches!(sample_sentences(0, (1, 3), &inv(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_ratio_1000_to_1() {
        let s = sample_sentences(1001, (5, 8), &inv(), 1).unwrap();
        let (train, val) = split_train_val(&s, (1000, 1), 9).unwrap();
        assert_eq!((train.len(), val.len()), (1000, 1));
    }

    #[test]
    fn split_even() {
        let s = sample_sentences(10, (5, 8), &inv(), 1).unwrap();
        let (train, val) = split_train_val(&s, (1, 1), 9).unwrap();
        assert_eq!((train.len(), val.len()), (5, 5));
        let ids: HashSet<u64> = train.iter().map(|s| s.id).collect();
        assert!(val.iter().all(|s| !ids.contains(&s.id)));
    }

    #[test]
    fn split_too_small_is_config_error() {
        let s = sample_sentences(3, (5, 8), &inv(), 1).unwrap();
        assert!(matches!(split_train_val(&s, (3, 1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_parse_error_names_line() {
        let text = "0\ttrain\t1 2 3\n1\tbogus\t4\n";
        let err = Manifest::parse(text, Path::new("m.tsv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        let err = Manifest::parse("0\ttrain\t1 x\n", Path::new("m.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let text = "0\ttrain\t1 2 3\n0\tval\t4\n";
        assert!(Manifest::parse(text, Path::new("m.tsv")).is_err());
    }
}
