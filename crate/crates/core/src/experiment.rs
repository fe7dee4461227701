//! End-to-end experiment: synthetic world, augmentation strategy by
//! initialization grid, and single-utterance conversion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_parallel_corpus, render_all_accents, AugmentContext, AugmentStrategy, NoiseRanges, ParallelPair};
use crate::corpus::{sample_sentences, split_train_val, Manifest, PhonemeId, PhonemeInventory, Role, Sentence};
use crate::error::{Error, Result};
use crate::eval::{perplexity, run_eval, EvalContext, EvalReport};
use crate::pc::{pretrain_decoder_lm, pretrain_encoder_masked, train, write_log, PcConfig, PcModel, TrainConfig};
use crate::s2u::{fit_kmeans_on, quantize, reduce, unit_phoneme_map, Codebook, KMeansConfig, UnitSequence};
use crate::synth::{phoneme_prototypes, AccentParams, AccentSpec, FeatureSequence, RenderConfig, Renderer, SpeakerSpec};
use crate::u2s::{fit_unit_decoder, speaker_embed, synthesize, UnitDecoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub inventory_size: usize,
    pub confusables: usize,
    pub dim: usize,
    pub separation: f64,
    pub len_range: (usize, usize),
    pub accents: usize,
    pub accent: AccentParams,
    /// Append an identity accent (native pronunciation and tempo) after the
    /// random ones.
    pub native_accent: bool,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub speaker_max_norm: f64,
    pub noise: NoiseRanges,
    pub kmeans: KMeansConfig,
    /// Native renders of this many training sentences feed K-means and the
    /// unit decoder.
    pub codebook_sentences: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            inventory_size: 40,
            confusables: 3,
            dim: 16,
            separation: 2.0,
            len_range: (5, 30),
            accents: 6,
            accent: AccentParams::default(),
            native_accent: false,
            train_speakers: 50,
            test_speakers: 10,
            speaker_max_norm: 0.5,
            noise: NoiseRanges::default(),
            kmeans: KMeansConfig::default(),
            codebook_sentences: 500,
        }
    }
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    crate::synth::native_seed(h)
}

/// Renderer, accents and speakers; a pure function of the world config and
/// seed, so every pipeline stage can rebuild it.
#[derive(Clone, Debug)]
pub struct Voices {
    pub renderer: Renderer,
    pub render_config: RenderConfig,
    pub accents: Vec<AccentSpec>,
    pub train_speakers: Vec<SpeakerSpec>,
    pub test_speakers: Vec<SpeakerSpec>,
    pub noise: NoiseRanges,
}

impl Voices {
    pub fn build(config: &WorldConfig, seed: u64) -> Result<Self> {
        let inventory = PhonemeInventory::generate(config.inventory_size, config.confusables, derive_seed(seed, "inventory"))?;
        let prototypes = phoneme_prototypes(&inventory, config.dim, config.separation, derive_seed(seed, "prototypes"))?;
        let render_config = RenderConfig::new(&inventory, config.dim, derive_seed(seed, "durations"));
        let renderer = Renderer::new(inventory, prototypes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "voices"));
        let size = config.inventory_size;
        let mut accents: Vec<AccentSpec> = (0..config.accents as u32)
            .map(|id| AccentSpec::random(id, size, config.dim, &config.accent, &mut rng))
            .collect();
        if config.native_accent {
            accents.push(AccentSpec::identity(config.accents as u32, size, config.dim));
        }
        let train_speakers = (0..config.train_speakers as u32)
            .map(|id| SpeakerSpec::random(id, config.dim, config.speaker_max_norm, &mut rng))
            .collect();
        let test_speakers = (0..config.test_speakers as u32)
            .map(|i| SpeakerSpec::random(1000 + i, config.dim, config.speaker_max_norm, &mut rng))
            .collect();
        Ok(Self {
            renderer,
            render_config,
            accents,
            train_speakers,
            test_speakers,
            noise: config.noise,
        })
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.renderer.inventory
    }

    pub fn native_renders(&self, sentences: &[Sentence]) -> Result<Vec<FeatureSequence>> {
        sentences
            .par_iter()
            .map(|s| self.renderer.native_render(s, &self.render_config))
            .collect()
    }

    pub fn context<'a>(&'a self, codebook: &'a Codebook, speakers: &'a [SpeakerSpec]) -> AugmentContext<'a> {
        AugmentContext {
            renderer: &self.renderer,
            render_config: &self.render_config,
            codebook,
            accents: &self.accents,
            speakers,
            noise: self.noise,
        }
    }
}

/// Codebook, unit decoder and unit-to-phoneme map fit on native renders.
pub fn fit_units(
    renders: &[FeatureSequence],
    kmeans: &KMeansConfig,
) -> Result<(Codebook, UnitDecoder, Vec<Option<PhonemeId>>)> {
    let codebook = fit_kmeans_on(renders, kmeans)?;
    let aligned: Vec<(FeatureSequence, UnitSequence)> = renders
        .iter()
        .map(|f| Ok((f.clone(), quantize(f, &codebook)?)))
        .collect::<Result<_>>()?;
    let decoder = fit_unit_decoder(&codebook, &aligned)?;
    let unit_phonemes = unit_phoneme_map(&codebook, renders)?;
    Ok((codebook, decoder, unit_phonemes))
}

/// All fixed components shared by every cell of an experiment.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub voices: Voices,
    pub codebook: Codebook,
    pub decoder: UnitDecoder,
    pub unit_phonemes: Vec<Option<PhonemeId>>,
}

impl World {
    /// Builds the voices from `seed`, then fits the codebook and unit
    /// decoder on native renders of the first sentences of `native`.
    pub fn build(config: &WorldConfig, native: &[Sentence], seed: u64) -> Result<Self> {
        let voices = Voices::build(config, seed)?;
        let take = native.len().min(config.codebook_sentences);
        if take == 0 {
            return Err(Error::config("no sentences to fit the codebook on"));
        }
        let renders = voices.native_renders(&native[..take])?;
        let kmeans = KMeansConfig {
            seed: derive_seed(seed, "kmeans"),
            ..config.kmeans
        };
        let (codebook, decoder, unit_phonemes) = fit_units(&renders, &kmeans)?;
        Ok(Self {
            config: config.clone(),
            voices,
            codebook,
            decoder,
            unit_phonemes,
        })
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        self.voices.inventory()
    }

    pub fn context<'a>(&'a self, speakers: &'a [SpeakerSpec]) -> AugmentContext<'a> {
        self.voices.context(&self.codebook, speakers)
    }

    pub fn train_context(&self) -> AugmentContext<'_> {
        self.context(&self.voices.train_speakers)
    }

    pub fn test_context(&self) -> AugmentContext<'_> {
        self.context(&self.voices.test_speakers)
    }

    pub fn native_units(&self, sentence: &Sentence) -> Result<UnitSequence> {
        self.train_context().native_target(sentence)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Random,
    EncPretrain,
    DecPretrain,
    Both,
}

impl Init {
    pub fn encoder(self) -> bool {
        matches!(self, Init::EncPretrain | Init::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Init::DecPretrain | Init::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Init::Random => "random",
            Init::EncPretrain => "enc-pretrain",
            Init::DecPretrain => "dec-pretrain",
            Init::Both => "both",
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Init::Random, Init::EncPretrain, Init::DecPretrain, Init::Both]
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| format!("unknown init {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Sentences split into train and validation.
    pub sentences: usize,
    pub split_ratio: (usize, usize),
    /// Held-out sentences rendered with unseen speakers.
    pub test_sentences: usize,
    pub budget: usize,
    pub strategies: Vec<AugmentStrategy>,
    pub inits: Vec<Init>,
    pub seeds: Vec<u64>,
    pub model: PcConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub beam: usize,
    /// Rank beam hypotheses by mean token log-probability.
    pub length_norm: bool,
    /// Run the full beam-search evaluation on the test set for every cell.
    pub full_eval: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            sentences: 6006,
            split_ratio: (1000, 1),
            test_sentences: 100,
            budget: 6000,
            strategies: vec![AugmentStrategy::NonOverlapped, AugmentStrategy::overlapped()],
            inits: vec![Init::Random, Init::DecPretrain],
            seeds: vec![1, 2, 3],
            model: PcConfig::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                total_updates: 1000,
                ..TrainConfig::default()
            },
            beam: 8,
            length_norm: false,
            full_eval: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() || seeds.is_empty() {
            return Err(Error::config("seeds must be distinct and nonempty"));
        }
        if self.strategies.is_empty() || self.inits.is_empty() {
            return Err(Error::config("need at least one strategy and one init"));
        }
        if self.beam == 0 {
            return Err(Error::config("beam must be at least 1"));
        }
        self.train.validate()?;
        self.pretrain.validate()
    }

    /// Model config with vocabulary and input size taken from the world.
    pub fn model_config(&self, world: &World, seed: u64) -> PcConfig {
        PcConfig {
            feature_dim: world.config.dim,
            k: world.codebook.k(),
            init_seed: derive_seed(seed, "init"),
            ..self.model.clone()
        }
    }
}

/// Sentences, splits and shared evaluation sets.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Vec<Sentence>,
    pub val: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub val_pairs: Vec<ParallelPair>,
    pub test_pairs: Vec<ParallelPair>,
}

impl Data {
    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::from_roles([
            (Role::Train, self.train.as_slice()),
            (Role::Val, self.val.as_slice()),
            (Role::Test, self.test.as_slice()),
        ])
    }

    pub fn sentence_map(&self) -> HashMap<u64, Sentence> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|s| (s.id, s.clone()))
            .collect()
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<(World, Data)> {
    config.validate()?;
    let wc = &config.world;
    let probe_inv = PhonemeInventory::generate(wc.inventory_size, wc.confusables, derive_seed(config.seed, "inventory"))?;
    let all = sample_sentences(
        config.sentences + config.test_sentences,
        wc.len_range,
        &probe_inv,
        derive_seed(config.seed, "sentences"),
    )?;
    let (pool, test) = all.split_at(config.sentences);
    let (train, val) = split_train_val(pool, config.split_ratio, derive_seed(config.seed, "split"))?;
    let world = World::build(wc, &train, config.seed)?;
    let val_pairs = render_all_accents(&val, &world.train_context(), derive_seed(config.seed, "val"))?;
    let test_pairs = if test.is_empty() {
        Vec::new()
    } else {
        render_all_accents(test, &world.test_context(), derive_seed(config.seed, "test"))?
    };
    Ok((
        world,
        Data {
            train,
            val,
            test: test.to_vec(),
            val_pairs,
            test_pairs,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_val_ppl: Option<f64>,
    pub best_update: usize,
    pub test_ppl: Option<f64>,
    pub unigram_ppl: f64,
    pub test_report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: AugmentStrategy,
    pub init: Init,
    pub runs: Vec<RunResult>,
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

impl CellReport {
    pub fn key(&self) -> String {
        format!("{}_{}", self.strategy.name(), self.init.name())
    }

    /// Mean and population standard deviation of best validation PPL over
    /// successful runs.
    pub fn val_ppl(&self) -> Option<(f64, f64)> {
        mean_std(&self.runs.iter().filter_map(|r| r.best_val_ppl).collect::<Vec<_>>())
    }

    pub fn test_ppl(&self) -> Option<(f64, f64)> {
        mean_std(&self.runs.iter().filter_map(|r| r.test_ppl).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellReport>,
}

impl GridReport {
    pub fn cell(&self, strategy_name: &str, init: Init) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.strategy.name() == strategy_name && c.init == init)
    }

    fn marginal(&self, pick: impl Fn(&CellReport) -> bool) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| pick(c))
            .flat_map(|c| c.runs.iter().filter_map(|r| r.best_val_ppl))
            .collect();
        mean_std(&xs).map(|m| m.0)
    }

    /// Mean best validation PPL of (overlapped, non-overlapped) runs,
    /// pooled over inits.
    pub fn strategy_means(&self) -> (Option<f64>, Option<f64>) {
        (
            self.marginal(|c| matches!(c.strategy, AugmentStrategy::Overlapped { .. })),
            self.marginal(|c| c.strategy == AugmentStrategy::NonOverlapped),
        )
    }

    /// Mean best validation PPL of (decoder-pretrained, random) runs, pooled
    /// over strategies.
    pub fn init_means(&self) -> (Option<f64>, Option<f64>) {
        (self.marginal(|c| c.init == Init::DecPretrain), self.marginal(|c| c.init == Init::Random))
    }

    pub fn overlapped_beats_non_overlapped(&self) -> Option<bool> {
        match self.strategy_means() {
            (Some(o), Some(n)) => Some(o < n),
            _ => None,
        }
    }

    pub fn pretrained_not_worse(&self) -> Option<bool> {
        match self.init_means() {
            (Some(p), Some(r)) => Some(p <= r),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let fmt = |x: Option<(f64, f64)>| x.map_or("-".to_string(), |(m, s)| format!("{m:.4} ± {s:.4}"));
        let mut out = format!("{:<16} {:<14} {:>20} {:>20} {:>6}\n", "strategy", "init", "val ppl", "test ppl", "runs");
        for c in &self.cells {
            out.push_str(&format!(
                "{:<16} {:<14} {:>20} {:>20} {:>6}\n",
                c.strategy.name(),
                c.init.name(),
                fmt(c.val_ppl()),
                fmt(c.test_ppl()),
                c.runs.iter().filter(|r| r.error.is_none()).count()
            ));
            for r in c.runs.iter().filter(|r| r.error.is_some()) {
                out.push_str(&format!("  seed {} failed: {}\n", r.seed, r.error.as_deref().unwrap_or_default()));
            }
        }
        let yes_no = |b: Option<bool>| b.map_or("n/a", |b| if b { "yes" } else { "no" });
        out.push_str(&format!("overlapped < non-overlapped: {}\n", yes_no(self.overlapped_beats_non_overlapped())));
        out.push_str(&format!("dec-pretrain <= random: {}\n", yes_no(self.pretrained_not_worse())));
        out
    }
}

/// One trained cell run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub strategy: AugmentStrategy,
    pub init: Init,
    pub seed: u64,
    pub model: PcModel,
}

pub struct ExperimentOutcome {
    pub world: World,
    pub data: Data,
    pub report: GridReport,
    pub runs: Vec<TrainedRun>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn native_corpora(world: &World, sentences: &[Sentence]) -> Result<(Vec<FeatureSequence>, Vec<UnitSequence>)> {
    let feats = world.voices.native_renders(sentences)?;
    let units = feats
        .iter()
        .map(|f| quantize(f, &world.codebook).map(|u| reduce(&u)))
        .collect::<Result<_>>()?;
    Ok((feats, units))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    world: &World,
    data: &Data,
    corpus: &[ParallelPair],
    pretrained: &mut BTreeMap<(bool, u64), PcModel>,
    native: &(Vec<FeatureSequence>, Vec<UnitSequence>),
    init: Init,
    seed: u64,
) -> Result<(PcModel, crate::pc::TrainOutcome)> {
    let model_cfg = config.model_config(world, seed);
    let mut model = PcModel::new(model_cfg.clone())?;
    let pre_train = TrainConfig {
        seed: derive_seed(seed, "pretrain"),
        ..config.pretrain.clone()
    };
    if init.encoder() {
        if let std::collections::btree_map::Entry::Vacant(e) = pretrained.entry((true, seed)) {
            let (m, _) = pretrain_encoder_masked(&model_cfg, &native.0, &world.codebook, &pre_train)?;
            e.insert(m);
        }
        model.load_encoder(&pretrained[&(true, seed)])?;
    }
    if init.decoder() {
        if let std::collections::btree_map::Entry::Vacant(e) = pretrained.entry((false, seed)) {
            let (m, _) = pretrain_decoder_lm(&model_cfg, &native.1, &pre_train)?;
            e.insert(m);
        }
        model.load_decoder_lm(&pretrained[&(false, seed)])?;
    }
    let tc = TrainConfig {
        seed: derive_seed(seed, "train"),
        ..config.train.clone()
    };
    let outcome = train(&mut model, corpus, &data.val_pairs, &tc)?;
    Ok((model, outcome))
}

/// Runs every (strategy, init, seed) cell. A failing run is recorded in the
/// report and does not stop the grid. When `out_dir` is given, world
/// artifacts, per-run checkpoints, logs and results, and the grid report
/// are written there.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let (world, data) = prepare(config)?;
    if let Some(dir) = out_dir {
        let wdir = dir.join("world");
        fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
        world.codebook.save(&wdir.join("codebook.uacb"))?;
        world.decoder.save(&wdir.join("decoder.uadc"))?;
        crate::corpus::write_manifest(&data.manifest()?, &wdir.join("manifest.tsv"))?;
        write_text(&wdir.join("config.toml"), &toml::to_string(config).map_err(|e| Error::config(e.to_string()))?)?;
    }
    let native = native_corpora(&world, &data.train)?;
    let unigram = crate::eval::unigram_perplexity(&native.1)?;
    let mut pretrained = BTreeMap::new();
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for &strategy in &config.strategies {
        let mut by_init: Vec<CellReport> = config
            .inits
            .iter()
            .map(|&init| CellReport {
                strategy,
                init,
                runs: Vec::new(),
            })
            .collect();
        for &seed in &config.seeds {
            let corpus = build_parallel_corpus(
                &data.train,
                strategy,
                config.budget,
                &world.train_context(),
                derive_seed(seed, &format!("corpus/{}", strategy.name())),
            );
            for cell in by_init.iter_mut() {
                let init = cell.init;
                let result = corpus
                    .as_ref()
                    .map_err(|e| Error::config(e.to_string()))
                    .and_then(|corpus| run_cell(config, &world, &data, corpus, &mut pretrained, &native, init, seed));
                let mut run = RunResult {
                    seed,
                    best_val_ppl: None,
                    best_update: 0,
                    test_ppl: None,
                    unigram_ppl: unigram,
                    test_report: None,
                    error: None,
                };
                match result.and_then(|(model, outcome)| {
                    run.best_val_ppl = outcome.best_val_ppl;
                    run.best_update = outcome.best_update;
                    if !data.test_pairs.is_empty() {
                        run.test_ppl = Some(perplexity(&model, &data.test_pairs)?);
                        if config.full_eval {
                            let sentences = data.sentence_map();
                            let ctx = eval_context(&world, &sentences, config.beam, config.length_norm);
                            run.test_report = Some(run_eval(&model, &data.test_pairs, &ctx)?.0);
                        }
                    }
                    if let Some(dir) = out_dir {
                        let rdir = dir.join("cells").join(format!("{}_seed{seed}", cell.key()));
                        fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
                        model.save(&rdir.join("model.uack"), Some(&outcome.optimizer))?;
                        let path = rdir.join("train_log.jsonl");
                        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                        write_log(&mut BufWriter::new(f), &outcome.log).map_err(|e| Error::io(&path, e))?;
                    }
                    Ok(model)
                }) {
                    Ok(model) => runs.push(TrainedRun {
                        strategy,
                        init,
                        seed,
                        model,
                    }),
                    Err(e) => run.error = Some(e.to_string()),
                }
                if let Some(dir) = out_dir {
                    let rdir = dir.join("cells").join(format!("{}_seed{seed}", cell.key()));
                    fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
                    write_text(&rdir.join("result.json"), &serde_json::to_string_pretty(&run).expect("serializes"))?;
                }
                cell.runs.push(run);
            }
        }
        cells.extend(by_init);
    }
    let report = GridReport { cells };
    if let Some(dir) = out_dir {
        write_text(&dir.join("grid.txt"), &report.to_text())?;
        write_text(&dir.join("grid.json"), &serde_json::to_string_pretty(&report).expect("serializes"))?;
    }
    Ok(ExperimentOutcome {
        world,
        data,
        report,
        runs,
    })
}

pub fn eval_context<'a>(
    world: &'a World,
    sentences: &'a HashMap<u64, Sentence>,
    beam: usize,
    length_norm: bool,
) -> EvalContext<'a> {
    EvalContext {
        codebook: &world.codebook,
        decoder: &world.decoder,
        unit_phonemes: &world.unit_phonemes,
        sentences,
        filler: world.inventory().filler(),
        beam,
        length_norm,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    pub units: UnitSequence,
    pub features: FeatureSequence,
    pub score: f64,
}

/// Accented features to native-style features: speaker embedding from the
/// input, beam-decoded native units, then unit-to-speech with that embedding.
pub fn convert(
    input: &FeatureSequence,
    model: &PcModel,
    codebook: &Codebook,
    decoder: &UnitDecoder,
    beam: usize,
    length_norm: bool,
) -> Result<Conversion> {
    let embedding = speaker_embed(input, codebook)?;
    let hyp = model.transcribe(input, beam, length_norm)?;
    let units = hyp.to_units();
    let features = synthesize(&units, &embedding, decoder)?;
    Ok(Conversion {
        units,
        features,
        score: hyp.score,
    })
}

/// Writes `units.txt` and `features.uaft` into `dir`.
pub fn write_conversion(dir: &Path, conv: &Conversion) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (u, f) = (dir.join("units.txt"), dir.join("features.uaft"));
    crate::s2u::write_unit_lines(&u, std::slice::from_ref(&conv.units))?;
    conv.features.save(&f)?;
    Ok((u, f))
}
