use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use unitac::augment::{build_parallel_corpus, corpus_stats, read_corpus_dir, render_all_accents, write_corpus_dir};
use unitac::corpus::{read_manifest, sample_sentences, split_train_val, write_manifest, Manifest, Role, Sentence};
use unitac::eval::run_eval;
use unitac::experiment::{convert, derive_seed, eval_context, run_experiment, write_conversion, ExperimentConfig, Voices};
use unitac::pc::{pretrain_decoder_lm, pretrain_encoder_masked, train, write_log, LogRecord, PcConfig, PcModel, TrainConfig};
use unitac::s2u::{
    fit_kmeans_on, quantize, read_unit_lines, reduce, speech_to_units, unit_phoneme_map, write_unit_lines, Codebook,
    KMeansConfig, UnitSequence,
};
use unitac::synth::FeatureSequence;
use unitac::u2s::{fit_unit_decoder, speaker_embed, synthesize, SpeakerEmbedding, UnitDecoder};
use unitac::{Error, Result};

use crate::{AugmentCmd, Cli, Command, CorpusCmd, EvalCmd, PcCmd, S2uCmd, SynthCmd, TrainFlags, U2sCmd};

struct Ctx {
    config: ExperimentConfig,
    out_dir: PathBuf,
}

impl Ctx {
    /// `explicit`, or `name` under the output directory; parents are created.
    fn out(&self, explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let path = explicit.unwrap_or_else(|| self.out_dir.join(name));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    /// Like [`Self::out`] for an output directory, which is created.
    fn dir(&self, explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let path = explicit.unwrap_or_else(|| self.out_dir.join(name));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn voices(&self) -> Result<Voices> {
        Voices::build(&self.config.world, self.config.seed)
    }

    fn model_config(&self, codebook: &Codebook, seed: u64) -> PcConfig {
        PcConfig {
            feature_dim: codebook.dim(),
            k: codebook.k(),
            init_seed: derive_seed(seed, "init"),
            ..self.config.model.clone()
        }
    }

    fn train_config(&self, base: &TrainConfig, flags: &TrainFlags, purpose: &str) -> TrainConfig {
        let seed = flags.seed.unwrap_or(self.config.seed);
        TrainConfig {
            total_updates: flags.updates.unwrap_or(base.total_updates),
            peak_lr: flags.lr.unwrap_or(base.peak_lr),
            seed: derive_seed(seed, purpose),
            ..base.clone()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Ctx {
        config,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Corpus(cmd) => corpus(&ctx, cmd),
        Command::Synth(cmd) => synth(&ctx, cmd),
        Command::S2u(cmd) => s2u(&ctx, cmd),
        Command::U2s(cmd) => u2s(&ctx, cmd),
        Command::Augment(cmd) => augment(ctx, cmd),
        Command::Pc(cmd) => pc(&ctx, cmd),
        Command::Eval(cmd) => eval(&ctx, cmd),
        Command::Experiment(args) => experiment(ctx, args),
        Command::Convert(args) => {
            let (model, _) = PcModel::load(&args.model)?;
            let codebook = Codebook::load(&args.codebook)?;
            let decoder = UnitDecoder::load(&args.decoder)?;
            let input = FeatureSequence::load(&args.input)?;
            let conv = convert(&input, &model, &codebook, &decoder, args.beam, args.length_norm)?;
            let dir = ctx.dir(args.out, "convert")?;
            let (u, f) = write_conversion(&dir, &conv)?;
            println!("{} units -> {}, {} frames -> {}", conv.units.len(), u.display(), conv.features.len(), f.display());
            Ok(())
        }
    }
}

fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("ratio must look like 1000:1, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_role(s: &str) -> Result<Role> {
    match s {
        "train" => Ok(Role::Train),
        "val" => Ok(Role::Val),
        "test" => Ok(Role::Test),
        _ => Err(Error::config(format!("unknown role {s:?}"))),
    }
}

fn manifest_sentences(path: &Path, role: Option<&str>) -> Result<Vec<Sentence>> {
    let m = read_manifest(path)?;
    Ok(match role {
        Some(r) => m.sentences(parse_role(r)?),
        None => m.records.iter().map(|r| r.sentence()).collect(),
    })
}

fn corpus(ctx: &Ctx, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Sample {
            n,
            len_min,
            len_max,
            seed,
            out,
        } => {
            let w = &ctx.config.world;
            let n = n.unwrap_or(ctx.config.sentences + ctx.config.test_sentences);
            let range = (len_min.unwrap_or(w.len_range.0), len_max.unwrap_or(w.len_range.1));
            let voices = ctx.voices()?;
            let seed = seed.unwrap_or(derive_seed(ctx.config.seed, "sentences"));
            let sentences = sample_sentences(n, range, voices.inventory(), seed)?;
            let path = ctx.out(out, "manifest.tsv")?;
            write_manifest(&Manifest::from_roles([(Role::Train, sentences.as_slice())])?, &path)?;
            println!("{n} sentences -> {}", path.display());
        }
        CorpusCmd::Split {
            manifest,
            ratio,
            test,
            seed,
            out,
        } => {
            let ratio = match ratio {
                Some(r) => parse_ratio(&r)?,
                None => ctx.config.split_ratio,
            };
            let all = manifest_sentences(&manifest, None)?;
            if test >= all.len() {
                return Err(Error::config(format!("{test} test sentences leave nothing to split")));
            }
            let (pool, held) = all.split_at(all.len() - test);
            let seed = seed.unwrap_or(derive_seed(ctx.config.seed, "split"));
            let (tr, va) = split_train_val(pool, ratio, seed)?;
            let m = Manifest::from_roles([(Role::Train, tr.as_slice()), (Role::Val, va.as_slice()), (Role::Test, held)])?;
            let path = ctx.out(out, "manifest.tsv")?;
            write_manifest(&m, &path)?;
            println!("train {} / val {} / test {} -> {}", tr.len(), va.len(), held.len(), path.display());
        }
    }
    Ok(())
}

fn write_features(dir: &Path, items: &[(u64, FeatureSequence)]) -> Result<()> {
    for (id, f) in items {
        f.save(&dir.join(format!("s{id:06}.uaft")))?;
    }
    Ok(())
}

/// Feature files of `dir` in file name order.
fn read_features(dir: &Path) -> Result<Vec<(String, FeatureSequence)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "uaft"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no .uaft files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, FeatureSequence::load(&p)?))
        })
        .collect()
}

fn synth(ctx: &Ctx, cmd: SynthCmd) -> Result<()> {
    let voices = ctx.voices()?;
    let (source, rendered) = match cmd {
        SynthCmd::Native { source } => {
            let sentences = manifest_sentences(&source.manifest, source.role.as_deref())?;
            let feats = voices.native_renders(&sentences)?;
            (source, sentences.iter().map(|s| s.id).zip(feats).collect::<Vec<_>>())
        }
        SynthCmd::Render {
            source,
            accent,
            speaker,
            inference_noise,
            duration_noise,
            seed,
        } => {
            let sentences = manifest_sentences(&source.manifest, source.role.as_deref())?;
            let accent = voices
                .accents
                .get(accent)
                .ok_or_else(|| Error::config(format!("accent {accent} of {}", voices.accents.len())))?;
            let speakers: Vec<_> = voices.train_speakers.iter().chain(&voices.test_speakers).collect();
            let speaker = speakers
                .get(speaker)
                .ok_or_else(|| Error::config(format!("speaker {speaker} of {}", speakers.len())))?;
            let cfg = voices.render_config.with_noise(duration_noise, inference_noise);
            let seed = seed.unwrap_or(ctx.config.seed);
            let items = sentences
                .iter()
                .map(|s| {
                    let f = voices
                        .renderer
                        .render(s, speaker, accent, &cfg, derive_seed(seed, &format!("render/{}", s.id)))?;
                    Ok((s.id, f))
                })
                .collect::<Result<Vec<_>>>()?;
            (source, items)
        }
    };
    let dir = ctx.dir(source.out, "features")?;
    write_features(&dir, &rendered)?;
    println!("{} feature files -> {}", rendered.len(), dir.display());
    Ok(())
}

fn s2u(ctx: &Ctx, cmd: S2uCmd) -> Result<()> {
    match cmd {
        S2uCmd::Fit {
            features,
            k,
            max_iters,
            tol,
            seed,
            out,
        } => {
            let feats: Vec<FeatureSequence> = read_features(&features)?.into_iter().map(|x| x.1).collect();
            let base = ctx.config.world.kmeans;
            let cfg = KMeansConfig {
                k: k.unwrap_or(base.k),
                max_iters: max_iters.unwrap_or(base.max_iters),
                tol: tol.unwrap_or(base.tol),
                seed: seed.unwrap_or(derive_seed(ctx.config.seed, "kmeans")),
            };
            let cb = fit_kmeans_on(&feats, &cfg)?;
            let path = ctx.out(out, "codebook.uacb")?;
            cb.save(&path)?;
            let stats = &cb.fit_stats;
            println!(
                "K={} after {} iterations, objective {:.6} -> {}",
                cb.k(),
                stats.iterations,
                stats.objective,
                path.display()
            );
        }
        S2uCmd::Quantize {
            codebook,
            features,
            raw,
            out,
        } => {
            let cb = Codebook::load(&codebook)?;
            let seqs = read_features(&features)?
                .iter()
                .map(|(_, f)| if raw { quantize(f, &cb) } else { speech_to_units(f, &cb) })
                .collect::<Result<Vec<_>>>()?;
            let path = ctx.out(out, "units.txt")?;
            write_unit_lines(&path, &seqs)?;
            println!("{} unit sequences -> {}", seqs.len(), path.display());
        }
    }
    Ok(())
}

fn u2s(ctx: &Ctx, cmd: U2sCmd) -> Result<()> {
    match cmd {
        U2sCmd::Fit { codebook, features, out } => {
            let cb = Codebook::load(&codebook)?;
            let aligned = read_features(&features)?
                .into_iter()
                .map(|(_, f)| {
                    let u = quantize(&f, &cb)?;
                    Ok((f, u))
                })
                .collect::<Result<Vec<_>>>()?;
            let dec = fit_unit_decoder(&cb, &aligned)?;
            let path = ctx.out(out, "decoder.uadc")?;
            dec.save(&path)?;
            println!("unit decoder over {} utterances -> {}", aligned.len(), path.display());
        }
        U2sCmd::Synth {
            decoder,
            codebook,
            units,
            speaker_from,
            out,
        } => {
            let dec = UnitDecoder::load(&decoder)?;
            let cb = Codebook::load(&codebook)?;
            let emb = match speaker_from {
                Some(p) => speaker_embed(&FeatureSequence::load(&p)?, &cb)?,
                None => SpeakerEmbedding::zero(dec.dim()),
            };
            let seqs = read_unit_lines(&units, true)?;
            let dir = ctx.dir(out, "synth")?;
            for (i, u) in seqs.iter().enumerate() {
                synthesize(u, &emb, &dec)?.save(&dir.join(format!("{i:06}.uaft")))?;
            }
            println!("{} feature files -> {}", seqs.len(), dir.display());
        }
    }
    Ok(())
}

fn augment(mut ctx: Ctx, cmd: AugmentCmd) -> Result<()> {
    let AugmentCmd::Build {
        manifest,
        codebook,
        strategy,
        budget,
        accents,
        speakers,
        role,
        all_accents,
        seed,
        out,
    } = cmd;
    if let Some(a) = accents {
        ctx.config.world.accents = a;
    }
    if let Some(s) = speakers {
        ctx.config.world.train_speakers = s;
    }
    let voices = ctx.voices()?;
    let cb = Codebook::load(&codebook)?;
    let sentences = manifest_sentences(&manifest, Some(&role))?;
    let seed = seed.unwrap_or(derive_seed(ctx.config.seed, "corpus"));
    let pairs = if all_accents {
        render_all_accents(&sentences, &voices.context(&cb, &voices.test_speakers), seed)?
    } else {
        let strategy = strategy.unwrap_or(ctx.config.strategies[0]);
        let budget = budget.unwrap_or(ctx.config.budget);
        build_parallel_corpus(&sentences, strategy, budget, &voices.context(&cb, &voices.train_speakers), seed)?
    };
    let dir = ctx.dir(out, "corpus")?;
    write_corpus_dir(&dir, &pairs)?;
    let stats = corpus_stats(&pairs);
    println!(
        "{} pairs over {} sentences -> {}",
        stats.pairs,
        stats.unique_sentences,
        dir.display()
    );
    Ok(())
}

fn write_train_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(&mut BufWriter::new(f), log).map_err(|e| Error::io(path, e))
}

fn pc(ctx: &Ctx, cmd: PcCmd) -> Result<()> {
    match cmd {
        PcCmd::PretrainEnc {
            features,
            codebook,
            train: flags,
            out,
        } => {
            let cb = Codebook::load(&codebook)?;
            let feats: Vec<FeatureSequence> = read_features(&features)?.into_iter().map(|x| x.1).collect();
            let tc = ctx.train_config(&ctx.config.pretrain, &flags, "pretrain");
            let seed = flags.seed.unwrap_or(ctx.config.seed);
            let (model, log) = pretrain_encoder_masked(&ctx.model_config(&cb, seed), &feats, &cb, &tc)?;
            let path = ctx.out(out, "pretrain_enc.uack")?;
            model.save(&path, None)?;
            write_train_log(&path.with_extension("log.jsonl"), &log)?;
            println!("encoder pretrained for {} updates -> {}", log.len(), path.display());
        }
        PcCmd::PretrainDec {
            units,
            codebook,
            train: flags,
            out,
        } => {
            let cb = Codebook::load(&codebook)?;
            let seqs: Vec<UnitSequence> = read_unit_lines(&units, false)?.iter().map(reduce).collect();
            let tc = ctx.train_config(&ctx.config.pretrain, &flags, "pretrain");
            let seed = flags.seed.unwrap_or(ctx.config.seed);
            let (model, log) = pretrain_decoder_lm(&ctx.model_config(&cb, seed), &seqs, &tc)?;
            let path = ctx.out(out, "pretrain_dec.uack")?;
            model.save(&path, None)?;
            write_train_log(&path.with_extension("log.jsonl"), &log)?;
            println!("decoder pretrained for {} updates -> {}", log.len(), path.display());
        }
        PcCmd::Train {
            corpus,
            codebook,
            val,
            init_from,
            train: flags,
            out,
        } => {
            let cb = Codebook::load(&codebook)?;
            let pairs = read_corpus_dir(&corpus)?;
            let val = match val {
                Some(dir) => read_corpus_dir(&dir)?,
                None => Vec::new(),
            };
            let seed = flags.seed.unwrap_or(ctx.config.seed);
            let mut model = PcModel::new(ctx.model_config(&cb, seed))?;
            for spec in &init_from {
                let (kind, path) = match spec.split_once(':') {
                    Some((k @ ("enc" | "dec"), p)) => (k, p),
                    _ => ("all", spec.as_str()),
                };
                let (src, _) = PcModel::load(Path::new(path))?;
                if src.config.model_dim != model.config.model_dim || src.config.k != model.config.k {
                    return Err(Error::config(format!("{path} has a different model shape")));
                }
                match kind {
                    "enc" => model.load_encoder(&src)?,
                    "dec" => model.load_decoder_lm(&src)?,
                    _ => {
                        model.store = src.store;
                        0
                    }
                };
            }
            let tc = ctx.train_config(&ctx.config.train, &flags, "train");
            let outcome = train(&mut model, &pairs, &val, &tc)?;
            let path = ctx.out(out, "model.uack")?;
            model.save(&path, Some(&outcome.optimizer))?;
            write_train_log(&path.with_extension("log.jsonl"), &outcome.log)?;
            match outcome.best_val_ppl {
                Some(p) => println!("best val ppl {p:.4} at update {} -> {}", outcome.best_update, path.display()),
                None => println!("trained {} updates -> {}", tc.total_updates, path.display()),
            }
        }
        PcCmd::Decode {
            model,
            features,
            beam,
            length_norm,
            max_len_mult,
            out,
        } => {
            let (mut model, _) = PcModel::load(&model)?;
            if let Some(m) = max_len_mult {
                if m.is_nan() || m <= 0.0 {
                    return Err(Error::config("--max-len-mult must be positive"));
                }
                // the stored cap is four times the median target length
                model.max_decode_len = ((model.max_decode_len as f64 / 4.0) * m).ceil().max(1.0) as usize;
            }
            let seqs = read_features(&features)?
                .iter()
                .map(|(_, f)| Ok(model.transcribe(f, beam, length_norm)?.to_units()))
                .collect::<Result<Vec<_>>>()?;
            let path = ctx.out(out, "decoded.txt")?;
            write_unit_lines(&path, &seqs)?;
            println!("{} decodes -> {}", seqs.len(), path.display());
        }
    }
    Ok(())
}

fn eval(ctx: &Ctx, cmd: EvalCmd) -> Result<()> {
    let EvalCmd::Run {
        model,
        corpus,
        codebook,
        decoder,
        test_manifest,
        beam,
        length_norm,
        report,
    } = cmd;
    let (model, _) = PcModel::load(&model)?;
    let cb = Codebook::load(&codebook)?;
    let dec = UnitDecoder::load(&decoder)?;
    let pairs = read_corpus_dir(&corpus)?;
    let sentences = manifest_sentences(&test_manifest, None)?;
    let voices = ctx.voices()?;
    let unit_phonemes = unit_phoneme_map(&cb, &voices.native_renders(&sentences)?)?;
    let by_id: HashMap<u64, Sentence> = sentences.into_iter().map(|s| (s.id, s)).collect();
    let world = unitac::experiment::World {
        config: ctx.config.world.clone(),
        voices,
        codebook: cb,
        decoder: dec,
        unit_phonemes,
    };
    let (rep, _) = run_eval(&model, &pairs, &eval_context(&world, &by_id, beam, length_norm))?;
    let path = ctx.out(report, "eval.txt")?;
    rep.write(&path)?;
    print!("{}", rep.to_text());
    Ok(())
}

fn experiment(mut ctx: Ctx, args: crate::ExperimentArgs) -> Result<()> {
    let c = &mut ctx.config;
    if let Some(b) = args.budget {
        c.budget = b;
    }
    if let Some(s) = args.strategies {
        c.strategies = s;
    }
    if let Some(i) = args.inits {
        c.inits = i;
    }
    if let Some(s) = args.seeds {
        c.seeds = s;
    }
    if let Some(u) = args.updates {
        c.train.total_updates = u;
    }
    c.full_eval |= args.full_eval;
    let dir = ctx.dir(None, "")?;
    let outcome = run_experiment(&ctx.config, Some(&dir))?;
    print!("{}", outcome.report.to_text());
    Ok(())
}
