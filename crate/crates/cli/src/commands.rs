use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use convcap::data::{
    build_examples, read_corpus, read_features, split_train_val, synth_corpus, write_corpus, write_features,
    CorpusRecord, Example, FeatureSet, Vocabulary, COLORS, OBJECTS, PLACES, RELATIONS,
};
use convcap::decode::{beam_search, Hypothesis};
use convcap::eval::{
    corpus_bleu, grad_norm_probe, metrics_csv, read_metrics_csv, token_stats, unique_words_per_position,
    write_bleu_csv, write_diversity_csv, AnalysisRecord, Comparison, Trajectory,
};
use convcap::model::{AnyModel, Captioner, Checkpoint, ModelKind, SpatialDims};
use convcap::train::Trainer;

use crate::manifest::{resolve_out, Run};
use crate::settings::{ModelChoice, Settings};
use crate::{KindArg, Split};

const MANIFEST: &str = "manifest.json";
const CORPUS: &str = "corpus.tsv";
const FEATURES: &str = "features.ccf";
const VOCAB: &str = "vocab.txt";

pub fn synth(scenes: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    ensure!(scenes >= 1, "--scenes must be at least 1");
    let dir = resolve_out(out, "synth")?;
    let run = Run::begin(&dir, MANIFEST, "synth", json!({ "scenes": scenes }), Some(seed), &[])?;
    run.execute(|run| {
        let corpus = synth_corpus(scenes, seed);
        write_corpus(&corpus.records, &run.path(CORPUS))?;
        write_features(&corpus.features, &run.path(FEATURES))?;
        corpus.vocab.save(&run.path(VOCAB))?;
        let mut table = String::from("image_id,color,object,relation,place,block_row,block_col\n");
        for (scene, rec) in corpus.scenes.iter().zip(&corpus.records) {
            writeln!(
                table,
                "{},{},{},{},{},{},{}",
                rec.image_id,
                COLORS[scene.color],
                OBJECTS[scene.object],
                RELATIONS[scene.relation],
                PLACES[scene.place],
                scene.block_row,
                scene.block_col
            )?;
        }
        fs::write(run.path("scenes.tsv"), table)?;
        log::info!("wrote {scenes} scenes to {}", run.dir().display());
        Ok([CORPUS, FEATURES, VOCAB, "scenes.tsv"].map(String::from).to_vec())
    })
}

fn load_data(dir: &Path) -> Result<(Vec<CorpusRecord>, FeatureSet)> {
    let corpus = dir.join(CORPUS);
    let records = read_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let feats = dir.join(FEATURES);
    let features = read_features(&feats).with_context(|| format!("reading {}", feats.display()))?;
    Ok((records, features))
}

/// Global dimension and spatial shape shared by every image.
fn feature_shape(features: &FeatureSet) -> Result<(usize, Option<SpatialDims>)> {
    let first = features.values().next().context("feature file holds no images")?;
    let spatial = first.spatial.as_ref().map(|s| SpatialDims {
        grid: s.grid,
        channels: s.channels,
    });
    Ok((first.global.len(), spatial))
}

fn select_split(records: &[CorpusRecord], split: Split, val_fraction: f64) -> Result<Vec<CorpusRecord>> {
    ensure!((0.0..1.0).contains(&val_fraction), "val fraction must lie in [0, 1)");
    let (train, val) = split_train_val(records, val_fraction);
    let chosen = match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => records.to_vec(),
    };
    ensure!(!chosen.is_empty(), "the {split:?} split is empty");
    Ok(chosen)
}

fn vocab_for(ckpt: &Path, vocab: Option<&Path>, model: &AnyModel) -> Result<Vocabulary> {
    let path = match vocab {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB),
    };
    let v = Vocabulary::load(&path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        v.len() == model.vocab_size(),
        "{} has {} tokens but the checkpoint expects {}",
        path.display(),
        v.len(),
        model.vocab_size()
    );
    Ok(v)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

pub struct TrainArgs {
    pub model: ModelChoice,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut settings = Settings::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        settings.set("seed", &seed.to_string())?;
    }
    settings.train.validate()?;
    let (records, features) = load_data(&args.data)?;
    let (train_recs, val_recs) = split_train_val(&records, settings.val_fraction);
    ensure!(!train_recs.is_empty(), "no training captions after the validation split");
    let data_vocab = args.data.join(VOCAB);
    let vocab = if data_vocab.exists() {
        Vocabulary::load(&data_vocab)?
    } else {
        Vocabulary::build(train_recs.iter().map(|r| r.caption.join(" ")), settings.min_count)?
    };
    let (feature_dim, spatial) = feature_shape(&features)?;
    let spec = settings.model_spec(args.model, vocab.len(), feature_dim, spatial)?;
    let seed = settings.train.seed;

    let mut inputs: Vec<&Path> = vec![&args.data];
    inputs.extend(args.config.as_deref());
    inputs.extend(args.resume.as_deref());
    let config = json!({
        "model": spec,
        "train": settings.train,
        "val_fraction": settings.val_fraction,
        "min_count": settings.min_count,
        "settings": settings.echo,
        "resume": args.resume.as_ref().map(|p| p.display().to_string()),
    });
    let dir = resolve_out(args.out, "train")?;
    let run = Run::begin(&dir, MANIFEST, "train", config, Some(seed), &inputs)?;
    run.execute(|run| {
        let mut trainer = Trainer::new(settings.train.clone()).output_dir(run.dir());
        let mut model = match &args.resume {
            Some(path) => {
                let ck = Checkpoint::load_expecting(path, &spec)
                    .with_context(|| format!("resuming from {}", path.display()))?;
                log::info!("resuming after epoch {} at lr {:e}", ck.meta.epoch, settings.train.lr_at(ck.meta.epoch));
                trainer = trainer.resume_from(&ck);
                ck.model
            }
            None => AnyModel::from_spec(&spec, seed)?,
        };
        log::info!("image features are fixed inputs; feature-extractor fine-tuning is not supported");
        let max_len = model.max_steps();
        let train_x = build_examples(&train_recs, &features, &vocab, max_len)?;
        let val_x = build_examples(&val_recs, &features, &vocab, max_len)?;
        log::info!(
            "training {} on {} captions ({} held out), |Y| = {}",
            model.kind().tag(),
            train_x.len(),
            val_x.len(),
            vocab.len()
        );
        vocab.save(&run.path(VOCAB))?;
        fs::write(run.path("model.json"), serde_json::to_vec_pretty(&spec)?)?;
        let outcome = trainer.run(&mut model, &train_x, &val_x)?;
        if let Some((epoch, loss)) = outcome.best {
            log::info!("best epoch {epoch} with loss {loss:.6}");
        }
        if outcome.stopped_early {
            log::info!("stopped early after epoch {}", outcome.epochs_completed);
        }
        let mut outputs = vec![VOCAB.to_string(), "model.json".to_string()];
        for name in ["metrics.csv", "last.ckpt", "best.ckpt"] {
            if run.path(name).exists() {
                outputs.push(name.to_string());
            }
        }
        Ok(outputs)
    })
}

fn caption_text(vocab: &Vocabulary, hyp: &Hypothesis) -> String {
    vocab.decode(hyp.caption()).join(" ")
}

pub fn caption(
    ckpt: &Path,
    features: &Path,
    beam: usize,
    out: Option<PathBuf>,
    vocab: Option<PathBuf>,
) -> Result<()> {
    ensure!(beam >= 1, "--beam must be at least 1");
    let file = match out {
        Some(f) => f,
        None => resolve_out(None, "caption")?.join("captions.tsv"),
    };
    let name = file
        .file_name()
        .context("--out must name a file")?
        .to_string_lossy()
        .into_owned();
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut inputs: Vec<&Path> = vec![ckpt, features];
    inputs.extend(vocab.as_deref());
    let config = json!({ "beam": beam, "vocab": vocab.as_ref().map(|p| p.display().to_string()) });
    let run = Run::begin(&dir, &format!("{name}.manifest.json"), "caption", config, None, &inputs)?;
    run.execute(|run| {
        let ck = load_checkpoint(ckpt)?;
        let vocab = vocab_for(ckpt, vocab.as_deref(), &ck.model)?;
        let feats = read_features(features).with_context(|| format!("reading {}", features.display()))?;
        let mut text = String::new();
        for (id, f) in &feats {
            let hyps = beam_search(&ck.model, f, ck.model.max_steps(), beam)?;
            for (rank, h) in hyps.iter().enumerate() {
                writeln!(text, "{id}\t{}\t{}\t{}", rank + 1, h.log_prob, caption_text(&vocab, h))?;
            }
        }
        fs::write(run.path(&name), text)?;
        log::info!("captioned {} images", feats.len());
        Ok(vec![name.clone()])
    })
}

/// Captions grouped by image in first-appearance order.
fn group_by_image(records: &[CorpusRecord]) -> Vec<(String, Vec<Vec<String>>)> {
    let mut order: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let i = *index.entry(r.image_id.clone()).or_insert_with(|| {
            order.push((r.image_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(r.caption.clone());
    }
    order
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub beam: usize,
    pub split: Split,
    pub val_fraction: f64,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    ensure!(args.beam >= 1, "--beam must be at least 1");
    let dir = resolve_out(args.out.clone(), "eval")?;
    let mut inputs: Vec<&Path> = vec![&args.ckpt, &args.data];
    inputs.extend(args.vocab.as_deref());
    let config = json!({
        "beam": args.beam,
        "split": format!("{:?}", args.split).to_lowercase(),
        "val_fraction": args.val_fraction,
        "max_n": 4,
    });
    let run = Run::begin(&dir, MANIFEST, "eval", config, None, &inputs)?;
    run.execute(|run| {
        let ck = load_checkpoint(&args.ckpt)?;
        let vocab = vocab_for(&args.ckpt, args.vocab.as_deref(), &ck.model)?;
        let (records, features) = load_data(&args.data)?;
        let chosen = select_split(&records, args.split, args.val_fraction)?;
        let mut candidates = Vec::new();
        let mut references = Vec::new();
        let (mut cand_txt, mut ref_txt) = (String::new(), String::new());
        for (id, refs) in group_by_image(&chosen) {
            let f = features.get(&id).with_context(|| format!("no features for image {id}"))?;
            let hyps = beam_search(&ck.model, f, ck.model.max_steps(), args.beam)?;
            let words = vocab.decode(hyps[0].caption());
            writeln!(cand_txt, "{id}\t{}", words.join(" "))?;
            for r in &refs {
                writeln!(ref_txt, "{id}\t{}", r.join(" "))?;
            }
            candidates.push(words);
            references.push(refs);
        }
        let score = corpus_bleu(&candidates, &references, 4)?;
        for (n, b) in score.scores.iter().enumerate() {
            log::info!("BLEU-{}: {b:.4}", n + 1);
        }
        write_bleu_csv(&score, &run.path("bleu.csv"))?;
        fs::write(run.path("candidates.txt"), cand_txt)?;
        fs::write(run.path("references.txt"), ref_txt)?;
        Ok(["bleu.csv", "candidates.txt", "references.txt"].map(String::from).to_vec())
    })
}

pub struct AnalyzeArgs {
    pub ckpts: Vec<PathBuf>,
    pub data: PathBuf,
    pub beam: usize,
    pub probe: usize,
    pub split: Split,
    pub val_fraction: f64,
    pub max_images: Option<usize>,
    pub expect: Option<KindArg>,
    pub out: Option<PathBuf>,
}

struct Analysed {
    kind: ModelKind,
    record: AnalysisRecord,
    trajectory: Option<Trajectory>,
}

fn analyse_one(
    args: &AnalyzeArgs,
    run: &Run,
    path: &Path,
    ck: &Checkpoint,
    chosen: &[CorpusRecord],
    features: &FeatureSet,
    outputs: &mut Vec<String>,
) -> Result<Analysed> {
    let model = &ck.model;
    let tag = model.kind().tag();
    let vocab = vocab_for(path, None, model)?;
    let data: Vec<Example> = build_examples(chosen, features, &vocab, model.max_steps())?;
    let stats = token_stats(model, &data)?;
    let norms = grad_norm_probe(model, &data[..args.probe.min(data.len())])?;
    let record = AnalysisRecord {
        epoch: ck.meta.epoch,
        split: format!("{:?}", args.split).to_lowercase(),
        loss: stats.loss,
        entropy: stats.entropy,
        accuracy: stats.accuracy,
        grad_norm_in: norms.input,
        grad_norm_out: norms.output,
        flagged: !norms.finite,
    };
    log::info!(
        "{tag}: entropy {:.6} nats, accuracy {:.4}, grad norms in {:.4e} out {:.4e}",
        record.entropy,
        record.accuracy,
        record.grad_norm_in,
        record.grad_norm_out
    );
    let name = format!("{tag}_analysis.csv");
    fs::write(run.path(&name), metrics_csv(std::slice::from_ref(&record)))?;
    outputs.push(name);

    let mut by_pos = String::from("position,entropy\n");
    for (i, h) in stats.entropy_by_position.iter().enumerate() {
        if let Some(h) = h {
            writeln!(by_pos, "{},{h}", i + 1)?;
        }
    }
    let name = format!("{tag}_entropy_by_position.csv");
    fs::write(run.path(&name), by_pos)?;
    outputs.push(name);

    let mut beams = Vec::new();
    let images = group_by_image(chosen);
    for (id, _) in images.iter().take(args.max_images.unwrap_or(usize::MAX)) {
        let f = &features[id];
        beams.push(beam_search(model, f, model.max_steps(), args.beam)?);
    }
    let name = format!("{tag}_diversity.csv");
    write_diversity_csv(&unique_words_per_position(&beams), &run.path(&name))?;
    outputs.push(name);

    let metrics = path.parent().unwrap_or(Path::new(".")).join("metrics.csv");
    let trajectory = if metrics.exists() {
        Trajectory::from_records(&read_metrics_csv(&metrics)?, "train")
    } else {
        None
    };
    Ok(Analysed {
        kind: model.kind(),
        record,
        trajectory,
    })
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    ensure!(args.beam >= 1 && args.probe >= 1, "--beam and --probe must be at least 1");
    let dir = resolve_out(args.out.clone(), "analyze")?;
    let mut inputs: Vec<&Path> = args.ckpts.iter().map(PathBuf::as_path).collect();
    inputs.push(&args.data);
    let config = json!({
        "beam": args.beam,
        "probe": args.probe,
        "split": format!("{:?}", args.split).to_lowercase(),
        "val_fraction": args.val_fraction,
        "max_images": args.max_images,
        "expect": args.expect.map(|k| format!("{k:?}").to_lowercase()),
    });
    let ckpts: Vec<Checkpoint> = args.ckpts.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let kinds: Vec<ModelKind> = ckpts.iter().map(|c| c.model.kind()).collect();
    if let Some(expect) = args.expect {
        let want = match expect {
            KindArg::Cnn => ModelKind::Cnn,
            KindArg::Lstm => ModelKind::Lstm,
        };
        if let Some(k) = kinds.iter().find(|&&k| k != want) {
            bail!("checkpoint kind mismatch: expected {}, found {}", want.tag(), k.tag());
        }
    }
    if kinds.len() == 2 && kinds[0] == kinds[1] {
        bail!(
            "checkpoint kind mismatch: a comparison needs one cnn and one lstm checkpoint, got two {}",
            kinds[0].tag()
        );
    }
    let run = Run::begin(&dir, MANIFEST, "analyze", config, None, &inputs)?;
    run.execute(|run| {
        let (records, features) = load_data(&args.data)?;
        let chosen = select_split(&records, args.split, args.val_fraction)?;
        let mut outputs = Vec::new();
        let mut done = Vec::new();
        for (path, ck) in args.ckpts.iter().zip(&ckpts) {
            done.push(analyse_one(&args, run, path, ck, &chosen, &features, &mut outputs)?);
        }
        if done.len() == 2 {
            let traj = |a: &Analysed| {
                a.trajectory.clone().unwrap_or_else(|| {
                    log::warn!("no metrics.csv beside the {} checkpoint; using its single analysis row", a.kind.tag());
                    Trajectory::from_records(std::slice::from_ref(&a.record), &a.record.split)
                        .expect("one matching row")
                })
            };
            let (cnn, lstm) = if done[0].kind == ModelKind::Cnn {
                (&done[0], &done[1])
            } else {
                (&done[1], &done[0])
            };
            let cmp = Comparison::new(traj(cnn), traj(lstm));
            cmp.log();
            cmp.write(&run.path("comparison.csv"))?;
            outputs.push("comparison.csv".to_string());
        }
        Ok(outputs)
    })
}
