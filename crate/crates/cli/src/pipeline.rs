//! The end-to-end workflow behind each subcommand, over the data-directory
//! layout described by [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xsight::attribution::{explain_text, integrated_gradients, AttributionMap2D, ImageLogit, TokenAttribution};
use xsight::detection::{detect_from_map, DetectParams, DetectionResult};
use xsight::model::{
    build_image_submodel, build_text_submodel, evaluate, finetune_target, pretrain_source,
    prepare_samples, stratified_split, write_history_csv, Classifier, EpochRecord, ModelConfig,
    ModelInput, Sample, Split,
};
use xsight::render::render_overlay_svg;
use xsight::synth::{generate_dataset, load_manifest, Dataset, DatasetManifest, Domain, GenerateOptions};
use xsight::tensor::write_checkpoint;
use xsight::text::{
    read_embedding_text, tokenize, train_skipgram, write_embedding_text, EmbeddingMatrix,
    SkipGramConfig, Vocabulary,
};
use xsight::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn target_seed(seed: u64) -> u64 {
    seed.wrapping_add(100)
}

/// Writes the source and target datasets under the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut source = GenerateOptions::new(Domain::Source, cfg.n_source, cfg.seed);
    source.image_size = cfg.image_size;
    let mut target = GenerateOptions::new(Domain::Target, cfg.n_target, target_seed(cfg.seed));
    target.image_size = cfg.image_size;
    Ok((
        generate_dataset(&cfg.source_dir(), &source)?,
        generate_dataset(&cfg.target_dir(), &target)?,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainOutcome {
    pub vocab_size: usize,
    pub skipgram_losses: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

fn reports(ds: &Dataset) -> Result<Vec<Vec<String>>> {
    (0..ds.len()).map(|i| Ok(tokenize(&ds.load_report(i)?))).collect()
}

/// Builds the vocabulary over both domains' reports, trains word vectors,
/// and pretrains the image encoder on the source labels.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let source = load_manifest(&cfg.source_dir())?;
    let target = load_manifest(&cfg.target_dir())?;
    if source.is_empty() {
        return Err(Error::Usage("source manifest has no cases".into()));
    }
    let mut docs = reports(&source)?;
    docs.extend(reports(&target)?);
    let vocab = Vocabulary::build(&docs, 1)?;
    let ids: Vec<Vec<usize>> = docs.iter().map(|d| vocab.encode(d)).collect();
    let sg = train_skipgram(
        &ids,
        vocab.len(),
        &SkipGramConfig {
            dim: cfg.embedding_dim,
            epochs: cfg.skipgram_epochs,
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    write_file(&cfg.vocab_path(), vocab.to_json()?)?;
    write_embedding_text(&cfg.embedding_path(), &sg.embedding, &vocab)?;

    let samples = prepare_samples(&source, &vocab, cfg.max_len)?;
    let image = build_image_submodel(cfg.image_size, cfg.image_stages, cfg.image_base_channels, cfg.seed)?;
    let (encoder, history) = pretrain_source(image, &samples, &cfg.pretrain_config(), cfg.hidden)?;
    write_checkpoint(&cfg.encoder_path(), &encoder.params.snapshot(""))?;
    write_history_csv(&cfg.pretrain_history_path(), &history)?;
    Ok(PretrainOutcome {
        vocab_size: vocab.len(),
        skipgram_losses: sg.epoch_losses,
        history,
    })
}

/// Pretrained artifacts plus the encoded target domain.
pub struct Resources {
    pub vocab: Vocabulary,
    pub embedding: EmbeddingMatrix,
    pub target: Dataset,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

pub fn load_resources(cfg: &RunConfig) -> Result<Resources> {
    let target = load_manifest(&cfg.target_dir())?;
    if target.is_empty() {
        return Err(Error::Usage("target manifest has no cases".into()));
    }
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    let embedding = read_embedding_text(&cfg.embedding_path(), &vocab)?;
    let samples = prepare_samples(&target, &vocab, cfg.max_len)?;
    let splits = stratified_split(&target.manifest.labels(), cfg.splits, cfg.seed)?;
    Ok(Resources {
        vocab,
        embedding,
        target,
        samples,
        splits,
    })
}

/// A classifier for `cfg.mode` with the pretrained word vectors and image
/// encoder transferred in and a fresh decoder.
pub fn new_classifier(cfg: &RunConfig, res: &Resources) -> Result<Classifier> {
    let text = if cfg.mode.uses_text() {
        Some(build_text_submodel(&res.embedding, cfg.filters, cfg.max_len, cfg.seed.wrapping_add(7))?)
    } else {
        None
    };
    let image = if cfg.mode.uses_image() {
        Some(build_image_submodel(cfg.image_size, cfg.image_stages, cfg.image_base_channels, cfg.seed)?)
    } else {
        None
    };
    let mut model = Classifier::new(cfg.mode, text, image, cfg.hidden, cfg.seed.wrapping_add(11))?;
    if cfg.mode.uses_image() {
        model.load_encoder(&cfg.encoder_path(), "image.")?;
    }
    Ok(model)
}

pub struct SplitRun {
    pub split: usize,
    pub history: Vec<EpochRecord>,
    /// Test accuracy after each main epoch.
    pub test_accuracy: Vec<f64>,
    pub model: Classifier,
}

impl SplitRun {
    /// Mean test accuracy over the last `n` epochs.
    pub fn final_test_accuracy(&self, n: usize) -> f64 {
        let tail = &self.test_accuracy[self.test_accuracy.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

pub fn finetune_split(cfg: &RunConfig, res: &Resources, split: usize) -> Result<SplitRun> {
    let s = res
        .splits
        .get(split)
        .ok_or_else(|| Error::Usage(format!("split {split} of {}", res.splits.len())))?;
    let mut model = new_classifier(cfg, res)?;
    let test = pick(&res.samples, &s.test);
    let mut test_accuracy = Vec::with_capacity(cfg.epochs);
    let history = finetune_target(
        &mut model,
        &res.samples,
        s,
        split,
        &cfg.training_config(),
        &mut |_, m| {
            if !test.is_empty() {
                test_accuracy.push(evaluate(m, &test)?.accuracy);
            }
            Ok(())
        },
    )?;
    Ok(SplitRun {
        split,
        history,
        test_accuracy,
        model,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitSummary {
    pub split: usize,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub test_accuracy: Vec<f64>,
    /// Mean test accuracy over the last five epochs.
    pub final5_test_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub mode: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub splits: Vec<SplitSummary>,
    pub mean_final5_test_acc: f64,
}

/// Fine-tunes on every split. Split 0's model is saved as the checkpoint;
/// the history holds all splits.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let res = load_resources(cfg)?;
    let mut history = Vec::new();
    let mut summaries = Vec::new();
    for split in 0..res.splits.len() {
        let run = finetune_split(cfg, &res, split)?;
        if split == 0 {
            save_model(cfg, &run.model)?;
        }
        let last = run.history.last().expect("history has row 0");
        summaries.push(SplitSummary {
            split,
            final_train_acc: last.train_acc,
            final_val_acc: last.val_acc,
            final5_test_acc: run.final_test_accuracy(5),
            test_accuracy: run.test_accuracy.clone(),
        });
        history.extend(run.history);
    }
    write_history_csv(&cfg.history_path(), &history)?;
    let mean = summaries.iter().map(|s| s.final5_test_acc).sum::<f64>() / summaries.len() as f64;
    Ok(TrainOutcome {
        mode: cfg.mode.to_string(),
        learning_rate: cfg.lr,
        epochs: cfg.epochs,
        checkpoint: cfg.checkpoint_path(),
        splits: summaries,
        mean_final5_test_acc: mean,
    })
}

pub fn save_model(cfg: &RunConfig, model: &Classifier) -> Result<()> {
    let path = cfg.checkpoint_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    model.save_checkpoint(&path)?;
    write_file(&cfg.model_config_path(), serde_json::to_string_pretty(model.config())?)
}

/// A fine-tuned model with the target data it was trained on.
pub struct Trained {
    pub model: Classifier,
    pub vocab: Vocabulary,
    pub target: Dataset,
    pub samples: Vec<Sample>,
    /// Split 0, the split the checkpoint was trained on.
    pub split: Split,
    pub max_len: usize,
}

pub fn load_trained(cfg: &RunConfig) -> Result<Trained> {
    let target = load_manifest(&cfg.target_dir())?;
    if target.is_empty() {
        return Err(Error::Usage("target manifest has no cases".into()));
    }
    let config_path = cfg.model_config_path();
    let text = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
    let model_config: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", config_path.display())))?;
    let mut model = Classifier::from_config(&model_config)?;
    model.load_checkpoint(&cfg.checkpoint_path())?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    let max_len = model_config.text.as_ref().map_or(cfg.max_len, |t| t.max_len);
    let samples = prepare_samples(&target, &vocab, max_len)?;
    let split = stratified_split(&target.manifest.labels(), cfg.splits, cfg.seed)?.swap_remove(0);
    Ok(Trained {
        model,
        vocab,
        target,
        samples,
        split,
        max_len,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub split: usize,
    pub cases: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Test-set accuracy of the checkpoint on split 0.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let t = load_trained(cfg)?;
    let test = pick(&t.samples, &t.split.test);
    if test.is_empty() {
        return Err(Error::Usage("test split is empty".into()));
    }
    let e = evaluate(&t.model, &test)?;
    Ok(EvalReport {
        mode: t.model.mode().to_string(),
        split: 0,
        cases: test.len(),
        accuracy: e.accuracy,
        mean_loss: e.mean_loss,
    })
}

impl Trained {
    pub fn sample(&self, case_id: &str) -> Result<&Sample> {
        self.target
            .index_of(case_id)
            .map(|i| &self.samples[i])
            .ok_or_else(|| Error::Lookup(format!("unknown case {case_id}")))
    }

    pub fn attribution(&self, case_id: &str, steps: usize) -> Result<AttributionMap2D> {
        if !self.model.mode().uses_image() {
            return Err(Error::Usage(format!("{} model has no image input", self.model.mode())));
        }
        let s = self.sample(case_id)?;
        integrated_gradients(
            &ImageLogit {
                model: &self.model,
                tokens: &s.tokens,
            },
            &s.image,
            steps,
        )
    }

    /// Surface tokens of the scored span and their scores.
    pub fn text_scores(&self, case_id: &str) -> Result<(Vec<String>, TokenAttribution)> {
        if !self.model.mode().uses_text() {
            return Err(Error::Usage(format!("{} model has no text input", self.model.mode())));
        }
        let s = self.sample(case_id)?;
        let index = self.target.index_of(case_id).expect("sample found");
        let mut words = tokenize(&self.target.load_report(index)?);
        words.truncate(s.true_length);
        let input = ModelInput {
            image: self.model.mode().uses_image().then_some(&s.image),
            tokens: &s.tokens,
        };
        Ok((words, explain_text(&self.model, input, s.true_length)?))
    }

    pub fn probability(&self, index: usize) -> Result<f64> {
        let s = &self.samples[index];
        self.model.predict(ModelInput {
            image: self.model.mode().uses_image().then_some(&s.image),
            tokens: &s.tokens,
        })
    }
}

pub fn detect_params(cfg: &RunConfig) -> DetectParams {
    DetectParams {
        q: cfg.q,
        k_max: cfg.k_max,
        epsilon: cfg.epsilon,
        steps: cfg.steps,
        seed: cfg.seed,
    }
}

pub struct DetectOutput {
    pub result: DetectionResult,
    pub json_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Runs detection on one case and writes `<case>.detection.json` and
/// `<case>.detection.svg` beside the case image.
pub fn detect_case(cfg: &RunConfig, trained: &Trained, case_id: &str) -> Result<DetectOutput> {
    let map = trained.attribution(case_id, cfg.steps)?;
    let result = detect_from_map(case_id, &map, &detect_params(cfg))?;
    let index = trained.target.index_of(case_id).expect("attribution found the case");
    let image = trained.target.load_image(index)?;
    let svg = render_overlay_svg(case_id, &image, &result, Some(&map))?;
    let image_rel = Path::new(&trained.target.record(index).image);
    let base = trained.target.root.join(image_rel.with_file_name(case_id));
    let json_path = base.with_extension("detection.json");
    let svg_path = base.with_extension("detection.svg");
    write_file(&json_path, result.to_json()?)?;
    write_file(&svg_path, svg)?;
    Ok(DetectOutput {
        result,
        json_path,
        svg_path,
    })
}

pub struct ExplainOutput {
    pub tokens: Vec<String>,
    pub scores: TokenAttribution,
    pub json_path: PathBuf,
    pub html_path: PathBuf,
}

/// Token scores for one report, written as `<case>.scores.json` and
/// `<case>.scores.html` beside the report.
pub fn explain_case(trained: &Trained, case_id: &str) -> Result<ExplainOutput> {
    let (tokens, scores) = trained.text_scores(case_id)?;
    let index = trained.target.index_of(case_id).expect("scores found the case");
    let report_rel = Path::new(&trained.target.record(index).report);
    let base = trained.target.root.join(report_rel.with_file_name(case_id));
    let json_path = base.with_extension("scores.json");
    let html_path = base.with_extension("scores.html");
    write_file(&json_path, scores.to_json(case_id, &tokens)?)?;
    write_file(
        &html_path,
        xsight::render::render_text_heatmap_html(case_id, &tokens, &scores)?,
    )?;
    Ok(ExplainOutput {
        tokens,
        scores,
        json_path,
        html_path,
    })
}
