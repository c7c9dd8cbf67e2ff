//! Text and image submodels, the concatenation-fusion classifier and the
//! pretrain / fine-tune protocol.

mod image_net;
mod text_net;
mod train;

pub use image_net::{
    build_image_submodel, ImageConfig, ImageSubmodel, BN_BETA, BN_GAMMA, BN_RUNNING_MEAN,
    BN_RUNNING_VAR,
};
pub use text_net::{build_text_submodel, TextConfig, TextSubmodel, EMBEDDING_PARAM, TEXT_WIDTHS};
pub use train::{
    evaluate, finetune_target, pretrain_source, read_history_csv, stratified_split,
    train_epoch, write_history_csv, EpochRecord, Evaluation, Phase, Split, TrainingConfig,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::tensor::{
    read_checkpoint, write_checkpoint, BnMode, ParamStore, Tape, Tensor, Var, BN_MOMENTUM,
};
use crate::text::Vocabulary;
use text_net::param_id;

/// Uniform in `±sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches count")
}

/// Which inputs the classifier sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Multimodal,
    TextOnly,
    ImageOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Multimodal, Mode::TextOnly, Mode::ImageOnly];

    pub fn uses_text(self) -> bool {
        self != Mode::ImageOnly
    }

    pub fn uses_image(self) -> bool {
        self != Mode::TextOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Multimodal => "multimodal",
            Mode::TextOnly => "text-only",
            Mode::ImageOnly => "image-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown mode {s:?}")))
    }
}

pub const DEFAULT_HIDDEN: usize = 64;

/// Everything needed to rebuild a classifier's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub text: Option<TextConfig>,
    pub image: Option<ImageConfig>,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn text_feature_len(&self) -> usize {
        self.text.as_ref().map_or(0, TextConfig::feature_len)
    }

    pub fn image_feature_len(&self) -> usize {
        self.image.as_ref().map_or(0, ImageConfig::feature_len)
    }

    pub fn fused_len(&self) -> usize {
        self.text_feature_len() + self.image_feature_len()
    }
}

/// One training or evaluation example in tensor form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    /// `H×W×1` pixel intensities.
    pub image: Tensor,
    /// Vocabulary ids, exactly `max_len` long.
    pub tokens: Vec<usize>,
    pub true_length: usize,
    pub label: u8,
}

/// Loads and encodes every case of `dataset`.
pub fn prepare_samples(dataset: &Dataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sample>> {
    dataset
        .cases()
        .map(|case| {
            let case = case?;
            let seq = vocab.encode_document(&case.report, max_len)?;
            Ok(Sample {
                case_id: case.case_id,
                image: case.image.to_tensor(),
                tokens: seq.ids,
                true_length: seq.true_length,
                label: case.label,
            })
        })
        .collect()
}

/// Borrowed model input; `image` may be omitted for text-only models.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub image: Option<&'a Tensor>,
    pub tokens: &'a [usize],
}

impl<'a> From<&'a Sample> for ModelInput<'a> {
    fn from(s: &'a Sample) -> Self {
        Self {
            image: Some(&s.image),
            tokens: &s.tokens,
        }
    }
}

/// Nodes recorded for one example of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logit: Var,
    pub prob: Var,
    pub fused: Var,
    /// `L×D` looked-up embeddings (text modes).
    pub embedded: Option<Var>,
    /// Pixel input node (image modes).
    pub image_input: Option<Var>,
}

/// Text submodel ⧺ image submodel → dense+ReLU → dense → sigmoid.
///
/// Unimodal variants attach the same decoder shape to a single submodel.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ModelConfig,
    pub store: ParamStore,
}

const DECODER_HIDDEN_W: &str = "decoder.hidden.weight";
const DECODER_HIDDEN_B: &str = "decoder.hidden.bias";
const DECODER_OUT_W: &str = "decoder.out.weight";
const DECODER_OUT_B: &str = "decoder.out.bias";

/// Fuses both submodels under a freshly initialized decoder.
pub fn build_multimodal(
    text: TextSubmodel,
    image: ImageSubmodel,
    hidden: usize,
    seed: u64,
) -> Result<Classifier> {
    Classifier::new(Mode::Multimodal, Some(text), Some(image), hidden, seed)
}

impl Classifier {
    pub fn new(
        mode: Mode,
        text: Option<TextSubmodel>,
        image: Option<ImageSubmodel>,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if mode.uses_text() != text.is_some() || mode.uses_image() != image.is_some() {
            return Err(Error::Construction(format!(
                "{mode} classifier built with text={} image={}",
                text.is_some(),
                image.is_some()
            )));
        }
        if hidden == 0 {
            return Err(Error::Construction("decoder hidden width must be positive".into()));
        }
        let config = ModelConfig {
            mode,
            text: text.as_ref().map(|t| t.config.clone()),
            image: image.as_ref().map(|i| i.config.clone()),
            hidden,
        };
        let mut store = ParamStore::new();
        if let Some(t) = text {
            store.merge(t.params)?;
        }
        if let Some(i) = image {
            store.merge(i.params)?;
        }
        let fused = config.fused_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.add(DECODER_HIDDEN_W, he_uniform(&mut rng, vec![hidden, fused], fused))?;
        store.add(DECODER_HIDDEN_B, Tensor::zeros(&[hidden]))?;
        store.add(DECODER_OUT_W, he_uniform(&mut rng, vec![1, hidden], hidden))?;
        store.add(DECODER_OUT_B, Tensor::zeros(&[1]))?;
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Records a forward pass for a batch. Train-mode batch norm uses the
    /// batch statistics; the returned node (if any) exposes them.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        inputs: &[ModelInput<'_>],
        bn_mode: BnMode,
        image_grad: bool,
    ) -> Result<(Vec<Forward>, Option<Var>)> {
        if inputs.is_empty() {
            return Err(Error::usage("forward pass needs at least one input"));
        }
        let store = &self.store;
        let mut text_feats = Vec::with_capacity(inputs.len());
        let mut embedded = Vec::with_capacity(inputs.len());
        if let Some(tc) = &self.config.text {
            for input in inputs {
                let (e, f) = tc.encode(tape, store, input.tokens)?;
                embedded.push(Some(e));
                text_feats.push(Some(f));
            }
        } else {
            embedded.resize(inputs.len(), None);
            text_feats.resize(inputs.len(), None);
        }

        let mut image_inputs = vec![None; inputs.len()];
        let mut image_rows = vec![None; inputs.len()];
        let mut bn_node = None;
        if let Some(ic) = &self.config.image {
            let mut pooled = Vec::with_capacity(inputs.len());
            for (i, input) in inputs.iter().enumerate() {
                let img = input
                    .image
                    .ok_or_else(|| Error::usage(format!("{} model needs an image", self.mode())))?;
                let x = tape.input(img.clone(), image_grad);
                image_inputs[i] = Some(x);
                pooled.push(ic.encode(tape, store, x)?);
            }
            let gamma = tape.param(store, param_id(store, BN_GAMMA)?);
            let beta = tape.param(store, param_id(store, BN_BETA)?);
            let rm = store.value(param_id(store, BN_RUNNING_MEAN)?).data();
            let rv = store.value(param_id(store, BN_RUNNING_VAR)?).data();
            let bn = tape.batch_norm(&pooled, gamma, beta, bn_mode, rm, rv)?;
            for (i, slot) in image_rows.iter_mut().enumerate() {
                *slot = Some(tape.row(bn, i)?);
            }
            bn_node = Some(bn);
        }

        let hw = tape.param(store, param_id(store, DECODER_HIDDEN_W)?);
        let hb = tape.param(store, param_id(store, DECODER_HIDDEN_B)?);
        let ow = tape.param(store, param_id(store, DECODER_OUT_W)?);
        let ob = tape.param(store, param_id(store, DECODER_OUT_B)?);
        let mut outputs = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let fused = match (text_feats[i], image_rows[i]) {
                (Some(t), Some(v)) => tape.concat(t, v)?,
                (Some(t), None) => t,
                (None, Some(v)) => v,
                (None, None) => unreachable!("mode uses at least one input"),
            };
            let h = tape.dense(fused, hw, hb)?;
            let h = tape.relu(h);
            let logit = tape.dense(h, ow, ob)?;
            let prob = tape.sigmoid(logit);
            outputs.push(Forward {
                logit,
                prob,
                fused,
                embedded: embedded[i],
                image_input: image_inputs[i],
            });
        }
        Ok((outputs, bn_node))
    }

    /// Abnormality probability in inference mode.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_batch(&mut tape, &[input], BnMode::Inference, false)?;
        Ok(tape.value(out[0].prob).data()[0])
    }

    /// Pre-sigmoid output in inference mode.
    pub fn logit(&self, input: ModelInput<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_batch(&mut tape, &[input], BnMode::Inference, false)?;
        Ok(tape.value(out[0].logit).data()[0])
    }

    /// The fused feature vector fed to the decoder (inference mode).
    pub fn fused_features(&self, input: ModelInput<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_batch(&mut tape, &[input], BnMode::Inference, false)?;
        Ok(tape.value(out[0].fused).data().to_vec())
    }

    /// Logit and its gradient with respect to the input pixels.
    pub fn logit_image_gradient(&self, image: &Tensor, tokens: &[usize]) -> Result<(f64, Tensor)> {
        if !self.mode().uses_image() {
            return Err(Error::usage("text-only model has no image input"));
        }
        let mut tape = Tape::inputs_only();
        let input = ModelInput {
            image: Some(image),
            tokens,
        };
        let (out, _) = self.forward_batch(&mut tape, &[input], BnMode::Inference, true)?;
        let grads = tape.backward(out[0].logit, &mut ParamStore::new())?;
        let x = out[0].image_input.expect("image mode");
        let g = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(image.shape()));
        Ok((tape.value(out[0].logit).data()[0], g))
    }

    /// Logit and its gradient with respect to each looked-up embedding row
    /// (`max_len × D`).
    pub fn logit_text_gradient(&self, input: ModelInput<'_>) -> Result<(f64, Tensor)> {
        let tc = self
            .config
            .text
            .as_ref()
            .ok_or_else(|| Error::usage("image-only model has no text input"))?;
        let mut tape = Tape::inputs_only();
        let (out, _) = self.forward_batch(&mut tape, &[input], BnMode::Inference, false)?;
        let grads = tape.backward(out[0].logit, &mut ParamStore::new())?;
        let e = out[0].embedded.expect("text mode");
        let g = grads
            .get(e)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[tc.max_len, tc.embed_dim]));
        Ok((tape.value(out[0].logit).data()[0], g))
    }

    /// Mean BCE over `batch` in train mode, accumulating gradients into the
    /// store and folding the batch statistics into the running averages
    /// (unless the batch-norm parameters are frozen).
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let inputs: Vec<ModelInput<'_>> = batch.iter().map(|s| ModelInput::from(*s)).collect();
        let (outs, bn) = self.forward_batch(&mut tape, &inputs, BnMode::Train, false)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut correct = 0;
        for (o, s) in outs.iter().zip(batch) {
            let p = tape.value(o.prob).data()[0];
            correct += usize::from((p >= 0.5) == (s.label == 1));
            losses.push(tape.bce_loss(o.prob, f64::from(s.label))?);
        }
        let loss = tape.mean(&losses)?;
        tape.backward(loss, &mut self.store)?;
        if let Some(bn) = bn {
            if self.batch_norm_trainable() {
                let (mean, var) = tape.batch_stats(bn).expect("train-mode node");
                let (mean, var) = (mean.to_vec(), var.to_vec());
                for (name, stat) in [(BN_RUNNING_MEAN, mean), (BN_RUNNING_VAR, var)] {
                    let id = param_id(&self.store, name)?;
                    for (r, b) in self.store.value_mut(id).data_mut().iter_mut().zip(stat) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                }
            }
        }
        Ok((tape.value(loss).data()[0], correct))
    }

    /// Whether the image batch norm exists and is not frozen.
    pub fn batch_norm_trainable(&self) -> bool {
        self.store
            .id(BN_GAMMA)
            .is_some_and(|id| !self.store.get(id).frozen)
    }

    /// Replaces the batch-norm running statistics with the mean and
    /// (biased) variance of the pooled image features over `samples`.
    pub fn recalibrate_batch_norm(&mut self, samples: &[&Sample]) -> Result<()> {
        let Some(ic) = self.config.image.clone() else {
            return Ok(());
        };
        if samples.is_empty() {
            return Err(Error::usage("cannot estimate statistics from no samples"));
        }
        let f = ic.feature_len();
        let (mut sum, mut sq) = (vec![0.0; f], vec![0.0; f]);
        for s in samples {
            let mut tape = Tape::inputs_only();
            let x = tape.input(s.image.clone(), false);
            let pooled = ic.encode(&mut tape, &self.store, x)?;
            for ((a, b), v) in sum.iter_mut().zip(&mut sq).zip(tape.value(pooled).data()) {
                *a += v;
                *b += v * v;
            }
        }
        let n = samples.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|a| a / n).collect();
        let var: Vec<f64> = sq.iter().zip(&mean).map(|(b, m)| (b / n - m * m).max(0.0)).collect();
        for (name, stat) in [(BN_RUNNING_MEAN, mean), (BN_RUNNING_VAR, var)] {
            let id = param_id(&self.store, name)?;
            self.store.value_mut(id).data_mut().copy_from_slice(&stat);
        }
        Ok(())
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        self.store.set_frozen(prefix, frozen);
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.store.snapshot(""))
    }

    /// Restores every parameter from a full-model checkpoint.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let params = read_checkpoint(path)?;
        if params.len() != self.store.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} parameters, model has {}",
                params.len(),
                self.store.len()
            )));
        }
        self.store.load_from(&params)?;
        Ok(())
    }

    /// Restores only the checkpoint entries under `prefix` (an encoder
    /// transfer). Fails if none match.
    pub fn load_encoder(&mut self, path: &Path, prefix: &str) -> Result<usize> {
        let params: Vec<_> = read_checkpoint(path)?
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect();
        if params.is_empty() {
            return Err(Error::Load(format!(
                "checkpoint {} has no {prefix}* parameters",
                path.display()
            )));
        }
        self.store.load_from(&params)
    }

    /// Copies the image encoder (conv stages and batch norm) out of the model.
    pub fn image_submodel(&self) -> Option<ImageSubmodel> {
        let config = self.config.image.clone()?;
        let mut params = ParamStore::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.name.starts_with("image.")) {
            let r = if p.buffer {
                params.add_buffer(&p.name, p.value.clone())
            } else {
                params.add(&p.name, p.value.clone())
            };
            r.expect("names unique in source store");
        }
        Some(ImageSubmodel { config, params })
    }

    /// Rebuilds the parameter layout described by `config` with zeroed
    /// values, ready for [`Classifier::load_checkpoint`].
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        let text = match &config.text {
            Some(tc) => {
                let embed = crate::text::EmbeddingMatrix {
                    vectors: Tensor::zeros(&[tc.vocab_size, tc.embed_dim]),
                    trainable: true,
                };
                Some(build_text_submodel(&embed, tc.filters, tc.max_len, 0)?)
            }
            None => None,
        };
        let image = match &config.image {
            Some(ic) => Some(build_image_submodel(ic.input_size, ic.stages, ic.base_channels, 0)?),
            None => None,
        };
        Classifier::new(config.mode, text, image, config.hidden, 0)
    }

    /// Zeroes the decoder's hidden-layer weights that read text features.
    pub fn zero_text_decoder_weights(&mut self) {
        let t = self.config.text_feature_len();
        let fused = self.config.fused_len();
        let id = self.store.id(DECODER_HIDDEN_W).expect("decoder present");
        for (i, w) in self.store.value_mut(id).data_mut().iter_mut().enumerate() {
            if i % fused < t {
                *w = 0.0;
            }
        }
    }

    /// Zeroes every decoder weight and bias.
    pub fn zero_decoder(&mut self) {
        for name in [DECODER_HIDDEN_W, DECODER_HIDDEN_B, DECODER_OUT_W, DECODER_OUT_B] {
            let id = self.store.id(name).expect("decoder present");
            self.store.value_mut(id).fill(0.0);
        }
    }
}
