use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::he_uniform;
use super::text_net::param_id;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const BN_GAMMA: &str = "image.bn.gamma";
pub const BN_BETA: &str = "image.bn.beta";
pub const BN_RUNNING_MEAN: &str = "image.bn.running_mean";
pub const BN_RUNNING_VAR: &str = "image.bn.running_var";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stages: usize,
    /// Channels of the first stage; each later stage doubles it.
    pub base_channels: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stages: 3,
            base_channels: 4,
        }
    }
}

impl ImageConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn feature_len(&self) -> usize {
        self.stage_channels(self.stages - 1)
    }

    /// Spatial side of the last stage's output, before global pooling.
    pub fn final_spatial(&self) -> usize {
        self.input_size >> self.stages
    }

    /// Conv stages and global average pooling; the batch-norm step is
    /// applied across the batch by the caller.
    pub(crate) fn encode(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape();
        if shape != [self.input_size, self.input_size, 1] {
            return Err(Error::dim(format!(
                "image input of shape {shape:?}, model expects {0}×{0}×1",
                self.input_size
            )));
        }
        let mut x = image;
        for s in 0..self.stages {
            let k = tape.param(store, param_id(store, &format!("image.stage{s}.kernel"))?);
            let b = tape.param(store, param_id(store, &format!("image.stage{s}.bias"))?);
            let conv = tape.conv2d(x, k, Some(b), 1, 1)?;
            let act = tape.relu(conv);
            x = tape.max_pool2d(act, 2, 2)?;
        }
        tape.global_avg_pool(x)
    }
}

/// Stacked 3×3 conv + ReLU + 2×2 max-pool stages, global average pooling
/// and batch normalization of the pooled vector.
#[derive(Clone, Debug)]
pub struct ImageSubmodel {
    pub config: ImageConfig,
    pub params: ParamStore,
}

impl ImageSubmodel {
    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }
}

pub fn build_image_submodel(
    input_size: usize,
    stages: usize,
    base_channels: usize,
    seed: u64,
) -> Result<ImageSubmodel> {
    if stages == 0 {
        return Err(Error::Construction("image submodel needs at least one stage".into()));
    }
    if base_channels == 0 {
        return Err(Error::Construction("base channel count must be positive".into()));
    }
    let factor = 1usize
        .checked_shl(stages as u32)
        .ok_or_else(|| Error::Construction(format!("{stages} stages is too many")))?;
    if input_size == 0 || input_size % factor != 0 {
        return Err(Error::Construction(format!(
            "input size {input_size} is not divisible by 2^{stages}"
        )));
    }
    let config = ImageConfig {
        input_size,
        stages,
        base_channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut cin = 1;
    for s in 0..stages {
        let cout = config.stage_channels(s);
        params.add(
            &format!("image.stage{s}.kernel"),
            he_uniform(&mut rng, vec![3, 3, cin, cout], 9 * cin),
        )?;
        params.add(&format!("image.stage{s}.bias"), Tensor::zeros(&[cout]))?;
        cin = cout;
    }
    let f = config.feature_len();
    params.add(BN_GAMMA, Tensor::filled(&[f], 1.0))?;
    params.add(BN_BETA, Tensor::zeros(&[f]))?;
    params.add_buffer(BN_RUNNING_MEAN, Tensor::zeros(&[f]))?;
    params.add_buffer(BN_RUNNING_VAR, Tensor::filled(&[f], 1.0))?;
    Ok(ImageSubmodel { config, params })
}
