use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::he_uniform;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{EmbeddingMatrix, DEFAULT_MAX_LEN};

/// Kernel widths of the three convolution banks.
pub const TEXT_WIDTHS: [usize; 3] = [3, 4, 5];
pub const EMBEDDING_PARAM: &str = "text.embedding";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Filters per kernel width.
    pub filters: usize,
    pub max_len: usize,
}

impl TextConfig {
    pub fn feature_len(&self) -> usize {
        TEXT_WIDTHS.len() * self.filters
    }

    /// Embeds `ids` and runs the convolution banks. Returns the `L×D`
    /// embedded sequence node and the `3F` feature vector.
    pub(crate) fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
    ) -> Result<(Var, Var)> {
        if ids.len() != self.max_len {
            return Err(Error::dim(format!(
                "text input has {} ids, model expects {}",
                ids.len(),
                self.max_len
            )));
        }
        let table = param_id(store, EMBEDDING_PARAM)?;
        let embedded = tape.embedding(store, table, ids)?;
        let mut features: Option<Var> = None;
        for w in TEXT_WIDTHS {
            let k = tape.param(store, param_id(store, &format!("text.conv{w}.kernel"))?);
            let b = tape.param(store, param_id(store, &format!("text.conv{w}.bias"))?);
            let conv = tape.conv1d(embedded, k, Some(b))?;
            let act = tape.relu(conv);
            let pooled = tape.max_over_time(act)?;
            features = Some(match features {
                None => pooled,
                Some(f) => tape.concat(f, pooled)?,
            });
        }
        Ok((embedded, features.expect("at least one width")))
    }
}

pub(crate) fn param_id(store: &ParamStore, name: &str) -> Result<crate::tensor::ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Construction(format!("model lacks parameter {name}")))
}

/// Word embedding followed by width-3/4/5 convolutions, ReLU and
/// max-over-time pooling.
#[derive(Clone, Debug)]
pub struct TextSubmodel {
    pub config: TextConfig,
    pub params: ParamStore,
}

impl TextSubmodel {
    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }
}

/// Adopts `embed` as the (trainable) embedding layer and draws conv filters
/// from `seed`.
pub fn build_text_submodel(
    embed: &EmbeddingMatrix,
    filters: usize,
    max_len: usize,
    seed: u64,
) -> Result<TextSubmodel> {
    let (vocab_size, dim) = (embed.vocab_size(), embed.dim());
    if filters == 0 {
        return Err(Error::Construction("text submodel needs at least one filter".into()));
    }
    if dim == 0 || vocab_size < 2 {
        return Err(Error::Construction(format!(
            "embedding of shape {vocab_size}×{dim} cannot feed the text convolutions"
        )));
    }
    let widest = *TEXT_WIDTHS.iter().max().expect("non-empty");
    if max_len < widest {
        return Err(Error::Construction(format!(
            "max_len {max_len} shorter than the widest kernel {widest}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    params.add(EMBEDDING_PARAM, embed.vectors.clone())?;
    for w in TEXT_WIDTHS {
        params.add(
            &format!("text.conv{w}.kernel"),
            he_uniform(&mut rng, vec![w, dim, filters], w * dim),
        )?;
        params.add(&format!("text.conv{w}.bias"), Tensor::zeros(&[filters]))?;
    }
    Ok(TextSubmodel {
        config: TextConfig {
            vocab_size,
            embed_dim: dim,
            filters,
            max_len,
        },
        params,
    })
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            embed_dim: 32,
            filters: 8,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}
