//! The three sequence architectures behind one prediction contract: a
//! `(steps, 3)` feature sequence in, one damage estimate per step out.

pub mod conv;
pub mod gru;
pub mod params;
pub mod transformer;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RngStream, Var};
use crate::dataset::{Normalization, PathDataset, N_FEATURES};
use crate::deformation::LoadingPath;
use crate::error::{Error, Result};

pub use conv::{Conv1dNet, Padding};
pub use gru::{gru_cell_step, DecoderInit, EncoderDecoderGru, GruCellParams, RecurrentState};
pub use params::{Bound, ParamId, ParamRecord, ParamStore};
pub use transformer::{
    scaled_dot_product_attention, sinusoidal_table, MaskMode, PositionalEncoding,
    TransformerBlockNet, TransformerShape,
};

pub const DEFAULT_TRANSFORMER_DROPOUT: f64 = 0.1;

fn default_dropout() -> f64 {
    DEFAULT_TRANSFORMER_DROPOUT
}

/// The three architecture families compared by the laboratory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureTag {
    Gru,
    Cnn,
    Transformer,
}

impl ArchitectureTag {
    pub const ALL: [ArchitectureTag; 3] = [Self::Gru, Self::Cnn, Self::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gru => "gru",
            Self::Cnn => "cnn",
            Self::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for ArchitectureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" | "rnn" | "encoder_decoder_gru" => Ok(Self::Gru),
            "cnn" | "conv" | "conv1d" => Ok(Self::Cnn),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArchitectureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture choice plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    EncoderDecoderGru {
        hidden: usize,
        #[serde(default)]
        decoder_init: DecoderInit,
    },
    Conv1d {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        padding: Padding,
    },
    Transformer {
        d_model: usize,
        heads: usize,
        d_ff: usize,
        #[serde(default = "default_dropout")]
        dropout: f64,
        #[serde(default)]
        mask: MaskMode,
        #[serde(default)]
        positional: PositionalEncoding,
    },
}

impl ModelConfig {
    pub fn tag(&self) -> ArchitectureTag {
        match self {
            Self::EncoderDecoderGru { .. } => ArchitectureTag::Gru,
            Self::Conv1d { .. } => ArchitectureTag::Cnn,
            Self::Transformer { .. } => ArchitectureTag::Transformer,
        }
    }

    /// Short label including the causality-relevant mode.
    pub fn label(&self) -> String {
        match self {
            Self::EncoderDecoderGru {
                decoder_init: DecoderInit::Encoder,
                ..
            } => "encoder_decoder_gru".into(),
            Self::EncoderDecoderGru {
                decoder_init: DecoderInit::Zero,
                ..
            } => "stepwise_gru".into(),
            Self::Conv1d { padding, .. } => match padding {
                Padding::Causal => "conv_causal".into(),
                Padding::Symmetric => "conv_symmetric".into(),
            },
            Self::Transformer { mask, positional, .. } => {
                let m = match mask {
                    MaskMode::Causal => "transformer_masked",
                    MaskMode::None => "transformer_unmasked",
                };
                match positional {
                    PositionalEncoding::None => m.into(),
                    PositionalEncoding::Sinusoidal => format!("{m}_sinusoidal"),
                }
            }
        }
    }

    /// Number of scalar parameters, from closed-form per-architecture formulas.
    pub fn param_count(&self) -> usize {
        match *self {
            Self::EncoderDecoderGru { hidden, .. } => EncoderDecoderGru::param_count(N_FEATURES, hidden),
            Self::Conv1d { filters, kernel, .. } => Conv1dNet::param_count(N_FEATURES, filters, kernel),
            Self::Transformer { d_model, d_ff, .. } => {
                TransformerBlockNet::param_count(N_FEATURES, d_model, d_ff)
            }
        }
    }

    /// Whether prefix predictions are guaranteed to equal the prefix of
    /// full-sequence predictions.
    pub fn is_structurally_causal(&self) -> bool {
        match self {
            Self::EncoderDecoderGru { decoder_init, .. } => *decoder_init == DecoderInit::Zero,
            Self::Conv1d { padding, .. } => *padding == Padding::Causal,
            Self::Transformer { mask, .. } => *mask == MaskMode::Causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    EncoderDecoderGru(EncoderDecoderGru),
    Conv1d(Conv1dNet),
    Transformer(TransformerBlockNet),
}

/// A trainable model with its fitted input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    normalization: Option<Normalization>,
    seed: u64,
}

impl SequenceModel {
    /// Fresh model with seeded initialisation and no normalisation yet.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        let arch = match config {
            ModelConfig::EncoderDecoderGru { hidden, decoder_init } => {
                if hidden == 0 {
                    return Err(Error::invalid("hidden size must be positive"));
                }
                Architecture::EncoderDecoderGru(EncoderDecoderGru::init(
                    &mut params,
                    N_FEATURES,
                    hidden,
                    decoder_init,
                    &mut rng,
                ))
            }
            ModelConfig::Conv1d {
                filters,
                kernel,
                padding,
            } => Architecture::Conv1d(Conv1dNet::init(
                &mut params,
                N_FEATURES,
                filters,
                kernel,
                padding,
                &mut rng,
            )?),
            ModelConfig::Transformer {
                d_model,
                heads,
                d_ff,
                dropout,
                mask,
                positional,
            } => Architecture::Transformer(TransformerBlockNet::init(
                &mut params,
                N_FEATURES,
                TransformerShape {
                    d_model,
                    heads,
                    d_ff,
                    dropout,
                    mask,
                    positional,
                },
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            arch,
            params,
            normalization: None,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tag(&self) -> ArchitectureTag {
        self.config.tag()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.normalization = Some(norm);
    }

    pub fn fit_normalization(&mut self, dataset: &PathDataset) -> Result<Normalization> {
        let norm = Normalization::fit(dataset)?;
        self.normalization = Some(norm);
        Ok(norm)
    }

    /// How many paths share one graph during training. Recurrent layers
    /// batch across paths; the others run a graph per path.
    pub fn graph_batch(&self) -> usize {
        match self.arch {
            Architecture::EncoderDecoderGru(_) => 32,
            _ => 1,
        }
    }

    /// Predictions `(batch, steps)` for equal-length, already scaled sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Array2<f64>],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var> {
        match &self.arch {
            Architecture::EncoderDecoderGru(m) => m.forward(g, p, batch),
            Architecture::Conv1d(m) => m.forward(g, p, batch),
            Architecture::Transformer(m) => m.forward(g, p, batch, training, rng),
        }
    }

    /// Inference on an already scaled `(steps, 3)` sequence.
    pub fn predict_scaled(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        if features.nrows() == 0 {
            return Err(Error::invalid("sequence length must be at least 1"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut rng = RngStream::new(0);
        let out = self.forward(&mut g, &p, &[features], false, &mut rng)?;
        Ok(g.value(out).row(0).to_vec())
    }

    /// Inference on an unscaled `(steps, 3)` sequence of (ε1, ε2, φ).
    pub fn predict_raw(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        let norm = self.require_normalization()?;
        if features.ncols() != N_FEATURES {
            return Err(Error::Shape {
                op: "predict_raw",
                left: features.dim(),
                right: (features.nrows(), N_FEATURES),
            });
        }
        self.predict_scaled(&norm.apply(features))
    }

    /// Per-step damage estimate for `path`, same length as the path.
    pub fn predict(&self, path: &LoadingPath) -> Result<Vec<f64>> {
        let norm = self.require_normalization()?;
        self.predict_scaled(&norm.transform(path))
    }

    fn require_normalization(&self) -> Result<&Normalization> {
        self.normalization
            .as_ref()
            .ok_or_else(|| Error::State("model has no fitted normalization".into()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: self.config.clone(),
            seed: self.seed,
            normalization: self.normalization,
            param_count: self.param_count(),
            params: self.params.to_records(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format `{}`", ckpt.format)));
        }
        let mut model = Self::new(ckpt.model.clone(), ckpt.seed)?;
        model.params.load_records(&ckpt.params)?;
        model.normalization = ckpt.normalization;
        Ok(model)
    }

    pub fn save(&self, file: impl AsRef<Path>) -> Result<()> {
        write_json(file, &self.to_checkpoint())
    }

    pub fn load(file: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&read_json(file)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "damage-seq/checkpoint/v1";

/// On-disk model: architecture, hyperparameters, scaling and every weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub normalization: Option<Normalization>,
    pub param_count: usize,
    pub params: Vec<ParamRecord>,
}

pub(crate) fn write_json<T: Serialize>(file: impl AsRef<Path>, value: &T) -> Result<()> {
    let file = file.as_ref();
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(file, text).map_err(|e| Error::io(file, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(file: impl AsRef<Path>) -> Result<T> {
    let file = file.as_ref();
    let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests;
