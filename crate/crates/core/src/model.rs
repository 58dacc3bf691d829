//! Model assembly: patch embedder + multimodal encoder + objective heads
//! over a shared anchor registry.

use crate::anchors::{Image, PatchEmbedder, Registry};
use crate::encoder::{assemble_sequence, AttentionRecord, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{
    class_scores, concept_logits, grounding_loss, ConceptNeuronHead, GroundingHead, LossConfig,
};
use crate::syndata::Experience;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mucil,
    Cbm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub init_std: f32,
    /// Seed for name → anchor vectors.
    pub anchor_seed: u64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            patch_size: 4,
            image_size: 32,
            channels: 3,
            init_std: 0.02,
            anchor_seed: 0,
            init_seed: 0,
        }
    }
}

/// Graph handles from one sample's forward pass.
pub struct SampleForward {
    pub concept_outputs: Tensor,
    pub patch_outputs: Tensor,
    /// Concept-neuron logits `[n_concepts, 1]`.
    pub logits: Tensor,
    /// Class scores `[1, n_classes]`.
    pub scores: Tensor,
    pub attention: Vec<AttentionRecord>,
}

/// Per-sample loss graph plus the score node (kept for distillation).
pub struct LossBundle {
    pub ce: Tensor,
    pub wbce: Tensor,
    pub grounding: Tensor,
    pub scores: Tensor,
}

/// Behavior the experience-stream trainer needs from a model.
pub trait StreamModel {
    fn kind(&self) -> ModelKind;
    fn registry(&self) -> &Registry;
    fn loss_config(&self) -> &LossConfig;

    /// Register the experience's new classes/concepts (and grow, for
    /// models whose heads scale with the registry).
    fn begin_experience(&mut self, exp: &Experience) -> Result<()>;

    /// Per-sample loss graph under the current registry.
    fn forward_losses(
        &self,
        image: &Image,
        label: usize,
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<LossBundle>;

    /// Class scores without gradient bookkeeping.
    fn score_values(&self, image: &Image) -> Result<Vec<f32>>;

    /// Concept-neuron logits in registry order, for probes and ACR.
    fn concept_logit_values(&self, image: &Image) -> Result<Vec<f32>>;

    fn params(&self) -> Vec<(String, Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// The multimodal concept learner: trainable encoder and heads, frozen
/// anchors, parameter-free classifier.
pub struct MucilModel {
    pub config: ModelConfig,
    pub registry: Registry,
    pub patch: PatchEmbedder,
    pub encoder: Encoder,
    pub grounding: GroundingHead,
    pub neurons: ConceptNeuronHead,
}

impl MucilModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.encoder.validate()?;
        config.loss.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        let d = config.encoder.dim;
        let patch = PatchEmbedder::new(
            config.patch_size,
            config.image_size,
            config.image_size,
            config.channels,
            d,
            config.init_std,
            &mut rng,
        )?;
        let encoder = Encoder::new(config.encoder.clone(), config.init_std, &mut rng)?;
        let grounding = GroundingHead::new(d, config.init_std, &mut rng)?;
        let neurons = ConceptNeuronHead::new(d, config.init_std, &mut rng)?;
        let registry = Registry::new(d, config.anchor_seed);
        Ok(MucilModel {
            config,
            registry,
            patch,
            encoder,
            grounding,
            neurons,
        })
    }

    /// Full forward pass for one image.
    pub fn forward(
        &self,
        image: &Image,
        record_attention: bool,
        training: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<SampleForward> {
        if self.registry.concept_count() == 0 {
            return Err(Error::Validation("no concepts registered".into()));
        }
        let patches = self.patch.embed_patches(image)?;
        let anchors = self.registry.concept_matrix();
        let (tokens, segment) = assemble_sequence(&patches, &anchors)?;
        let out = self
            .encoder
            .encode(&tokens, &segment, record_attention, training, rng)?;
        let logits = concept_logits(&out.concept_outputs, &self.neurons)?;
        let scores = class_scores(&out.concept_outputs, &self.registry.class_matrix_t())?;
        Ok(SampleForward {
            concept_outputs: out.concept_outputs,
            patch_outputs: out.patch_outputs,
            logits,
            scores,
            attention: out.attention,
        })
    }
}

impl StreamModel for MucilModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Mucil
    }

    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn loss_config(&self) -> &LossConfig {
        &self.config.loss
    }

    fn begin_experience(&mut self, exp: &Experience) -> Result<()> {
        self.registry.extend_concepts(&exp.new_concept_names, exp.index)?;
        self.registry.extend_classes(&exp.new_class_names)?;
        Ok(())
    }

    fn forward_losses(
        &self,
        image: &Image,
        label: usize,
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<LossBundle> {
        let fwd = self.forward(image, false, training, rng)?;
        let ce = fwd.scores.cross_entropy(&[label])?;
        let wbce = crate::heads::wbce_loss(&fwd.logits, mask)?;
        let grounding = grounding_loss(
            &fwd.concept_outputs,
            &self.registry.concept_matrix(),
            &self.grounding,
        )?;
        Ok(LossBundle {
            ce,
            wbce,
            grounding,
            scores: fwd.scores,
        })
    }

    fn score_values(&self, image: &Image) -> Result<Vec<f32>> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        Ok(self.forward(image, false, false, &mut rng)?.scores.to_vec())
    }

    fn concept_logit_values(&self, image: &Image) -> Result<Vec<f32>> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        Ok(self.forward(image, false, false, &mut rng)?.logits.to_vec())
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.patch.params();
        out.extend(self.encoder.params());
        out.extend(self.grounding.params());
        out.extend(self.neurons.params());
        out
    }
}

/// Either model kind behind one [`StreamModel`] facade.
pub enum AnyModel {
    Mucil(MucilModel),
    Cbm(crate::cbm::CbmModel),
}

impl AnyModel {
    pub fn as_mucil(&self) -> Option<&MucilModel> {
        match self {
            AnyModel::Mucil(m) => Some(m),
            AnyModel::Cbm(_) => None,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Mucil($m) => $body,
            AnyModel::Cbm($m) => $body,
        }
    };
}

impl StreamModel for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }

    fn registry(&self) -> &Registry {
        delegate!(self, m => m.registry())
    }

    fn loss_config(&self) -> &LossConfig {
        delegate!(self, m => m.loss_config())
    }

    fn begin_experience(&mut self, exp: &Experience) -> Result<()> {
        delegate!(self, m => m.begin_experience(exp))
    }

    fn forward_losses(
        &self,
        image: &Image,
        label: usize,
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<LossBundle> {
        delegate!(self, m => m.forward_losses(image, label, mask, training, rng))
    }

    fn score_values(&self, image: &Image) -> Result<Vec<f32>> {
        delegate!(self, m => m.score_values(image))
    }

    fn concept_logit_values(&self, image: &Image) -> Result<Vec<f32>> {
        delegate!(self, m => m.concept_logit_values(image))
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        delegate!(self, m => m.params())
    }
}
