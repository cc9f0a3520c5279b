//! The full network: backbone, decoder, heads and classifiers.

use crate::backbone::{self, BackboneConfig, FeatureMap};
use crate::causal::{self, HeadOutputs, HeadsConfig, LossForm};
use crate::decoder::{self, DecoderConfig, QueryState};
use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamStore, Tape, Tensor};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Width `d'` of the head features `h_x`, `h_c`.
    pub feature_dim: usize,
    pub loss_form: LossForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            feature_dim: 64,
            loss_form: LossForm::MultiLabel,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> HeadsConfig {
        HeadsConfig {
            num_classes: self.decoder.num_classes,
            hidden_dim: self.decoder.hidden_dim,
            feature_dim: self.feature_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.heads().validate()?;
        if self.backbone.hidden_dim != self.decoder.hidden_dim {
            return Err(Error::Config(format!(
                "backbone width {} differs from decoder width {}",
                self.backbone.hidden_dim, self.decoder.hidden_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub fmap: FeatureMap,
    pub queries: QueryState,
    pub heads: HeadOutputs,
}

/// Per-sample outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub z_x: Vec<f64>,
    pub z_c: Vec<f64>,
    pub h_x: Tensor,
    pub h_c: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, &mut params, &mut rng)?;
        decoder::init_params(&config.decoder, &mut params, &mut rng)?;
        causal::init_params(&config.heads(), &mut params, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Grayscale `[1, H, W]` images are copied into every configured input
    /// channel; other shapes pass through unchanged.
    fn replicate_channels(&self, image: &Tensor) -> Result<Tensor> {
        let c = self.config.backbone.input_channels;
        match image.shape() {
            &[1, h, w] if c > 1 => Tensor::new(vec![c, h, w], image.data().repeat(c)),
            _ => Ok(image.clone()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<Forward> {
        let x = tape.constant(self.replicate_channels(image)?);
        let fmap = backbone::extract_features(tape, x, &self.config.backbone, p)?;
        let queries = decoder::decode(tape, &fmap, p, &self.config.decoder)?;
        let heads = causal::heads(tape, &queries, p)?;
        Ok(Forward { fmap, queries, heads })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, image)?;
        Ok(Prediction {
            z_x: tape.value(out.heads.z_x).data().to_vec(),
            z_c: tape.value(out.heads.z_c).data().to_vec(),
            h_x: tape.value(out.heads.h_x).clone(),
            h_c: tape.value(out.heads.h_c).clone(),
        })
    }

    /// Intervened logits `Φ_i(h_x + ĥ_c)` for plain tensors.
    pub fn intervened_logits(&self, h_x: &Tensor, h_c: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let hx = tape.constant(h_x.clone());
        let hc = tape.constant(h_c.clone());
        let z = causal::intervene(&mut tape, hx, hc, &p)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Final-layer decoder attention as `[C, H, W]`.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(self.replicate_channels(image)?);
        let fmap = backbone::extract_features(&mut tape, x, &self.config.backbone, &p)?;
        decoder::export_attention(&mut tape, &fmap, &p, &self.config.decoder)
    }
}
