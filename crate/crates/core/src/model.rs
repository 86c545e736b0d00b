//! The full change detector: Siamese encoder, feature differencing, optional
//! ChangeFFT and the UperNet decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{DecoderConfig, UperNetDecoder};
use crate::encoder::{EncoderConfig, FeaturePyramid, SiameseEncoder};
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::spectral::ChangeFft;
use crate::tensor::{Result, Scalar, Tensor};

/// Probability at or above which a pixel counts as changed.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default = "default_true")]
    pub use_changefft: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), use_changefft: true }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks and overfit runs:
    /// `C = 8`, `D = 16`, pooling scales `{1, 2}`.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig { base_channels: 8, ..EncoderConfig::default() },
            decoder: DecoderConfig { fpn_channels: 16, ppm_scales: vec![1, 2], out_channels: 1 },
            use_changefft: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ChangeDetector<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: SiameseEncoder,
    changefft: Option<ChangeFft>,
    decoder: UperNetDecoder,
}

impl<T: Scalar> ChangeDetector<T> {
    /// Builds the model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SiameseEncoder::new(&mut store, "encoder", &config.encoder, &mut rng)?;
        let channels = config.encoder.level_channels();
        let changefft = config.use_changefft.then(|| ChangeFft::new(&mut store, "changefft", &channels, &mut rng));
        let decoder = UperNetDecoder::new(&mut store, "decoder", channels, &config.decoder, &mut rng)?;
        Ok(Self { config: config.clone(), store, encoder, changefft, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn changefft(&self) -> Option<&ChangeFft> {
        self.changefft.as_ref()
    }

    /// Change probabilities `[N, 1, H, W]` for images `a`, `b` of shape `[N, 3, H, W]`.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape<T>,
        mode: Mode,
        a: &Var<'t, T>,
        b: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let diff = self.encoder.difference(&mut ctx, a, b)?;
        let change = match &self.changefft {
            Some(fft) => FeaturePyramid { levels: fft.forward(&ctx, &diff.levels)? },
            None => diff,
        };
        self.decoder.forward(&ctx, &change)
    }

    /// Eval-mode probabilities for a batch of image pairs.
    pub fn predict(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let probs = self.forward(&tape, Mode::Eval, &a, &b)?;
        Ok((*probs.try_value()?).clone())
    }
}

/// Thresholds probabilities into a binary change map.
pub fn binarize<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let t = T::of(DECISION_THRESHOLD);
    probs.map(|p| if p >= t { T::one() } else { T::zero() })
}
