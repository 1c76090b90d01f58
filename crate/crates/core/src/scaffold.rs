//! Small convolutional U-shaped network that hosts a DCA block on its skip
//! connections.
//!
//! Encoder stage `i` is a 3×3×3 convolution (stride 1 for the first stage,
//! 2 afterwards), an optional instance normalization and SiLU. The optional
//! DCA block refines all encoder outputs jointly. The decoder walks back up
//! with nearest upsampling, a convolution, normalization, SiLU and a residual
//! add of the matching skip. A final
//! convolution to one channel goes through `dose_scale · softplus(·)` so
//! predicted doses are non-negative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dca::{DcaBlock, DcaConfig, DcaError};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::volume::INPUT_CHANNELS;

/// Added to the model seed to draw DCA parameters from their own stream, so
/// switching DCA on or off leaves every other parameter unchanged.
pub const DCA_SEED_OFFSET: u64 = 0x00dc_a5ee_d000_0001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaffoldError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not fit the model (expected [{channels}, H, W, D] with H, W, D divisible by {divisor})")]
    Input {
        found: Vec<usize>,
        channels: usize,
        divisor: usize,
    },
    #[error(transparent)]
    Dca(#[from] DcaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ScaffoldError>;

/// The `model` block of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaffoldConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub use_dca: bool,
    pub dca_heads: usize,
    /// Instance normalization (per-channel affine) after every hidden convolution.
    pub norm: bool,
    /// Gy per unit of the softplus output.
    pub dose_scale: f64,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        Self {
            in_channels: INPUT_CHANNELS,
            channels: vec![8, 16, 32],
            use_dca: true,
            dca_heads: 2,
            norm: true,
            dose_scale: 20.0,
        }
    }
}

impl ScaffoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ScaffoldError::Config("channel counts must be positive".into()));
        }
        if !(self.dose_scale.is_finite() && self.dose_scale > 0.0) {
            return Err(ScaffoldError::Config("dose_scale must be positive".into()));
        }
        if self.use_dca {
            if self.dca_heads == 0 {
                return Err(ScaffoldError::Config("dca_heads must be positive".into()));
            }
            if let Some(c) = self.channels.iter().find(|&&c| c % self.dca_heads != 0) {
                return Err(ScaffoldError::Config(format!(
                    "stage channels {c} not divisible by {} DCA heads",
                    self.dca_heads
                )));
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.n_stages() - 1)
    }

    pub fn dca_config(&self, spatial: [usize; 3]) -> Result<DcaConfig> {
        Ok(DcaConfig::new(self.channels.clone(), spatial, self.dca_heads)?)
    }
}

#[derive(Debug, Clone)]
pub struct Scaffold {
    pub config: ScaffoldConfig,
}

fn norm_init(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.norm.gamma"), Tensor::ones(&[c]));
    store.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[c]));
}

/// Normalizes each channel of a `[C, H, W, D]` volume over its voxels, then
/// applies a per-channel affine map.
fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, n) = (shape[0], shape[1..].iter().product::<usize>());
    let flat = tape.reshape(x, &[c, n])?;
    let ones = tape.constant(Tensor::ones(&[n]))?;
    let zeros = tape.constant(Tensor::zeros(&[n]))?;
    let normed = tape.layer_norm(flat, ones, zeros)?;
    let t = tape.transpose(normed)?;
    let t = tape.channel_affine(t, gamma, beta)?;
    let back = tape.transpose(t)?;
    Ok(tape.reshape(back, &shape)?)
}

fn conv_init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, gain: f64) -> (Tensor, Tensor) {
    let bound = gain * (3.0 / (cin * 27) as f64).sqrt();
    (
        Tensor::from_fn(&[cout, cin, 3, 3, 3], |_| rng.random_range(-bound..bound)),
        Tensor::zeros(&[cout]),
    )
}

impl Scaffold {
    pub fn new(config: ScaffoldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn dca_block(&self, spatial: [usize; 3]) -> Result<DcaBlock> {
        Ok(DcaBlock::new(self.config.dca_config(spatial)?, "dca.")?)
    }

    /// Convolution weights ~ U(±gain·sqrt(3 / fan_in)), zero biases. DCA
    /// parameters (when enabled) come from a separate seed stream and depend on
    /// the input extent through their token grid only in shape, not in values.
    pub fn init_params(&self, spatial: [usize; 3], seed: u64) -> Result<ParamStore> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let silu_gain = 2.0_f64.sqrt();
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let (w, b) = conv_init(&mut rng, c, cin, silu_gain);
            store.insert(format!("enc.{i}.weight"), w);
            store.insert(format!("enc.{i}.bias"), b);
            if cfg.norm {
                norm_init(&mut store, &format!("enc.{i}"), c);
            }
            cin = c;
        }
        for i in (0..cfg.n_stages() - 1).rev() {
            let (w, b) = conv_init(&mut rng, cfg.channels[i], cfg.channels[i + 1], silu_gain);
            store.insert(format!("dec.{i}.weight"), w);
            store.insert(format!("dec.{i}.bias"), b);
            if cfg.norm {
                norm_init(&mut store, &format!("dec.{i}"), cfg.channels[i]);
            }
        }
        let (w, b) = conv_init(&mut rng, 1, cfg.channels[0], 1.0);
        store.insert("head.weight", w);
        store.insert("head.bias", b);
        if cfg.use_dca {
            store.extend(self.dca_block(spatial)?.init_params(seed.wrapping_add(DCA_SEED_OFFSET)));
        }
        Ok(store)
    }

    fn check_input(&self, shape: &[usize]) -> Result<[usize; 3]> {
        let div = self.config.divisor();
        let bad = || ScaffoldError::Input {
            found: shape.to_vec(),
            channels: self.config.in_channels,
            divisor: div,
        };
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(bad());
        }
        let spatial = [shape[1], shape[2], shape[3]];
        if spatial.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(bad());
        }
        Ok(spatial)
    }

    fn maybe_norm(&self, tape: &mut Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        if !self.config.norm {
            return Ok(x);
        }
        let g = params.get(&format!("{prefix}.norm.gamma"));
        let b = params.get(&format!("{prefix}.norm.beta"));
        instance_norm(tape, x, g, b)
    }

    /// Maps a `[in_channels, H, W, D]` input to a `[1, H, W, D]` dose.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, input: Var) -> Result<Var> {
        let spatial = self.check_input(tape.shape(input))?;
        let n = self.config.n_stages();
        let mut skips = Vec::with_capacity(n);
        let mut x = input;
        for i in 0..n {
            let stride = if i == 0 { 1 } else { 2 };
            let w = params.get(&format!("enc.{i}.weight"));
            let b = params.get(&format!("enc.{i}.bias"));
            x = tape.conv3d(x, w, b, stride)?;
            x = self.maybe_norm(tape, params, &format!("enc.{i}"), x)?;
            x = tape.silu(x)?;
            skips.push(x);
        }
        if self.config.use_dca {
            skips = self.dca_block(spatial)?.forward(tape, params, &skips)?;
        }
        let mut x = skips[n - 1];
        for i in (0..n - 1).rev() {
            x = tape.upsample_nearest3d(x, 2)?;
            let w = params.get(&format!("dec.{i}.weight"));
            let b = params.get(&format!("dec.{i}.bias"));
            x = tape.conv3d(x, w, b, 1)?;
            x = self.maybe_norm(tape, params, &format!("dec.{i}"), x)?;
            x = tape.silu(x)?;
            x = tape.add(x, skips[i])?;
        }
        let x = tape.conv3d(x, params.get("head.weight"), params.get("head.bias"), 1)?;
        let x = tape.softplus(x)?;
        Ok(tape.scale(x, self.config.dose_scale)?)
    }

    /// Forward pass on a fresh tape, returning the `[1, H, W, D]` dose tensor.
    pub fn predict(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}
