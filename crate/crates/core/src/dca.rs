//! 3D dual cross-attention (DCA) block for U-shaped skip connections.
//!
//! Given encoder features `E_i` of shape `[C_i, H/2^i, W/2^i, D/2^i]` for
//! stages `i = 0..n`, the block
//!
//! 1. pools every stage down to the coarsest grid (factor `2^(n-1-i)`),
//!    flattens to `P` tokens and applies a depthwise (per-channel) affine,
//! 2. runs channel cross-attention: each stage's channels attend over the
//!    channels of all stages, `softmax(Q_iᵀ K / sqrt(C_c)) Vᵀ`,
//! 3. runs spatial cross-attention: tokens attend over tokens with `h` heads,
//!    `softmax(Q Kᵀ / sqrt(C_c / h)) V_i`,
//! 4. normalizes, applies a per-stage fusion affine, upsamples back to each
//!    stage's resolution with nearest-neighbour lookup and adds the result
//!    onto `E_i`.
//!
//! Depthwise 1×1×1 convolutions are per-channel scale and bias; CCA, SCA and
//! the whole block carry residual connections. Fusion scales start at zero, so
//! a freshly initialized block is the identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DcaError {
    #[error("invalid DCA config: {0}")]
    Config(String),
    #[error("stage {stage}: expected features of shape {expected:?}, found {found:?}")]
    Shape {
        stage: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DcaError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcaConfig {
    /// Channel count of each encoder stage, finest first.
    pub channels: Vec<usize>,
    /// Spatial extent `(H, W, D)` of the finest stage.
    pub base_spatial: [usize; 3],
    /// Heads of the spatial cross-attention.
    pub heads: usize,
}

impl DcaConfig {
    pub fn new(channels: Vec<usize>, base_spatial: [usize; 3], heads: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            base_spatial,
            heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(DcaError::Config("at least one stage is required".into()));
        }
        if self.channels.contains(&0) {
            return Err(DcaError::Config("channel counts must be positive".into()));
        }
        if self.heads == 0 {
            return Err(DcaError::Config("heads must be positive".into()));
        }
        let coarse = 1usize << (n - 1);
        if self.base_spatial.iter().any(|&e| e == 0 || e % coarse != 0) {
            return Err(DcaError::Config(format!(
                "spatial extents {:?} not divisible by {coarse}",
                self.base_spatial
            )));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return Err(DcaError::Config(format!(
                "stage channel count {c} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.channels.len()
    }

    /// Total channels `C_c` across stages.
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn stage_spatial(&self, stage: usize) -> [usize; 3] {
        self.base_spatial.map(|e| e >> stage)
    }

    pub fn stage_shape(&self, stage: usize) -> Vec<usize> {
        let s = self.stage_spatial(stage);
        vec![self.channels[stage], s[0], s[1], s[2]]
    }

    /// Pooling factor bringing stage `stage` to the coarsest grid.
    pub fn pool_factor(&self, stage: usize) -> usize {
        1 << (self.n_stages() - 1 - stage)
    }

    pub fn token_grid(&self) -> [usize; 3] {
        self.stage_spatial(self.n_stages() - 1)
    }

    /// Tokens per stage, `P = HWD / 8^(n-1)`.
    pub fn tokens(&self) -> usize {
        self.token_grid().iter().product()
    }
}

/// Attention intermediates, exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Per-stage `[P, C_i]` outputs, residual included.
    pub outputs: Vec<Var>,
    /// Row-softmax matrices: one `[C_i, C_c]` per stage for CCA, one `[P, P]` per head for SCA.
    pub attention: Vec<Var>,
}

/// A DCA block whose parameters live under `prefix` in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DcaBlock {
    pub config: DcaConfig,
    prefix: String,
}

impl DcaBlock {
    pub fn new(config: DcaConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}{rest}", self.prefix)
    }

    fn affine(&self, tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let s = params.get(&self.name(&format!("{name}.scale")));
        let b = params.get(&self.name(&format!("{name}.bias")));
        Ok(tape.channel_affine(x, s, b)?)
    }

    fn norm(&self, tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let g = params.get(&self.name(&format!("{name}.gamma")));
        let b = params.get(&self.name(&format!("{name}.beta")));
        Ok(tape.layer_norm(x, g, b)?)
    }

    /// Fresh parameters: projection scales ~ U(0.9, 1.1), biases 0, norms at
    /// identity, fusion scales 0.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cc = self.config.total_channels();
        let affine = |store: &mut ParamStore, name: String, c: usize, rng: &mut ChaCha8Rng| {
            store.insert(
                self.name(&format!("{name}.scale")),
                Tensor::from_fn(&[c], |_| rng.random_range(0.9..1.1)),
            );
            store.insert(self.name(&format!("{name}.bias")), Tensor::zeros(&[c]));
        };
        let norm = |store: &mut ParamStore, name: String, c: usize| {
            store.insert(self.name(&format!("{name}.gamma")), Tensor::ones(&[c]));
            store.insert(self.name(&format!("{name}.beta")), Tensor::zeros(&[c]));
        };
        for (i, &c) in self.config.channels.iter().enumerate() {
            affine(&mut store, format!("embed.{i}"), c, &mut rng);
        }
        for (i, &c) in self.config.channels.iter().enumerate() {
            affine(&mut store, format!("cca.q.{i}"), c, &mut rng);
        }
        affine(&mut store, "cca.k".into(), cc, &mut rng);
        affine(&mut store, "cca.v".into(), cc, &mut rng);
        for (i, &c) in self.config.channels.iter().enumerate() {
            norm(&mut store, format!("sca.norm.{i}"), c);
        }
        affine(&mut store, "sca.q".into(), cc, &mut rng);
        affine(&mut store, "sca.k".into(), cc, &mut rng);
        for (i, &c) in self.config.channels.iter().enumerate() {
            affine(&mut store, format!("sca.v.{i}"), c, &mut rng);
        }
        for (i, &c) in self.config.channels.iter().enumerate() {
            norm(&mut store, format!("out.norm.{i}"), c);
            store.insert(self.name(&format!("fusion.{i}.scale")), Tensor::zeros(&[c]));
            store.insert(self.name(&format!("fusion.{i}.bias")), Tensor::zeros(&[c]));
        }
        store
    }

    fn check_features(&self, tape: &Tape, features: &[Var]) -> Result<()> {
        if features.len() != self.config.n_stages() {
            return Err(DcaError::Config(format!(
                "expected {} stages, got {}",
                self.config.n_stages(),
                features.len()
            )));
        }
        for (i, &f) in features.iter().enumerate() {
            let expected = self.config.stage_shape(i);
            if tape.shape(f) != expected.as_slice() {
                return Err(DcaError::Shape {
                    stage: i,
                    expected,
                    found: tape.shape(f).to_vec(),
                });
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tape: &Tape, tokens: &[Var]) -> Result<()> {
        let p = self.config.tokens();
        if tokens.len() != self.config.n_stages() {
            return Err(DcaError::Config(format!(
                "expected {} token sets, got {}",
                self.config.n_stages(),
                tokens.len()
            )));
        }
        for (i, (&t, &c)) in tokens.iter().zip(&self.config.channels).enumerate() {
            if tape.shape(t) != [p, c] {
                return Err(DcaError::Shape {
                    stage: i,
                    expected: vec![p, c],
                    found: tape.shape(t).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Multi-scale patch embedding: `T_i = affine_i(flatten(pool(E_i)))`, each `[P, C_i]`.
    pub fn embed_patches(&self, tape: &mut Tape, params: &BoundParams, features: &[Var]) -> Result<Vec<Var>> {
        self.check_features(tape, features)?;
        let p = self.config.tokens();
        let mut tokens = Vec::with_capacity(features.len());
        for (i, &e) in features.iter().enumerate() {
            let k = self.config.pool_factor(i);
            let pooled = if k > 1 { tape.avg_pool3d(e, k)? } else { e };
            let flat = tape.reshape(pooled, &[self.config.channels[i], p])?;
            let t = tape.transpose(flat)?;
            tokens.push(self.affine(tape, params, &format!("embed.{i}"), t)?);
        }
        Ok(tokens)
    }

    pub fn channel_cross_attention(&self, tape: &mut Tape, params: &BoundParams, tokens: &[Var]) -> Result<Vec<Var>> {
        Ok(self.channel_cross_attention_detailed(tape, params, tokens)?.outputs)
    }

    /// Channel cross-attention with residual, returning the attention maps too.
    pub fn channel_cross_attention_detailed(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        tokens: &[Var],
    ) -> Result<AttentionOutput> {
        self.check_tokens(tape, tokens)?;
        let scale = 1.0 / (self.config.total_channels() as f64).sqrt();
        let concat = tape.concat_cols(tokens)?;
        let k = self.affine(tape, params, "cca.k", concat)?;
        let v = self.affine(tape, params, "cca.v", concat)?;
        let vt = tape.transpose(v)?;
        let mut outputs = Vec::with_capacity(tokens.len());
        let mut attention = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let q = self.affine(tape, params, &format!("cca.q.{i}"), t)?;
            let qt = tape.transpose(q)?;
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax_rows(scores)?;
            let o = tape.matmul(a, vt)?;
            let o = tape.transpose(o)?;
            outputs.push(tape.add(o, t)?);
            attention.push(a);
        }
        Ok(AttentionOutput { outputs, attention })
    }

    pub fn spatial_cross_attention(&self, tape: &mut Tape, params: &BoundParams, tokens: &[Var]) -> Result<Vec<Var>> {
        Ok(self.spatial_cross_attention_detailed(tape, params, tokens)?.outputs)
    }

    /// Multi-head spatial cross-attention with residual, returning the attention maps too.
    pub fn spatial_cross_attention_detailed(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        tokens: &[Var],
    ) -> Result<AttentionOutput> {
        self.check_tokens(tape, tokens)?;
        let heads = self.config.heads;
        let head_dim = self.config.total_channels() / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let normed = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.norm(tape, params, &format!("sca.norm.{i}"), t))
            .collect::<Result<Vec<_>>>()?;
        let concat = tape.concat_cols(&normed)?;
        let q = self.affine(tape, params, "sca.q", concat)?;
        let k = self.affine(tape, params, "sca.k", concat)?;
        let values = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.affine(tape, params, &format!("sca.v.{i}"), t))
            .collect::<Result<Vec<_>>>()?;

        let mut per_stage: Vec<Vec<Var>> = vec![Vec::with_capacity(heads); tokens.len()];
        let mut attention = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let kht = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kht)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax_rows(scores)?;
            for (i, &v) in values.iter().enumerate() {
                let width = self.config.channels[i] / heads;
                let vh = tape.slice_cols(v, h * width, width)?;
                per_stage[i].push(tape.matmul(a, vh)?);
            }
            attention.push(a);
        }
        let mut outputs = Vec::with_capacity(tokens.len());
        for (parts, &t) in per_stage.iter().zip(tokens) {
            let o = if parts.len() == 1 { parts[0] } else { tape.concat_cols(parts)? };
            outputs.push(tape.add(o, t)?);
        }
        Ok(AttentionOutput { outputs, attention })
    }

    /// Full block: embed, CCA, SCA, then per stage norm, fusion affine,
    /// upsample to the stage grid and add onto the input features.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, features: &[Var]) -> Result<Vec<Var>> {
        let tokens = self.embed_patches(tape, params, features)?;
        let tokens = self.channel_cross_attention(tape, params, &tokens)?;
        let tokens = self.spatial_cross_attention(tape, params, &tokens)?;
        let grid = self.config.token_grid();
        let mut out = Vec::with_capacity(features.len());
        for (i, (&t, &e)) in tokens.iter().zip(features).enumerate() {
            let c = self.config.channels[i];
            let y = self.norm(tape, params, &format!("out.norm.{i}"), t)?;
            let y = self.affine(tape, params, &format!("fusion.{i}"), y)?;
            let y = tape.transpose(y)?;
            let y = tape.reshape(y, &[c, grid[0], grid[1], grid[2]])?;
            let k = self.config.pool_factor(i);
            let y = if k > 1 { tape.upsample_nearest3d(y, k)? } else { y };
            out.push(tape.add(e, y)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(channels: Vec<usize>, base: usize, heads: usize) -> DcaBlock {
        DcaBlock::new(DcaConfig::new(channels, [base; 3], heads).unwrap(), "dca.").unwrap()
    }

    #[test]
    fn config_arithmetic() {
        let c = DcaConfig::new(vec![4, 8, 16], [16, 16, 16], 2).unwrap();
        assert_eq!(c.total_channels(), 28);
        assert_eq!(c.tokens(), 64);
        assert_eq!(c.pool_factor(0), 4);
        assert_eq!(c.stage_shape(2), vec![16, 4, 4, 4]);
    }

    #[test]
    fn config_rejections() {
        assert!(DcaConfig::new(vec![4, 6], [8, 8, 8], 4).is_err());
        assert!(DcaConfig::new(vec![4, 8, 16], [10, 16, 16], 1).is_err());
        assert!(DcaConfig::new(vec![], [8, 8, 8], 1).is_err());
        assert!(DcaConfig::new(vec![4], [8, 8, 8], 0).is_err());
    }

    #[test]
    fn two_stage_embedding_has_shared_token_count() {
        let b = block(vec![2, 4], 8, 1);
        let mut tape = Tape::new();
        let bound = b.init_params(0).bind(&mut tape).unwrap();
        let e0 = tape.constant(Tensor::ones(&[2, 8, 8, 8])).unwrap();
        let e1 = tape.constant(Tensor::ones(&[4, 4, 4, 4])).unwrap();
        let t = b.embed_patches(&mut tape, &bound, &[e0, e1]).unwrap();
        assert_eq!(tape.shape(t[0]), &[64, 2]);
        assert_eq!(tape.shape(t[1]), &[64, 4]);
    }

    #[test]
    fn wrong_feature_shape_is_rejected() {
        let b = block(vec![2, 4], 8, 1);
        let mut tape = Tape::new();
        let bound = b.init_params(0).bind(&mut tape).unwrap();
        let e0 = tape.constant(Tensor::ones(&[2, 8, 8, 8])).unwrap();
        let e1 = tape.constant(Tensor::ones(&[4, 8, 8, 8])).unwrap();
        assert!(matches!(
            b.forward(&mut tape, &bound, &[e0, e1]),
            Err(DcaError::Shape { stage: 1, .. })
        ));
    }

    #[test]
    fn fresh_block_is_identity() {
        let b = block(vec![2, 4], 8, 2);
        let mut tape = Tape::new();
        let bound = b.init_params(3).bind(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e0 = tape.constant(Tensor::from_fn(&[2, 8, 8, 8], |_| rng.random_range(-1.0..1.0))).unwrap();
        let e1 = tape.constant(Tensor::from_fn(&[4, 4, 4, 4], |_| rng.random_range(-1.0..1.0))).unwrap();
        let out = b.forward(&mut tape, &bound, &[e0, e1]).unwrap();
        assert_eq!(tape.value(out[0]), tape.value(e0));
        assert_eq!(tape.value(out[1]), tape.value(e1));
    }
}
