//! Noise predictor U-Net and the semantic encoder built from its downward path.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{AttentionBlock, Conv2d, GroupNorm, Linear, Scope};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub convs_per_stage: usize,
    pub attention_blocks: usize,
    pub norm_groups: usize,
    pub time_embedding_dim: usize,
    pub latent_dim: usize,
}

impl UNetConfig {
    /// 128x128 slices, widths 32/32/64/96/128, three middle attention blocks,
    /// 512-dimensional semantic latent.
    pub fn full() -> Self {
        Self {
            image_size: 128,
            in_channels: 1,
            base_channels: 32,
            channel_multipliers: vec![1, 1, 2, 3, 4],
            convs_per_stage: 3,
            attention_blocks: 3,
            norm_groups: 8,
            time_embedding_dim: 128,
            latent_dim: 512,
        }
    }

    /// Same topology at base width 8 on 32x32 inputs with a 64-d latent.
    pub fn reduced() -> Self {
        Self {
            image_size: 32,
            base_channels: 8,
            time_embedding_dim: 32,
            latent_dim: 64,
            ..Self::full()
        }
    }

    /// Two-stage 8x8 network used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            in_channels: 1,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            convs_per_stage: 2,
            attention_blocks: 1,
            norm_groups: 2,
            time_embedding_dim: 8,
            latent_dim: 6,
        }
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.channel_multipliers.len();
        if stages == 0 || self.convs_per_stage == 0 {
            return Err(Error::Config("U-Net needs at least one stage and one conv per stage".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("channel counts and latent_dim must be positive".into()));
        }
        if self.time_embedding_dim == 0 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::Config("time_embedding_dim must be positive and even".into()));
        }
        let factor = 1usize << (stages - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by {factor} ({stages} stages)",
                self.image_size
            )));
        }
        for c in self.stage_widths() {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "stage width {c} is not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels || h != self.image_size || w != self.image_size {
            return Err(Error::Contract(format!(
                "expected input (N, {}, {s}, {s}), got {:?}",
                self.in_channels,
                x.dims(),
                s = self.image_size
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer step indices, shape `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            values.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            values.push((t * freq).cos());
        }
    }
    Ok(Tensor::from_vec(values, (ts.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// conv -> group norm -> (optional affine modulation) -> SiLU, plus a skip path.
///
/// With `stride == 2` the block halves the resolution; the skip path
/// average-pools to match.
#[derive(Debug, Clone)]
struct ResBlock {
    conv: Conv2d,
    norm: GroupNorm,
    modulation: Option<Linear>,
    skip: Option<Conv2d>,
    downsample: bool,
}

impl ResBlock {
    fn new(
        scope: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        groups: usize,
        cond_dim: Option<usize>,
    ) -> Result<Self> {
        let conv = Conv2d::new(&mut scope.pp("conv"), in_ch, out_ch, 3, stride)?;
        let norm = GroupNorm::new(&mut scope.pp("norm"), groups, out_ch)?;
        let modulation = cond_dim
            .map(|d| Linear::new(&mut scope.pp("modulation"), d, 2 * out_ch))
            .transpose()?;
        let skip = (in_ch != out_ch)
            .then(|| Conv2d::new(&mut scope.pp("skip"), in_ch, out_ch, 1, 1))
            .transpose()?;
        Ok(Self {
            conv,
            norm,
            modulation,
            skip,
            downsample: stride == 2,
        })
    }

    fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.norm.forward(&self.conv.forward(x)?)?;
        if let (Some(m), Some(cond)) = (&self.modulation, cond) {
            let (_, c, _, _) = h.dims4()?;
            let params = m.forward(cond)?;
            let scale = params.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
            let shift = params.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        }
        let h = h.silu()?;
        let mut skip = if self.downsample {
            x.avg_pool2d(2)?
        } else {
            x.clone()
        };
        if let Some(proj) = &self.skip {
            skip = proj.forward(&skip)?;
        }
        Ok((h + skip)?)
    }
}

/// Stages of residual blocks; stage `s > 0` starts with a stride-2 block.
#[derive(Debug, Clone)]
struct DownPath {
    input: Conv2d,
    stages: Vec<Vec<ResBlock>>,
}

impl DownPath {
    fn new(scope: &mut Scope<'_>, cfg: &UNetConfig, cond_dim: Option<usize>) -> Result<Self> {
        let widths = cfg.stage_widths();
        let input = Conv2d::new(&mut scope.pp("input"), cfg.in_channels, widths[0], 3, 1)?;
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = widths[0];
        for (s, &c) in widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.convs_per_stage);
            for b in 0..cfg.convs_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let mut sc = scope.pp(format!("down.{s}.{b}"));
                blocks.push(ResBlock::new(&mut sc, prev, c, stride, cfg.norm_groups, cond_dim)?);
                prev = c;
            }
            stages.push(blocks);
        }
        Ok(Self { input, stages })
    }

    /// Returns the final activation and each stage's output (for skips).
    fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.input.forward(x)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, cond)?;
            }
            skips.push(h.clone());
        }
        Ok((h, skips))
    }
}

/// The noise predictor: a U-Net conditioned on the step index and the
/// semantic latent at every residual block.
#[derive(Debug, Clone)]
pub struct NoisePredictorNet {
    cfg: UNetConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    down: DownPath,
    middle: Vec<AttentionBlock>,
    up: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl NoisePredictorNet {
    pub fn new(scope: &mut Scope<'_>, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let temb = cfg.time_embedding_dim;
        let cond_dim = temb + cfg.latent_dim;
        let time_fc1 = Linear::new(&mut scope.pp("time.fc1"), temb, temb)?;
        let time_fc2 = Linear::new(&mut scope.pp("time.fc2"), temb, temb)?;
        let down = DownPath::new(scope, cfg, Some(cond_dim))?;
        let widths = cfg.stage_widths();
        let top = *widths.last().expect("validated non-empty");
        let middle = (0..cfg.attention_blocks)
            .map(|i| AttentionBlock::new(&mut scope.pp(format!("middle.{i}")), top, cfg.norm_groups))
            .collect::<Result<Vec<_>>>()?;

        // Up stage s mirrors down stage s; its first block receives the
        // concatenation of the incoming features and down stage s's output.
        let mut up = Vec::with_capacity(widths.len());
        let mut incoming = top;
        for s in (0..widths.len()).rev() {
            let c = widths[s];
            let mut blocks = Vec::with_capacity(cfg.convs_per_stage);
            for b in 0..cfg.convs_per_stage {
                let in_ch = if b == 0 { incoming + c } else { c };
                let mut sc = scope.pp(format!("up.{s}.{b}"));
                blocks.push(ResBlock::new(&mut sc, in_ch, c, 1, cfg.norm_groups, Some(cond_dim))?);
            }
            up.push(blocks);
            incoming = c;
        }
        let out_norm = GroupNorm::new(&mut scope.pp("out.norm"), cfg.norm_groups, widths[0])?;
        let out_conv = Conv2d::new(&mut scope.pp("out.conv"), widths[0], cfg.in_channels, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            time_fc1,
            time_fc2,
            down,
            middle,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Learned time embedding for a batch of step indices.
    pub fn time_embedding(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let sin = timestep_embedding(ts, self.cfg.time_embedding_dim, like)?;
        self.time_fc2.forward(&self.time_fc1.forward(&sin)?.silu()?)
    }

    pub fn forward(&self, x_t: &Tensor, ts: &[usize], z_sem: &Tensor) -> Result<Tensor> {
        self.cfg.check_input(x_t)?;
        let n = x_t.dim(0)?;
        if ts.len() != n {
            return Err(Error::Contract(format!("{} step indices for batch of {n}", ts.len())));
        }
        let temb = self.time_embedding(ts, x_t)?;
        self.forward_embedded(x_t, &temb, z_sem)
    }

    /// Forward pass with an explicit time embedding.
    pub fn forward_embedded(&self, x_t: &Tensor, temb: &Tensor, z_sem: &Tensor) -> Result<Tensor> {
        let n = x_t.dim(0)?;
        let (zn, zd) = z_sem.dims2()?;
        if zn != n || zd != self.cfg.latent_dim {
            return Err(Error::Contract(format!(
                "latent batch {:?} does not match ({n}, {})",
                z_sem.dims(),
                self.cfg.latent_dim
            )));
        }
        let cond = Tensor::cat(&[temb, z_sem], 1)?.silu()?;
        let (mut h, skips) = self.down.forward(x_t, Some(&cond))?;
        for block in &self.middle {
            h = block.forward(&h)?;
        }
        for (i, blocks) in self.up.iter().enumerate() {
            let s = skips.len() - 1 - i;
            let skip = &skips[s];
            if h.dim(2)? != skip.dim(2)? {
                let (_, _, sh, sw) = skip.dims4()?;
                h = h.upsample_nearest2d(sh, sw)?;
            }
            h = Tensor::cat(&[&h, skip], 1)?;
            for block in blocks {
                h = block.forward(&h, Some(&cond))?;
            }
        }
        let h = self.out_norm.forward(&h)?.silu()?;
        self.out_conv.forward(&h)
    }

    /// `(down stage width, up stage width)` for each skip connection.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        let widths = self.cfg.stage_widths();
        (0..widths.len())
            .map(|s| {
                let up_idx = widths.len() - 1 - s;
                let up_width = self.up[up_idx].last().map(|b| b.norm_width()).unwrap_or(0);
                (widths[s], up_width)
            })
            .collect()
    }

    /// Number of residual blocks, and how many of them take the conditioning.
    pub fn conditioned_blocks(&self) -> (usize, usize) {
        let all = self
            .down
            .stages
            .iter()
            .chain(self.up.iter())
            .flatten()
            .collect::<Vec<_>>();
        let conditioned = all.iter().filter(|b| b.modulation.is_some()).count();
        (all.len(), conditioned)
    }
}

impl ResBlock {
    fn norm_width(&self) -> usize {
        self.norm.channels()
    }
}

/// Downward path plus middle attention, pooled and projected to the latent.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    cfg: UNetConfig,
    down: DownPath,
    middle: Vec<AttentionBlock>,
    out_norm: GroupNorm,
    head: Linear,
}

impl SemanticEncoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let down = DownPath::new(scope, cfg, None)?;
        let top = *cfg.stage_widths().last().expect("validated non-empty");
        let middle = (0..cfg.attention_blocks)
            .map(|i| AttentionBlock::new(&mut scope.pp(format!("middle.{i}")), top, cfg.norm_groups))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = GroupNorm::new(&mut scope.pp("out.norm"), cfg.norm_groups, top)?;
        let head = Linear::new(&mut scope.pp("out.head"), top, cfg.latent_dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            down,
            middle,
            out_norm,
            head,
        })
    }

    /// `(N, C, H, W)` images to `(N, latent_dim)` latents.
    pub fn forward(&self, x0: &Tensor) -> Result<Tensor> {
        self.cfg.check_input(x0)?;
        let (mut h, _) = self.down.forward(x0, None)?;
        for block in &self.middle {
            h = block.forward(&h)?;
        }
        let pooled = self.out_norm.forward(&h)?.silu()?.flatten_from(2)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }
}
