//! The three learnable components and the bundle that ties them together:
//! noise predictor, semantic encoder and age head.

mod age_head;
pub mod layers;
mod unet;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use age_head::{AgeHead, AgeHeadConfig, AgeNormalization};
pub use layers::ParamStore;
pub use unet::{timestep_embedding, NoisePredictorNet, SemanticEncoder, UNetConfig};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const METADATA_FILE: &str = "model.json";

/// Parameter-name prefixes of the three components.
pub const NOISE_PREFIX: &str = "eps.";
pub const ENCODER_PREFIX: &str = "enc.";
pub const AGE_PREFIX: &str = "age.";

/// One image's semantic latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLatent(Vec<f64>);

impl SemanticLatent {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("empty semantic latent".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("latent entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Row-vector tensor of shape `(1, dim)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, (1, self.0.len()), device)?.to_dtype(dtype)?)
    }

    /// Split an `(N, dim)` tensor into per-row latents.
    pub fn from_rows(z: &Tensor) -> Result<Vec<Self>> {
        z.to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(Self::new)
            .collect()
    }

    /// Stack latents into an `(N, dim)` tensor.
    pub fn stack(latents: &[Self], dtype: DType, device: &Device) -> Result<Tensor> {
        let rows = latents
            .iter()
            .map(|l| l.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }
}

/// Pixel mean and spread assumed by the output scaling of the noise predictor.
pub const SCALING_DATA_MEAN: f64 = 0.5;
pub const SCALING_DATA_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub age_head: AgeHeadConfig,
    /// Predict noise as `c_skip(t) (x_t - sqrt(ab) mu) + c_out(t) F(x_t)`,
    /// where `c_skip` is the linear least-squares noise estimate and `c_out`
    /// the standard deviation of its residual. The U-Net output `F` then has
    /// a unit-scale target at every step.
    #[serde(default = "enabled")]
    pub output_scaling: bool,
}

fn enabled() -> bool {
    true
}

/// `(c_skip, c_out, offset)` for one step, with `offset = c_skip sqrt(ab) mu`.
pub fn output_scaling_coefficients(alpha_bar: f64) -> (f64, f64, f64) {
    let var = alpha_bar * SCALING_DATA_STD * SCALING_DATA_STD + (1.0 - alpha_bar);
    let c_skip = (1.0 - alpha_bar).sqrt() / var;
    let c_out = alpha_bar.sqrt() * SCALING_DATA_STD / var.sqrt();
    (c_skip, c_out, c_skip * alpha_bar.sqrt() * SCALING_DATA_MEAN)
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            unet: UNetConfig::full(),
            age_head: AgeHeadConfig::default(),
            output_scaling: true,
        }
    }

    pub fn reduced() -> Self {
        Self {
            unet: UNetConfig::reduced(),
            age_head: AgeHeadConfig::default(),
            output_scaling: true,
        }
    }

    pub fn tiny() -> Self {
        Self {
            unet: UNetConfig::tiny(),
            age_head: AgeHeadConfig {
                hidden: vec![5, 4],
                dropout: 0.5,
            },
            output_scaling: true,
        }
    }

    /// Looks up a preset by name: `full`, `reduced` or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "reduced" => Ok(Self::reduced()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected full, reduced or tiny)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub noise_predictor: usize,
    pub semantic_encoder: usize,
    pub age_head: usize,
    pub total: usize,
}

/// Where a bundle came from; written into the metadata sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_seed: u64,
    pub train_steps: usize,
    pub code_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    model: ModelConfig,
    schedule: ScheduleSpec,
    age_normalization: AgeNormalization,
    dtype: String,
    parameters: ParameterCounts,
    provenance: Provenance,
}

pub struct ModelBundle {
    config: ModelConfig,
    schedule: NoiseSchedule,
    age_norm: AgeNormalization,
    store: ParamStore,
    noise_net: NoisePredictorNet,
    encoder: SemanticEncoder,
    age_head: AgeHead,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn new(
        config: ModelConfig,
        schedule: NoiseSchedule,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device);
        let (noise_net, encoder, age_head) = {
            let mut root = store.root();
            let noise_net = NoisePredictorNet::new(&mut root.pp("eps"), &config.unet)?;
            let encoder = SemanticEncoder::new(&mut root.pp("enc"), &config.unet)?;
            let age_head = AgeHead::new(&mut root.pp("age"), config.unet.latent_dim, &config.age_head)?;
            (noise_net, encoder, age_head)
        };
        Ok(Self {
            config,
            schedule,
            age_norm: AgeNormalization::default(),
            store,
            noise_net,
            encoder,
            age_head,
            provenance: Provenance {
                init_seed: seed,
                train_steps: 0,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                train_config: None,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn age_normalization(&self) -> &AgeNormalization {
        &self.age_norm
    }

    pub fn set_age_normalization(&mut self, norm: AgeNormalization) {
        self.age_norm = norm;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn noise_net(&self) -> &NoisePredictorNet {
        &self.noise_net
    }

    pub fn image_size(&self) -> usize {
        self.config.unet.image_size
    }

    pub fn latent_dim(&self) -> usize {
        self.config.unet.latent_dim
    }

    /// Semantic latents for a batch of clean images `(N, C, H, W)`.
    pub fn semantic_encode(&self, x0: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x0)
    }

    pub fn encode_latents(&self, x0: &Tensor) -> Result<Vec<SemanticLatent>> {
        SemanticLatent::from_rows(&self.semantic_encode(x0)?)
    }

    /// Noise prediction for `x_t` at per-sample steps `ts`.
    pub fn noise_predict(&self, x_t: &Tensor, ts: &[usize], z_sem: &Tensor) -> Result<Tensor> {
        for &t in ts {
            self.schedule.check_step(t)?;
        }
        let raw = self.noise_net.forward(x_t, ts, z_sem)?;
        if !self.config.output_scaling {
            return Ok(raw);
        }
        let mut coef = [Vec::with_capacity(ts.len()), Vec::with_capacity(ts.len()), Vec::with_capacity(ts.len())];
        for &t in ts {
            let (skip, out, offset) = output_scaling_coefficients(self.schedule.alpha_bar(t)?);
            coef[0].push(skip);
            coef[1].push(out);
            coef[2].push(offset);
        }
        let [skip, out, offset] = coef.map(|v| {
            Tensor::from_vec(v, (ts.len(), 1, 1, 1), x_t.device())
                .and_then(|t| t.to_dtype(x_t.dtype()))
        });
        let eps = x_t
            .broadcast_mul(&skip?)?
            .broadcast_sub(&offset?)?
            .add(&raw.broadcast_mul(&out?)?)?;
        Ok(eps)
    }

    /// Ages in years, `(N,)`. An RNG selects training mode.
    pub fn age_predict<R: Rng>(&self, z_sem: &Tensor, rng: Option<&mut R>) -> Result<Tensor> {
        let (_, d) = z_sem.dims2()?;
        if d != self.latent_dim() {
            return Err(Error::Contract(format!(
                "latent of dimension {d}, model expects {}",
                self.latent_dim()
            )));
        }
        self.age_head.predict_years(z_sem, &self.age_norm, rng)
    }

    /// Refit the age head's batch-norm statistics on latents `z_sem`.
    pub fn recalibrate_age_head(&self, z_sem: &Tensor) -> Result<()> {
        self.age_head.recalibrate(&z_sem.detach())
    }

    /// Evaluation-mode age for one latent.
    pub fn age_of(&self, z: &SemanticLatent) -> Result<f64> {
        let z = SemanticLatent::new(z.values().to_vec())?;
        let t = z.to_tensor(self.dtype(), self.device())?;
        let ages = self.age_predict::<rand_chacha::ChaCha8Rng>(&t, None)?;
        Ok(ages.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Evaluation-mode ages for a batch of clean images.
    pub fn predict_ages(&self, x0: &Tensor) -> Result<Vec<f64>> {
        let z = self.semantic_encode(x0)?;
        let ages = self.age_predict::<rand_chacha::ChaCha8Rng>(&z, None)?;
        Ok(ages.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let noise_predictor = self.store.count_with_prefix(NOISE_PREFIX);
        let semantic_encoder = self.store.count_with_prefix(ENCODER_PREFIX);
        let age_head = self.store.count_with_prefix(AGE_PREFIX);
        ParameterCounts {
            noise_predictor,
            semantic_encoder,
            age_head,
            total: noise_predictor + semantic_encoder + age_head,
        }
    }

    /// Writes `model.safetensors` and the `model.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = dir.join(WEIGHTS_FILE);
        let tensors: HashMap<String, Tensor> = self.store.named_tensors().into_iter().collect();
        candle_core::safetensors::save(&tensors, &weights)
            .map_err(|e| Error::format(&weights, e))?;
        let meta = Metadata {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.config.clone(),
            schedule: self.schedule.spec(),
            age_normalization: self.age_norm,
            dtype: dtype_name(self.dtype()).to_string(),
            parameters: self.count_parameters(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join(METADATA_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("metadata serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported checkpoint format version {}", meta.format_version),
            ));
        }
        let dtype = parse_dtype(&meta.dtype).ok_or_else(|| Error::format(&path, "unknown dtype"))?;
        let mut bundle = Self::new(
            meta.model,
            meta.schedule.build()?,
            meta.provenance.init_seed,
            dtype,
            device,
        )?;
        let weights = dir.join(WEIGHTS_FILE);
        let tensors = candle_core::safetensors::load(&weights, device)
            .map_err(|e| Error::format(&weights, e))?;
        bundle.store.load_from(&tensors)?;
        bundle.age_norm = meta.age_normalization;
        bundle.provenance = meta.provenance;
        Ok(bundle)
    }

    /// Copy every parameter and buffer from `other`, which must share the config.
    pub fn copy_weights_from(&self, other: &ModelBundle) -> Result<()> {
        let tensors: HashMap<String, Tensor> = other.store.named_tensors().into_iter().collect();
        self.store.load_from(&tensors)
    }
}

impl NoisePredictor for ModelBundle {
    fn predict_noise(&self, x_t: &Tensor, ts: &[usize], z_sem: &Tensor) -> Result<Tensor> {
        self.noise_predict(x_t, ts, z_sem)
    }
}

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        DType::F32 => "f32",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "other",
    }
}

pub fn parse_dtype(name: &str) -> Option<DType> {
    match name {
        "f64" => Some(DType::F64),
        "f32" => Some(DType::F32),
        _ => None,
    }
}
