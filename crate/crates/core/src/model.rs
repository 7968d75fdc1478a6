//! The full network: content encoder + codebook, prosody encoder, generator
//! and discriminators sharing one parameter store.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::content::{
    self, Codebook, CodebookConfig, ContentEncoder, ContentEncoderConfig, QuantizationResult,
};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MelAnalyzer};
use crate::io::{Archive, ArrayData};
use crate::nn::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::prosody::{ProsodyEncoder, ProsodyEncoderConfig};
use crate::synthesis::{
    upsample_content, DiscriminatorConfig, Discriminators, Generator, GeneratorConfig,
    SAMPLES_PER_FRAME,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: ContentEncoderConfig,
    pub codebook: CodebookConfig,
    pub prosody: ProsodyEncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: ContentEncoderConfig::default(),
            codebook: CodebookConfig::default(),
            prosody: ProsodyEncoderConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small network for smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            encoder: ContentEncoderConfig {
                channels: 32,
                front_blocks: 1,
                post_blocks: 1,
                residual_blocks: 1,
                out_dim: 16,
                ..Default::default()
            },
            codebook: CodebookConfig {
                size: 32,
                dim: 16,
                ..Default::default()
            },
            prosody: ProsodyEncoderConfig {
                input_dim: 2,
                hidden: 8,
            },
            generator: GeneratorConfig {
                base_channels: 16,
                resblock_kernels: vec![3],
                resblock_dilations: vec![vec![1]],
                local_cond_dim: 32,
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                width_divisor: 16,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.codebook.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.encoder.out_dim != self.codebook.dim {
            return Err(Error::Config(
                "encoder out_dim must equal codebook dim".into(),
            ));
        }
        if self.codebook.dim + self.prosody.out_dim() != self.generator.local_cond_dim {
            return Err(Error::Config(
                "generator local_cond_dim must equal codebook dim + 2 * prosody hidden".into(),
            ));
        }
        if self.prosody.input_dim != 2 {
            return Err(Error::Config("prosody input_dim must be 2".into()));
        }
        Ok(())
    }
}

pub const ENCODER: &str = "enc";
pub const PROSODY: &str = "pros";
pub const GENERATOR: &str = "gen";
pub const DISCRIMINATOR: &str = "disc";

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub encoder: ContentEncoder,
    pub prosody: ProsodyEncoder,
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub codebook: Codebook<f32>,
}

/// One training batch, already laid out for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, n_mels, C]`
    pub mel: Tensor<f32>,
    /// `[B, C, 2]`
    pub prosody: Tensor<f32>,
    /// `[B, global_dim]`
    pub global: Tensor<f32>,
    /// `[B, 1, C * 160]`
    pub wave: Tensor<f32>,
    /// Log-mel of each real crop, `[B * C, n_mels]`.
    pub target_mel: Tensor<f32>,
}

pub struct GeneratorPass<'g> {
    pub wave: Var<'g, f32>,
    pub commit: Var<'g, f32>,
    /// Continuous latents `[B * C/2, D]` and their quantisation.
    pub latents: Tensor<f32>,
    pub quant: QuantizationResult<f32>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ContentEncoder::new(&mut store, ENCODER, &cfg.encoder, &mut rng);
        let prosody = ProsodyEncoder::new(&mut store, PROSODY, &cfg.prosody, &mut rng);
        let generator = Generator::new(&mut store, GENERATOR, &cfg.generator, &mut rng);
        let discriminators =
            Discriminators::new(&mut store, DISCRIMINATOR, &cfg.discriminator, &mut rng);
        let codebook = Codebook::random(cfg.codebook.size, cfg.codebook.dim, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            prosody,
            generator,
            discriminators,
            codebook,
        })
    }

    pub fn generator_ids(&self) -> HashSet<ParamId> {
        let mut ids = self.store.ids_with_prefix(&format!("{ENCODER}."));
        ids.extend(self.store.ids_with_prefix(&format!("{PROSODY}.")));
        ids.extend(self.store.ids_with_prefix(&format!("{GENERATOR}.")));
        ids
    }

    pub fn discriminator_ids(&self) -> HashSet<ParamId> {
        self.store.ids_with_prefix(&format!("{DISCRIMINATOR}."))
    }

    /// Encoder, quantiser, prosody encoder and generator on `batch`.
    pub fn generate<'g>(&self, cx: Ctx<'g, f32>, batch: &Batch) -> Result<GeneratorPass<'g>> {
        let g = cx.g;
        let z = self.encoder.forward(cx, g.constant(batch.mel.clone()));
        let (st, commit, quant) = content::quantize_var(z, &self.codebook)?;
        let latents = {
            let zv = z.value().transpose12();
            let n = zv.dim(0) * zv.dim(1);
            zv.reshaped(&[n, self.cfg.codebook.dim])
        };
        let pros = self
            .prosody
            .forward(cx, g.constant(batch.prosody.clone()))
            .transpose12();
        let local = Var::concat(&[upsample_content(st), pros], 1);
        let wave = self
            .generator
            .forward(cx, local, g.constant(batch.global.clone()));
        Ok(GeneratorPass {
            wave,
            commit,
            latents,
            quant,
        })
    }

    /// Resynthesise one utterance from its mel frames `[T, n_mels]`, normalised
    /// prosody streams and a speaker vector. Returns `T * 160` samples.
    pub fn infer(
        &self,
        mel: &[f64],
        frames: usize,
        f0n: &[f64],
        energy: &[f64],
        speaker: &[f64],
    ) -> Result<Vec<f32>> {
        if f0n.len() != frames || energy.len() != frames {
            return Err(Error::ConditioningMisaligned {
                content: frames,
                prosody: f0n.len(),
            });
        }
        let (z, _) = self.encoder.encode(&self.store, mel, frames)?;
        let q = self.codebook.lookup(&z)?;
        let padded = content::padded_frames(frames);
        let pad = |v: &[f64]| -> Vec<f64> { (0..padded).map(|t| v[t.min(frames - 1)]).collect() };
        let pros = self.prosody.encode(&self.store, &pad(f0n), &pad(energy))?;
        let mut wave = self
            .generator
            .synthesize(&self.store, &q.quantized, &pros, speaker)?;
        wave.truncate(frames * SAMPLES_PER_FRAME);
        Ok(wave)
    }

    /// Parameters and codebook state as named arrays.
    pub fn write_arrays(&self, archive: &mut Archive) {
        for (_, name, t) in self.store.iter() {
            archive.push(
                format!("param/{name}"),
                t.shape(),
                ArrayData::F32(t.data().to_vec()),
            );
        }
        let cb = &self.codebook;
        let (k, d) = (cb.size(), cb.dim());
        archive.push(
            "codebook/codes",
            &[k, d],
            ArrayData::F32(cb.codes.data().to_vec()),
        );
        archive.push(
            "codebook/usage",
            &[k],
            ArrayData::U64(cb.usage_counts.clone()),
        );
        archive.push(
            "codebook/cluster_size",
            &[k],
            ArrayData::F64(cb.ema_cluster_size.clone()),
        );
        archive.push(
            "codebook/embed_sums",
            &[k, d],
            ArrayData::F64(cb.ema_embed_sums.clone()),
        );
        archive.push(
            "codebook/idle_epochs",
            &[k],
            ArrayData::U64(cb.idle_epochs.iter().map(|&v| v as u64).collect()),
        );
    }

    pub fn read_arrays(&mut self, archive: &Archive, origin: &str) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", self.store.name(id));
            let (shape, data) = archive.f32s(&name, origin)?;
            if shape != self.store.value(id).shape() {
                return Err(Error::format(
                    origin,
                    format!("{name}: shape {shape:?} does not match the model"),
                ));
            }
            self.store.set(id, Tensor::new(shape, data.to_vec()));
        }
        let (k, d) = (self.codebook.size(), self.codebook.dim());
        let (shape, codes) = archive.f32s("codebook/codes", origin)?;
        if shape != [k, d] {
            return Err(Error::format(
                origin,
                "codebook shape does not match the model",
            ));
        }
        self.codebook.codes = Tensor::new(&[k, d], codes.to_vec());
        self.codebook.usage_counts = archive.u64s("codebook/usage", origin)?.to_vec();
        self.codebook.ema_cluster_size = archive.f64s("codebook/cluster_size", origin)?.1.to_vec();
        self.codebook.ema_embed_sums = archive.f64s("codebook/embed_sums", origin)?.1.to_vec();
        self.codebook.idle_epochs = archive
            .u64s("codebook/idle_epochs", origin)?
            .iter()
            .map(|&v| v as u32)
            .collect();
        Ok(())
    }

    pub fn describe(&self) -> serde_json::Value {
        let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, name, t) in self.store.iter() {
            let group = name.split('.').next().unwrap_or("");
            *groups.entry(group).or_default() += t.len();
        }
        json!({ "parameters": groups, "codebook": [self.codebook.size(), self.codebook.dim()] })
    }
}

/// Differentiable log-mel front end matching [`MelAnalyzer::log_mel`] on
/// zero-padded crops.
pub struct DiffMel {
    dft_re: Tensor<f32>,
    dft_im: Tensor<f32>,
    /// `[n_bins, n_mels]`
    filterbank_t: Tensor<f32>,
    win: usize,
    hop: usize,
    offset: isize,
    floor: f64,
}

/// Keeps the magnitude differentiable at exact zeros.
const MAGNITUDE_EPS: f64 = 1e-12;

impl DiffMel {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let an = MelAnalyzer::new(cfg);
        let (re, im) = an.windowed_dft();
        let (nb, nm) = (an.n_bins, cfg.n_mels);
        let win = an.framing.win;
        let mut fb_t = vec![0.0f32; nb * nm];
        for m in 0..nm {
            for k in 0..nb {
                fb_t[k * nm + m] = an.filterbank[m * nb + k] as f32;
            }
        }
        Self {
            dft_re: Tensor::from_f64(&[win, nb], &re),
            dft_im: Tensor::from_f64(&[win, nb], &im),
            filterbank_t: Tensor::new(&[nb, nm], fb_t),
            win,
            hop: an.framing.hop,
            offset: an.framing.offset,
            floor: cfg.log_floor,
        }
    }

    /// `wave: [B, L]` to log-mel `[B * L / hop, n_mels]`.
    pub fn apply<'g>(&self, wave: Var<'g, f32>) -> Var<'g, f32> {
        let g = wave.graph();
        let frames = wave.shape()[1] / self.hop;
        let x = wave.frames(self.win, self.hop, self.offset, frames);
        let re = x.matmul(g.constant(self.dft_re.clone()));
        let im = x.matmul(g.constant(self.dft_im.clone()));
        let mag = re
            .square()
            .add(im.square())
            .add_scalar(MAGNITUDE_EPS)
            .sqrt();
        mag.matmul(g.constant(self.filterbank_t.clone()))
            .clamp_min(self.floor)
            .ln()
    }
}
