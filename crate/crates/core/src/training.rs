//! Adversarial training: least-squares GAN, feature matching, mel L1 and VQ
//! commitment losses, AdamW with per-epoch exponential learning-rate decay.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::normalize_energy_mean;
use crate::features::{
    compute_mel_with, FeatureConfig, LogF0Stats, MelAnalyzer, UtteranceFeatures,
};
use crate::io::{meta_u64, Archive, ArrayData};
use crate::model::{Batch, DiffMel, Model, ModelConfig};
use crate::nn::{AdamW, Ctx, FlushDenormals, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{derive_rng, step_rng};
use crate::synthesis::{BranchOutput, SAMPLES_PER_FRAME};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_mel: f64,
    pub lambda_fm: f64,
    pub lambda_commit: f64,
    /// Frames per training crop (rounded down to even).
    pub crop_frames: usize,
    pub checkpoint_every_epochs: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr0: 2e-4,
            lr_decay_per_epoch: 0.999,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            lambda_mel: 45.0,
            lambda_fm: 2.0,
            lambda_commit: 0.25,
            crop_frames: 100,
            checkpoint_every_epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config("need 0 < lr_decay_per_epoch <= 1".into()));
        }
        if [self.lambda_mel, self.lambda_fm, self.lambda_commit]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.crop_frames < 2 || self.lr0 <= 0.0 {
            return Err(Error::Config(
                "need batch_size >= 1, crop_frames >= 2, lr0 > 0".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form `lr0 * decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.lr0 * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub gen_adv: f64,
    pub disc_adv: f64,
    pub mel_l1: f64,
    pub feature_match: f64,
    pub commit: f64,
    pub total_gen: f64,
    pub total_disc: f64,
    pub perplexity: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_disc: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.gen_adv,
            self.disc_adv,
            self.mel_l1,
            self.feature_match,
            self.commit,
            self.total_gen,
            self.total_disc,
            self.grad_norm_gen,
            self.grad_norm_disc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// `gen_adv + l_mel * mel + l_fm * fm + l_commit * commit`.
    pub fn composed_total(&self, cfg: &TrainConfig) -> f64 {
        self.gen_adv
            + cfg.lambda_mel * self.mel_l1
            + cfg.lambda_fm * self.feature_match
            + cfg.lambda_commit * self.commit
    }
}

/// `sum_b mean((D(x) - 1)^2) + mean(D(G)^2)`.
pub fn disc_adversarial_loss<'g>(real: &[Var<'g, f32>], fake: &[Var<'g, f32>]) -> Var<'g, f32> {
    assert_eq!(real.len(), fake.len(), "branch count mismatch");
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push(r.add_scalar(-1.0).square().mean());
        terms.push(f.square().mean());
    }
    sum_vars(&terms)
}

/// `sum_b mean((D(G) - 1)^2)`.
pub fn gen_adversarial_loss<'g>(fake: &[Var<'g, f32>]) -> Var<'g, f32> {
    let terms: Vec<_> = fake
        .iter()
        .map(|f| f.add_scalar(-1.0).square().mean())
        .collect();
    sum_vars(&terms)
}

/// `(gen_adv, disc_adv)` from per-branch logits.
pub fn adversarial_losses<'g>(
    real: &[Var<'g, f32>],
    fake: &[Var<'g, f32>],
) -> (Var<'g, f32>, Var<'g, f32>) {
    (
        gen_adversarial_loss(fake),
        disc_adversarial_loss(real, fake),
    )
}

/// Sum over branches and layers of the per-layer mean absolute difference.
pub fn feature_matching_loss<'g>(
    real: &[Vec<Var<'g, f32>>],
    fake: &[Vec<Var<'g, f32>>],
) -> Result<Var<'g, f32>> {
    if real.len() != fake.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} feature branches",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::new();
    for (rb, fb) in real.iter().zip(fake) {
        if rb.len() != fb.len() {
            return Err(Error::LengthMismatch(format!(
                "{} vs {} feature layers",
                rb.len(),
                fb.len()
            )));
        }
        for (r, f) in rb.iter().zip(fb) {
            if r.shape() != f.shape() {
                return Err(Error::LengthMismatch(format!(
                    "feature shapes {:?} vs {:?}",
                    r.shape(),
                    f.shape()
                )));
            }
            terms.push(r.sub(*f).abs().mean());
        }
    }
    if terms.is_empty() {
        return Err(Error::Invalid("no feature maps".into()));
    }
    Ok(sum_vars(&terms))
}

fn sum_vars<'g>(terms: &[Var<'g, f32>]) -> Var<'g, f32> {
    let mut it = terms.iter().copied();
    let first = it.next().expect("at least one term");
    it.fold(first, |a, b| a.add(b))
}

/// Mean absolute difference between the log-mel spectrograms of two
/// equal-length waveforms.
pub fn mel_reconstruction_loss(fake: &[f32], real: &[f32], analyzer: &MelAnalyzer) -> Result<f64> {
    if fake.len() != real.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} samples",
            fake.len(),
            real.len()
        )));
    }
    let mel = |s: &[f32]| compute_mel_with(analyzer, &AudioClip::new(s.to_vec(), "", "")?);
    let (a, b) = (mel(fake)?, mel(real)?);
    let n = a.frames.len() as f64;
    Ok(a.frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Model inputs for one utterance.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub utterance_id: String,
    pub speaker_id: String,
    pub samples: Vec<f32>,
    /// `[frames, n_mels]`
    pub mel: Vec<f64>,
    pub frames: usize,
    pub f0n: Vec<f64>,
    pub energy_n: Vec<f64>,
    pub xvector: Vec<f64>,
}

impl TrainingItem {
    pub fn new(clip: &AudioClip, feats: &UtteranceFeatures, xvector: Vec<f64>) -> Result<Self> {
        let frames = feats.n_frames();
        if clip.samples.len() != frames * SAMPLES_PER_FRAME {
            return Err(Error::LengthMismatch(format!(
                "{}: {} samples for {frames} frames",
                clip.utterance_id,
                clip.samples.len()
            )));
        }
        Ok(Self {
            utterance_id: feats.utterance_id.clone(),
            speaker_id: feats.speaker_id.clone(),
            samples: clip.samples.clone(),
            mel: feats.mel.frames.clone(),
            frames,
            f0n: normalized_f0_or_zeros(&feats.prosody),
            energy_n: normalize_energy_mean(&feats.prosody.energy)?,
            xvector,
        })
    }
}

/// Log-F0 standardised per utterance; all zeros when fewer than two frames are voiced.
pub fn normalized_f0_or_zeros(track: &crate::features::ProsodyTrack) -> Vec<f64> {
    match LogF0Stats::of(track) {
        Ok(stats) => stats.apply(track),
        Err(_) => vec![0.0; track.len()],
    }
}

/// Random crops assembled into a [`Batch`].
pub fn make_batch<R: Rng>(
    items: &[TrainingItem],
    batch: usize,
    crop: usize,
    analyzer: &MelAnalyzer,
    rng: &mut R,
) -> Batch {
    let n_mels = analyzer.cfg.n_mels;
    let dim = items[0].xvector.len();
    let len = crop * SAMPLES_PER_FRAME;
    let mut mel = vec![0.0f32; batch * n_mels * crop];
    let mut prosody = Vec::with_capacity(batch * crop * 2);
    let mut global = Vec::with_capacity(batch * dim);
    let mut wave = Vec::with_capacity(batch * len);
    let mut target = Vec::with_capacity(batch * crop * n_mels);
    for b in 0..batch {
        let item = &items[rng.gen_range(0..items.len())];
        let start = rng.gen_range(0..=item.frames - crop);
        for m in 0..n_mels {
            for t in 0..crop {
                mel[(b * n_mels + m) * crop + t] = item.mel[(start + t) * n_mels + m] as f32;
            }
        }
        for t in start..start + crop {
            prosody.push(item.f0n[t] as f32);
            prosody.push(item.energy_n[t] as f32);
        }
        global.extend(item.xvector.iter().map(|&v| v as f32));
        let samples = &item.samples[start * SAMPLES_PER_FRAME..start * SAMPLES_PER_FRAME + len];
        wave.extend_from_slice(samples);
        target.extend(
            analyzer
                .log_mel(samples, crop)
                .into_iter()
                .map(|v| v as f32),
        );
    }
    Batch {
        mel: Tensor::new(&[batch, n_mels, crop], mel),
        prosody: Tensor::new(&[batch, crop, 2], prosody),
        global: Tensor::new(&[batch, dim], global),
        wave: Tensor::new(&[batch, 1, len], wave),
        target_mel: Tensor::new(&[batch * crop, n_mels], target),
    }
}

fn grad_norm(grads: &Gradients<f32>) -> f64 {
    grads
        .params()
        .iter()
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt()
}

fn logits<'g>(outs: &[BranchOutput<'g, f32>]) -> Vec<Var<'g, f32>> {
    outs.iter().map(|o| o.logits).collect()
}

fn features<'g>(outs: &[BranchOutput<'g, f32>]) -> Vec<Vec<Var<'g, f32>>> {
    outs.iter().map(|o| o.features.clone()).collect()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt_gen: AdamW<f32>,
    pub opt_disc: AdamW<f32>,
    /// Steps completed so far.
    pub step: u64,
    items: Vec<TrainingItem>,
    crop: usize,
    analyzer: MelAnalyzer,
    diff_mel: DiffMel,
    gen_ids: HashSet<ParamId>,
    disc_ids: HashSet<ParamId>,
    last_latents: Option<Tensor<f32>>,
}

impl Trainer {
    pub fn new(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        features: &FeatureConfig,
        items: Vec<TrainingItem>,
    ) -> Result<Self> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        let shortest = items.iter().map(|i| i.frames).min().unwrap_or(0);
        let crop = cfg.crop_frames.min(shortest) & !1;
        if crop < 2 {
            return Err(Error::Invalid(format!(
                "shortest utterance has {shortest} frames, need at least 2"
            )));
        }
        let model = Model::new(model_cfg, cfg.seed)?;
        if items
            .iter()
            .any(|i| i.xvector.len() != model_cfg.generator.global_cond_dim)
        {
            return Err(Error::DimensionMismatch {
                expected: model_cfg.generator.global_cond_dim,
                got: items
                    .iter()
                    .map(|i| i.xvector.len())
                    .find(|&d| d != model_cfg.generator.global_cond_dim)
                    .unwrap_or(0),
            });
        }
        let adam = || AdamW::new(cfg.lr0, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Ok(Self {
            gen_ids: model.generator_ids(),
            disc_ids: model.discriminator_ids(),
            cfg: cfg.clone(),
            model,
            opt_gen: adam(),
            opt_disc: adam(),
            step: 0,
            items,
            crop,
            analyzer: MelAnalyzer::new(features),
            diff_mel: DiffMel::new(features),
            last_latents: None,
        })
    }

    pub fn crop_frames(&self) -> usize {
        self.crop
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.items.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    /// One discriminator update followed by one generator update and an EMA
    /// codebook update.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        let epoch = self.epoch();
        let lr = self.cfg.lr_at_epoch(epoch);
        self.opt_gen.lr = lr;
        self.opt_disc.lr = lr;
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = make_batch(
            &self.items,
            self.cfg.batch_size,
            self.crop,
            &self.analyzer,
            &mut rng,
        );
        let (b, len) = (batch.wave.dim(0), batch.wave.dim(2));

        // The snapshots and graph hold references to parameter buffers, so the
        // generator update waits until this block has released them.
        let (mut report, gen_grads, latents, quant) = {
            let before = self.model.store.clone();
            let after: ParamStore<f32>;
            let gg = Graph::with_trainable(self.gen_ids.clone());
            let pass = self.model.generate(Ctx::new(&gg, &before), &batch)?;

            let (disc_adv, disc_grads) = {
                let dg = Graph::with_trainable(self.disc_ids.clone());
                let cx = Ctx::new(&dg, &self.model.store);
                let d = &self.model.discriminators;
                let real = d.discriminate(cx, dg.constant(batch.wave.clone()));
                let fake = d.discriminate(cx, dg.constant(pass.wave.value().as_ref().clone()));
                let loss = disc_adversarial_loss(&logits(&real), &logits(&fake));
                let value = loss.value().item() as f64;
                (value, dg.backward(loss))
            };
            let grad_norm_disc = grad_norm(&disc_grads);
            if !disc_adv.is_finite() || !grad_norm_disc.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("disc_adv={disc_adv} grad_norm_disc={grad_norm_disc}"),
                });
            }
            self.opt_disc.step(&mut self.model.store, &disc_grads);
            drop(disc_grads);

            after = self.model.store.clone();
            let cx = Ctx::new(&gg, &after);
            let d = &self.model.discriminators;
            let real = d.discriminate(cx, gg.constant(batch.wave.clone()));
            let fake = d.discriminate(cx, pass.wave);
            let gen_adv = gen_adversarial_loss(&logits(&fake));
            let fm = feature_matching_loss(&features(&real), &features(&fake))?;
            let mel = self
                .diff_mel
                .apply(pass.wave.reshape(&[b, len]))
                .sub(gg.constant(batch.target_mel.clone()))
                .abs()
                .mean();
            let total = gen_adv
                .add(mel.scale(self.cfg.lambda_mel))
                .add(fm.scale(self.cfg.lambda_fm))
                .add(pass.commit.scale(self.cfg.lambda_commit));
            let item = |v: Var<'_, f32>| v.value().item() as f64;
            let (gen_adv_v, fm_v, mel_v, commit_v) =
                (item(gen_adv), item(fm), item(mel), item(pass.commit));
            let gen_grads = gg.backward(total);
            let report = LossReport {
                step,
                epoch,
                lr,
                gen_adv: gen_adv_v,
                disc_adv,
                mel_l1: mel_v,
                feature_match: fm_v,
                commit: commit_v,
                total_gen: gen_adv_v
                    + self.cfg.lambda_mel * mel_v
                    + self.cfg.lambda_fm * fm_v
                    + self.cfg.lambda_commit * commit_v,
                total_disc: disc_adv,
                perplexity: pass.quant.perplexity,
                grad_norm_gen: 0.0,
                grad_norm_disc,
            };
            (report, gen_grads, pass.latents, pass.quant)
        };
        report.grad_norm_gen = grad_norm(&gen_grads);
        if !report.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: serde_json::to_string(&report).unwrap_or_default(),
            });
        }
        self.opt_gen.step(&mut self.model.store, &gen_grads);

        let cb = &mut self.model.codebook;
        for &k in &quant.indices {
            cb.usage_counts[k] += 1;
        }
        let cbc = &self.model.cfg.codebook;
        cb.update_ema(&latents, &quant.indices, cbc.decay, cbc.epsilon);
        self.last_latents = Some(latents);

        self.step += 1;
        if self.step % self.steps_per_epoch() == 0 {
            self.end_epoch(epoch);
        }
        Ok(report)
    }

    fn end_epoch(&mut self, epoch: u64) {
        if let Some(latents) = &self.last_latents {
            let mut rng = derive_rng(self.cfg.seed, "codebook-reseed", &epoch.to_string());
            let dead_after = self.model.cfg.codebook.dead_after_epochs;
            self.model.codebook.end_epoch(latents, dead_after, &mut rng);
        }
    }

    pub fn checkpoint_archive(&self) -> Archive {
        let meta = json!({
            "step": self.step,
            "epoch": self.epoch(),
            "opt_gen_step": self.opt_gen.step,
            "opt_disc_step": self.opt_disc.step,
            "train": self.cfg,
            "model": self.model.cfg,
        });
        let mut a = Archive::new("checkpoint", meta);
        self.model.write_arrays(&mut a);
        for (tag, opt) in [("opt_gen", &self.opt_gen), ("opt_disc", &self.opt_disc)] {
            let mut moments: Vec<_> = opt.moments().collect();
            moments.sort_by_key(|(id, _, _)| *id);
            for (id, m, v) in moments {
                let name = self.model.store.name(id);
                a.push(
                    format!("{tag}/m/{name}"),
                    m.shape(),
                    ArrayData::F32(m.data().to_vec()),
                );
                a.push(
                    format!("{tag}/v/{name}"),
                    v.shape(),
                    ArrayData::F32(v.data().to_vec()),
                );
            }
        }
        if let Some(l) = &self.last_latents {
            a.push("last_latents", l.shape(), ArrayData::F32(l.data().to_vec()));
        }
        a
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint_archive().write(path)
    }

    /// Restore parameters, codebook, optimiser moments and the step counter.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let origin = path.display().to_string();
        let a = Archive::read(path)?;
        a.expect_kind("checkpoint", &origin)?;
        let model_cfg: ModelConfig = serde_json::from_value(a.meta["model"].clone())
            .map_err(|e| Error::format(&origin, format!("model config: {e}")))?;
        if model_cfg != self.model.cfg {
            return Err(Error::format(
                &origin,
                "checkpoint was written for a different model configuration",
            ));
        }
        self.model.read_arrays(&a, &origin)?;
        self.step = meta_u64(&a.meta, "step", &origin)?;
        self.opt_gen.step = meta_u64(&a.meta, "opt_gen_step", &origin)?;
        self.opt_disc.step = meta_u64(&a.meta, "opt_disc_step", &origin)?;
        let ids: Vec<ParamId> = self.model.store.ids().collect();
        for (tag, opt) in [
            ("opt_gen", &mut self.opt_gen),
            ("opt_disc", &mut self.opt_disc),
        ] {
            for &id in &ids {
                let name = self.model.store.name(id);
                let (Ok((shape, m)), Ok((_, v))) = (
                    a.f32s(&format!("{tag}/m/{name}"), &origin),
                    a.f32s(&format!("{tag}/v/{name}"), &origin),
                ) else {
                    continue;
                };
                opt.set_moments(
                    id,
                    Tensor::new(shape, m.to_vec()),
                    Tensor::new(shape, v.to_vec()),
                );
            }
        }
        self.last_latents = a
            .f32s("last_latents", &origin)
            .ok()
            .map(|(s, d)| Tensor::new(s, d.to_vec()));
        Ok(())
    }

    /// Train to `cfg.epochs`, writing checkpoints, the loss log and (on
    /// numerical failure) a diagnostic snapshot under `run_dir`. Resumes from
    /// the newest checkpoint when one exists.
    pub fn run(
        &mut self,
        run_dir: &Path,
        mut on_report: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let _ftz = FlushDenormals::enable();
        let ckpt_dir = run_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let log_path = run_dir.join("losses.csv");
        if let Some(latest) = latest_checkpoint(&ckpt_dir)? {
            self.load_checkpoint(&latest)?;
            log::info!("resumed from {} at step {}", latest.display(), self.step);
        } else {
            self.save_checkpoint(&checkpoint_path(&ckpt_dir, 0))?;
        }
        let mut log = LossLog::open(&log_path, self.step)?;
        let mut reports = Vec::new();
        let total = self.total_steps();
        let every = self.cfg.checkpoint_every_epochs.max(1);
        while self.step < total {
            let report = match self.train_step() {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { step, detail }) => {
                    let diag = json!({ "step": step, "epoch": self.epoch(), "detail": detail });
                    let path = run_dir.join("diagnostic.json");
                    fs::write(&path, serde_json::to_vec_pretty(&diag)?)
                        .map_err(|e| Error::io(&path, e))?;
                    return Err(Error::NonFiniteLoss { step, detail });
                }
                Err(e) => return Err(e),
            };
            log.append(&report)?;
            on_report(&report);
            reports.push(report);
            let spe = self.steps_per_epoch();
            if self.step % spe == 0 && (self.epoch() % every == 0 || self.step == total) {
                self.save_checkpoint(&checkpoint_path(&ckpt_dir, self.step))?;
            }
        }
        Ok(reports)
    }
}

/// The network stored in a training checkpoint, built from its own config.
pub fn load_model(path: &Path) -> Result<Model> {
    let origin = path.display().to_string();
    let a = Archive::read(path)?;
    a.expect_kind("checkpoint", &origin)?;
    let cfg: ModelConfig = serde_json::from_value(a.meta["model"].clone())
        .map_err(|e| Error::format(&origin, format!("model config: {e}")))?;
    let mut model = Model::new(&cfg, 0)?;
    model.read_arrays(&a, &origin)?;
    Ok(model)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().map_or(true, |(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub const LOSS_LOG_HEADER: [&str; 13] = [
    "step",
    "epoch",
    "lr",
    "gen_adv",
    "disc_adv",
    "mel_l1",
    "feature_match",
    "commit",
    "total_gen",
    "total_disc",
    "perplexity",
    "grad_norm_gen",
    "grad_norm_disc",
];

/// Append-only CSV of [`LossReport`] rows.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    /// Opens `path` for appending, dropping any rows at or after `resume_step`
    /// (left behind by an interrupted run).
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            for r in read_loss_log(path)? {
                if r.step < resume_step {
                    kept.push(r);
                }
            }
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        writer.write_record(LOSS_LOG_HEADER)?;
        let mut log = Self {
            path: path.to_path_buf(),
            writer,
        };
        for r in &kept {
            log.write(r)?;
        }
        log.writer.flush().map_err(|e| Error::io(&log.path, e))?;
        Ok(log)
    }

    fn write(&mut self, r: &LossReport) -> Result<()> {
        self.writer.serialize(r)?;
        Ok(())
    }

    pub fn append(&mut self, r: &LossReport) -> Result<()> {
        self.write(r)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
