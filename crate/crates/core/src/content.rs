//! Content branch: a convolutional encoder that halves the frame rate, and a
//! vector quantiser with EMA codebook learning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvSpec, Ctx, Init, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentEncoderConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub front_blocks: usize,
    pub front_kernel: usize,
    pub down_kernel: usize,
    pub down_stride: usize,
    pub post_blocks: usize,
    pub residual_blocks: usize,
    pub out_dim: usize,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 80,
            channels: 768,
            front_blocks: 2,
            front_kernel: 3,
            down_kernel: 4,
            down_stride: 2,
            post_blocks: 2,
            residual_blocks: 4,
            out_dim: 256,
        }
    }
}

impl ContentEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_stride != 2 {
            return Err(Error::Config("content downsample stride must be 2".into()));
        }
        if self.down_kernel < 2 || self.down_kernel % 2 != 0 {
            return Err(Error::Config(
                "content downsample kernel must be even".into(),
            ));
        }
        if self.front_kernel % 2 == 0 {
            return Err(Error::Config("content front kernel must be odd".into()));
        }
        if self.channels == 0 || self.out_dim == 0 {
            return Err(Error::Config("content widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub size: usize,
    pub dim: usize,
    pub beta: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Codes idle for this many consecutive epochs are re-seeded.
    pub dead_after_epochs: u32,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 1024,
            dim: 256,
            beta: 0.25,
            decay: 0.99,
            epsilon: 1e-5,
            dead_after_epochs: 3,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.dim == 0 {
            return Err(Error::Config(
                "codebook size and dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.decay) || self.epsilon <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config(
                "need 0 <= decay <= 1, epsilon > 0, beta >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `[ReLU -> conv k3 -> ReLU -> conv k1] + skip`.
#[derive(Debug, Clone)]
struct ResidualUnit {
    conv3: Conv1d,
    conv1: Conv1d,
}

#[derive(Debug, Clone)]
pub struct ContentEncoder {
    pub cfg: ContentEncoderConfig,
    front: Vec<Conv1d>,
    down: Conv1d,
    post: Vec<Conv1d>,
    residual: Vec<ResidualUnit>,
    proj: Conv1d,
}

impl ContentEncoder {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ContentEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let k = cfg.front_kernel;
        let front = (0..cfg.front_blocks)
            .map(|i| {
                let cin = if i == 0 { cfg.in_dim } else { c };
                Conv1d::new(
                    ps,
                    &format!("{prefix}.front{i}"),
                    ConvSpec::new(cin, c, k),
                    None,
                    rng,
                )
            })
            .collect::<Vec<_>>();
        let down_in = if cfg.front_blocks == 0 { cfg.in_dim } else { c };
        let down = Conv1d::new(
            ps,
            &format!("{prefix}.down"),
            ConvSpec::new(down_in, c, cfg.down_kernel)
                .stride(cfg.down_stride)
                .padding((cfg.down_kernel - cfg.down_stride) / 2),
            None,
            rng,
        );
        let post = (0..cfg.post_blocks)
            .map(|i| {
                Conv1d::new(
                    ps,
                    &format!("{prefix}.post{i}"),
                    ConvSpec::new(c, c, k),
                    None,
                    rng,
                )
            })
            .collect();
        let residual = (0..cfg.residual_blocks)
            .map(|i| ResidualUnit {
                conv3: Conv1d::new(
                    ps,
                    &format!("{prefix}.res{i}.conv3"),
                    ConvSpec::new(c, c, 3),
                    None,
                    rng,
                ),
                conv1: Conv1d::new(
                    ps,
                    &format!("{prefix}.res{i}.conv1"),
                    ConvSpec::new(c, c, 1),
                    None,
                    rng,
                ),
            })
            .collect();
        let proj = Conv1d::new(
            ps,
            &format!("{prefix}.proj"),
            ConvSpec::new(c, cfg.out_dim, 1),
            None,
            rng,
        );
        Self {
            cfg: cfg.clone(),
            front,
            down,
            post,
            residual,
            proj,
        }
    }

    /// `[B, in_dim, T]` with even `T` to `[B, out_dim, T / 2]`.
    pub fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, mel: Var<'a, F>) -> Var<'a, F> {
        let mut h = mel;
        for conv in &self.front {
            h = conv.forward(cx, h).relu();
        }
        h = self.down.forward(cx, h).relu();
        for conv in &self.post {
            h = conv.forward(cx, h).relu();
        }
        for unit in &self.residual {
            let r = unit.conv3.forward(cx, h.relu());
            h = h.add(unit.conv1.forward(cx, r.relu()));
        }
        self.proj.forward(cx, h.relu())
    }

    /// Single-utterance inference on row-major `[T, in_dim]` mel frames.
    /// Odd `T` is padded by repeating the final frame. Returns `[T / 2, out_dim]`
    /// (rounded up) and the original frame count.
    pub fn encode<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        mel: &[f64],
        frames: usize,
    ) -> Result<(Tensor<F>, usize)> {
        let x = mel_to_input::<F>(mel, frames, self.cfg.in_dim)?;
        let g = crate::nn::Graph::inference();
        let out = self.forward(Ctx::new(&g, ps), g.constant(x));
        let z = out.value().transpose12();
        let steps = z.dim(1);
        Ok((z.reshaped(&[steps, self.cfg.out_dim]), frames))
    }
}

/// Row-major `[T, D]` mel frames to an even-length `[1, D, T']` input.
pub fn mel_to_input<F: Scalar>(mel: &[f64], frames: usize, dim: usize) -> Result<Tensor<F>> {
    if frames == 0 {
        return Err(Error::Invalid("empty mel input".into()));
    }
    if mel.len() != frames * dim {
        return Err(Error::DimensionMismatch {
            expected: frames * dim,
            got: mel.len(),
        });
    }
    let padded = padded_frames(frames);
    let mut data = vec![F::zero(); dim * padded];
    for d in 0..dim {
        for t in 0..padded {
            data[d * padded + t] = F::c(mel[t.min(frames - 1) * dim + d]);
        }
    }
    Ok(Tensor::new(&[1, dim, padded], data))
}

pub fn padded_frames(frames: usize) -> usize {
    frames + frames % 2
}

/// Output of [`Codebook::quantize`] for a flat batch of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<F: Scalar> {
    pub indices: Vec<usize>,
    pub quantized: Tensor<F>,
    pub commitment_loss: f64,
    /// Always 0: codes are learned by EMA rather than by gradient.
    pub codebook_loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F: Scalar> {
    pub codes: Tensor<F>,
    pub usage_counts: Vec<u64>,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sums: Vec<f64>,
    pub idle_epochs: Vec<u32>,
}

impl<F: Scalar> Codebook<F> {
    pub fn random<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Self {
        let codes = Init::FanIn(dim).sample(&[size, dim], rng);
        Self::from_codes(codes)
    }

    /// EMA statistics start at one pseudo-count per code.
    pub fn from_codes(codes: Tensor<F>) -> Self {
        assert_eq!(codes.rank(), 2, "codes must be [K, D]");
        let size = codes.dim(0);
        Self {
            ema_embed_sums: codes.to_f64_vec(),
            ema_cluster_size: vec![1.0; size],
            usage_counts: vec![0; size],
            idle_epochs: vec![0; size],
            codes,
        }
    }

    pub fn size(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn code(&self, k: usize) -> &[F] {
        let d = self.dim();
        &self.codes.data()[k * d..(k + 1) * d]
    }

    /// Nearest code by squared Euclidean distance; ties go to the lower index.
    pub fn nearest(&self, z: &[F]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.size() {
            let dist: f64 = z
                .iter()
                .zip(self.code(k))
                .map(|(&a, &b)| {
                    let d = a.f64() - b.f64();
                    d * d
                })
                .sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        best.1
    }

    /// Snap each row of `z: [N, D]` to its nearest code and record usage.
    pub fn quantize(&mut self, z: &Tensor<F>) -> Result<QuantizationResult<F>> {
        let res = self.lookup(z)?;
        for &k in &res.indices {
            self.usage_counts[k] += 1;
        }
        Ok(res)
    }

    /// [`Codebook::quantize`] without touching usage statistics.
    pub fn lookup(&self, z: &Tensor<F>) -> Result<QuantizationResult<F>> {
        let d = self.dim();
        if z.rank() != 2 || z.dim(1) != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: z.shape().last().copied().unwrap_or(0),
            });
        }
        if !z.all_finite() {
            return Err(Error::Invalid("non-finite latent".into()));
        }
        let n = z.dim(0);
        let mut indices = Vec::with_capacity(n);
        let mut quantized = Vec::with_capacity(n * d);
        let mut commit = 0.0;
        for row in z.data().chunks(d) {
            let k = self.nearest(row);
            let code = self.code(k);
            commit += row
                .iter()
                .zip(code)
                .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>();
            indices.push(k);
            quantized.extend_from_slice(code);
        }
        Ok(QuantizationResult {
            perplexity: perplexity(&indices, self.size()),
            indices,
            quantized: Tensor::new(&[n, d], quantized),
            commitment_loss: if n == 0 { 0.0 } else { commit / n as f64 },
            codebook_loss: 0.0,
        })
    }

    /// One EMA step of the codebook towards the mean of its assigned latents.
    pub fn update_ema(&mut self, z: &Tensor<F>, indices: &[usize], decay: f64, eps: f64) {
        let (k_total, d) = (self.size(), self.dim());
        assert_eq!(z.dim(0), indices.len());
        if decay >= 1.0 {
            return;
        }
        let mut counts = vec![0.0; k_total];
        let mut sums = vec![0.0; k_total * d];
        for (row, &k) in z.data().chunks(d).zip(indices) {
            counts[k] += 1.0;
            for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(row) {
                *s += v.f64();
            }
        }
        for k in 0..k_total {
            self.ema_cluster_size[k] = decay * self.ema_cluster_size[k] + (1.0 - decay) * counts[k];
        }
        for (e, s) in self.ema_embed_sums.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        let n: f64 = self.ema_cluster_size.iter().sum();
        let codes = self.codes.data_mut();
        for k in 0..k_total {
            let smoothed = (self.ema_cluster_size[k] + eps) / (n + k_total as f64 * eps) * n;
            for j in 0..d {
                codes[k * d + j] = F::c(self.ema_embed_sums[k * d + j] / smoothed);
            }
        }
    }

    /// Close an epoch: codes idle for `dead_after` consecutive epochs are
    /// re-seeded to random rows of `latents`. Returns the re-seeded indices.
    pub fn end_epoch<R: Rng>(
        &mut self,
        latents: &Tensor<F>,
        dead_after: u32,
        rng: &mut R,
    ) -> Vec<usize> {
        let d = self.dim();
        let mut reseeded = Vec::new();
        for k in 0..self.size() {
            if self.usage_counts[k] > 0 {
                self.idle_epochs[k] = 0;
            } else {
                self.idle_epochs[k] += 1;
            }
            if dead_after > 0 && self.idle_epochs[k] >= dead_after && latents.dim(0) > 0 {
                let row = rng.gen_range(0..latents.dim(0));
                let src = &latents.data()[row * d..(row + 1) * d];
                self.codes.data_mut()[k * d..(k + 1) * d].copy_from_slice(src);
                self.ema_cluster_size[k] = 1.0;
                for (e, v) in self.ema_embed_sums[k * d..(k + 1) * d].iter_mut().zip(src) {
                    *e = v.f64();
                }
                self.idle_epochs[k] = 0;
                reseeded.push(k);
            }
        }
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
        reseeded
    }
}

/// `exp` of the entropy of the empirical code distribution.
pub fn perplexity(indices: &[usize], size: usize) -> f64 {
    if indices.is_empty() {
        return 1.0;
    }
    let mut counts = vec![0usize; size];
    for &k in indices {
        counts[k] += 1;
    }
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Quantise an encoder output `[B, D, T']` inside a graph.
///
/// Returns the straight-through quantised tensor in the same layout, the
/// commitment loss `mean_t ||z_t - sg(q_t)||^2` and the lookup result.
pub fn quantize_var<'g, F: Scalar>(
    z: Var<'g, F>,
    codebook: &Codebook<F>,
) -> Result<(Var<'g, F>, Var<'g, F>, QuantizationResult<F>)> {
    let shape = z.shape();
    let (b, d, t) = (shape[0], shape[1], shape[2]);
    let flat = z.transpose12().reshape(&[b * t, d]);
    let res = codebook.lookup(&flat.value())?;
    let q_const = flat.graph().constant(res.quantized.clone());
    let commit = flat.sub(q_const).square().sum().scale(1.0 / (b * t) as f64);
    let st = flat
        .straight_through(res.quantized.clone())
        .reshape(&[b, t, d])
        .transpose12();
    Ok((st, commit, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
    }

    fn small_cfg() -> ContentEncoderConfig {
        ContentEncoderConfig {
            in_dim: 6,
            channels: 8,
            out_dim: 5,
            ..Default::default()
        }
    }

    #[test]
    fn halves_frame_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        let enc = ContentEncoder::new(&mut ps, "c", &small_cfg(), &mut rng);
        for t in [2usize, 3, 10, 200, 201] {
            let mel = vec![0.1; t * 6];
            let (z, orig) = enc.encode(&ps, &mel, t).unwrap();
            assert_eq!(z.shape(), [t.div_ceil(2), 5]);
            assert_eq!(orig, t);
        }
        assert!(enc.encode(&ps, &[], 0).is_err());
    }

    #[test]
    fn odd_input_repeats_last_frame() {
        let x = mel_to_input::<f64>(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        assert_eq!(x.shape(), [1, 2, 4]);
        assert_eq!(x.data(), &[1.0, 3.0, 5.0, 5.0, 2.0, 4.0, 6.0, 6.0]);
    }

    /// Central differences at h = 1e-3 on a probed first-layer weight.
    #[test]
    fn weight_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let enc = ContentEncoder::new(&mut ps, "c", &small_cfg(), &mut rng);
        let mel = Tensor::<f64>::zeros(&[1, 6, 8]);
        let probe = ps.id("c.front0.bias").unwrap();
        let w = ps.id("c.res1.conv3.weight").unwrap();
        let loss = |ps: &ParamStore<f64>| {
            let g = Graph::inference();
            enc.forward(Ctx::new(&g, ps), g.constant(mel.clone()))
                .sum()
                .value()
                .item()
        };
        let g = Graph::with_trainable(ps.ids().collect());
        let out = enc.forward(Ctx::new(&g, &ps), g.constant(mel.clone()));
        assert!(out.value().all_finite());
        let grads = g.backward(out.sum());
        for id in [probe, w] {
            let analytic = grads.param(id).unwrap().clone();
            for i in [0, 3, analytic.len() - 1] {
                let h = 1e-3;
                let mut p = ps.clone();
                p.value_mut(id).data_mut()[i] += h;
                let up = loss(&p);
                p.value_mut(id).data_mut()[i] -= 2.0 * h;
                let down = loss(&p);
                let fd = (up - down) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-8),
                    "{i}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn exact_match_has_zero_commitment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = Codebook::<f64>::from_codes(gaussian(&[16, 4], &mut rng));
        let z = Tensor::new(&[1, 4], cb.code(7).to_vec());
        let r = cb.lookup(&z).unwrap();
        assert_eq!(r.indices, vec![7]);
        assert_eq!(r.commitment_loss, 0.0);
        assert_eq!(r.codebook_loss, 0.0);
    }

    #[test]
    fn ties_pick_lower_index() {
        let codes = Tensor::new(&[3, 2], vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0]);
        let cb = Codebook::<f64>::from_codes(codes);
        let r = cb.lookup(&Tensor::new(&[1, 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(r.indices, vec![1]);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let cb = Codebook::<f64>::from_codes(Tensor::zeros(&[4, 3]));
        assert!(matches!(
            cb.lookup(&Tensor::zeros(&[2, 5])),
            Err(Error::DimensionMismatch {
                expected: 3,
                got: 5
            })
        ));
    }

    #[test]
    fn quantized_rows_equal_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = Codebook::<f32>::random(64, 8, &mut rng);
        let z = gaussian(&[50, 8], &mut rng).cast::<f32>();
        let r = cb.quantize(&z).unwrap();
        for (t, &k) in r.indices.iter().enumerate() {
            assert_eq!(&r.quantized.data()[t * 8..(t + 1) * 8], cb.code(k));
        }
        assert_eq!(cb.usage_counts.iter().sum::<u64>(), 50);
        assert!(r.perplexity >= 1.0 && r.perplexity <= 64.0);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[3, 3, 3], 1024), 1.0);
        let all: Vec<usize> = (0..1024).collect();
        assert!((perplexity(&all, 1024) - 1024.0).abs() < 1e-9);
        assert!((perplexity(&[0, 0, 1, 1], 1024) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ema_converges_to_assigned_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cb = Codebook::<f64>::from_codes(gaussian(&[8, 4], &mut rng));
        let z = gaussian(&[64, 4], &mut rng);
        let mean: Vec<f64> = (0..4)
            .map(|j| (0..64).map(|i| z.data()[i * 4 + j]).sum::<f64>() / 64.0)
            .collect();
        for _ in 0..500 {
            cb.update_ema(&z, &[0; 64], 0.99, 1e-5);
        }
        for j in 0..4 {
            assert!(
                (cb.code(0)[j] - mean[j]).abs() < 1e-3,
                "{} vs {}",
                cb.code(0)[j],
                mean[j]
            );
        }
    }

    #[test]
    fn ema_without_decay_is_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cb = Codebook::<f64>::from_codes(gaussian(&[8, 4], &mut rng));
        let before = cb.clone();
        cb.update_ema(&gaussian(&[10, 4], &mut rng), &[1; 10], 1.0, 1e-5);
        assert_eq!(cb, before);
    }

    #[test]
    fn unused_codes_drift_less_than_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cb = Codebook::<f64>::from_codes(gaussian(&[1024, 16], &mut rng));
        let z = gaussian(&[128, 16], &mut rng);
        let idx: Vec<usize> = (0..128).map(|i| i % 4).collect();
        for _ in 0..5 {
            let before = cb.codes.clone();
            cb.update_ema(&z, &idx, 0.99, 1e-5);
            for k in 4..1024 {
                for j in 0..16 {
                    let (a, b) = (before.data()[k * 16 + j], cb.codes.data()[k * 16 + j]);
                    assert!((a - b).abs() < 1e-6, "code {k}: {a} -> {b}");
                }
            }
        }
    }

    #[test]
    fn idle_codes_are_reseeded_after_three_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cb = Codebook::<f64>::from_codes(Tensor::new(&[2, 1], vec![0.0, 100.0]));
        let z = Tensor::new(&[3, 1], vec![0.1, -0.2, 0.3]);
        for epoch in 0..3 {
            cb.quantize(&z).unwrap();
            let re = cb.end_epoch(&z, 3, &mut rng);
            assert_eq!(re.is_empty(), epoch < 2);
        }
        assert!(z.data().contains(&cb.code(1)[0]));
        assert_eq!(cb.idle_epochs, vec![0, 0]);
    }

    #[test]
    fn straight_through_gradient_reaches_latents_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = Codebook::<f64>::from_codes(gaussian(&[32, 4], &mut rng));
        let z0 = gaussian(&[2, 4, 5], &mut rng);
        let weights = gaussian(&[2, 4, 5], &mut rng);
        let g = Graph::inference();
        let z = g.input(z0);
        let (q, _, res) = quantize_var(z, &cb).unwrap();
        let w = g.constant(weights);
        let loss = q.mul(w).tanh().sum();
        let grads = g.backward(loss);
        let gz = grads.of(z).unwrap();
        // d/dq sum tanh(w q) = w (1 - tanh^2(w q)), evaluated at the quantised values.
        let qv = q.value();
        for i in 0..gz.len() {
            let a = w.value().data()[i];
            let expect = a * (1.0 - (a * qv.data()[i]).tanh().powi(2));
            assert!((gz.data()[i] - expect).abs() < 1e-12);
        }
        assert_eq!(res.indices.len(), 10);
    }
}
