//! GAN vocoder: a transposed-convolution generator conditioned on content,
//! prosody and a speaker vector, and the multi-period / multi-scale
//! discriminators used to train it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Conv1d, ConvSpec, ConvTranspose1d, Ctx, Graph, Init, Linear, ParamStore, Scalar, Tensor, Var,
};

pub const SAMPLES_PER_FRAME: usize = 160;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub upsample_factors: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub base_channels: usize,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
    pub global_cond_dim: usize,
    pub local_cond_dim: usize,
    pub pre_kernel: usize,
    pub post_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            upsample_factors: vec![10, 4, 4],
            upsample_kernels: vec![20, 8, 8],
            base_channels: 512,
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5]; 3],
            global_cond_dim: 192,
            local_cond_dim: 512,
            pre_kernel: 7,
            post_kernel: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn hop(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop() != SAMPLES_PER_FRAME {
            return Err(Error::Config(format!(
                "upsample factors multiply to {}, need {SAMPLES_PER_FRAME}",
                self.hop()
            )));
        }
        if self.upsample_kernels.len() != self.upsample_factors.len()
            || self
                .upsample_factors
                .iter()
                .zip(&self.upsample_kernels)
                .any(|(u, k)| *k != 2 * u)
        {
            return Err(Error::Config(
                "each upsample kernel must be twice its factor".into(),
            ));
        }
        if self.resblock_kernels.len() != self.resblock_dilations.len()
            || self.resblock_kernels.is_empty()
        {
            return Err(Error::Config("one dilation set per resblock kernel".into()));
        }
        if self.base_channels >> self.upsample_factors.len() == 0 {
            return Err(Error::Config(
                "base_channels too small for the number of stages".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    dilated: Vec<Conv1d>,
    plain: Vec<Conv1d>,
}

impl ResBlock {
    fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, mut x: Var<'a, F>) -> Var<'a, F> {
        for (c1, c2) in self.dilated.iter().zip(&self.plain) {
            let h = c1.forward(cx, x.leaky_relu(LRELU));
            let h = c2.forward(cx, h.leaky_relu(LRELU));
            x = x.add(h);
        }
        x
    }
}

const LRELU: f64 = 0.1;
const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pre: Conv1d,
    global: Linear,
    ups: Vec<ConvTranspose1d>,
    stages: Vec<Vec<ResBlock>>,
    post: Conv1d,
}

impl Generator {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        prefix: &str,
        cfg: &GeneratorConfig,
        rng: &mut R,
    ) -> Self {
        let base = cfg.base_channels;
        let pre = Conv1d::new(
            ps,
            &format!("{prefix}.pre"),
            ConvSpec::new(cfg.local_cond_dim, base, cfg.pre_kernel),
            None,
            rng,
        );
        let global = Linear::new(
            ps,
            &format!("{prefix}.global"),
            cfg.global_cond_dim,
            base,
            rng,
        );
        let mut ups = Vec::new();
        let mut stages = Vec::new();
        let mut ch = base;
        for (i, (&u, &k)) in cfg
            .upsample_factors
            .iter()
            .zip(&cfg.upsample_kernels)
            .enumerate()
        {
            let out = ch / 2;
            ups.push(ConvTranspose1d::new(
                ps,
                &format!("{prefix}.up{i}"),
                ch,
                out,
                k,
                u,
                Init::Normal(INIT_STD),
                rng,
            ));
            let blocks = cfg
                .resblock_kernels
                .iter()
                .zip(&cfg.resblock_dilations)
                .enumerate()
                .map(|(j, (&rk, dils))| {
                    let name = format!("{prefix}.stage{i}.res{j}");
                    let init = Some(Init::Normal(INIT_STD));
                    ResBlock {
                        dilated: dils
                            .iter()
                            .enumerate()
                            .map(|(n, &d)| {
                                Conv1d::new(
                                    ps,
                                    &format!("{name}.dil{n}"),
                                    ConvSpec::new(out, out, rk).dilation(d),
                                    init,
                                    rng,
                                )
                            })
                            .collect(),
                        plain: (0..dils.len())
                            .map(|n| {
                                Conv1d::new(
                                    ps,
                                    &format!("{name}.conv{n}"),
                                    ConvSpec::new(out, out, rk),
                                    init,
                                    rng,
                                )
                            })
                            .collect(),
                    }
                })
                .collect();
            stages.push(blocks);
            ch = out;
        }
        let post = Conv1d::new(
            ps,
            &format!("{prefix}.post"),
            ConvSpec::new(ch, 1, cfg.post_kernel),
            None,
            rng,
        );
        Self {
            cfg: cfg.clone(),
            pre,
            global,
            ups,
            stages,
            post,
        }
    }

    /// `local: [B, local_cond_dim, T]`, `global: [B, global_cond_dim]` to
    /// `[B, 1, T * hop]` in `(-1, 1)`.
    pub fn forward<'a, F: Scalar>(
        &self,
        cx: Ctx<'a, F>,
        local: Var<'a, F>,
        global: Var<'a, F>,
    ) -> Var<'a, F> {
        let g = self.global.forward(cx, global);
        let mut x = self.pre.forward(cx, local).broadcast_add(g, 1);
        for (up, blocks) in self.ups.iter().zip(&self.stages) {
            x = up.forward(cx, x.leaky_relu(LRELU));
            let mut acc: Option<Var<'a, F>> = None;
            for b in blocks {
                let y = b.forward(cx, x);
                acc = Some(match acc {
                    Some(a) => a.add(y),
                    None => y,
                });
            }
            x = acc
                .expect("at least one resblock")
                .scale(1.0 / blocks.len() as f64);
        }
        self.post.forward(cx, x.leaky_relu(0.01)).tanh()
    }

    /// Single-utterance synthesis from row-major `zq: [T/2, Dc]`,
    /// `prosody: [T, Dp]` and `pseudo: [Dg]`.
    pub fn synthesize<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        zq: &Tensor<F>,
        prosody: &Tensor<F>,
        pseudo: &[f64],
    ) -> Result<Vec<F>> {
        let (steps, frames) = (zq.dim(0), prosody.dim(0));
        if frames != 2 * steps {
            return Err(Error::ConditioningMisaligned {
                content: steps,
                prosody: frames,
            });
        }
        if zq.dim(1) + prosody.dim(1) != self.cfg.local_cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.local_cond_dim,
                got: zq.dim(1) + prosody.dim(1),
            });
        }
        if pseudo.len() != self.cfg.global_cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.global_cond_dim,
                got: pseudo.len(),
            });
        }
        if pseudo.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite pseudo x-vector".into()));
        }
        let g = Graph::inference();
        let content = g
            .constant(zq.clone().reshaped(&[1, steps, zq.dim(1)]))
            .transpose12();
        let pros = g
            .constant(prosody.clone().reshaped(&[1, frames, prosody.dim(1)]))
            .transpose12();
        let local = Var::concat(&[upsample_content(content), pros], 1);
        let global = g.constant(Tensor::from_f64(&[1, pseudo.len()], pseudo));
        let wave = self.forward(Ctx::new(&g, ps), local, global);
        Ok(wave.value().data().to_vec())
    }

    /// Parameter id of the global-conditioning projection weight.
    pub fn global_weight(&self) -> crate::nn::ParamId {
        self.global.weight
    }
}

/// Nearest-neighbour repetition by 2 along time of `[B, D, T/2]`.
pub fn upsample_content<F: Scalar>(zq: Var<'_, F>) -> Var<'_, F> {
    zq.repeat_last(2)
}

/// Row-major `[S, D]` to `[2S, D]` with every step duplicated.
pub fn upsample_rows(zq: &[f64], dim: usize) -> Vec<f64> {
    zq.chunks(dim)
        .flat_map(|row| row.iter().chain(row).copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub mpd_periods: Vec<usize>,
    pub msd_scales: usize,
    /// All discriminator channel widths are divided by this.
    pub width_divisor: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mpd_periods: vec![3, 5, 7],
            msd_scales: 3,
            width_divisor: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.mpd_periods;
        if p.is_empty() || p.windows(2).any(|w| w[0] >= w[1]) || p[0] < 2 {
            return Err(Error::Config(
                "MPD periods must be ascending and >= 2".into(),
            ));
        }
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if gcd(p[i], p[j]) != 1 {
                    return Err(Error::Config("MPD periods must be pairwise coprime".into()));
                }
            }
        }
        if self.msd_scales == 0 || !self.width_divisor.is_power_of_two() || self.width_divisor > 16
        {
            return Err(Error::Config(
                "need msd_scales >= 1 and width_divisor in {1,2,4,8,16}".into(),
            ));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `(rows, period)` grid after zero-padding `len` samples to a multiple of `period`.
pub fn fold_grid(len: usize, period: usize) -> (usize, usize) {
    (len.div_ceil(period), period)
}

/// Logits and intermediate activations of one discriminator branch.
pub struct BranchOutput<'a, F: Scalar> {
    pub logits: Var<'a, F>,
    pub features: Vec<Var<'a, F>>,
}

#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<Conv1d>,
    post: Conv1d,
}

impl ConvStack {
    fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, mut x: Var<'a, F>) -> BranchOutput<'a, F> {
        let mut features = Vec::with_capacity(self.layers.len() + 1);
        for l in &self.layers {
            x = l.forward(cx, x).leaky_relu(LRELU);
            features.push(x);
        }
        let logits = self.post.forward(cx, x);
        features.push(logits);
        BranchOutput { logits, features }
    }
}

#[derive(Debug, Clone)]
pub struct PeriodDiscriminator {
    pub period: usize,
    stack: ConvStack,
}

#[derive(Debug, Clone)]
pub struct ScaleDiscriminator {
    /// Number of successive 2x average poolings before this branch.
    pub pooling: usize,
    stack: ConvStack,
}

#[derive(Debug, Clone)]
pub struct Discriminators {
    pub mpd: Vec<PeriodDiscriminator>,
    pub msd: Vec<ScaleDiscriminator>,
}

fn width(c: usize, div: usize) -> usize {
    (c / div).max(1)
}

impl Discriminators {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        prefix: &str,
        cfg: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Self {
        let div = cfg.width_divisor;
        let mpd = cfg
            .mpd_periods
            .iter()
            .map(|&p| {
                let name = format!("{prefix}.mpd{p}");
                let chans = [1, 32, 128, 512, 1024].map(|c| if c == 1 { 1 } else { width(c, div) });
                let mut layers: Vec<Conv1d> = (0..4)
                    .map(|i| {
                        Conv1d::new(
                            ps,
                            &format!("{name}.conv{i}"),
                            ConvSpec::new(chans[i], chans[i + 1], 5)
                                .stride(3)
                                .padding(2),
                            None,
                            rng,
                        )
                    })
                    .collect();
                let top = chans[4];
                layers.push(Conv1d::new(
                    ps,
                    &format!("{name}.conv4"),
                    ConvSpec::new(top, top, 5).padding(2),
                    None,
                    rng,
                ));
                let post = Conv1d::new(
                    ps,
                    &format!("{name}.post"),
                    ConvSpec::new(top, 1, 3).padding(1),
                    None,
                    rng,
                );
                PeriodDiscriminator {
                    period: p,
                    stack: ConvStack { layers, post },
                }
            })
            .collect();
        // (cout, kernel, stride, groups) after the first 1 -> 128 layer.
        let msd_layers = [
            (128, 41, 2, 4),
            (256, 41, 2, 16),
            (512, 41, 4, 16),
            (1024, 41, 4, 16),
            (1024, 41, 1, 16),
            (1024, 5, 1, 1),
        ];
        let msd = (0..cfg.msd_scales)
            .map(|s| {
                let name = format!("{prefix}.msd{s}");
                let mut cin = width(128, div);
                let mut layers = vec![Conv1d::new(
                    ps,
                    &format!("{name}.conv0"),
                    ConvSpec::new(1, cin, 15),
                    None,
                    rng,
                )];
                for (i, &(c, k, st, g)) in msd_layers.iter().enumerate() {
                    let cout = width(c, div);
                    let groups = gcd(gcd(g, cin), cout);
                    layers.push(Conv1d::new(
                        ps,
                        &format!("{name}.conv{}", i + 1),
                        ConvSpec::new(cin, cout, k)
                            .stride(st)
                            .groups(groups)
                            .padding((k - 1) / 2),
                        None,
                        rng,
                    ));
                    cin = cout;
                }
                let post = Conv1d::new(
                    ps,
                    &format!("{name}.post"),
                    ConvSpec::new(cin, 1, 3).padding(1),
                    None,
                    rng,
                );
                ScaleDiscriminator {
                    pooling: s,
                    stack: ConvStack { layers, post },
                }
            })
            .collect();
        Self { mpd, msd }
    }

    pub fn periods(&self) -> Vec<usize> {
        self.mpd.iter().map(|d| d.period).collect()
    }

    /// Period branches on `wave: [B, 1, L]`.
    pub fn discriminate_mpd<'a, F: Scalar>(
        &self,
        cx: Ctx<'a, F>,
        wave: Var<'a, F>,
    ) -> Vec<BranchOutput<'a, F>> {
        self.mpd
            .iter()
            .map(|d| d.stack.forward(cx, wave.fold_periods(d.period)))
            .collect()
    }

    /// Scale branches on `wave`, then `wave` pooled 2x, 4x, ...
    pub fn discriminate_msd<'a, F: Scalar>(
        &self,
        cx: Ctx<'a, F>,
        wave: Var<'a, F>,
    ) -> Vec<BranchOutput<'a, F>> {
        let mut out = Vec::with_capacity(self.msd.len());
        let mut x = wave;
        for (i, d) in self.msd.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2();
            }
            out.push(d.stack.forward(cx, x));
        }
        out
    }

    /// All branches, period discriminators first.
    pub fn discriminate<'a, F: Scalar>(
        &self,
        cx: Ctx<'a, F>,
        wave: Var<'a, F>,
    ) -> Vec<BranchOutput<'a, F>> {
        let mut out = self.discriminate_mpd(cx, wave);
        out.extend(self.discriminate_msd(cx, wave));
        out
    }
}

/// Input lengths seen by each scale branch.
pub fn msd_input_lengths(len: usize, scales: usize) -> Vec<usize> {
    (0..scales).map(|s| len >> s).collect()
}
