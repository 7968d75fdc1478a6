//! Bidirectional GRU over per-frame `[normalised log-F0, normalised energy]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProsodyEncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
}

impl Default for ProsodyEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 128,
        }
    }
}

impl ProsodyEncoderConfig {
    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Gate order inside the stacked weights is `[reset, update, candidate]`.
#[derive(Debug, Clone)]
pub struct GruDirection {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    hidden: usize,
}

impl GruDirection {
    fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::FanIn(hidden);
        Self {
            w_input: ps.add(
                format!("{name}.w_input"),
                init.sample(&[input, 3 * hidden], rng),
            ),
            b_input: ps.add(format!("{name}.b_input"), init.sample(&[3 * hidden], rng)),
            w_hidden: ps.add(
                format!("{name}.w_hidden"),
                init.sample(&[hidden, 3 * hidden], rng),
            ),
            b_hidden: ps.add(format!("{name}.b_hidden"), init.sample(&[3 * hidden], rng)),
            hidden,
        }
    }

    /// Runs over `x: [B, T, D]` in the given step order; returns hidden
    /// states `[B, D_h]` indexed by time.
    fn run<'a, F: Scalar>(&self, cx: Ctx<'a, F>, x: Var<'a, F>, reverse: bool) -> Vec<Var<'a, F>> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let h3 = 3 * self.hidden;
        let hs = self.hidden;
        let gates_in = x
            .reshape(&[b * t, d])
            .matmul(cx.p(self.w_input))
            .broadcast_add(cx.p(self.b_input), 1)
            .reshape(&[b, t, h3]);
        let w_h = cx.p(self.w_hidden);
        let b_h = cx.p(self.b_hidden);
        let mut h = cx.g.constant(Tensor::zeros(&[b, hs]));
        let mut out: Vec<Option<Var<'a, F>>> = vec![None; t];
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            let gi = gates_in.select_time(ti);
            let gh = h.matmul(w_h).broadcast_add(b_h, 1);
            let r = gi.slice(1, 0, hs).add(gh.slice(1, 0, hs)).sigmoid();
            let z = gi.slice(1, hs, hs).add(gh.slice(1, hs, hs)).sigmoid();
            let n = gi
                .slice(1, 2 * hs, hs)
                .add(r.mul(gh.slice(1, 2 * hs, hs)))
                .tanh();
            // h' = n + z * (h - n)
            h = n.add(z.mul(h.sub(n)));
            out[ti] = Some(h);
        }
        out.into_iter()
            .map(|v| v.expect("every step visited"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    pub cfg: ProsodyEncoderConfig,
    pub forward_dir: GruDirection,
    pub backward_dir: GruDirection,
}

impl ProsodyEncoder {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ProsodyEncoderConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            cfg: cfg.clone(),
            forward_dir: GruDirection::new(
                ps,
                &format!("{prefix}.fwd"),
                cfg.input_dim,
                cfg.hidden,
                rng,
            ),
            backward_dir: GruDirection::new(
                ps,
                &format!("{prefix}.bwd"),
                cfg.input_dim,
                cfg.hidden,
                rng,
            ),
        }
    }

    /// `[B, T, input_dim]` to `[B, T, 2 * hidden]` (forward half first).
    pub fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, x: Var<'a, F>) -> Var<'a, F> {
        let fwd = self.forward_dir.run(cx, x, false);
        let bwd = self.backward_dir.run(cx, x, true);
        let steps: Vec<Var<'a, F>> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| Var::concat(&[f, b], 1))
            .collect();
        Var::stack_time(&steps)
    }

    /// Single-utterance inference; returns `[T, 2 * hidden]`.
    pub fn encode<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        f0n: &[f64],
        energy: &[f64],
    ) -> Result<Tensor<F>> {
        let x = prosody_input::<F>(f0n, energy)?;
        let t = f0n.len();
        let g = Graph::inference();
        let out = self.forward(Ctx::new(&g, ps), g.constant(x));
        Ok(out
            .value()
            .as_ref()
            .clone()
            .reshaped(&[t, self.cfg.out_dim()]))
    }
}

/// Stack two aligned per-frame streams into `[1, T, 2]`.
pub fn prosody_input<F: Scalar>(f0n: &[f64], energy: &[f64]) -> Result<Tensor<F>> {
    if f0n.is_empty() {
        return Err(Error::Invalid("empty prosody input".into()));
    }
    if f0n.len() != energy.len() {
        return Err(Error::LengthMismatch(format!(
            "{} F0 frames vs {} energy frames",
            f0n.len(),
            energy.len()
        )));
    }
    if f0n.iter().chain(energy).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite prosody input".into()));
    }
    let data = f0n
        .iter()
        .zip(energy)
        .flat_map(|(&a, &b)| [F::c(a), F::c(b)])
        .collect();
    Ok(Tensor::new(&[1, f0n.len(), 2], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup<F: Scalar>(hidden: usize) -> (ParamStore<F>, ProsodyEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let enc = ProsodyEncoder::new(
            &mut ps,
            "p",
            &ProsodyEncoderConfig {
                input_dim: 2,
                hidden,
            },
            &mut rng,
        );
        (ps, enc)
    }

    fn signal(t: usize) -> (Vec<f64>, Vec<f64>) {
        let f = (0..t).map(|i| (i as f64 * 0.7).sin()).collect();
        let e = (0..t).map(|i| 1.0 + 0.3 * (i as f64 * 0.3).cos()).collect();
        (f, e)
    }

    #[test]
    fn output_shape_follows_input_length() {
        let (ps, enc) = setup::<f32>(128);
        for t in [1usize, 2, 17] {
            let (f, e) = signal(t);
            assert_eq!(enc.encode(&ps, &f, &e).unwrap().shape(), [t, 256]);
        }
        assert!(enc.encode(&ps, &[], &[]).is_err());
        assert!(enc.encode(&ps, &[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_input_is_finite_and_deterministic() {
        let (ps, enc) = setup::<f32>(16);
        let a = enc.encode(&ps, &[0.0; 40], &[0.0; 40]).unwrap();
        let b = enc.encode(&ps, &[0.0; 40], &[0.0; 40]).unwrap();
        assert!(a.all_finite());
        assert_eq!(a, b);
    }

    /// With the backward direction tied to the forward weights, reversing the
    /// input turns forward-half outputs into time-reversed backward-half outputs.
    #[test]
    fn reversed_input_swaps_directions_when_tied() {
        let (mut ps, enc) = setup::<f64>(6);
        let pairs = [
            (enc.forward_dir.w_input, enc.backward_dir.w_input),
            (enc.forward_dir.b_input, enc.backward_dir.b_input),
            (enc.forward_dir.w_hidden, enc.backward_dir.w_hidden),
            (enc.forward_dir.b_hidden, enc.backward_dir.b_hidden),
        ];
        for (f, b) in pairs {
            let v = ps.value(f).clone();
            ps.set(b, v);
        }
        let (f, e) = signal(9);
        let (rf, re): (Vec<f64>, Vec<f64>) = (
            f.iter().rev().copied().collect(),
            e.iter().rev().copied().collect(),
        );
        let out = enc.encode(&ps, &f, &e).unwrap();
        let rev = enc.encode(&ps, &rf, &re).unwrap();
        for t in 0..9 {
            for j in 0..6 {
                let fwd = out.data()[t * 12 + j];
                let bwd_rev = rev.data()[(8 - t) * 12 + 6 + j];
                assert!((fwd - bwd_rev).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recurrent_weight_gradient_matches_finite_difference() {
        let (ps, enc) = setup::<f64>(5);
        let (f, e) = signal(7);
        let x = prosody_input::<f64>(&f, &e).unwrap();
        let loss = |ps: &ParamStore<f64>| {
            let g = Graph::inference();
            enc.forward(Ctx::new(&g, ps), g.constant(x.clone()))
                .sum()
                .value()
                .item()
        };
        let g = Graph::with_trainable(ps.ids().collect());
        let grads = g.backward(enc.forward(Ctx::new(&g, &ps), g.constant(x.clone())).sum());
        for id in [enc.forward_dir.w_hidden, enc.backward_dir.w_hidden] {
            let analytic = grads.param(id).unwrap();
            for i in [0, 7, 41, analytic.len() - 1] {
                let h = 1e-3;
                let mut p = ps.clone();
                p.value_mut(id).data_mut()[i] += h;
                let up = loss(&p);
                p.value_mut(id).data_mut()[i] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-8),
                    "{a} vs {fd}"
                );
            }
        }
    }
}
