//! Parameterised building blocks.

use rand::Rng;

use super::graph::{Graph, Var};
use super::kernels::ConvGeom;
use super::params::{Init, ParamId, ParamStore};
use super::scalar::Scalar;

/// Graph + parameters for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a, F: Scalar> {
    pub g: &'a Graph<F>,
    pub ps: &'a ParamStore<F>,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(g: &'a Graph<F>, ps: &'a ParamStore<F>) -> Self {
        Self { g, ps }
    }

    pub fn p(&self, id: ParamId) -> Var<'a, F> {
        self.g.param(self.ps, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    /// `None` = "same" padding for stride 1.
    pub padding: Option<usize>,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: None,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = Some(p);
        self
    }
}

impl Conv1d {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        spec: ConvSpec,
        init: Option<Init>,
        rng: &mut R,
    ) -> Self {
        assert_eq!(
            spec.cin % spec.groups,
            0,
            "{name}: cin not divisible by groups"
        );
        assert_eq!(
            spec.cout % spec.groups,
            0,
            "{name}: cout not divisible by groups"
        );
        let fan_in = spec.cin / spec.groups * spec.kernel;
        let w_init = init.unwrap_or(Init::FanIn(fan_in));
        let weight = ps.add(
            format!("{name}.weight"),
            w_init.sample(&[spec.cout, spec.cin / spec.groups, spec.kernel], rng),
        );
        let bias = Some(ps.add(
            format!("{name}.bias"),
            Init::FanIn(fan_in).sample(&[spec.cout], rng),
        ));
        let padding = spec
            .padding
            .unwrap_or(spec.dilation * (spec.kernel - 1) / 2);
        Self {
            weight,
            bias,
            geom: ConvGeom {
                kernel: spec.kernel,
                stride: spec.stride,
                padding,
                dilation: spec.dilation,
            },
            groups: spec.groups,
        }
    }

    pub fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, x: Var<'a, F>) -> Var<'a, F> {
        let y = x.conv1d(cx.p(self.weight), self.geom, self.groups);
        match self.bias {
            Some(b) => y.broadcast_add(cx.p(b), 1),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose1d {
    /// Upsampling layer with output length exactly `stride * input length`
    /// when `kernel = 2 * stride`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(kernel >= stride && (kernel - stride) % 2 == 0);
        let weight = ps.add(
            format!("{name}.weight"),
            init.sample(&[cin, cout, kernel], rng),
        );
        let bias = ps.add(
            format!("{name}.bias"),
            Init::FanIn(cout * kernel).sample(&[cout], rng),
        );
        Self {
            weight,
            bias,
            geom: ConvGeom {
                kernel,
                stride,
                padding: (kernel - stride) / 2,
                dilation: 1,
            },
        }
    }

    pub fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, x: Var<'a, F>) -> Var<'a, F> {
        x.conv_transpose1d(cx.p(self.weight), self.geom)
            .broadcast_add(cx.p(self.bias), 1)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Init::FanIn(din).sample(&[din, dout], rng),
        );
        let bias = ps.add(
            format!("{name}.bias"),
            Init::FanIn(din).sample(&[dout], rng),
        );
        Self { weight, bias }
    }

    pub fn forward<'a, F: Scalar>(&self, cx: Ctx<'a, F>, x: Var<'a, F>) -> Var<'a, F> {
        x.matmul(cx.p(self.weight))
            .broadcast_add(cx.p(self.bias), 1)
    }
}
