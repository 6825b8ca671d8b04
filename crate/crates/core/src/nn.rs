//! Convolutional building blocks shared by the encoder, conditioning network,
//! decoder, and coupling backbones.

use rand::Rng;
use rand_distr::Uniform;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Tensor::from_fn(&[out_channels, in_channels, kernel], |_| rng.sample(dist));
        let bias = Tensor::from_fn(&[out_channels], |_| rng.sample(dist));
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::zeros(&[out_channels, in_channels, kernel]),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, w, b, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }
}

/// Convolution producing `2C` channels followed by a gated linear unit.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub conv: Conv1d,
}

impl GatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv1d::new(store, name, in_channels, 2 * out_channels, kernel, stride, padding, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        tape.glu(y)
    }
}

/// Two gated convolutions; the second (kernel 4, stride 2, padding 1) halves time.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub first: GatedConv,
    pub second: GatedConv,
}

impl GatedBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: GatedConv::new(store, &format!("{name}.0"), in_channels, hidden, 3, 1, 1, rng),
            second: GatedConv::new(store, &format!("{name}.1"), hidden, hidden, 4, 2, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, store, x)?;
        self.second.forward(tape, store, y)
    }
}

/// Nearest-neighbour x2 upsample, then a gated convolution (kernel 3).
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: GatedConv,
}

impl UpBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: GatedConv::new(store, name, in_channels, hidden, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t = tape.shape(x)[1];
        let up = tape.resample_time(x, 2 * t)?;
        self.conv.forward(tape, store, up)
    }
}
