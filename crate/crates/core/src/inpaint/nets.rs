//! Coarse inpainting generator and the global/local critics.

use std::rc::Rc;

use autodiff::{Conv2dConfig, Params, Resampler, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Mask;
use crate::{Error, Result};

/// `[I_t^h (3), B_t^h (1), four reprojections (12)]`.
pub const INPUT_CHANNELS: usize = 16;
pub const ENCODER_WIDTHS: [usize; 3] = [32, 64, 128];
pub const DILATION_RATES: [usize; 4] = [2, 4, 8, 16];
pub const GLOBAL_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const LOCAL_WIDTHS: [usize; 3] = [16, 32, 64];
pub const LOCAL_SIZE: usize = 32;
pub const CRITIC_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Leaky,
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Nearest-neighbor x2 upsample before the convolution.
    pub upsample: bool,
    pub activation: Activation,
}

impl ConvSpec {
    fn new(cin: usize, cout: usize, activation: Activation) -> Self {
        Self {
            cin,
            cout,
            kernel: 3,
            stride: 1,
            dilation: 1,
            upsample: false,
            activation,
        }
    }

    fn strided(self) -> Self {
        Self { stride: 2, ..self }
    }

    fn dilated(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    fn upsampled(self) -> Self {
        Self { upsample: true, ..self }
    }

    fn config(&self) -> Conv2dConfig {
        Conv2dConfig::new(self.stride, self.dilation * (self.kernel - 1) / 2, self.dilation)
    }
}

/// Plain chain of convolutions; parameters are `conv{i}.weight/bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub specs: Vec<ConvSpec>,
}

impl ConvStack {
    fn init<T: Scalar>(&self, rng: &mut ChaCha8Rng, params: &mut Params<T>) {
        for (i, s) in self.specs.iter().enumerate() {
            let fan_in = s.cin * s.kernel * s.kernel;
            let gain = if s.activation == Activation::Tanh { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            params.push(
                format!("conv{}.weight", i + 1),
                Tensor::from_fn(&[s.cout, s.cin, s.kernel, s.kernel], |_| T::from_f64(rng.gen_range(-bound..bound))),
            );
            params.push(format!("conv{}.bias", i + 1), Tensor::zeros(&[s.cout]));
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], mut x: Var) -> Result<Var> {
        for (i, s) in self.specs.iter().enumerate() {
            if s.upsample {
                x = tape.upsample2(x)?;
            }
            x = tape.conv2d(x, vars[2 * i], s.config())?;
            x = tape.bias_add(x, vars[2 * i + 1])?;
            x = match s.activation {
                Activation::Elu => tape.elu(x)?,
                Activation::Leaky => tape.leaky_relu(x, T::from_f64(CRITIC_SLOPE))?,
                Activation::Tanh => tape.tanh(x)?,
                Activation::Identity => x,
            };
        }
        Ok(x)
    }

    fn num_params(&self) -> usize {
        2 * self.specs.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub stack: ConvStack,
}

impl Default for Generator {
    fn default() -> Self {
        Self::new()
    }
}

impl Generator {
    pub fn new() -> Self {
        use Activation::*;
        let [w1, w2, w3] = ENCODER_WIDTHS;
        let mut specs = vec![
            ConvSpec::new(INPUT_CHANNELS, w1, Elu).strided(),
            ConvSpec::new(w1, w2, Elu).strided(),
            ConvSpec::new(w2, w3, Elu).strided(),
        ];
        specs.extend(DILATION_RATES.iter().map(|&r| ConvSpec::new(w3, w3, Elu).dilated(r)));
        specs.extend([
            ConvSpec::new(w3, w2, Elu).upsampled(),
            ConvSpec::new(w2, w1, Elu).upsampled(),
            ConvSpec::new(w1, 16, Elu).upsampled(),
            ConvSpec::new(16, 3, Tanh),
        ]);
        Self {
            stack: ConvStack { specs },
        }
    }

    /// Total stride of the encoder; tile sides must be multiples of it.
    pub fn granularity(&self) -> usize {
        self.stack.specs.iter().map(|s| s.stride).product()
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        self.stack.init(&mut rng, &mut params);
        params
    }

    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        check_stack(&self.stack, params, 0)
    }

    /// `input` is `[N, 16, H, W]`, `holes` the hole mask broadcast to
    /// `[N, 3, H, W]`. Returns the prediction inside the holes composited
    /// onto channels 0..3 of the input.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], input: Var, holes: Rc<Tensor<T>>) -> Result<Var> {
        let [n, c, h, w] = tape.value(input).dims4("generator")?;
        if c != INPUT_CHANNELS {
            return Err(Error::dimension(format!(
                "generator input has {c} channels, expected {INPUT_CHANNELS}"
            )));
        }
        let g = self.granularity();
        if h % g != 0 || w % g != 0 {
            return Err(Error::dimension(format!("{h}x{w} input is not a multiple of {g}")));
        }
        if holes.shape() != [n, 3, h, w] {
            return Err(Error::dimension(format!("hole tensor {:?} for {n}x3x{h}x{w} output", holes.shape())));
        }
        let y = self.stack.forward(tape, vars, input)?;
        let pred = tape.affine(y, T::from_f64(0.5), T::from_f64(0.5))?;
        let inside = tape.mask_scale(pred, holes)?;
        let holed = tape.slice_channels(input, 0, 3)?;
        Ok(tape.add(holed, inside)?)
    }
}

/// Convolutional critic with a scalar affine head. The local variant first
/// maps each tile's hole crop to a fixed square.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub stack: ConvStack,
    /// Side of the square the convolutions see.
    pub input_size: usize,
    pub local: bool,
}

impl Critic {
    fn with_widths(widths: &[usize], input_size: usize, local: bool) -> Self {
        let mut cin = 3;
        let specs = widths
            .iter()
            .map(|&w| {
                let s = ConvSpec::new(cin, w, Activation::Leaky).strided();
                cin = w;
                s
            })
            .collect();
        Self {
            stack: ConvStack { specs },
            input_size,
            local,
        }
    }

    pub fn global(tile: usize) -> Self {
        Self::with_widths(&GLOBAL_WIDTHS, tile, false)
    }

    pub fn local() -> Self {
        Self::with_widths(&LOCAL_WIDTHS, LOCAL_SIZE, true)
    }

    fn features(&self) -> usize {
        let cells = self.input_size >> self.stack.specs.len();
        self.stack.specs.last().map_or(3, |s| s.cout) * cells * cells
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        self.stack.init(&mut rng, &mut params);
        let k = self.features();
        let bound = (1.0 / k as f64).sqrt();
        params.push("head.weight", Tensor::from_fn(&[1, k], |_| T::from_f64(rng.gen_range(-bound..bound))));
        params.push("head.bias", Tensor::zeros(&[1]));
        params
    }

    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        check_stack(&self.stack, params, 2)?;
        let n = self.stack.num_params();
        if params.get(n).shape() != [1, self.features()] || params.get(n + 1).shape() != [1] {
            return Err(Error::format("critic head does not match the convolution stack"));
        }
        Ok(())
    }

    /// Scores `[N, 3, H, W]` tiles to `[N, 1]`. `crop` is required for the
    /// local critic.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, crop: Option<&Rc<Resampler>>) -> Result<Var> {
        let x = match (self.local, crop) {
            (true, Some(map)) => tape.resample(x, map.clone())?,
            (true, None) => return Err(Error::config("the local critic needs a crop map")),
            (false, _) => x,
        };
        let [n, _, h, w] = tape.value(x).dims4("critic")?;
        if (h, w) != (self.input_size, self.input_size) {
            return Err(Error::dimension(format!(
                "critic expects {0}x{0} input, got {h}x{w}",
                self.input_size
            )));
        }
        let f = self.stack.forward(tape, vars, x)?;
        let k = self.stack.num_params();
        let flat = tape.reshape(f, &[n, self.features()])?;
        Ok(tape.linear(flat, vars[k], vars[k + 1])?)
    }
}

fn check_stack<T: Scalar>(stack: &ConvStack, params: &Params<T>, extra: usize) -> Result<()> {
    if params.len() != stack.num_params() + extra {
        return Err(Error::format(format!(
            "expected {} tensors, found {}",
            stack.num_params() + extra,
            params.len()
        )));
    }
    for (i, s) in stack.specs.iter().enumerate() {
        if params.get(2 * i).shape() != [s.cout, s.cin, s.kernel, s.kernel] || params.get(2 * i + 1).shape() != [s.cout] {
            return Err(Error::format(format!("layer {} has the wrong shape", i + 1)));
        }
    }
    Ok(())
}

/// Square window around the hole's bounding box, grown to a square and
/// shifted (and if needed shrunk) to fit the tile: `(left, top, side)`.
pub fn local_window(holes: &Mask) -> (usize, usize, usize) {
    let (w, h) = holes.dims();
    let limit = w.min(h);
    let Some((u0, v0, bw, bh)) = holes.bounding_box() else {
        return ((w - limit) / 2, (h - limit) / 2, limit);
    };
    let side = bw.max(bh).min(limit);
    let place = |start: usize, len: usize, extent: usize| {
        let centered = (2 * start + len) as i64 / 2 - side as i64 / 2;
        centered.clamp(0, (extent - side) as i64) as usize
    };
    (place(u0, bw, w), place(v0, bh, h), side)
}

/// Bilinear crop-and-resize of each tile's [`local_window`] to `size`².
pub fn local_crop(holes: &[Mask], size: usize) -> Result<Resampler> {
    let first = holes.first().ok_or_else(|| Error::dimension("empty batch"))?;
    let (w, h) = first.dims();
    if holes.iter().any(|m| m.dims() != (w, h)) {
        return Err(Error::dimension("hole masks differ in size"));
    }
    let samples = holes
        .iter()
        .map(|m| {
            let (left, top, side) = local_window(m);
            let scale = side as f64 / size as f64;
            let axis = |i: usize| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let i0 = (x.floor() as usize).min(side - 1);
                let f = x - i0 as f64;
                let i1 = (i0 + 1).min(side - 1);
                [(i0, 1.0 - f), (i1, f)]
            };
            let mut entries = Vec::new();
            for oy in 0..size {
                for ox in 0..size {
                    for (sy, wy) in axis(oy) {
                        for (sx, wx) in axis(ox) {
                            let wgt = wy * wx;
                            if wgt != 0.0 {
                                entries.push((oy * size + ox, (top + sy) * w + left + sx, wgt));
                            }
                        }
                    }
                }
            }
            entries
        })
        .collect();
    Ok(Resampler {
        input_hw: (h, w),
        output_hw: (size, size),
        samples,
    })
}
