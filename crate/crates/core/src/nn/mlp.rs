//! Fully connected networks with ReLU hidden layers and hand-written backprop.
//!
//! Parameters live in one flat `Vec<f64>` so optimizers, Polyak averaging and
//! checkpoints can treat a network as a plain vector. Layer `l` stores its
//! weight matrix row-major with shape `(in_l, out_l)` followed by its bias.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl OutputActivation {
    pub fn tag(self) -> u8 {
        match self {
            OutputActivation::Identity => 0,
            OutputActivation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(OutputActivation::Identity),
            1 => Ok(OutputActivation::Tanh),
            t => Err(Error::format(format!("unknown output activation tag {t}"))),
        }
    }
}

/// Layer widths plus output activation; everything needed to interpret a flat
/// parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    widths: Vec<usize>,
    output: OutputActivation,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[l]` is the input to layer `l`; the final entry is the network output.
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.acts.pop().expect("tape always holds the input")
    }

    /// Which hidden units are active (post-ReLU positive), layer by layer, row-major.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = &self.acts[1..self.acts.len() - 1];
        hidden.iter().flat_map(|a| a.iter().map(|v| *v > 0.0)).collect()
    }
}

impl Architecture {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if widths.contains(&0) {
            return Err(Error::config(format!("layer widths must be positive, got {widths:?}")));
        }
        Ok(Self { widths, output })
    }

    /// `input -> [hidden; layers] -> output`.
    pub fn with_hidden(
        input: usize,
        hidden_width: usize,
        hidden_layers: usize,
        output_dim: usize,
        output: OutputActivation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden_layers + 2);
        widths.push(input);
        widths.extend(std::iter::repeat_n(hidden_width, hidden_layers));
        widths.push(output_dim);
        Self::new(widths, output)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight block.
    fn offset(&self, layer: usize) -> usize {
        self.widths[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer_views<'a>(&self, params: &'a [f64], layer: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.offset(layer);
        let w = ArrayView2::from_shape((fan_in, fan_out), &params[off..off + fan_in * fan_out]).unwrap();
        let b = ArrayView1::from(&params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn layer_views_mut<'a>(
        &self,
        params: &'a mut [f64],
        layer: usize,
    ) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.offset(layer);
        let (w, b) = params[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
        (
            ArrayViewMut2::from_shape((fan_in, fan_out), w).unwrap(),
            ArrayViewMut1::from(b),
        )
    }

    /// Uniform fan-in initialization: every weight and bias of a layer is
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.num_params());
        for w in self.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(dist.sample(rng));
            }
        }
        params
    }

    fn check_input(&self, params: &[f64], x: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::config(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                self.num_params()
            )));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass that records every intermediate activation.
    pub fn forward_tape(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(params, &x)?;
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_owned());
        for l in 0..layers {
            let (w, b) = self.layer_views(params, l);
            let input = &acts[l];
            let mut z = Array2::<f64>::zeros((input.nrows(), w.ncols()));
            z.rows_mut().into_iter().for_each(|mut row| row.assign(&b));
            general_mat_mul(1.0, input, &w, 1.0, &mut z);
            if l + 1 < layers {
                z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            } else if self.output == OutputActivation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(Tape { acts })
    }

    pub fn forward_batch(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(params, x)?.into_output())
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network output).
    ///
    /// Parameter gradients are accumulated into `grads` when given. The
    /// gradient w.r.t. the network input is returned when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        d_out: ArrayView2<f64>,
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let layers = self.num_layers();
        let mut delta = d_out.to_owned();
        if self.output == OutputActivation::Tanh {
            delta.zip_mut_with(tape.output(), |d, &y| *d *= 1.0 - y * y);
        }
        for l in (0..layers).rev() {
            let input = &tape.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let (mut gw, mut gb) = self.layer_views_mut(g, l);
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut gw);
                gb += &delta.sum_axis(Axis(0));
            }
            if l == 0 && !want_input {
                return None;
            }
            let (w, _) = self.layer_views(params, l);
            let mut prev = Array2::<f64>::zeros((delta.nrows(), w.nrows()));
            general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut prev);
            if l > 0 {
                // ReLU: derivative taken as 0 at the kink.
                prev.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = prev;
        }
        Some(delta)
    }
}

/// A network: architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numerical("non-finite network parameter", None, None));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.arch.forward_batch(&self.params, x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.arch.forward_batch(&self.params, x)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.arch.forward_tape(&self.params, x)
    }

    pub fn backward(
        &self,
        tape: &Tape,
        d_out: ArrayView2<f64>,
        grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        self.arch.backward(&self.params, tape, d_out, grads, want_input)
    }
}
