//! Dense networks with LayerNorm, exact reverse-mode gradients, Adam and
//! Polyak averaging.
//!
//! Parameters of a network live in one flat `Vec<f64>`; gradients use the same
//! layout, so optimizers and target-network updates are plain elementwise
//! loops. Hidden layers compute `affine → LayerNorm → ReLU`; the output layer
//! is affine followed by either the identity or a scaled `tanh`.

mod adam;
pub mod checkpoint;

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{polyak, AdamConfig, AdamState};

/// Variance floor inside LayerNorm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `scale ⊙ tanh(z)`: every coordinate stays strictly inside `±scale`.
    TanhScaled {
        scale: Vec<f64>,
    },
}

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input);
        sizes.extend(&self.hidden);
        sizes.push(self.output);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes().contains(&0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        if let OutputActivation::TanhScaled { scale } = &self.output_activation {
            if scale.len() != self.output {
                return Err(Error::Shape(format!(
                    "output scale has {} entries for {} outputs",
                    scale.len(),
                    self.output
                )));
            }
            if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config(
                    "output scale must be finite and positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    n_in: usize,
    n_out: usize,
    weight: Range<usize>,
    bias: Range<usize>,
    /// LayerNorm gain and shift, hidden layers only.
    norm: Option<(Range<usize>, Range<usize>)>,
}

fn layout(spec: &MlpSpec) -> (Vec<Slots>, usize) {
    let sizes = spec.layer_sizes();
    let last = sizes.len() - 2;
    let mut at = 0;
    let mut take = |n: usize| {
        let r = at..at + n;
        at += n;
        r
    };
    let slots = sizes
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (n_in, n_out) = (w[0], w[1]);
            let weight = take(n_in * n_out);
            let bias = take(n_out);
            let norm = (l < last).then(|| (take(n_out), take(n_out)));
            Slots {
                n_in,
                n_out,
                weight,
                bias,
                norm,
            }
        })
        .collect();
    (slots, at)
}

/// A multilayer perceptron with flat parameter storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    slots: Vec<Slots>,
    pub params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to every affine layer.
    inputs: Vec<Array2<f64>>,
    /// Normalized pre-activations of hidden layers.
    xhat: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    /// Post-LayerNorm, pre-ReLU values of hidden layers.
    pre_relu: Vec<Array2<f64>>,
    /// Output-layer pre-activation.
    logits: Array2<f64>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// Fan-in uniform initialization; the output layer is drawn from
    /// `U(-final_scale, final_scale)` so initial outputs sit near zero.
    pub fn new(spec: MlpSpec, final_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (slots, n) = layout(&spec);
        let mut params = vec![0.0; n];
        let last = slots.len() - 1;
        for (l, s) in slots.iter().enumerate() {
            let bound = if l == last {
                final_scale
            } else {
                1.0 / (s.n_in as f64).sqrt()
            };
            for p in &mut params[s.weight.clone()] {
                *p = rng.random_range(-bound..=bound);
            }
            for p in &mut params[s.bias.clone()] {
                *p = rng.random_range(-bound..=bound);
            }
            if let Some((gain, _)) = &s.norm {
                params[gain.clone()].iter_mut().for_each(|g| *g = 1.0);
            }
        }
        Ok(Self {
            spec,
            slots,
            params,
        })
    }

    /// Rebuilds a network from a flat parameter vector.
    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (slots, n) = layout(&spec);
        if params.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} parameters for {:?}, got {}",
                spec.layer_sizes(),
                params.len()
            )));
        }
        Ok(Self {
            spec,
            slots,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn weight(&self, s: &Slots) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.n_out, s.n_in), &self.params[s.weight.clone()])
            .expect("layout matches")
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(x)?.output.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a `batch × input` matrix.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if input.ncols() != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.spec.input,
                input.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.slots.len());
        let mut xhat = Vec::new();
        let mut inv_std = Vec::new();
        let mut pre_relu = Vec::new();
        let mut x = input.to_owned();
        let last = self.slots.len() - 1;
        for (l, s) in self.slots.iter().enumerate() {
            let bias = &self.params[s.bias.clone()];
            let mut z = x.dot(&self.weight(s).t());
            for mut row in z.rows_mut() {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            inputs.push(x);
            if l == last {
                let output = match &self.spec.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::TanhScaled { scale } => {
                        let mut out = z.clone();
                        for mut row in out.rows_mut() {
                            row.iter_mut()
                                .zip(scale)
                                .for_each(|(v, c)| *v = c * v.tanh());
                        }
                        out
                    }
                };
                return Ok(ForwardCache {
                    inputs,
                    xhat,
                    inv_std,
                    pre_relu,
                    logits: z,
                    output,
                });
            }
            let (gain, shift) = s.norm.clone().expect("hidden layers are normalized");
            let gain = &self.params[gain];
            let shift = &self.params[shift];
            let n = s.n_out as f64;
            let mut istd = Array1::zeros(z.nrows());
            for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                istd[r] = is;
                row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            }
            let mut h = z.clone();
            for mut row in h.rows_mut() {
                row.iter_mut()
                    .zip(gain.iter().zip(shift))
                    .for_each(|(v, (g, b))| *v = g * *v + b);
            }
            x = h.mapv(|v| v.max(0.0));
            xhat.push(z);
            inv_std.push(istd);
            pre_relu.push(h);
        }
        unreachable!("network has an output layer")
    }

    /// Reverse-mode gradients of `Σ ⟨upstream, output⟩` over the batch.
    ///
    /// Parameter gradients are accumulated into `grads`; the input gradient
    /// (`batch × input`) is returned. ReLU uses subgradient 0 at 0.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Result<Array2<f64>> {
        Ok(self
            .backward_impl(cache, upstream, Some(grads), true)?
            .expect("input gradient requested"))
    }

    /// Like [`Mlp::backward`] without the input gradient.
    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        self.backward_impl(cache, upstream, Some(grads), false)?;
        Ok(())
    }

    /// Input gradient only; parameter gradients are not formed.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        Ok(self
            .backward_impl(cache, upstream, None, true)?
            .expect("input gradient requested"))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<Option<Array2<f64>>> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        if grads.as_ref().is_some_and(|g| g.len() != self.params.len()) {
            return Err(Error::Shape("gradient buffer length".into()));
        }
        let mut dz = match &self.spec.output_activation {
            OutputActivation::Identity => upstream.to_owned(),
            OutputActivation::TanhScaled { scale } => {
                let mut d = upstream.to_owned();
                for (mut row, zrow) in d.rows_mut().into_iter().zip(cache.logits.rows()) {
                    for ((v, z), c) in row.iter_mut().zip(zrow).zip(scale) {
                        let t = z.tanh();
                        *v *= c * (1.0 - t * t);
                    }
                }
                d
            }
        };
        for l in (0..self.slots.len()).rev() {
            let s = &self.slots[l];
            if let Some(g) = grads.as_deref_mut() {
                let dw = dz.t().dot(&cache.inputs[l]);
                accumulate(&mut g[s.weight.clone()], dw.iter());
                accumulate(&mut g[s.bias.clone()], dz.sum_axis(Axis(0)).iter());
            }
            if l == 0 {
                return Ok(want_input.then(|| dz.dot(&self.weight(s))));
            }
            let dx = dz.dot(&self.weight(s));
            // Through ReLU and LayerNorm of the previous (hidden) layer.
            let p = &self.slots[l - 1];
            let h = l - 1;
            let (gain_r, shift_r) = p.norm.clone().expect("hidden layers are normalized");
            let mut dh = dx;
            dh.zip_mut_with(&cache.pre_relu[h], |d, pre| {
                if *pre <= 0.0 {
                    *d = 0.0;
                }
            });
            let xh = &cache.xhat[h];
            if let Some(g) = grads.as_deref_mut() {
                accumulate(&mut g[gain_r.clone()], (&dh * xh).sum_axis(Axis(0)).iter());
                accumulate(&mut g[shift_r], dh.sum_axis(Axis(0)).iter());
            }
            let gain = &self.params[gain_r];
            let n = p.n_out as f64;
            let mut dpre = dh;
            for (r, (mut row, xrow)) in dpre.rows_mut().into_iter().zip(xh.rows()).enumerate() {
                row.iter_mut().zip(gain).for_each(|(d, g)| *d *= g);
                let mean_d = row.sum() / n;
                let mean_dx = row.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>() / n;
                let is = cache.inv_std[h][r];
                row.iter_mut()
                    .zip(xrow)
                    .for_each(|(d, x)| *d = is * (*d - mean_d - x * mean_dx));
            }
            dz = dpre;
        }
        unreachable!("loop returns at the first layer")
    }
}

fn accumulate<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
}
