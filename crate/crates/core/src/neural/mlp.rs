use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Selu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Selu => "selu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "selu" => Some(Activation::Selu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer computing `x W + b` for row vectors `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// Shape `(fan_in, fan_out)`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feed-forward network. `hidden` is applied after every layer but the last,
/// `output` after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!("invalid layer dims {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Uniform init in `±sqrt(1 / fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (1.0 / w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[0], w[1]), |_| rng.gen_range(-bound..bound));
                let bias = Array1::from_shape_fn(w[1], |_| rng.gen_range(-bound..bound));
                Layer { weight, bias }
            })
            .collect();
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::Dimension {
                    expected: l.weight.ncols(),
                    got: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].weight.ncols() != l.weight.nrows() {
                return Err(Error::Dimension {
                    expected: layers[i - 1].weight.ncols(),
                    got: l.weight.nrows(),
                });
            }
        }
        Ok(Mlp {
            layers: layers
                .into_iter()
                .map(|l| Layer {
                    weight: l.weight.as_standard_layout().to_owned(),
                    bias: l.bias,
                })
                .collect(),
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.to_vec();
            for (xi, row) in h.iter().zip(layer.weight.rows()) {
                let row = row.to_slice().expect("standard layout");
                for (yj, wij) in y.iter_mut().zip(row) {
                    *yj += xi * wij;
                }
            }
            let act = self.activation(i);
            if act != Activation::Identity {
                y.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = y;
        }
        Ok(h)
    }

    /// Batched forward pass over the rows of `x`, keeping what backprop needs.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            let act = self.activation(i);
            let out = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagates `upstream = dL/d(output)` through a cached forward
    /// pass. Returns parameter gradients and `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if upstream.dim() != cache.output.dim() || cache.pre.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: cache.output.ncols(),
                got: upstream.ncols(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = upstream.to_owned();
        for i in (0..n).rev() {
            let act = self.activation(i);
            if act != Activation::Identity {
                g.zip_mut_with(&cache.pre[i], |gv, &z| *gv *= act.derivative(z));
            }
            // `xᵀ·g` can come back column-major for thin shapes
            weights.push(
                cache.inputs[i]
                    .t()
                    .dot(&g)
                    .as_standard_layout()
                    .into_owned(),
            );
            biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&self.layers[i].weight.t());
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrads { weights, biases }, g))
    }
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            weights: m
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.dim()))
                .collect(),
            biases: m
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    /// Sums per-chunk gradients in order.
    pub fn sum_ordered(parts: impl IntoIterator<Item = MlpGrads>) -> Option<MlpGrads> {
        let mut iter = parts.into_iter();
        let mut acc = iter.next()?;
        for g in iter {
            acc.add_assign(&g);
        }
        Some(acc)
    }
}

/// Flat parameter views in declaration order: `W0, b0, W1, b1, ...`.
pub trait Parameters {
    fn param_views(&self) -> Vec<(String, &[f64])>;
    fn param_views_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for Mlp {
    fn param_views(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("W{i}"),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((format!("b{i}"), l.bias.as_slice().expect("contiguous")));
        }
        out
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in self.layers.iter_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

impl Parameters for MlpGrads {
    fn param_views(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("W{i}"), w.as_slice().expect("standard layout")));
            out.push((format!("b{i}"), b.as_slice().expect("contiguous")));
        }
        out
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

/// Concatenates the parameter views of several components, prefixing names.
pub fn prefixed_views<'a>(parts: &[(&str, &'a dyn Parameters)]) -> Vec<(String, &'a [f64])> {
    parts
        .iter()
        .flat_map(|(prefix, p)| {
            p.param_views()
                .into_iter()
                .map(move |(name, v)| (format!("{prefix}.{name}"), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let m = Mlp::zeros(&[3, 5, 2], Activation::Selu, Activation::Identity).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let layer = Layer {
            weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.5, -0.5],
        };
        let m = Mlp::from_layers(vec![layer], Activation::Selu, Activation::Identity).unwrap();
        // x W + b with x = (1, 0, -1)
        assert_eq!(m.forward(&[1.0, 0.0, -1.0]).unwrap(), vec![-3.5, -4.5]);
    }

    #[test]
    fn selu_fixed_point() {
        assert_eq!(Activation::Selu.apply(0.0), 0.0);
        assert!((Activation::Selu.apply(1.0) - SELU_LAMBDA).abs() < 1e-15);
        assert!(Activation::Selu.apply(-50.0) > -SELU_LAMBDA * SELU_ALPHA - 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::new(&[2, 4, 1], Activation::Selu, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::Dimension {
                expected: 2,
                got: 1
            })
        ));
        assert!(Mlp::new(&[2], Activation::Selu, Activation::Identity, &mut rng).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::new(
            &[3, 8, 8, 2],
            Activation::Selu,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let cache = m.forward_batch(x.view()).unwrap();
        for (row, out) in x.rows().into_iter().zip(cache.output.rows()) {
            let single = m.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(out) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::new(&[16, 4], Activation::Selu, Activation::Identity, &mut rng).unwrap();
        assert!(m.layers()[0].weight.iter().all(|w| w.abs() <= 0.25));
    }
}
