use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// One affine layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }
}

/// Feed-forward network: affine layers with `tanh` between them and an
/// identity output, `y = W_L tanh(... tanh(W_1 x + b_1) ...) + b_L`.
///
/// The same type doubles as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, needed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer: `inputs[0]` is `x`, `inputs[l]` is `tanh` of
    /// layer `l - 1`'s pre-activation.
    inputs: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::domain(format!(
                    "layer {i}: bias length does not match weight rows"
                )));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::domain(format!(
                    "layer {i}: input width does not match previous output"
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { layers })
    }

    /// All-zero network with the given layer widths, e.g. `[32, 16, 32]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("dims", "need at least two positive widths"));
        }
        Self::from_layers(dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// Weights drawn from `N(0, gain^2 / fan_in)` row by row, biases zero.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], gain: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for layer in &mut net.layers {
            let (rows, cols) = layer.weight.shape();
            let scale = gain / (cols as f64).sqrt();
            let values: Vec<f64> = rng::standard_normal_vec(rng, rows * cols)
                .into_iter()
                .map(|g| g * scale)
                .collect();
            layer.weight = DMatrix::from_row_slice(rows, cols, &values);
        }
        Ok(net)
    }

    /// Single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: DMatrix::identity(dim, dim),
                bias: DVector::zeros(dim),
            }],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in a fixed order: `W_1, b_1, W_2, b_2, ...`.
    /// Matrices are column-major.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias += &b.bias * scale;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * &a + &layer.bias;
            inputs.push(a);
            a = if i == last { z } else { z.map(f64::tanh) };
        }
        Ok(ForwardTrace { inputs, output: a })
    }

    /// Reverse-mode pass. Returns parameter gradients and `dL/dx`.
    pub fn backward(&self, trace: &ForwardTrace, dloss_dy: &[f64]) -> Result<(Mlp, DVector<f64>)> {
        if dloss_dy.len() != self.output_dim() || trace.inputs.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: dloss_dy.len(),
            });
        }
        let mut grads = self.zeros_like();
        let mut delta = DVector::from_column_slice(dloss_dy);
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            grads.layers[l].weight = &delta * input.transpose();
            grads.layers[l].bias = delta.clone();
            let dx = self.layers[l].weight.tr_mul(&delta);
            delta = if l > 0 {
                // input to layer l is tanh(z), and tanh' = 1 - tanh^2
                dx.zip_map(input, |d, h| d * (1.0 - h * h))
            } else {
                dx
            };
        }
        Ok((grads, delta))
    }

    /// Writes parameters as CSV with header `layer,param,row,col,value`
    /// (`param` is `W` or `b`; biases use `col = 0`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "param", "row", "col", "value"])?;
        for (li, l) in self.layers.iter().enumerate() {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    w.write_record([
                        li.to_string(),
                        "W".into(),
                        i.to_string(),
                        j.to_string(),
                        l.weight[(i, j)].to_string(),
                    ])?;
                }
            }
            for (i, b) in l.bias.iter().enumerate() {
                w.write_record([
                    li.to_string(),
                    "b".into(),
                    i.to_string(),
                    "0".into(),
                    b.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`Mlp::write_csv`]. Shapes are inferred from
    /// the largest indices present.
    pub fn read_csv<R: Read>(input: R) -> Result<Mlp> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries: Vec<(usize, bool, usize, usize, f64)> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::Parse(format!("row {}: {msg}", line + 2));
            if rec.len() != 5 {
                return Err(bad("expected 5 columns".into()));
            }
            let is_weight = match &rec[1] {
                "W" => true,
                "b" => false,
                other => return Err(bad(format!("unknown parameter `{other}`"))),
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{e}")));
            let value = rec[4].parse::<f64>().map_err(|e| bad(format!("{e}")))?;
            entries.push((
                parse(&rec[0])?,
                is_weight,
                parse(&rec[2])?,
                parse(&rec[3])?,
                value,
            ));
        }
        let n_layers = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let mut layers = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let rows = entries
                .iter()
                .filter(|e| e.0 == li)
                .map(|e| e.2 + 1)
                .max()
                .unwrap_or(0);
            let cols = entries
                .iter()
                .filter(|e| e.0 == li && e.1)
                .map(|e| e.3 + 1)
                .max()
                .unwrap_or(0);
            let mut layer = Layer::zeros(cols, rows);
            let mut seen = 0usize;
            for e in entries.iter().filter(|e| e.0 == li) {
                if e.1 {
                    layer.weight[(e.2, e.3)] = e.4;
                } else {
                    layer.bias[e.2] = e.4;
                }
                seen += 1;
            }
            if seen != rows * cols + rows {
                return Err(Error::Parse(format!(
                    "layer {li}: expected {} entries, found {seen}",
                    rows * cols + rows
                )));
            }
            layers.push(layer);
        }
        Mlp::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(
            net.forward(&[1.0, -2.0, 0.5]).unwrap().as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = Mlp::identity(4);
        let x = [0.1, -0.7, 3.0, 0.0];
        assert_eq!(net.forward(&x).unwrap().as_slice(), &x);
    }

    #[test]
    fn hand_computed_two_layer_network() {
        // W1 = [[1, 2], [0, -1]], b1 = [0, 0.5]; W2 = [[1, 1], [2, 0]], b2 = [0.1, 0]
        let net = Mlp::from_layers(vec![
            Layer {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]),
                bias: DVector::from_vec(vec![0.0, 0.5]),
            },
            Layer {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 0.0]),
                bias: DVector::from_vec(vec![0.1, 0.0]),
            },
        ])
        .unwrap();
        // x = (1, 0): z1 = (1, 0.5), h = (tanh 1, tanh 0.5) = (0.7615941559557649, 0.46211715726000974)
        let h = [0.761_594_155_955_764_9_f64, 0.462_117_157_260_009_74];
        let expected = [h[0] + h[1] + 0.1, 2.0 * h[0]];
        let y = net.forward(&[1.0, 0.0]).unwrap();
        assert!((y[0] - expected[0]).abs() < 1e-15);
        assert!((y[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let net = Mlp::random(&[3, 2], 1.0, &mut seeded(1)).unwrap();
        let x = [0.5, -1.0, 2.0];
        let dy = [0.3, -0.2];
        let trace = net.forward_trace(&x).unwrap();
        let (g, dx) = net.backward(&trace, &dy).unwrap();
        for (i, dyi) in dy.iter().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                assert_eq!(g.layers()[0].weight[(i, j)], dyi * xj);
            }
            assert_eq!(g.layers()[0].bias[i], *dyi);
        }
        let w = &net.layers()[0].weight;
        for j in 0..3 {
            let expected = w[(0, j)] * dy[0] + w[(1, j)] * dy[1];
            assert!((dx[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = Mlp::random(&[4, 5, 3], 1.0, &mut seeded(2)).unwrap();
        let flat = net.flat_params();
        assert_eq!(flat.len(), net.num_params());
        let mut other = net.zeros_like();
        other.set_flat_params(&flat).unwrap();
        assert_eq!(other, net);
        assert!(net.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let net = Mlp::random(&[4, 6, 3], 0.7, &mut seeded(5)).unwrap();
        let mut buf = Vec::new();
        net.write_csv(&mut buf).unwrap();
        assert_eq!(Mlp::read_csv(buf.as_slice()).unwrap(), net);
    }
}
