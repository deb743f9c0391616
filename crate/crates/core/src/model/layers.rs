//! Layer primitives on channel-major activations.
//!
//! An activation with `c` channels of length `l` is stored flat as
//! `data[ch * l + t]`. Every layer exposes a forward pass that records what
//! its backward pass needs, and a backward pass that maps the upstream
//! gradient to the gradient w.r.t. its input (accumulating parameter
//! gradients when asked).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn from_series(values: &[f64]) -> Self {
        Activation {
            channels: 1,
            len: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Activation {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }
}

/// Valid (unpadded) stride-1 1D convolution. Weights are `[out][in][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| len - self.kernel + 1)
    }

    #[inline]
    fn w(&self, o: usize, c: usize) -> &[f64] {
        let start = (o * self.in_channels + c) * self.kernel;
        &self.weight[start..start + self.kernel]
    }

    pub fn forward(&self, x: &Activation) -> Activation {
        debug_assert_eq!(x.channels, self.in_channels);
        let out_len = x.len + 1 - self.kernel;
        let mut y = Activation::zeros(self.out_channels, out_len);
        for o in 0..self.out_channels {
            let row = &mut y.data[o * out_len..(o + 1) * out_len];
            row.fill(self.bias[o]);
            for c in 0..self.in_channels {
                let w = self.w(o, c);
                let xin = &x.data[c * x.len..(c + 1) * x.len];
                for (t, out) in row.iter_mut().enumerate() {
                    let window = &xin[t..t + self.kernel];
                    *out += w.iter().zip(window).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        y
    }

    /// Returns dL/dx; adds dL/dW and dL/db into `grads` when given.
    pub fn backward(
        &self,
        x: &Activation,
        dy: &Activation,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Activation {
        let out_len = dy.len;
        let mut dx = Activation::zeros(x.channels, x.len);
        for o in 0..self.out_channels {
            let drow = &dy.data[o * out_len..(o + 1) * out_len];
            for c in 0..self.in_channels {
                let w = self.w(o, c);
                let dxin = &mut dx.data[c * x.len..(c + 1) * x.len];
                for (t, &g) in drow.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (k, &wk) in w.iter().enumerate() {
                        dxin[t + k] += wk * g;
                    }
                }
            }
        }
        if let Some((dw, db)) = grads {
            for o in 0..self.out_channels {
                let drow = &dy.data[o * out_len..(o + 1) * out_len];
                db[o] += drow.iter().sum::<f64>();
                for c in 0..self.in_channels {
                    let xin = &x.data[c * x.len..(c + 1) * x.len];
                    let base = (o * self.in_channels + c) * self.kernel;
                    for k in 0..self.kernel {
                        dw[base + k] += drow
                            .iter()
                            .zip(&xin[k..k + out_len])
                            .map(|(g, v)| g * v)
                            .sum::<f64>();
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer over a flattened activation. Weights are `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (row, &g) in self.weight.chunks_exact(self.inputs).zip(dy) {
            if g == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += w * g;
            }
        }
        if let Some((dw, db)) = grads {
            for (o, &g) in dy.iter().enumerate() {
                db[o] += g;
                let row = &mut dw[o * self.inputs..(o + 1) * self.inputs];
                for (d, v) in row.iter_mut().zip(x) {
                    *d += g * v;
                }
            }
        }
        dx
    }
}

/// Non-overlapping max pooling (stride = window). Returns the pooled
/// activation and, per output cell, the flat input index that won. Ties go
/// to the lowest index.
pub fn max_pool_forward(x: &Activation, size: usize) -> (Activation, Vec<usize>) {
    let out_len = x.len / size;
    let mut y = Activation::zeros(x.channels, out_len);
    let mut argmax = vec![0; x.channels * out_len];
    for c in 0..x.channels {
        for t in 0..out_len {
            let start = c * x.len + t * size;
            let mut best = start;
            for i in start + 1..start + size {
                if x.data[i] > x.data[best] {
                    best = i;
                }
            }
            y.data[c * out_len + t] = x.data[best];
            argmax[c * out_len + t] = best;
        }
    }
    (y, argmax)
}

pub fn max_pool_backward(input_shape: (usize, usize), argmax: &[usize], dy: &Activation) -> Activation {
    let mut dx = Activation::zeros(input_shape.0, input_shape.1);
    for (&src, &g) in argmax.iter().zip(&dy.data) {
        dx.data[src] += g;
    }
    dx
}

pub fn relu_forward(x: &Activation) -> Activation {
    Activation {
        channels: x.channels,
        len: x.len,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient passes where the pre-activation was strictly positive.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Index range `[start, end)` averaged into output cell `i` when pooling
/// `input_len` values down (or up) to `output_len` cells.
pub fn adaptive_bounds(i: usize, input_len: usize, output_len: usize) -> (usize, usize) {
    let start = (i * input_len) / output_len;
    let end = ((i + 1) * input_len).div_ceil(output_len);
    (start, end)
}

pub fn adaptive_avg_pool(x: &[f64], output_len: usize) -> Vec<f64> {
    (0..output_len)
        .map(|i| {
            let (s, e) = adaptive_bounds(i, x.len(), output_len);
            x[s..e].iter().sum::<f64>() / (e - s) as f64
        })
        .collect()
}

pub fn adaptive_avg_pool_backward(input_len: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (i, &g) in dy.iter().enumerate() {
        let (s, e) = adaptive_bounds(i, input_len, dy.len());
        let share = g / (e - s) as f64;
        for d in &mut dx[s..e] {
            *d += share;
        }
    }
    dx
}
