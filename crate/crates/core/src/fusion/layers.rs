//! Dense layers, batch/layer normalization and activations with hand-written
//! backward passes. All matrices are row-major `f64`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    /// Horizontal concatenation, in slice order.
    pub fn hcat(parts: &[&Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for m in parts {
                out.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
                off += m.cols;
            }
        }
        out
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `input × output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    /// Absent when a following batch norm makes the shift redundant.
    pub bias: Option<Vec<f64>>,
}

pub struct DenseGrads {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub input: Matrix,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, with_bias: bool) -> Self {
        Dense {
            input,
            output,
            weight: vec![0.0; input * output],
            bias: with_bias.then(|| vec![0.0; output]),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols, self.input);
        let mut y = Matrix::zeros(x.rows, self.output);
        for i in 0..x.rows {
            let yi = &mut y.data[i * self.output..(i + 1) * self.output];
            if let Some(b) = &self.bias {
                yi.copy_from_slice(b);
            }
            for (k, &a) in x.row(i).iter().enumerate() {
                let wk = &self.weight[k * self.output..(k + 1) * self.output];
                for (yj, &w) in yi.iter_mut().zip(wk) {
                    *yj += a * w;
                }
            }
        }
        y
    }

    /// Gradients of the weights, bias and input given `dy = dL/dy`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> DenseGrads {
        let mut dw = vec![0.0; self.input * self.output];
        let mut db = self.bias.as_ref().map(|_| vec![0.0; self.output]);
        let mut dx = Matrix::zeros(x.rows, self.input);
        for i in 0..x.rows {
            let dyi = dy.row(i);
            if let Some(db) = db.as_mut() {
                for (b, &g) in db.iter_mut().zip(dyi) {
                    *b += g;
                }
            }
            for (k, &a) in x.row(i).iter().enumerate() {
                let wk = &self.weight[k * self.output..(k + 1) * self.output];
                let dwk = &mut dw[k * self.output..(k + 1) * self.output];
                let mut acc = 0.0;
                for j in 0..self.output {
                    dwk[j] += a * dyi[j];
                    acc += dyi[j] * wk[j];
                }
                dx.data[i * self.input + k] = acc;
            }
        }
        DenseGrads {
            weight: dw,
            bias: db,
            input: dx,
        }
    }
}

/// Intermediate values a normalization layer keeps for its backward pass.
pub struct NormCache {
    pub xhat: Matrix,
    /// Per feature (batch norm) or per row (layer norm).
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub struct NormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub input: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes each feature with the batch's own (biased) statistics.
    pub fn forward_train(&self, x: &Matrix) -> (Matrix, NormCache) {
        let (n, w) = (x.rows, x.cols);
        let mut mean = vec![0.0; w];
        let mut var = vec![0.0; w];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for (j, &v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, w);
        let mut y = Matrix::zeros(n, w);
        for i in 0..n {
            for j in 0..w {
                let h = (x.data[i * w + j] - mean[j]) * inv_std[j];
                xhat.data[i * w + j] = h;
                y.data[i * w + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Matrix) -> Matrix {
        let w = x.cols;
        let mut y = Matrix::zeros(x.rows, w);
        for i in 0..x.rows {
            for j in 0..w {
                let h = (x.data[i * w + j] - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt();
                y.data[i * w + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        y
    }

    /// Backward through train-mode normalization (batch statistics depend on
    /// every row).
    pub fn backward_train(&self, cache: &NormCache, dy: &Matrix) -> NormGrads {
        let (n, w) = (dy.rows, dy.cols);
        let mut dgamma = vec![0.0; w];
        let mut dbeta = vec![0.0; w];
        let mut mean_dxhat = vec![0.0; w];
        let mut mean_dxhat_xhat = vec![0.0; w];
        for i in 0..n {
            for j in 0..w {
                let g = dy.data[i * w + j];
                let h = cache.xhat.data[i * w + j];
                dgamma[j] += g * h;
                dbeta[j] += g;
                let dh = g * self.gamma[j];
                mean_dxhat[j] += dh;
                mean_dxhat_xhat[j] += dh * h;
            }
        }
        let nf = n as f64;
        mean_dxhat.iter_mut().for_each(|v| *v /= nf);
        mean_dxhat_xhat.iter_mut().for_each(|v| *v /= nf);
        let mut dx = Matrix::zeros(n, w);
        for i in 0..n {
            for j in 0..w {
                let dh = dy.data[i * w + j] * self.gamma[j];
                let h = cache.xhat.data[i * w + j];
                dx.data[i * w + j] = cache.inv_std[j] * (dh - mean_dxhat[j] - h * mean_dxhat_xhat[j]);
            }
        }
        NormGrads {
            gamma: dgamma,
            beta: dbeta,
            input: dx,
        }
    }

    /// Exponential moving average of the batch statistics; the variance is
    /// stored unbiased.
    pub fn update_running(&mut self, cache: &NormCache, batch_rows: usize) {
        let m = self.momentum;
        let correction = if batch_rows > 1 {
            batch_rows as f64 / (batch_rows - 1) as f64
        } else {
            1.0
        };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * cache.batch_mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * cache.batch_var[j] * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps: 1e-9,
        }
    }

    /// Per-row normalization; identical in train and eval mode.
    pub fn forward(&self, x: &Matrix) -> (Matrix, NormCache) {
        let (n, w) = (x.rows, x.cols);
        let mut xhat = Matrix::zeros(n, w);
        let mut y = Matrix::zeros(n, w);
        let mut inv_std = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let s = 1.0 / (var + self.eps).sqrt();
            for j in 0..w {
                let h = (row[j] - mean) * s;
                xhat.data[i * w + j] = h;
                y.data[i * w + j] = self.gamma[j] * h + self.beta[j];
            }
            inv_std.push(s);
            means.push(mean);
            vars.push(var);
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                batch_mean: means,
                batch_var: vars,
            },
        )
    }

    pub fn backward(&self, cache: &NormCache, dy: &Matrix) -> NormGrads {
        let (n, w) = (dy.rows, dy.cols);
        let mut dgamma = vec![0.0; w];
        let mut dbeta = vec![0.0; w];
        let mut dx = Matrix::zeros(n, w);
        let mut dh = vec![0.0; w];
        for i in 0..n {
            let (mut mean_dh, mut mean_dh_h) = (0.0, 0.0);
            for j in 0..w {
                let g = dy.data[i * w + j];
                let h = cache.xhat.data[i * w + j];
                dgamma[j] += g * h;
                dbeta[j] += g;
                dh[j] = g * self.gamma[j];
                mean_dh += dh[j];
                mean_dh_h += dh[j] * h;
            }
            mean_dh /= w as f64;
            mean_dh_h /= w as f64;
            for j in 0..w {
                let h = cache.xhat.data[i * w + j];
                dx.data[i * w + j] = cache.inv_std[i] * (dh[j] - mean_dh - h * mean_dh_h);
            }
        }
        NormGrads {
            gamma: dgamma,
            beta: dbeta,
            input: dx,
        }
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v.max(0.0)).collect())
}

/// `dy * 1[x > 0]`.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows, x.cols, data)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Matrix) -> Matrix {
    Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu_scalar(v)).collect())
}

pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Matrix::from_vec(x.rows, x.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_mse_gradient_closed_form() {
        // One row, one output: dL/dW = 2 (pred - y) x, exactly.
        let layer = Dense {
            input: 3,
            output: 1,
            weight: vec![0.5, -0.25, 2.0],
            bias: Some(vec![0.125]),
        };
        let x = Matrix::from_vec(1, 3, vec![1.5, -2.0, 0.75]);
        let pred = layer.forward(&x).data[0];
        let y = 0.3;
        let dy = Matrix::from_vec(1, 1, vec![2.0 * (pred - y)]);
        let g = layer.backward(&x, &dy);
        for k in 0..3 {
            assert_eq!(g.weight[k], 2.0 * (pred - y) * x.data[k]);
        }
        assert_eq!(g.bias.unwrap()[0], 2.0 * (pred - y));
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let layer = Dense {
            input: 2,
            output: 2,
            weight: vec![1.0, 2.0, 3.0, 4.0],
            bias: Some(vec![0.0, 0.0]),
        };
        let x = Matrix::zeros(3, 2);
        let dy = Matrix::from_vec(3, 2, vec![1.0, -1.0, 0.5, 2.0, 3.0, -4.0]);
        assert!(layer.backward(&x, &dy).weight.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(5);
        let x = Matrix::from_vec(2, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.5, 0.25, 8.0, 1.0]);
        let (_, cache) = ln.forward(&x);
        for i in 0..2 {
            let r = cache.xhat.row(i);
            let mean = r.iter().sum::<f64>() / 5.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm::new(2);
        let x = Matrix::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 9.0]);
        // Fresh running stats are mean 0, var 1.
        let y = bn.forward_eval(&x);
        assert!((y.data[0] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        let (_, cache) = bn.forward_train(&x);
        bn.update_running(&cache, 3);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // Unbiased batch var of [1,2,3] is 1.
        assert!((bn.running_var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
