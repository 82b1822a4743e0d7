//! Multi-layer perceptron whose forward and backward passes run on quantized
//! weights while the optimizer writes to the hidden weights
//! (straight-through estimation).
//!
//! Hidden layers are `affine -> batch norm -> ReLU`. The output layer is a
//! plain affine map unless `output_bn` is set. Activations stay full
//! precision.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::quantgrid::QuantGrid;
use crate::xbar::CrossbarArray;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the matrix products read their weights from.
#[derive(Clone, Copy)]
pub enum WeightSource<'a> {
    /// The software copy of the quantized weights.
    Exact,
    /// Conductances stored in programmed crossbar tiles, one tile per layer.
    Crossbar(&'a CrossbarArray),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }
}

/// Batch-norm parameters of a whole network, one entry per layer.
pub type BnState = Vec<Option<BatchNorm>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// High-precision hidden weights, `fan_in x fan_out`.
    pub w_hidden: Array2<f64>,
    /// Quantized weights; always members of `grid` outside an update.
    pub w_quant: Array2<f64>,
    /// Grid index of each quantized weight.
    pub level_index: Array2<u16>,
    pub bn: Option<BatchNorm>,
    pub grid: QuantGrid,
}

impl DenseLayer {
    pub fn new(fan_in: usize, fan_out: usize, grid: QuantGrid, with_bn: bool) -> Self {
        let zero = grid.zero_index();
        let mut layer = Self {
            w_hidden: Array2::from_elem((fan_in, fan_out), grid.level(zero)),
            w_quant: Array2::zeros((fan_in, fan_out)),
            level_index: Array2::zeros((fan_in, fan_out)),
            bn: with_bn.then(|| BatchNorm::new(fan_out)),
            grid,
        };
        layer.requantize();
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w_hidden.ncols()
    }

    /// Projects every hidden weight onto the grid. Returns how many quantized
    /// weights changed level.
    pub fn requantize(&mut self) -> usize {
        let grid = &self.grid;
        let mut changed = 0;
        Zip::from(&self.w_hidden)
            .and(&mut self.w_quant)
            .and(&mut self.level_index)
            .for_each(|&h, q, idx| {
                let i = grid.nearest_index(h);
                if i as u16 != *idx {
                    changed += 1;
                }
                *idx = i as u16;
                *q = grid.level(i);
            });
        changed
    }

    /// Replaces the hidden weights and re-projects.
    pub fn set_hidden(&mut self, w: Array2<f64>) -> Result<()> {
        if w.dim() != self.w_hidden.dim() {
            return Err(Error::shape("hidden weights", self.w_hidden.dim(), w.dim()));
        }
        self.w_hidden = w;
        self.requantize();
        Ok(())
    }
}

/// Per-layer values recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub input: Array2<f64>,
    pub x_hat: Option<Array2<f64>>,
    pub batch_mean: Option<Array1<f64>>,
    pub batch_var: Option<Array1<f64>>,
    pub inv_std: Option<Array1<f64>>,
    /// Layer output before the activation.
    pub pre_activation: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub layers: Vec<LayerTape>,
    pub logits: Array2<f64>,
}

/// Loss gradients with respect to the quantized weights and BN parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub gamma: Vec<Option<Array1<f64>>>,
    pub beta: Vec<Option<Array1<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Builds layers for `dims = [input, hidden..., output]`. Hidden layers
    /// carry batch norm; the output layer does when `output_bn` is set.
    pub fn new(dims: &[usize], grid: &QuantGrid, output_bn: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer dimensions {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(w[0], w[1], grid.clone(), i < last || output_bn))
            .collect();
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].fan_in()];
        d.extend(self.layers.iter().map(|l| l.fan_out()));
        d
    }

    pub fn num_synapses(&self) -> usize {
        self.layers.iter().map(|l| l.w_hidden.len()).sum()
    }

    /// Software initialization: hidden weights uniform over the intervals
    /// adjacent to the zero level. The number of intervals on each side grows
    /// with the Kaiming bound `sqrt(6 / fan_in)` measured in grid spacings.
    pub fn init_software<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            let grid = &layer.grid;
            let z = grid.zero_index();
            let spacing = if z + 1 < grid.len() { grid.interval(z) } else { grid.interval(z - 1) };
            let kaiming = (6.0 / layer.fan_in() as f64).sqrt();
            let k = ((kaiming / spacing).ceil() as usize).max(1);
            let lo = grid.level(z.saturating_sub(k));
            let hi = grid.level((z + k).min(grid.len() - 1));
            layer.w_hidden.mapv_inplace(|_| rng.gen_range(lo..hi));
            layer.requantize();
        }
    }

    pub fn requantize(&mut self) -> usize {
        self.layers.iter_mut().map(DenseLayer::requantize).sum()
    }

    /// Copy of every layer's batch-norm parameters and statistics.
    pub fn bn_state(&self) -> BnState {
        self.layers.iter().map(|l| l.bn.clone()).collect()
    }

    /// Replaces all batch-norm parameters; `state` must come from a network
    /// of the same shape.
    pub fn set_bn_state(&mut self, state: &BnState) -> Result<()> {
        let ours: Vec<_> = self.layers.iter().map(|l| l.bn.as_ref().map(|b| b.gamma.len())).collect();
        let theirs: Vec<_> = state.iter().map(|b| b.as_ref().map(|b| b.gamma.len())).collect();
        if ours != theirs {
            return Err(Error::shape("batch-norm state", ours, theirs));
        }
        for (layer, bn) in self.layers.iter_mut().zip(state) {
            layer.bn.clone_from(bn);
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let fan_in = self.layers[0].fan_in();
        if x.ncols() != fan_in {
            return Err(Error::shape("network input", fan_in, x.ncols()));
        }
        Ok(())
    }

    fn matmul(&self, l: usize, x: &Array2<f64>, source: WeightSource<'_>) -> Result<Array2<f64>> {
        match source {
            WeightSource::Exact => Ok(x.dot(&self.layers[l].w_quant)),
            WeightSource::Crossbar(xbar) => xbar.forward_batch(l, x),
        }
    }

    fn matmul_t(&self, l: usize, delta: &Array2<f64>, source: WeightSource<'_>) -> Result<Array2<f64>> {
        match source {
            WeightSource::Exact => Ok(delta.dot(&self.layers[l].w_quant.t())),
            WeightSource::Crossbar(xbar) => xbar.backward_batch(l, delta),
        }
    }

    fn check_source(&self, source: WeightSource<'_>) -> Result<()> {
        if let WeightSource::Crossbar(xbar) = source {
            let shapes: Vec<_> = self.layers.iter().map(|l| l.w_quant.dim()).collect();
            if xbar.shapes() != shapes {
                return Err(Error::shape("crossbar tiles", shapes, xbar.shapes()));
            }
        }
        Ok(())
    }

    /// Inference pass. `Mode::Eval` normalizes with running statistics,
    /// `Mode::Train` with the statistics of this batch.
    pub fn forward(&self, x: &Array2<f64>, mode: Mode, source: WeightSource<'_>) -> Result<Array2<f64>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x, source)?.logits),
            Mode::Eval => {
                self.check_input(x)?;
                self.check_source(source)?;
                let mut h = x.clone();
                let last = self.layers.len() - 1;
                for (l, layer) in self.layers.iter().enumerate() {
                    let mut z = self.matmul(l, &h, source)?;
                    if let Some(bn) = &layer.bn {
                        let scale = Zip::from(&bn.gamma)
                            .and(&bn.running_var)
                            .map_collect(|&g, &v| g / (v + BN_EPS).sqrt());
                        let shift = &bn.beta - &(&bn.running_mean * &scale);
                        z *= &scale;
                        z += &shift;
                    }
                    if l < last {
                        z.mapv_inplace(|v| v.max(0.0));
                    }
                    h = z;
                }
                Ok(h)
            }
        }
    }

    /// Training forward pass recording everything `backward` needs.
    pub fn forward_train(&self, x: &Array2<f64>, source: WeightSource<'_>) -> Result<ForwardTape> {
        self.check_input(x)?;
        self.check_source(source)?;
        let n = x.nrows() as f64;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = self.matmul(l, &h, source)?;
            let (pre, x_hat, mean, var, inv_std) = match &layer.bn {
                Some(bn) => {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let x_hat = centered * &inv_std;
                    let y = &x_hat * &bn.gamma + &bn.beta;
                    (y, Some(x_hat), Some(mean), Some(var), Some(inv_std))
                }
                None => (z, None, None, None, None),
            };
            let out = if l < last { pre.mapv(|v| v.max(0.0)) } else { pre.clone() };
            tapes.push(LayerTape {
                input: std::mem::replace(&mut h, out),
                x_hat,
                batch_mean: mean,
                batch_var: var,
                inv_std,
                pre_activation: pre,
            });
        }
        Ok(ForwardTape { layers: tapes, logits: h })
    }

    /// Back-propagates softmax cross-entropy through a recorded tape.
    pub fn backward(&self, tape: Option<&ForwardTape>, labels: &[usize], source: WeightSource<'_>) -> Result<Gradients> {
        let tape = tape.ok_or_else(|| Error::Usage("backward requires a training forward tape".into()))?;
        if tape.layers.len() != self.layers.len() {
            return Err(Error::shape("forward tape", self.layers.len(), tape.layers.len()));
        }
        let n = tape.logits.nrows();
        if labels.len() != n {
            return Err(Error::shape("labels", n, labels.len()));
        }
        let mut delta = softmax(&tape.logits);
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        delta /= n as f64;

        let layers = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); layers];
        let mut gamma = vec![None; layers];
        let mut beta = vec![None; layers];
        for l in (0..layers).rev() {
            let lt = &tape.layers[l];
            if l < layers - 1 {
                Zip::from(&mut delta)
                    .and(&lt.pre_activation)
                    .for_each(|d, &p| {
                        if p <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            if let (Some(bn), Some(x_hat), Some(inv_std)) = (&self.layers[l].bn, &lt.x_hat, &lt.inv_std) {
                let dgamma = (&delta * x_hat).sum_axis(Axis(0));
                let dbeta = delta.sum_axis(Axis(0));
                let nf = n as f64;
                let coeff = &bn.gamma * inv_std / nf;
                let mut dz = &delta * nf - &dbeta;
                dz -= &(x_hat * &dgamma);
                dz *= &coeff;
                delta = dz;
                gamma[l] = Some(dgamma);
                beta[l] = Some(dbeta);
            }
            weights[l] = lt.input.t().dot(&delta);
            if l > 0 {
                delta = self.matmul_t(l, &delta, source)?;
            }
        }
        Ok(Gradients { weights, gamma, beta })
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates (unbiased variance).
    pub fn update_running_stats(&mut self, tape: &ForwardTape) {
        let n = tape.logits.nrows() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(mean), Some(var)) = (&mut layer.bn, &lt.batch_mean, &lt.batch_var) {
                Zip::from(&mut bn.running_mean).and(mean).for_each(|r, &m| {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                });
                Zip::from(&mut bn.running_var).and(var).for_each(|r, &v| {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                });
            }
        }
    }

    /// Classification accuracy in percent over a whole split, evaluated in
    /// chunks of `chunk` samples.
    pub fn accuracy(&self, split: &crate::data::DatasetSplit, source: WeightSource<'_>, chunk: usize) -> Result<f64> {
        if split.is_empty() {
            return Ok(0.0);
        }
        let idx: Vec<usize> = (0..split.len()).collect();
        let mut correct = 0usize;
        for part in idx.chunks(chunk.max(1)) {
            let (x, y) = split.batch(part);
            let logits = self.forward(&x, Mode::Eval, source)?;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        Ok(100.0 * correct as f64 / split.len() as f64)
    }
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean softmax cross-entropy.
pub fn loss(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len().max(1) as f64
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
