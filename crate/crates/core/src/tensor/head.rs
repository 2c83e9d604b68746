//! Feed-forward scoring head: `dropout -> [linear -> batch-norm -> LeakyReLU -> dropout] x H_l -> linear`.
//!
//! Forward passes take `&self`; train-mode batch statistics are returned in the
//! cache and folded into the running estimates by [`MlpHead::commit_batch_stats`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dense::{gemm, DenseMatrix, Trans};
use crate::error::{shape_err, GcrError, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
}

impl HeadConfig {
    /// Default head (one hidden layer of 256, dropout 0.7, slope 0.02, momentum 0.1).
    pub fn with_input(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_units: 256,
            hidden_layers: 1,
            dropout: 0.7,
            leaky_slope: 0.02,
            bn_momentum: 0.1,
        }
    }

    pub fn linear(input_dim: usize) -> Self {
        Self {
            hidden_layers: 0,
            dropout: 0.0,
            ..Self::with_input(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(GcrError::Config("head input dimension must be positive".into()));
        }
        if self.hidden_layers > 0 && self.hidden_units == 0 {
            return Err(GcrError::Config("hidden layers need at least one unit".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GcrError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.leaky_slope > 0.0) {
            return Err(GcrError::Config("leaky slope must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(GcrError::Config("batch-norm momentum must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Widths of every layer boundary: input, hidden..., 1.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        w.push(1);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Linear {
    weight: DenseMatrix,
    bias: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchNorm {
    scale: DenseMatrix,
    shift: DenseMatrix,
    running_mean: DenseMatrix,
    running_var: DenseMatrix,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        let mut scale = DenseMatrix::zeros(1, n);
        scale.fill(1.0);
        let mut running_var = DenseMatrix::zeros(1, n);
        running_var.fill(1.0);
        Self {
            scale,
            shift: DenseMatrix::zeros(1, n),
            running_mean: DenseMatrix::zeros(1, n),
            running_var,
        }
    }
}

/// Whether a trainable tensor is subject to L2 regularisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    config: HeadConfig,
    layers: Vec<Linear>,
    norms: Vec<BatchNorm>,
    #[serde(skip)]
    revision: u64,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: DenseMatrix,
    inv_std: Vec<f64>,
    pre_act: DenseMatrix,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    revision: u64,
    mode: Mode,
    batch: usize,
    input_mask: Option<DenseMatrix>,
    layer_inputs: Vec<DenseMatrix>,
    norms: Vec<NormCache>,
    hidden_masks: Vec<Option<DenseMatrix>>,
}

impl HeadCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients in [`MlpHead::params`] order plus the gradient wrt the input batch.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub params: Vec<DenseMatrix>,
    pub input: DenseMatrix,
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> DenseMatrix {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("mask shape")
}

fn apply_mask(x: &mut DenseMatrix, mask: &DenseMatrix) {
    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

impl MlpHead {
    /// Xavier-uniform weights, zero biases, identity batch-norm.
    pub fn new(config: HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Linear {
                    weight: DenseMatrix::from_vec(fan_out, fan_in, data).expect("shape"),
                    bias: DenseMatrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self::assemble(config, layers))
    }

    /// Every weight and bias zero.
    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: DenseMatrix::zeros(w[1], w[0]),
                bias: DenseMatrix::zeros(1, w[1]),
            })
            .collect();
        Ok(Self::assemble(config, layers))
    }

    /// A single linear map `w . x + bias`.
    pub fn linear(weights: &[f64], bias: f64) -> Result<Self> {
        let mut head = Self::zeros(HeadConfig::linear(weights.len()))?;
        head.layers[0].weight = DenseMatrix::row_vector(weights);
        head.layers[0].bias.set(0, 0, bias);
        Ok(head)
    }

    fn assemble(config: HeadConfig, layers: Vec<Linear>) -> Self {
        let norms = (0..config.hidden_layers)
            .map(|_| BatchNorm::new(config.hidden_units))
            .collect();
        Self {
            config,
            layers,
            norms,
            revision: 0,
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn is_linear(&self) -> bool {
        self.config.hidden_layers == 0
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let mut cfg = self.config;
        cfg.dropout = rate;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Weight matrix of the first linear map (`out x input_dim`).
    pub fn first_weight(&self) -> &DenseMatrix {
        &self.layers[0].weight
    }

    pub fn output_bias(&self) -> f64 {
        self.layers.last().expect("at least one layer").bias.get(0, 0)
    }

    /// Trainable tensors with names and regularisation roles, in a fixed order.
    pub fn params(&self) -> Vec<(String, &DenseMatrix, ParamRole)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.weight"), &layer.weight, ParamRole::Weight));
            out.push((format!("layer{l}.bias"), &layer.bias, ParamRole::Bias));
        }
        for (l, norm) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.scale"), &norm.scale, ParamRole::Norm));
            out.push((format!("norm{l}.shift"), &norm.shift, ParamRole::Norm));
        }
        out
    }

    /// Mutable view in [`Self::params`] order. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.revision += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for norm in &mut self.norms {
            out.push(&mut norm.scale);
            out.push(&mut norm.shift);
        }
        out
    }

    /// Non-trainable batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = Vec::new();
        for (l, norm) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.running_mean"), &norm.running_mean));
            out.push((format!("norm{l}.running_var"), &norm.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.revision += 1;
        let mut out = Vec::new();
        for norm in &mut self.norms {
            out.push(&mut norm.running_mean);
            out.push(&mut norm.running_var);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Single-vector convenience wrapper around [`Self::forward_batch`].
    pub fn forward(&self, input: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Result<(f64, HeadCache)> {
        let x = DenseMatrix::row_vector(input);
        let (out, cache) = self.forward_batch(&x, mode, rng)?;
        Ok((out[0], cache))
    }

    /// Scores every row of `input`. Train mode normalises with batch statistics and
    /// applies dropout; eval mode uses running statistics and no dropout.
    pub fn forward_batch(
        &self,
        input: &DenseMatrix,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, HeadCache)> {
        if input.cols() != self.config.input_dim {
            return Err(shape_err(format!(
                "head expects input width {}, got {}",
                self.config.input_dim,
                input.cols()
            )));
        }
        let batch = input.rows();
        if batch == 0 {
            return Err(shape_err("empty batch"));
        }
        let use_dropout = mode == Mode::Train && self.config.dropout > 0.0;
        if use_dropout && rng.is_none() {
            return Err(GcrError::Contract("train-mode dropout needs a generator".into()));
        }
        let p = self.config.dropout;

        let mut x = input.clone();
        let input_mask = if use_dropout {
            let m = dropout_mask(batch, x.cols(), p, rng.as_deref_mut().expect("checked"));
            apply_mask(&mut x, &m);
            Some(m)
        } else {
            None
        };

        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.norms.len());
        let mut hidden_masks = Vec::with_capacity(self.norms.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let width = layer.weight.rows();
            let mut z = DenseMatrix::zeros(batch, width);
            gemm(1.0, &x, Trans::No, &layer.weight, Trans::Yes, 0.0, &mut z)?;
            for r in 0..batch {
                for (v, b) in z.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            layer_inputs.push(x);
            if l == self.norms.len() {
                x = z;
                break;
            }
            let norm = &self.norms[l];
            let (mean, var) = match mode {
                Mode::Train => column_stats(&z),
                Mode::Eval => (
                    norm.running_mean.data().to_vec(),
                    norm.running_var.data().to_vec(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            for r in 0..batch {
                for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - mean[c]) * inv_std[c];
                }
            }
            let mut pre = xhat.clone();
            for r in 0..batch {
                let row = pre.row_mut(r);
                for c in 0..width {
                    row[c] = row[c] * norm.scale.data()[c] + norm.shift.data()[c];
                }
            }
            let slope = self.config.leaky_slope;
            let mut act = pre.clone();
            act.data_mut()
                .iter_mut()
                .for_each(|v| if *v <= 0.0 { *v *= slope });
            let mask = if use_dropout {
                let m = dropout_mask(batch, width, p, rng.as_deref_mut().expect("checked"));
                apply_mask(&mut act, &m);
                Some(m)
            } else {
                None
            };
            hidden_masks.push(mask);
            norms.push(NormCache {
                xhat,
                inv_std,
                pre_act: pre,
                batch_mean: mean,
                batch_var: var,
            });
            x = act;
        }
        let out = x.into_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GcrError::Numeric("non-finite head output".into()));
        }
        Ok((
            out,
            HeadCache {
                revision: self.revision,
                mode,
                batch,
                input_mask,
                layer_inputs,
                norms,
                hidden_masks,
            },
        ))
    }

    /// Gradients of `sum_b upstream[b] * out[b]`.
    pub fn backward(&self, cache: &HeadCache, upstream: &[f64]) -> Result<HeadGrads> {
        if cache.revision != self.revision || cache.layer_inputs.len() != self.layers.len() {
            return Err(GcrError::Contract(
                "cache was produced before the head was modified".into(),
            ));
        }
        if upstream.len() != cache.batch {
            return Err(shape_err(format!(
                "upstream has {} entries for a batch of {}",
                upstream.len(),
                cache.batch
            )));
        }
        let batch = cache.batch;
        let n_layers = self.layers.len();
        let mut layer_grads: Vec<(DenseMatrix, DenseMatrix)> = Vec::with_capacity(n_layers);
        let mut norm_grads: Vec<(DenseMatrix, DenseMatrix)> = Vec::with_capacity(self.norms.len());

        // gradient wrt the output of linear layer `l`
        let mut dz = DenseMatrix::from_vec(batch, 1, upstream.to_vec())?;
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let xin = &cache.layer_inputs[l];
            let mut dw = DenseMatrix::zeros(layer.weight.rows(), layer.weight.cols());
            gemm(1.0, &dz, Trans::Yes, xin, Trans::No, 0.0, &mut dw)?;
            let mut db = DenseMatrix::zeros(1, layer.weight.rows());
            for r in 0..batch {
                for (b, g) in db.data_mut().iter_mut().zip(dz.row(r)) {
                    *b += g;
                }
            }
            let mut dx = DenseMatrix::zeros(batch, layer.weight.cols());
            gemm(1.0, &dz, Trans::No, &layer.weight, Trans::No, 0.0, &mut dx)?;
            layer_grads.push((dw, db));

            if l == 0 {
                if let Some(mask) = &cache.input_mask {
                    apply_mask(&mut dx, mask);
                }
                layer_grads.reverse();
                norm_grads.reverse();
                let mut params = Vec::with_capacity(2 * (n_layers + self.norms.len()));
                for (w, b) in layer_grads {
                    params.push(w);
                    params.push(b);
                }
                for (s, t) in norm_grads {
                    params.push(s);
                    params.push(t);
                }
                return Ok(HeadGrads { params, input: dx });
            }

            // back through dropout, LeakyReLU and batch-norm of hidden layer l-1
            let h = l - 1;
            if let Some(mask) = &cache.hidden_masks[h] {
                apply_mask(&mut dx, mask);
            }
            let nc = &cache.norms[h];
            let slope = self.config.leaky_slope;
            for (g, pre) in dx.data_mut().iter_mut().zip(nc.pre_act.data()) {
                if *pre <= 0.0 {
                    *g *= slope;
                }
            }
            let norm = &self.norms[h];
            let width = norm.scale.cols();
            let mut dscale = DenseMatrix::zeros(1, width);
            let mut dshift = DenseMatrix::zeros(1, width);
            for r in 0..batch {
                let (g, xh) = (dx.row(r), nc.xhat.row(r));
                for c in 0..width {
                    dscale.data_mut()[c] += g[c] * xh[c];
                    dshift.data_mut()[c] += g[c];
                }
            }
            let mut dpre = dx;
            match cache.mode {
                Mode::Eval => {
                    for r in 0..batch {
                        let row = dpre.row_mut(r);
                        for c in 0..width {
                            row[c] *= norm.scale.data()[c] * nc.inv_std[c];
                        }
                    }
                }
                Mode::Train => {
                    let n = batch as f64;
                    for c in 0..width {
                        let gamma = norm.scale.data()[c];
                        let sum_dxhat = gamma * dshift.data()[c];
                        let sum_dxhat_xhat = gamma * dscale.data()[c];
                        for r in 0..batch {
                            let dxhat = dpre.get(r, c) * gamma;
                            let xh = nc.xhat.get(r, c);
                            let v = nc.inv_std[c] / n * (n * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
                            dpre.set(r, c, v);
                        }
                    }
                }
            }
            norm_grads.push((dscale, dshift));
            dz = dpre;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Folds the batch statistics of a train-mode cache into the running estimates.
    pub fn commit_batch_stats(&mut self, cache: &HeadCache) -> Result<()> {
        if cache.mode != Mode::Train {
            return Ok(());
        }
        if cache.revision != self.revision {
            return Err(GcrError::Contract("stale cache".into()));
        }
        let m = self.config.bn_momentum;
        let n = cache.batch as f64;
        let correction = if cache.batch > 1 { n / (n - 1.0) } else { 1.0 };
        for (norm, nc) in self.norms.iter_mut().zip(&cache.norms) {
            for c in 0..norm.scale.cols() {
                let rm = &mut norm.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * nc.batch_mean[c];
                let rv = &mut norm.running_var.data_mut()[c];
                *rv = (1.0 - m) * *rv + m * nc.batch_var[c] * correction;
            }
        }
        self.revision += 1;
        Ok(())
    }

    /// Eval-mode pass starting from `x . W0^T` of the first linear map (bias not
    /// yet added). Lets callers compute the first product in a cheaper factorised form.
    pub fn eval_from_first_product(&self, mut z: DenseMatrix) -> Result<Vec<f64>> {
        let first = &self.layers[0];
        z.expect_shape((z.rows(), first.weight.rows()))?;
        let batch = z.rows();
        for r in 0..batch {
            for (v, b) in z.row_mut(r).iter_mut().zip(first.bias.data()) {
                *v += b;
            }
        }
        let slope = self.config.leaky_slope;
        for l in 0..self.norms.len() {
            let norm = &self.norms[l];
            for r in 0..batch {
                let row = z.row_mut(r);
                for c in 0..row.len() {
                    let xh = (row[c] - norm.running_mean.data()[c])
                        / (norm.running_var.data()[c] + BN_EPS).sqrt();
                    let y = xh * norm.scale.data()[c] + norm.shift.data()[c];
                    row[c] = if y <= 0.0 { y * slope } else { y };
                }
            }
            let next = &self.layers[l + 1];
            let mut out = DenseMatrix::zeros(batch, next.weight.rows());
            gemm(1.0, &z, Trans::No, &next.weight, Trans::Yes, 0.0, &mut out)?;
            for r in 0..batch {
                for (v, b) in out.row_mut(r).iter_mut().zip(next.bias.data()) {
                    *v += b;
                }
            }
            z = out;
        }
        let out = z.into_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GcrError::Numeric("non-finite head output".into()));
        }
        Ok(out)
    }
}

fn column_stats(z: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mut mean = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn random_input(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn perturb_norms(head: &mut MlpHead, rng: &mut Rng) {
        for t in head.params_mut() {
            if t.rows() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        for (k, t) in head.buffers_mut().into_iter().enumerate() {
            t.data_mut().iter_mut().for_each(|v| {
                *v = if k % 2 == 0 { rng.random_range(-0.2..0.2) } else { rng.random_range(0.5..2.0) }
            });
        }
    }

    /// Straightforward per-sample re-evaluation of the eval-mode head.
    fn oracle_eval(head: &MlpHead, x: &[f64]) -> f64 {
        let mut act = x.to_vec();
        for (l, layer) in head.layers.iter().enumerate() {
            let mut z: Vec<f64> = (0..layer.weight.rows())
                .map(|o| {
                    let mut s = layer.bias.get(0, o);
                    for (k, a) in act.iter().enumerate() {
                        s += layer.weight.get(o, k) * a;
                    }
                    s
                })
                .collect();
            if l < head.norms.len() {
                let n = &head.norms[l];
                for (c, v) in z.iter_mut().enumerate() {
                    let y = n.scale.get(0, c) * (*v - n.running_mean.get(0, c))
                        / (n.running_var.get(0, c) + BN_EPS).sqrt()
                        + n.shift.get(0, c);
                    *v = if y > 0.0 { y } else { head.config.leaky_slope * y };
                }
            }
            act = z;
        }
        act[0]
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut head = MlpHead::zeros(HeadConfig { dropout: 0.0, ..HeadConfig::with_input(5) }).unwrap();
        let n = head.params().len();
        head.params_mut()[n - 3].set(0, 0, 1.75); // output bias
        let (y, _) = head.forward(&[3.0, -1.0, 2.0, 0.5, 9.0], Mode::Eval, None).unwrap();
        assert!((y - 1.75).abs() < 1e-12);
    }

    #[test]
    fn linear_head_is_a_dot_product() {
        let w = [0.5, -2.0, 3.0];
        let head = MlpHead::linear(&w, 0.0).unwrap();
        let x = [1.0, 2.0, -1.0];
        let (y, cache) = head.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y, 0.5 - 4.0 - 3.0);
        let g = head.backward(&cache, &[2.0]).unwrap();
        assert_eq!(g.input.data(), &[1.0, -4.0, 6.0]);
        assert_eq!(g.params[0].data(), &[2.0, 4.0, -2.0]);
        assert_eq!(g.params[1].data(), &[2.0]);
    }

    #[test]
    fn constant_head_gradients() {
        let head = MlpHead::linear(&[0.0; 4], 1.5).unwrap();
        let x = [0.3, -0.7, 1.1, 2.0];
        let (_, cache) = head.forward(&x, Mode::Eval, None).unwrap();
        let g = head.backward(&cache, &[-0.5]).unwrap();
        for (gw, xi) in g.params[0].data().iter().zip(&x) {
            assert_eq!(*gw, -0.5 * xi);
        }
        assert!(g.input.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_head_matches_oracle() {
        let mut rng = rng::stream(4, Stream::Init);
        for hidden_layers in 0..3 {
            let cfg = HeadConfig { hidden_units: 7, hidden_layers, ..HeadConfig::with_input(6) };
            let mut head = MlpHead::new(cfg, &mut rng).unwrap();
            perturb_norms(&mut head, &mut rng);
            let x = random_input(6, &mut rng);
            let (y, _) = head.forward(&x, Mode::Eval, None).unwrap();
            assert!((y - oracle_eval(&head, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut rng = rng::stream(5, Stream::Init);
        let head = MlpHead::new(HeadConfig::with_input(4), &mut rng).unwrap();
        let x = random_input(4, &mut rng);
        let mut r1 = rng::stream(1, Stream::Dropout);
        let before = r1.clone();
        let (a, _) = head.forward(&x, Mode::Eval, Some(&mut r1)).unwrap();
        let (b, _) = head.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(r1, before, "eval mode must not consume randomness");
    }

    #[test]
    fn shape_and_contract_errors() {
        let mut rng = rng::stream(6, Stream::Init);
        let mut head = MlpHead::new(HeadConfig::with_input(3), &mut rng).unwrap();
        assert!(matches!(head.forward(&[1.0, 2.0], Mode::Eval, None), Err(GcrError::Shape(_))));
        assert!(matches!(head.forward(&[1.0; 3], Mode::Train, None), Err(GcrError::Contract(_))));
        let (_, cache) = head.forward(&[1.0; 3], Mode::Eval, None).unwrap();
        head.params_mut();
        assert!(matches!(head.backward(&cache, &[1.0]), Err(GcrError::Contract(_))));
        assert!(HeadConfig { dropout: 1.0, ..HeadConfig::with_input(3) }.validate().is_err());
        assert!(HeadConfig { leaky_slope: 0.0, ..HeadConfig::with_input(3) }.validate().is_err());
    }

    fn fd_check(head: &mut MlpHead, x: &DenseMatrix, mode: Mode, upstream: &[f64]) -> f64 {
        let (_, cache) = head.forward_batch(x, mode, None).unwrap();
        let g = head.backward(&cache, upstream).unwrap();
        let loss = |h: &MlpHead, x: &DenseMatrix| -> f64 {
            let (out, _) = h.forward_batch(x, mode, None).unwrap();
            out.iter().zip(upstream).map(|(o, u)| o * u).sum()
        };
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let n_params = head.params().len();
        for p in 0..n_params {
            for k in 0..head.params()[p].1.len() {
                let orig = head.params()[p].1.data()[k];
                head.params_mut()[p].data_mut()[k] = orig + eps;
                let up = loss(head, x);
                head.params_mut()[p].data_mut()[k] = orig - eps;
                let down = loss(head, x);
                head.params_mut()[p].data_mut()[k] = orig;
                let num = (up - down) / (2.0 * eps);
                worst = worst.max((g.params[p].data()[k] - num).abs() / num.abs().max(1.0));
            }
        }
        let mut xp = x.clone();
        for k in 0..x.len() {
            let orig = xp.data()[k];
            xp.data_mut()[k] = orig + eps;
            let up = loss(head, &xp);
            xp.data_mut()[k] = orig - eps;
            let down = loss(head, &xp);
            xp.data_mut()[k] = orig;
            let num = (up - down) / (2.0 * eps);
            worst = worst.max((g.input.data()[k] - num).abs() / num.abs().max(1.0));
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng::stream(7, Stream::Init);
        for hidden_layers in 0..3 {
            for mode in [Mode::Eval, Mode::Train] {
                let cfg = HeadConfig {
                    hidden_units: 5,
                    hidden_layers,
                    dropout: 0.0,
                    ..HeadConfig::with_input(4)
                };
                let mut head = MlpHead::new(cfg, &mut rng).unwrap();
                perturb_norms(&mut head, &mut rng);
                let x = DenseMatrix::from_vec(6, 4, random_input(24, &mut rng)).unwrap();
                let upstream = random_input(6, &mut rng);
                let err = fd_check(&mut head, &x, mode, &upstream);
                assert!(err < 1e-4, "H_l={hidden_layers} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn dropout_backward_uses_the_same_mask() {
        let mut rng = rng::stream(8, Stream::Init);
        let cfg = HeadConfig { hidden_units: 6, dropout: 0.5, ..HeadConfig::with_input(5) };
        let head = MlpHead::new(cfg, &mut rng).unwrap();
        let x = DenseMatrix::from_vec(4, 5, random_input(20, &mut rng)).unwrap();
        let drop = rng::stream(9, Stream::Dropout);
        let (_, cache) = head.forward_batch(&x, Mode::Train, Some(&mut drop.clone())).unwrap();
        let g = head.backward(&cache, &[1.0, -1.0, 0.5, 2.0]).unwrap();
        // input gradient vanishes exactly where the input was dropped
        let mask = cache.input_mask.as_ref().unwrap();
        for (gv, m) in g.input.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        // finite differences with the mask held fixed (same dropout stream every call)
        let loss = |h: &MlpHead, x: &DenseMatrix| -> f64 {
            let (out, _) = h.forward_batch(x, Mode::Train, Some(&mut drop.clone())).unwrap();
            out[0] - out[1] + 0.5 * out[2] + 2.0 * out[3]
        };
        let eps = 1e-5;
        let mut xp = x.clone();
        for k in 0..x.len() {
            let orig = xp.data()[k];
            xp.data_mut()[k] = orig + eps;
            let up = loss(&head, &xp);
            xp.data_mut()[k] = orig - eps;
            let down = loss(&head, &xp);
            xp.data_mut()[k] = orig;
            let num = (up - down) / (2.0 * eps);
            assert!((g.input.data()[k] - num).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = rng::stream(10, Stream::Init);
        let cfg = HeadConfig { hidden_units: 3, dropout: 0.0, ..HeadConfig::with_input(2) };
        let mut head = MlpHead::new(cfg, &mut rng).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let (_, cache) = head.forward_batch(&x, Mode::Train, None).unwrap();
        let z = x.matmul(Trans::No, head.first_weight(), Trans::Yes).unwrap();
        head.commit_batch_stats(&cache).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..3).map(|r| z.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let unbiased = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
            let rm = head.buffers()[0].1.get(0, c);
            let rv = head.buffers()[1].1.get(0, c);
            assert!((rm - 0.1 * mean).abs() < 1e-12);
            assert!((rv - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn factorised_entry_matches_forward() {
        let mut rng = rng::stream(11, Stream::Init);
        for hidden_layers in 0..3 {
            let cfg = HeadConfig { hidden_units: 4, hidden_layers, ..HeadConfig::with_input(3) };
            let mut head = MlpHead::new(cfg, &mut rng).unwrap();
            perturb_norms(&mut head, &mut rng);
            let x = DenseMatrix::from_vec(5, 3, random_input(15, &mut rng)).unwrap();
            let (want, _) = head.forward_batch(&x, Mode::Eval, None).unwrap();
            let z = x.matmul(Trans::No, head.first_weight(), Trans::Yes).unwrap();
            let got = head.eval_from_first_product(z).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
