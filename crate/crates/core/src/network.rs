//! The vanilla ConvNet family `[conv -> (bn) -> relu]^n -> fc -> softmax`.
//!
//! Every conv layer uses stride 1 and same padding (`k / 2`), so spatial extent is constant
//! through depth and the fully-connected layer consumes the last feature map flattened.
//! Filters are switched off by a [`PruneMask`]: the masked output channel is set to zero
//! after the activation and every parameter belonging to that filter receives a zero gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    /// Restores channel `j` to its freshly-initialized state.
    pub fn reset_channel(&mut self, j: usize) {
        self.gamma.data_mut()[j] = 1.0;
        self.beta.data_mut()[j] = 0.0;
        self.running_mean.data_mut()[j] = 0.0;
        self.running_var.data_mut()[j] = 1.0;
    }
}

/// One convolutional layer. Weights are `[J, c, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNormState>,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Option<Tensor>, bn: Option<BatchNormState>) -> Result<Self> {
        if weights.rank() != 4 || weights.shape()[2] != weights.shape()[3] {
            return Err(Error::dim(
                "conv_layer",
                format!("weights must be [J, c, k, k], got {:?}", weights.shape()),
            ));
        }
        let j = weights.shape()[0];
        if let Some(b) = &bias {
            if b.shape() != [j] {
                return Err(Error::dim("conv_layer", format!("bias {:?} for {j} filters", b.shape())));
            }
        }
        if let Some(bn) = &bn {
            if bn.gamma.shape() != [j] {
                return Err(Error::dim("conv_layer", "batch-norm width differs from filter count"));
            }
        }
        Ok(ConvLayer { weights, bias, bn })
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Length of one flattened filter, `k·k·c`.
    pub fn fan_in(&self) -> usize {
        self.weights.len() / self.filters()
    }

    /// `[J, k·k·c]` view of the filters, each row flattened channel-major, then row, then column.
    pub fn filter_matrix(&self) -> Tensor {
        self.weights
            .clone()
            .reshape(&[self.filters(), self.fan_in()])
            .expect("weights are [J, c, k, k]")
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        self.weights.row(j)
    }

    pub fn set_filter_row(&mut self, j: usize, row: &[f64]) -> Result<()> {
        if j >= self.filters() || row.len() != self.fan_in() {
            return Err(Error::dim(
                "set_filter_row",
                format!("row {j} of length {} into {:?}", row.len(), self.weights.shape()),
            ));
        }
        self.weights.row_mut(j).copy_from_slice(row);
        Ok(())
    }
}

/// Fully-connected classifier head, weights `[classes, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Architecture of a `C^n(X)` model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub num_classes: usize,
    pub batch_norm: bool,
    pub conv_bias: bool,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers == 0 {
            problems.push("layers must be >= 1".to_string());
        }
        if self.filters == 0 || self.kernel == 0 || self.input_channels == 0 {
            problems.push("filters, kernel and input channels must be >= 1".to_string());
        }
        if self.kernel.is_multiple_of(2) {
            problems.push(format!("kernel {} must be odd for same padding", self.kernel));
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be >= 2".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Per-filter liveness bits; `true` is live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn full(model: &Model) -> Self {
        PruneMask {
            layers: model.conv.iter().map(|l| vec![true; l.filters()]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(i) = layers.iter().position(|l| !l.iter().any(|&b| b)) {
            return Err(Error::Config(format!("mask leaves layer {i} without a live filter")));
        }
        Ok(PruneMask { layers })
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn is_live(&self, layer: usize, filter: usize) -> bool {
        self.layers[layer][filter]
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&b| b))
    }

    pub fn live_count(&self) -> usize {
        self.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).sum()
    }

    pub fn live_in_layer(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&b| b).count()
    }

    /// Marks a filter dead. Refuses to kill the last live filter of a layer.
    pub fn kill(&mut self, layer: usize, filter: usize) -> Result<()> {
        if self.layers[layer][filter] && self.live_in_layer(layer) == 1 {
            return Err(Error::Config(format!(
                "cannot mask filter {filter}: it is the last live filter of layer {layer}"
            )));
        }
        self.layers[layer][filter] = false;
        Ok(())
    }

    pub fn revive_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.fill(true));
    }

    pub fn check_against(&self, model: &Model) -> Result<()> {
        let ok = self.layers.len() == model.conv.len()
            && self.layers.iter().zip(&model.conv).all(|(m, l)| m.len() == l.filters());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("prune mask does not match the model's filter counts".into()))
        }
    }

    pub fn dead_filters(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, bits)| {
                bits.iter()
                    .enumerate()
                    .filter(|(_, &b)| !b)
                    .map(move |(f, _)| (l, f))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics for batch norm; dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
}

/// Identifies one parameter tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub fn name(&self) -> String {
        match self {
            ParamKind::ConvWeight(l) => format!("conv{l}.weight"),
            ParamKind::ConvBias(l) => format!("conv{l}.bias"),
            ParamKind::BnGamma(l) => format!("conv{l}.bn.gamma"),
            ParamKind::BnBeta(l) => format!("conv{l}.bn.beta"),
            ParamKind::FcWeight => "fc.weight".into(),
            ParamKind::FcBias => "fc.bias".into(),
        }
    }

    /// The conv layer whose filters index this tensor's leading axis, if any.
    pub fn filter_layer(&self) -> Option<usize> {
        match *self {
            ParamKind::ConvWeight(l)
            | ParamKind::ConvBias(l)
            | ParamKind::BnGamma(l)
            | ParamKind::BnBeta(l) => Some(l),
            ParamKind::FcWeight | ParamKind::FcBias => None,
        }
    }
}

/// Gradients, one tensor per entry of [`Model::param_kinds`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// im2col patches, `[B, k·k·c, h·w]` flattened.
    cols: Vec<f64>,
    /// Conv output before normalization and activation, `[B, J, h, w]`.
    pub pre: Tensor,
    /// Normalized values, batch mean and batch variance when batch norm ran in train mode.
    bn: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// Output after activation and masking, `[B, J, h, w]`.
    pub post: Tensor,
}

impl LayerCache {
    /// Per-channel batch mean and (biased) variance, when batch statistics were used.
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.bn.as_ref().map(|(_, m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Everything `backward` and the activation-based metrics need from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub layers: Vec<LayerCache>,
    input_shape: Vec<usize>,
    features: Vec<f64>,
    dropout_keep: Option<Vec<f64>>,
    pub probs: Tensor,
    mask: PruneMask,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: Gradients,
    /// `dL/d(post-activation)` per conv layer, `[B, J, h, w]`.
    pub act_grads: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input: [usize; 3],
    pub conv: Vec<ConvLayer>,
    pub fc: Dense,
    pub dropout: f64,
}

impl Model {
    /// MSRA-scaled normal conv weights (std `sqrt(2 / (k·k·c))`), normal(0, 0.01) FC weights,
    /// zero biases, batch norm at identity.
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut conv = Vec::with_capacity(spec.layers);
        let mut c = spec.input_channels;
        for _ in 0..spec.layers {
            let k = spec.kernel;
            let std = (2.0 / (k * k * c) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = spec.filters * c * k * k;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            conv.push(ConvLayer::new(
                Tensor::new(&[spec.filters, c, k, k], w)?,
                spec.conv_bias.then(|| Tensor::zeros(&[spec.filters])),
                spec.batch_norm.then(|| BatchNormState::new(spec.filters)),
            )?);
            c = spec.filters;
        }
        let feat = spec.filters * spec.height * spec.width;
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let fw: Vec<f64> = (0..spec.num_classes * feat).map(|_| normal.sample(rng)).collect();
        Ok(Model {
            input: [spec.input_channels, spec.height, spec.width],
            conv,
            fc: Dense {
                weights: Tensor::new(&[spec.num_classes, feat], fw)?,
                bias: Tensor::zeros(&[spec.num_classes]),
            },
            dropout: spec.dropout,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fc.weights.shape()[0]
    }

    pub fn spatial(&self) -> usize {
        self.input[1] * self.input[2]
    }

    pub fn total_filters(&self) -> usize {
        self.conv.iter().map(ConvLayer::filters).sum()
    }

    /// Checks channel compatibility between consecutive layers and the classifier.
    pub fn validate(&self) -> Result<()> {
        let mut c = self.input[0];
        for (i, l) in self.conv.iter().enumerate() {
            if l.in_channels() != c {
                return Err(Error::Config(format!(
                    "layer {i} expects {} input channels, previous layer yields {c}",
                    l.in_channels()
                )));
            }
            if l.kernel() % 2 == 0 {
                return Err(Error::Config(format!("layer {i} has even kernel {}", l.kernel())));
            }
            c = l.filters();
        }
        let feat = c * self.spatial();
        if self.fc.weights.rank() != 2 || self.fc.weights.shape()[1] != feat {
            return Err(Error::Config(format!(
                "classifier expects {:?}, feature map flattens to {feat}",
                self.fc.weights.shape()
            )));
        }
        if self.fc.bias.shape() != [self.num_classes()] {
            return Err(Error::Config("classifier bias width differs from class count".into()));
        }
        Ok(())
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        for (l, layer) in self.conv.iter().enumerate() {
            out.push(ParamKind::ConvWeight(l));
            if layer.bias.is_some() {
                out.push(ParamKind::ConvBias(l));
            }
            if layer.bn.is_some() {
                out.push(ParamKind::BnGamma(l));
                out.push(ParamKind::BnBeta(l));
            }
        }
        out.push(ParamKind::FcWeight);
        out.push(ParamKind::FcBias);
        out
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.conv {
            out.push(&layer.weights);
            if let Some(b) = &layer.bias {
                out.push(b);
            }
            if let Some(bn) = &layer.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.fc.weights);
        out.push(&self.fc.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.conv {
            out.push(&mut layer.weights);
            if let Some(b) = &mut layer.bias {
                out.push(b);
            }
            if let Some(bn) = &mut layer.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.fc.weights);
        out.push(&mut self.fc.bias);
        out
    }

    /// Number of consecutive elements of a parameter tensor that belong to one filter.
    pub fn filter_chunk(&self, kind: ParamKind) -> Option<usize> {
        match kind {
            ParamKind::ConvWeight(l) => Some(self.conv[l].fan_in()),
            ParamKind::ConvBias(_) | ParamKind::BnGamma(_) | ParamKind::BnBeta(_) => Some(1),
            ParamKind::FcWeight | ParamKind::FcBias => None,
        }
    }

    /// Elements of the parameter that consumes output channel `filter` of conv layer `layer`:
    /// the matching input-kernel slices of the next conv layer, or the classifier columns
    /// reading that channel when `layer` is the last conv layer.
    pub fn consumer_slices(&self, layer: usize, filter: usize) -> (ParamKind, Vec<usize>) {
        if layer + 1 < self.conv.len() {
            let next = &self.conv[layer + 1];
            let kk = next.kernel() * next.kernel();
            let fan = next.fan_in();
            let idx = (0..next.filters())
                .flat_map(|j| (0..kk).map(move |q| j * fan + filter * kk + q))
                .collect();
            (ParamKind::ConvWeight(layer + 1), idx)
        } else {
            let hw = self.spatial();
            let feat = self.fc.weights.shape()[1];
            let idx = (0..self.num_classes())
                .flat_map(|o| (0..hw).map(move |q| o * feat + filter * hw + q))
                .collect();
            (ParamKind::FcWeight, idx)
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        match kind {
            ParamKind::ConvWeight(l) => self.conv.get_mut(l).map(|c| &mut c.weights),
            ParamKind::ConvBias(l) => self.conv.get_mut(l).and_then(|c| c.bias.as_mut()),
            ParamKind::BnGamma(l) => self.conv.get_mut(l).and_then(|c| c.bn.as_mut().map(|b| &mut b.gamma)),
            ParamKind::BnBeta(l) => self.conv.get_mut(l).and_then(|c| c.bn.as_mut().map(|b| &mut b.beta)),
            ParamKind::FcWeight => Some(&mut self.fc.weights),
            ParamKind::FcBias => Some(&mut self.fc.bias),
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(Error::dim(
                "forward",
                format!("batch {:?} does not match model input {:?}", s, self.input),
            ));
        }
        Ok(s[0])
    }

    /// Forward pass. Pure: batch-norm running statistics are not touched here, see
    /// [`Model::update_running_stats`].
    pub fn forward(
        &self,
        mask: &PruneMask,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, ActivationCache)> {
        mask.check_against(self)?;
        let b = self.check_batch(batch)?;
        let train = matches!(mode, Mode::Train { .. });
        let (h, w) = (self.input[1], self.input[2]);
        let hw = h * w;
        let mut x = batch.data().to_vec();
        let mut layers = Vec::with_capacity(self.conv.len());

        for (li, layer) in self.conv.iter().enumerate() {
            let (j, c, k) = (layer.filters(), layer.in_channels(), layer.kernel());
            let geom = ConvGeometry::new(c, h, w, k, 1, k / 2)?;
            let ckk = c * k * k;
            let mut cols = vec![0.0; b * ckk * hw];
            let mut pre = vec![0.0; b * j * hw];
            for n in 0..b {
                let xin = &x[n * c * hw..(n + 1) * c * hw];
                let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
                geom.im2col(xin, col);
                conv_forward_image(layer, col, hw, &mut pre[n * j * hw..(n + 1) * j * hw]);
            }
            let live = &mask.layers[li];
            let (normed, bn_cache) = match &layer.bn {
                None => (pre.clone(), None),
                Some(bn) if train => {
                    let (y, xhat, mean, var) = bn_forward_train(bn, &pre, b, j, hw);
                    (y, Some((xhat, mean, var)))
                }
                Some(bn) => (bn_forward_eval(bn, &pre, b, j, hw), None),
            };
            let mut post = normed;
            for n in 0..b {
                for f in 0..j {
                    let ch = &mut post[(n * j + f) * hw..(n * j + f + 1) * hw];
                    if live[f] {
                        ch.iter_mut().for_each(|v| *v = v.max(0.0));
                    } else {
                        ch.fill(0.0);
                    }
                }
            }
            layers.push(LayerCache {
                cols,
                pre: Tensor::new(&[b, j, h, w], pre)?,
                bn: bn_cache,
                post: Tensor::new(&[b, j, h, w], post.clone())?,
            });
            x = post;
        }

        let feat = self.fc.weights.shape()[1];
        let mut features = x;
        let dropout_keep = match mode {
            Mode::Train { dropout_seed } if self.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let scale = 1.0 / (1.0 - self.dropout);
                let keep: Vec<f64> = (0..features.len())
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { scale })
                    .collect();
                features.iter_mut().zip(&keep).for_each(|(v, k)| *v *= k);
                Some(keep)
            }
            _ => None,
        };
        let classes = self.num_classes();
        let mut logits = vec![0.0; b * classes];
        for n in 0..b {
            let fx = &features[n * feat..(n + 1) * feat];
            for o in 0..classes {
                logits[n * classes + o] = self.fc.bias.data()[o] + dot(self.fc.weights.row(o), fx);
            }
        }
        let logits = Tensor::new(&[b, classes], logits)?;
        let probs = softmax(&logits);
        Ok((
            logits,
            ActivationCache {
                layers,
                input_shape: batch.shape().to_vec(),
                features,
                dropout_keep,
                probs,
                mask: mask.clone(),
            },
        ))
    }

    /// Folds the batch statistics of a train-mode forward pass into the running estimates.
    /// Masked channels keep their running statistics.
    pub fn update_running_stats(&mut self, cache: &ActivationCache) {
        let b = cache.input_shape[0];
        let n = (b * self.spatial()) as f64;
        for (li, (layer, lc)) in self.conv.iter_mut().zip(&cache.layers).enumerate() {
            let (Some(bn), Some((_, mean, var))) = (layer.bn.as_mut(), lc.bn.as_ref()) else {
                continue;
            };
            let m = bn.momentum;
            for f in 0..mean.len() {
                if !cache.mask.layers[li][f] {
                    continue;
                }
                let unbiased = if n > 1.0 { var[f] * n / (n - 1.0) } else { var[f] };
                let rm = &mut bn.running_mean.data_mut()[f];
                *rm = (1.0 - m) * *rm + m * mean[f];
                let rv = &mut bn.running_var.data_mut()[f];
                *rv = (1.0 - m) * *rv + m * unbiased;
            }
        }
    }

    /// Mean softmax cross-entropy and its gradients, plus `lambda ·` the orthogonality
    /// penalty when `ortho_loss_lambda > 0`. Gradients of masked filters are exactly zero.
    ///
    /// Training uses a train-mode cache; an eval-mode cache yields the gradients of the
    /// eval-mode function (fixed normalization statistics, no dropout).
    pub fn backward(
        &self,
        cache: &ActivationCache,
        labels: &[usize],
        ortho_loss_lambda: f64,
    ) -> Result<Backward> {
        cache.mask.check_against(self)?;
        if cache.layers.len() != self.conv.len() {
            return Err(Error::Config("activation cache does not match the model".into()));
        }
        let b = cache.input_shape[0];
        if labels.len() != b {
            return Err(Error::dim("backward", format!("{} labels for batch of {b}", labels.len())));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} outside {classes} classes")));
        }
        let (h, w) = (self.input[1], self.input[2]);
        let hw = h * w;
        let feat = self.fc.weights.shape()[1];

        let probs = cache.probs.data();
        let mut loss = 0.0;
        let mut dlogits = probs.to_vec();
        for (n, &y) in labels.iter().enumerate() {
            loss -= probs[n * classes + y].max(f64::MIN_POSITIVE).ln();
            dlogits[n * classes + y] -= 1.0;
        }
        loss /= b as f64;
        dlogits.iter_mut().for_each(|v| *v /= b as f64);

        let mut dfc_w = Tensor::zeros(self.fc.weights.shape());
        let mut dfc_b = Tensor::zeros(self.fc.bias.shape());
        let mut dfeat = vec![0.0; b * feat];
        for n in 0..b {
            let fx = &cache.features[n * feat..(n + 1) * feat];
            let df = &mut dfeat[n * feat..(n + 1) * feat];
            for o in 0..classes {
                let g = dlogits[n * classes + o];
                dfc_b.data_mut()[o] += g;
                axpy(g, fx, dfc_w.row_mut(o));
                axpy(g, self.fc.weights.row(o), df);
            }
        }
        if let Some(keep) = &cache.dropout_keep {
            dfeat.iter_mut().zip(keep).for_each(|(d, k)| *d *= k);
        }

        let mut conv_grads: Vec<(Tensor, Option<Tensor>, Option<(Tensor, Tensor)>)> =
            Vec::with_capacity(self.conv.len());
        let mut act_grads = vec![None; self.conv.len()];
        let mut dpost = dfeat;
        for li in (0..self.conv.len()).rev() {
            let layer = &self.conv[li];
            let lc = &cache.layers[li];
            let (j, c, k) = (layer.filters(), layer.in_channels(), layer.kernel());
            let live = &cache.mask.layers[li];
            let ckk = c * k * k;
            act_grads[li] = Some(Tensor::new(&[b, j, h, w], dpost.clone())?);

            // through mask and relu: gradient flows where the post-activation is positive
            let post = lc.post.data();
            let mut dz = dpost;
            for n in 0..b {
                for f in 0..j {
                    let r = (n * j + f) * hw..(n * j + f + 1) * hw;
                    if !live[f] {
                        dz[r].fill(0.0);
                        continue;
                    }
                    for (d, p) in dz[r.clone()].iter_mut().zip(&post[r]) {
                        if *p <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }

            let bn_grads = match (&layer.bn, &lc.bn) {
                (Some(bn), Some((xhat, _, _))) => {
                    let invstd: Vec<f64> = lc
                        .bn
                        .as_ref()
                        .map(|(_, _, var)| var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect())
                        .unwrap_or_default();
                    let (dx, dg, db) = bn_backward_train(bn, &dz, xhat, &invstd, b, j, hw);
                    dz = dx;
                    Some((dg, db))
                }
                (Some(bn), None) => {
                    // eval-mode normalization is affine with fixed statistics
                    let mut dg = vec![0.0; j];
                    let mut dbeta = vec![0.0; j];
                    let pre = lc.pre.data();
                    for f in 0..j {
                        let s = 1.0 / (bn.running_var.data()[f] + bn.epsilon).sqrt();
                        let mu = bn.running_mean.data()[f];
                        let g = bn.gamma.data()[f];
                        for n in 0..b {
                            let r = (n * j + f) * hw..(n * j + f + 1) * hw;
                            for (d, z) in dz[r.clone()].iter_mut().zip(&pre[r]) {
                                dg[f] += *d * (z - mu) * s;
                                dbeta[f] += *d;
                                *d *= g * s;
                            }
                        }
                    }
                    Some((dg, dbeta))
                }
                _ => None,
            };

            let mut dw = Tensor::zeros(layer.weights.shape());
            let mut dbias = vec![0.0; j];
            let mut dx = if li > 0 { vec![0.0; b * c * hw] } else { Vec::new() };
            let geom = ConvGeometry::new(c, h, w, k, 1, k / 2)?;
            let mut dcols = vec![0.0; ckk * hw];
            for n in 0..b {
                let col = &lc.cols[n * ckk * hw..(n + 1) * ckk * hw];
                let dout = &dz[n * j * hw..(n + 1) * j * hw];
                for f in 0..j {
                    let d = &dout[f * hw..(f + 1) * hw];
                    dbias[f] += d.iter().sum::<f64>();
                    let dwr = dw.row_mut(f);
                    for (p, g) in dwr.iter_mut().enumerate() {
                        *g += dot(d, &col[p * hw..(p + 1) * hw]);
                    }
                }
                if li > 0 {
                    dcols.fill(0.0);
                    for f in 0..j {
                        let d = &dout[f * hw..(f + 1) * hw];
                        let wr = layer.weights.row(f);
                        for p in 0..ckk {
                            axpy(wr[p], d, &mut dcols[p * hw..(p + 1) * hw]);
                        }
                    }
                    geom.col2im(&dcols, &mut dx[n * c * hw..(n + 1) * c * hw]);
                }
            }
            for f in 0..j {
                if !live[f] {
                    dw.row_mut(f).fill(0.0);
                    dbias[f] = 0.0;
                }
            }
            let bn_grads = bn_grads.map(|(mut dg, mut dbeta)| {
                for f in 0..j {
                    if !live[f] {
                        dg[f] = 0.0;
                        dbeta[f] = 0.0;
                    }
                }
                (
                    Tensor::new(&[j], dg).expect("width j"),
                    Tensor::new(&[j], dbeta).expect("width j"),
                )
            });
            let dbias = layer.bias.as_ref().map(|_| Tensor::new(&[j], dbias).expect("width j"));
            conv_grads.push((dw, dbias, bn_grads));
            dpost = dx;
        }
        conv_grads.reverse();

        if ortho_loss_lambda > 0.0 {
            for (li, (dw, _, _)) in conv_grads.iter_mut().enumerate() {
                let (penalty, grad) = crate::scheduler::ortho_loss_layer(&self.conv[li]);
                loss += ortho_loss_lambda * penalty;
                let live = &cache.mask.layers[li];
                for f in 0..live.len() {
                    if live[f] {
                        axpy(ortho_loss_lambda, grad.row(f), dw.row_mut(f));
                    }
                }
            }
        }

        let mut tensors = Vec::new();
        for (dw, dbias, bn) in conv_grads {
            tensors.push(dw);
            if let Some(d) = dbias {
                tensors.push(d);
            }
            if let Some((dg, db)) = bn {
                tensors.push(dg);
                tensors.push(db);
            }
        }
        tensors.push(dfc_w);
        tensors.push(dfc_b);
        Ok(Backward {
            loss,
            grads: Gradients { tensors },
            act_grads: act_grads.into_iter().map(|t| t.expect("filled")).collect(),
        })
    }

    /// Mean cross-entropy and number of correct predictions, eval mode, in chunks of `chunk`.
    pub fn evaluate(
        &self,
        mask: &PruneMask,
        images: &Tensor,
        labels: &[usize],
        chunk: usize,
    ) -> Result<(f64, usize)> {
        let n = images.shape()[0];
        let per = images.len() / n;
        let mut loss = 0.0;
        let mut correct = 0;
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let batch = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
            let (_, cache) = self.forward(mask, &batch, Mode::Eval)?;
            let classes = self.num_classes();
            for (i, &y) in labels[start..end].iter().enumerate() {
                let p = &cache.probs.data()[i * classes..(i + 1) * classes];
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                if argmax(p) == y {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok((loss / n as f64, correct))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[B, classes]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (b, c) = logits.rows_cols();
    let mut out = logits.clone();
    for n in 0..b {
        let row = out.row_mut(n);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    debug_assert_eq!(out.shape(), [b, c]);
    out
}

fn conv_forward_image(layer: &ConvLayer, cols: &[f64], hw: usize, out: &mut [f64]) {
    let j = layer.filters();
    let ckk = layer.fan_in();
    for f in 0..j {
        let o = &mut out[f * hw..(f + 1) * hw];
        let b = layer.bias.as_ref().map_or(0.0, |b| b.data()[f]);
        o.fill(b);
        let wr = layer.weights.row(f);
        for p in 0..ckk {
            axpy(wr[p], &cols[p * hw..(p + 1) * hw], o);
        }
    }
}

fn bn_forward_train(
    bn: &BatchNormState,
    x: &[f64],
    b: usize,
    j: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; j];
    let mut var = vec![0.0; j];
    for f in 0..j {
        let mut s = 0.0;
        for i in 0..b {
            s += x[(i * j + f) * hw..(i * j + f + 1) * hw].iter().sum::<f64>();
        }
        mean[f] = s / n;
        let mut v = 0.0;
        for i in 0..b {
            v += x[(i * j + f) * hw..(i * j + f + 1) * hw]
                .iter()
                .map(|z| (z - mean[f]).powi(2))
                .sum::<f64>();
        }
        var[f] = v / n;
    }
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for f in 0..j {
        let s = 1.0 / (var[f] + bn.epsilon).sqrt();
        let (g, be) = (bn.gamma.data()[f], bn.beta.data()[f]);
        for i in 0..b {
            for q in (i * j + f) * hw..(i * j + f + 1) * hw {
                xhat[q] = (x[q] - mean[f]) * s;
                y[q] = g * xhat[q] + be;
            }
        }
    }
    (y, xhat, mean, var)
}

fn bn_forward_eval(bn: &BatchNormState, x: &[f64], b: usize, j: usize, hw: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for f in 0..j {
        let s = 1.0 / (bn.running_var.data()[f] + bn.epsilon).sqrt();
        let (mu, g, be) = (bn.running_mean.data()[f], bn.gamma.data()[f], bn.beta.data()[f]);
        for i in 0..b {
            for q in (i * j + f) * hw..(i * j + f + 1) * hw {
                y[q] = g * (x[q] - mu) * s + be;
            }
        }
    }
    y
}

fn bn_backward_train(
    bn: &BatchNormState,
    dy: &[f64],
    xhat: &[f64],
    invstd: &[f64],
    b: usize,
    j: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; j];
    let mut dbeta = vec![0.0; j];
    for f in 0..j {
        let g = bn.gamma.data()[f];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in 0..b {
            for q in (i * j + f) * hw..(i * j + f + 1) * hw {
                sum_d += dy[q];
                sum_dx += dy[q] * xhat[q];
            }
        }
        dgamma[f] = sum_dx;
        dbeta[f] = sum_d;
        // d xhat = dy * gamma; the sums above scale by gamma accordingly
        let k = g * invstd[f] / n;
        for i in 0..b {
            for q in (i * j + f) * hw..(i * j + f + 1) * hw {
                dx[q] = k * (n * dy[q] - sum_d - xhat[q] * sum_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Shape bookkeeping for one 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < k || pw < k {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {k}"),
            ));
        }
        if !(ph - k).is_multiple_of(stride) || !(pw - k).is_multiple_of(stride) {
            return Err(Error::dim(
                "conv2d",
                format!("output extent not integral: ({ph}-{k})/{stride}, ({pw}-{k})/{stride}"),
            ));
        }
        Ok(ConvGeometry {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    /// Unrolls one image `[c, h, w]` into patches `[c·k·k, oh·ow]`.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let p = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[p * ohw..(p + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters patch gradients back into `dx` (accumulating).
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let p = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[p * ohw..(p + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of `input` `[B, c, h, w]` with the layer's filters, plus
/// bias. Output `[B, J, h', w']` with `h' = (h + 2·padding − k) / stride + 1`.
pub fn conv2d(input: &Tensor, layer: &ConvLayer, stride: usize, padding: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || s[1] != layer.in_channels() {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} for weights {:?}", s, layer.weights.shape()),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let geom = ConvGeometry::new(c, h, w, layer.kernel(), stride, padding)?;
    let ohw = geom.oh * geom.ow;
    let j = layer.filters();
    let mut cols = vec![0.0; layer.fan_in() * ohw];
    let mut out = vec![0.0; b * j * ohw];
    for n in 0..b {
        geom.im2col(&input.data()[n * c * h * w..(n + 1) * c * h * w], &mut cols);
        conv_forward_image(layer, &cols, ohw, &mut out[n * j * ohw..(n + 1) * j * ohw]);
    }
    Tensor::new(&[b, j, geom.oh, geom.ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn naive_conv(input: &Tensor, layer: &ConvLayer, stride: usize, pad: usize) -> Tensor {
        let s = input.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (j, k) = (layer.filters(), layer.kernel());
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let wt = layer.weights.data();
        let mut out = Tensor::zeros(&[b, j, oh, ow]);
        for n in 0..b {
            for f in 0..j {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias.as_ref().map_or(0.0, |b| b.data()[f]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = input.data()
                                        [((n * c + ci) * h + iy as usize) * w + ix as usize];
                                    acc += wt[((f * c + ci) * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        out.data_mut()[((n * j + f) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_input() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let layer = ConvLayer::new(Tensor::filled(&[1, 1, 3, 3], 1.0), None, None).unwrap();
        let y = conv2d(&x, &layer, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 45.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[2, 1, 4, 5]);
        let layer = ConvLayer::new(Tensor::filled(&[1, 1, 1, 1], 1.0), None, None).unwrap();
        assert_eq!(conv2d(&x, &layer, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k, h) in [(1, 1, 3, 6), (2, 1, 3, 7), (1, 0, 3, 5), (3, 2, 5, 10)] {
            let x = rand_tensor(&mut rng, &[2, 3, h, h]);
            let layer = ConvLayer::new(
                rand_tensor(&mut rng, &[4, 3, k, k]),
                Some(rand_tensor(&mut rng, &[4])),
                None,
            )
            .unwrap();
            let got = conv2d(&x, &layer, stride, pad).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &layer, stride, pad)) < 1e-10);
        }
    }

    #[test]
    fn conv2d_rejects_non_integral_extent() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        let layer = ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), None, None).unwrap();
        assert!(matches!(conv2d(&x, &layer, 2, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn filter_matrix_layout_and_round_trip() {
        let layer =
            ConvLayer::new(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), None, None)
                .unwrap();
        assert_eq!(layer.filter_matrix().data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut big = ConvLayer::new(rand_tensor(&mut rng, &[32, 16, 3, 3]), None, None).unwrap();
        assert_eq!(big.filter_matrix().shape(), &[32, 144]);
        let before = big.clone();
        let row = big.filter_matrix().row(5).to_vec();
        big.set_filter_row(5, &row).unwrap();
        assert_eq!(big, before);
    }

    #[test]
    fn identity_model_passes_input_through() {
        let model = Model {
            input: [1, 2, 2],
            conv: vec![ConvLayer::new(Tensor::filled(&[1, 1, 1, 1], 1.0), Some(Tensor::zeros(&[1])), None)
                .unwrap()],
            fc: Dense {
                weights: Tensor::zeros(&[2, 4]),
                bias: Tensor::zeros(&[2]),
            },
            dropout: 0.0,
        };
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, cache) = model.forward(&PruneMask::full(&model), &x, Mode::Eval).unwrap();
        assert_eq!(cache.layers[0].post.data(), x.data());
    }

    #[test]
    fn zero_weight_filter_outputs_bias() {
        let model = Model {
            input: [1, 3, 3],
            conv: vec![ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Some(Tensor::filled(&[1], 0.7)), None)
                .unwrap()],
            fc: Dense {
                weights: Tensor::zeros(&[2, 9]),
                bias: Tensor::zeros(&[2]),
            },
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let (_, cache) = model.forward(&PruneMask::full(&model), &x, Mode::Eval).unwrap();
        assert!(cache.layers[0].post.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let model = Model {
            input: [1, 2, 2],
            conv: vec![ConvLayer::new(Tensor::filled(&[1, 1, 1, 1], 1.0), None, None).unwrap()],
            fc: Dense {
                weights: Tensor::zeros(&[10, 4]),
                bias: Tensor::zeros(&[10]),
            },
            dropout: 0.0,
        };
        let x = Tensor::filled(&[3, 1, 2, 2], 0.5);
        let (_, cache) = model
            .forward(&PruneMask::full(&model), &x, Mode::Train { dropout_seed: 0 })
            .unwrap();
        let out = model.backward(&cache, &[0, 4, 9], 0.0).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_rejects_emptied_layer() {
        assert!(PruneMask::from_layers(vec![vec![true], vec![false, false]]).is_err());
        let mut m = PruneMask::from_layers(vec![vec![true, true]]).unwrap();
        m.kill(0, 0).unwrap();
        assert!(m.kill(0, 1).is_err());
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let spec = ModelSpec {
            input_channels: 3,
            height: 4,
            width: 4,
            layers: 2,
            filters: 3,
            kernel: 3,
            num_classes: 4,
            batch_norm: false,
            conv_bias: true,
            dropout: 0.0,
        };
        let model = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = model
            .forward(&PruneMask::full(&model), &Tensor::zeros(&[1, 1, 4, 4]), Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let bad_mask = PruneMask::from_layers(vec![vec![true; 3]]).unwrap();
        assert!(matches!(
            model.forward(&bad_mask, &Tensor::zeros(&[1, 3, 4, 4]), Mode::Eval),
            Err(Error::Config(_))
        ));
    }
}
