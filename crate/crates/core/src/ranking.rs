//! Filter-importance metrics and the global bottom-p% selector.
//!
//! All metrics follow one convention: a LOWER value means the filter is dropped sooner.
//! Metrics whose natural reading is the opposite (orthogonality overlap, fraction of zero
//! activations) are negated.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{ConvLayer, Mode, Model, PruneMask};
use crate::tensor::{dot, norm2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Random,
    Activations,
    Apoz,
    Gradients,
    Taylor,
    Hessian,
    Weights,
    Oracle,
    Ortho,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Random,
        Metric::Activations,
        Metric::Apoz,
        Metric::Gradients,
        Metric::Taylor,
        Metric::Hessian,
        Metric::Weights,
        Metric::Oracle,
        Metric::Ortho,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Random => "random",
            Metric::Activations => "activations",
            Metric::Apoz => "apoz",
            Metric::Gradients => "gradients",
            Metric::Taylor => "taylor",
            Metric::Hessian => "hessian",
            Metric::Weights => "weights",
            Metric::Oracle => "oracle",
            Metric::Ortho => "ortho",
        }
    }

    pub fn needs_probe(&self) -> bool {
        matches!(
            self,
            Metric::Activations | Metric::Apoz | Metric::Hessian | Metric::Oracle
        )
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingScore {
    pub layer: usize,
    pub filter: usize,
    pub value: f64,
    pub metric: Metric,
}

/// Held-out examples used by data-driven metrics. Never part of the training split.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn chunk(&self, start: usize, end: usize) -> Result<(Tensor, &[usize])> {
        let per = self.images.len() / self.images.shape()[0];
        let mut shape = self.images.shape().to_vec();
        shape[0] = end - start;
        Ok((
            Tensor::new(&shape, self.images.data()[start * per..end * per].to_vec())?,
            &self.labels[start..end],
        ))
    }

    /// Consecutive `(images, labels)` chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, &[usize])>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |s| self.chunk(s, (s + size.max(1)).min(n)))
    }
}

/// `|Ŵ·Ŵᵀ − I|` for the row-normalized filter matrix of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoMatrix {
    pub p: Tensor,
    /// Filters whose weights are all zero; their row has a 1 on the diagonal.
    pub zero_filters: Vec<usize>,
}

pub fn ortho_matrix_of(filters: &Tensor) -> Result<OrthoMatrix> {
    let (j, _) = filters.dims2("ortho_matrix")?;
    let sq: Vec<f64> = (0..j).map(|f| dot(filters.row(f), filters.row(f))).collect();
    let mut p = Tensor::zeros(&[j, j]);
    for a in 0..j {
        p.set2(a, a, if sq[a] == 0.0 { 1.0 } else { 0.0 });
        for b in a + 1..j {
            if sq[a] == 0.0 || sq[b] == 0.0 {
                continue;
            }
            // sqrt of the product keeps |cos| of identical rows at exactly 1
            let mut den = (sq[a] * sq[b]).sqrt();
            if !den.is_normal() {
                den = sq[a].sqrt() * sq[b].sqrt();
            }
            let v = (dot(filters.row(a), filters.row(b)) / den).abs();
            p.set2(a, b, v);
            p.set2(b, a, v);
        }
    }
    Ok(OrthoMatrix {
        p,
        zero_filters: (0..j).filter(|&f| sq[f] == 0.0).collect(),
    })
}

pub fn ortho_matrix(layer: &ConvLayer) -> Result<OrthoMatrix> {
    ortho_matrix_of(&layer.filter_matrix())
}

/// Per-filter overlap `O_f = Σ_g P[f, g] / J`; larger means more redundant.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoScores {
    pub scores: Vec<f64>,
    pub zero_filters: Vec<usize>,
}

pub fn ortho_score_of(filters: &Tensor) -> Result<OrthoScores> {
    let m = ortho_matrix_of(filters)?;
    let (j, _) = m.p.rows_cols();
    let scores = (0..j).map(|f| m.p.row(f).iter().sum::<f64>() / j as f64).collect();
    Ok(OrthoScores {
        scores,
        zero_filters: m.zero_filters,
    })
}

pub fn ortho_score(layer: &ConvLayer) -> Result<OrthoScores> {
    ortho_score_of(&layer.filter_matrix())
}

/// Filter matrix restricted to the live filters of `layer`, with their original indices.
pub fn live_filter_matrix(model: &Model, mask: &PruneMask, layer: usize) -> (Tensor, Vec<usize>) {
    let conv = &model.conv[layer];
    let live: Vec<usize> = (0..conv.filters()).filter(|&f| mask.is_live(layer, f)).collect();
    let mut data = Vec::with_capacity(live.len() * conv.fan_in());
    for &f in &live {
        data.extend_from_slice(conv.filter(f));
    }
    let t = Tensor::new(&[live.len(), conv.fan_in()], data).expect("at least one live filter");
    (t, live)
}

/// Per-filter statistics accumulated over training steps: mean |dL/dw| and the signed
/// mean of activation × activation-gradient (Taylor). Values are averaged over the steps
/// recorded since the last [`FilterStats::clear`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStats {
    pub grad_abs: Vec<Vec<f64>>,
    pub taylor: Vec<Vec<f64>>,
    pub steps: Vec<Vec<f64>>,
}

impl FilterStats {
    pub fn new(model: &Model) -> Self {
        let z: Vec<Vec<f64>> = model.conv.iter().map(|l| vec![0.0; l.filters()]).collect();
        FilterStats {
            grad_abs: z.clone(),
            taylor: z.clone(),
            steps: z,
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.grad_abs, &mut self.taylor, &mut self.steps] {
            v.iter_mut().for_each(|l| l.fill(0.0));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.iter().all(|l| l.iter().all(|&s| s == 0.0))
    }

    /// Adds one step's contribution for every live filter.
    pub fn record(
        &mut self,
        model: &Model,
        mask: &PruneMask,
        cache: &crate::network::ActivationCache,
        backward: &crate::network::Backward,
    ) {
        let kinds = model.param_kinds();
        for (li, layer) in model.conv.iter().enumerate() {
            let wi = kinds
                .iter()
                .position(|&k| k == crate::network::ParamKind::ConvWeight(li))
                .expect("conv weight present");
            let dw = &backward.grads.tensors[wi];
            let post = cache.layers[li].post.data();
            let agrad = backward.act_grads[li].data();
            let shape = cache.layers[li].post.shape();
            let (b, j, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            for f in 0..layer.filters() {
                if !mask.is_live(li, f) {
                    continue;
                }
                let g = dw.row(f);
                self.grad_abs[li][f] += g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
                let mut s = 0.0;
                for n in 0..b {
                    let r = (n * j + f) * hw..(n * j + f + 1) * hw;
                    s += dot(&post[r.clone()], &agrad[r]);
                }
                // act_grads carry the 1/B of the batch-mean loss, so the batch sum is
                // already a per-example mean
                self.taylor[li][f] += s / hw as f64;
                self.steps[li][f] += 1.0;
            }
        }
    }

    fn mean(values: &[Vec<f64>], steps: &[Vec<f64>], layer: usize, filter: usize) -> f64 {
        let s = steps[layer][filter];
        if s > 0.0 {
            values[layer][filter] / s
        } else {
            0.0
        }
    }

    pub fn mean_grad_abs(&self, layer: usize, filter: usize) -> f64 {
        Self::mean(&self.grad_abs, &self.steps, layer, filter)
    }

    pub fn mean_taylor(&self, layer: usize, filter: usize) -> f64 {
        Self::mean(&self.taylor, &self.steps, layer, filter)
    }
}

/// Gradient and Taylor statistics measured on a probe set, one chunk per "step".
pub fn probe_stats(model: &Model, mask: &PruneMask, probe: &ProbeSet) -> Result<FilterStats> {
    let mut stats = FilterStats::new(model);
    for chunk in probe.chunks(64) {
        let (x, y) = chunk?;
        let (_, cache) = model.forward(mask, &x, Mode::Train { dropout_seed: 0 })?;
        let bw = model.backward(&cache, y, 0.0)?;
        stats.record(model, mask, &cache, &bw);
    }
    Ok(stats)
}

/// Diagonal Gauss-Newton saliency `Σ_i ½·H_ii·w_i²` per filter, with the exact GN diagonal
/// for softmax cross-entropy: `H_ii = mean_n Σ_c p_nc·(∂ℓ(x_n, c)/∂w_i)²`.
fn hessian_saliency(model: &Model, mask: &PruneMask, probe: &ProbeSet) -> Result<Vec<Vec<f64>>> {
    let kinds = model.param_kinds();
    let mut diag: Vec<Vec<f64>> = model.conv.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let classes = model.num_classes();
    for chunk in probe.chunks(1) {
        let (x, _) = chunk?;
        let (_, cache) = model.forward(mask, &x, Mode::Eval)?;
        let p = cache.probs.data().to_vec();
        for (c, &pc) in p.iter().enumerate().take(classes) {
            if pc < 1e-12 {
                continue;
            }
            let bw = model.backward(&cache, &[c], 0.0)?;
            for (li, d) in diag.iter_mut().enumerate() {
                let wi = kinds
                    .iter()
                    .position(|&k| k == crate::network::ParamKind::ConvWeight(li))
                    .expect("conv weight present");
                for (h, g) in d.iter_mut().zip(bw.grads.tensors[wi].data()) {
                    *h += pc * g * g;
                }
            }
        }
    }
    let n = probe.len() as f64;
    Ok(model
        .conv
        .iter()
        .zip(&diag)
        .map(|(layer, d)| {
            (0..layer.filters())
                .map(|f| {
                    let fan = layer.fan_in();
                    let w = layer.filter(f);
                    (0..fan).map(|i| 0.5 * d[f * fan + i] / n * w[i] * w[i]).sum()
                })
                .collect()
        })
        .collect())
}

/// Mean L2 norm of each filter's post-ReLU map and the fraction of its activations that are zero.
fn activation_stats(
    model: &Model,
    mask: &PruneMask,
    probe: &ProbeSet,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut norms: Vec<Vec<f64>> = model.conv.iter().map(|l| vec![0.0; l.filters()]).collect();
    let mut zeros = norms.clone();
    for chunk in probe.chunks(128) {
        let (x, _) = chunk?;
        let (_, cache) = model.forward(mask, &x, Mode::Eval)?;
        for (li, lc) in cache.layers.iter().enumerate() {
            let s = lc.post.shape();
            let (b, j, hw) = (s[0], s[1], s[2] * s[3]);
            let post = lc.post.data();
            for n in 0..b {
                for f in 0..j {
                    let ch = &post[(n * j + f) * hw..(n * j + f + 1) * hw];
                    norms[li][f] += norm2(ch);
                    zeros[li][f] += ch.iter().filter(|&&v| v <= 0.0).count() as f64 / hw as f64;
                }
            }
        }
    }
    let n = probe.len() as f64;
    for v in norms.iter_mut().chain(zeros.iter_mut()) {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok((norms, zeros))
}

/// Scores for every live conv filter under `metric`, lower meaning less important.
///
/// `recorded` supplies gradient/Taylor statistics gathered during training; when absent
/// they are measured on `probe`. `seed` drives the random metric.
pub fn metric_scores(
    model: &Model,
    mask: &PruneMask,
    metric: Metric,
    probe: Option<&ProbeSet>,
    recorded: Option<&FilterStats>,
    seed: u64,
) -> Result<Vec<RankingScore>> {
    mask.check_against(model)?;
    let need_probe = || {
        probe.filter(|p| !p.is_empty()).ok_or_else(|| {
            Error::Config(format!("metric '{metric}' needs a non-empty probe set"))
        })
    };
    let live: Vec<(usize, usize)> = model
        .conv
        .iter()
        .enumerate()
        .flat_map(|(l, c)| (0..c.filters()).map(move |f| (l, f)))
        .filter(|&(l, f)| mask.is_live(l, f))
        .collect();
    let score = |values: &dyn Fn(usize, usize) -> f64| -> Vec<RankingScore> {
        live.iter()
            .map(|&(layer, filter)| RankingScore {
                layer,
                filter,
                value: values(layer, filter),
                metric,
            })
            .collect()
    };

    let out = match metric {
        Metric::Weights => score(&|l, f| norm2(model.conv[l].filter(f))),
        Metric::Random => {
            let mut rng = crate::seed::stream(seed, "random-metric", 0, 0);
            let draws: Vec<f64> = live.iter().map(|_| rng.random::<f64>()).collect();
            live.iter()
                .zip(draws)
                .map(|(&(layer, filter), value)| RankingScore {
                    layer,
                    filter,
                    value,
                    metric,
                })
                .collect()
        }
        Metric::Ortho => {
            let mut per_layer = Vec::new();
            for l in 0..model.conv.len() {
                let (w, idx) = live_filter_matrix(model, mask, l);
                let s = ortho_score_of(&w)?;
                let mut full = vec![0.0; model.conv[l].filters()];
                for (pos, &f) in idx.iter().enumerate() {
                    full[f] = if s.zero_filters.contains(&pos) { -1.0 } else { -s.scores[pos] };
                }
                per_layer.push(full);
            }
            score(&|l, f| per_layer[l][f])
        }
        Metric::Activations | Metric::Apoz => {
            let (norms, zeros) = activation_stats(model, mask, need_probe()?)?;
            if metric == Metric::Activations {
                score(&|l, f| norms[l][f])
            } else {
                score(&|l, f| -zeros[l][f])
            }
        }
        Metric::Gradients | Metric::Taylor => {
            let owned;
            let stats = match recorded.filter(|r| !r.is_empty()) {
                Some(r) => r,
                None => {
                    let p = probe.filter(|p| !p.is_empty()).ok_or_else(|| {
                        Error::Config(format!(
                            "metric '{metric}' needs recorded statistics or a probe set"
                        ))
                    })?;
                    owned = probe_stats(model, mask, p)?;
                    &owned
                }
            };
            if metric == Metric::Gradients {
                score(&|l, f| stats.mean_grad_abs(l, f))
            } else {
                score(&|l, f| stats.mean_taylor(l, f).abs())
            }
        }
        Metric::Hessian => {
            let h = hessian_saliency(model, mask, need_probe()?)?;
            score(&|l, f| h[l][f])
        }
        Metric::Oracle => oracle_scores(model, mask, need_probe()?)?,
    };
    if let Some(bad) = out.iter().find(|s| !s.value.is_finite()) {
        return Err(Error::Config(format!(
            "metric '{metric}' produced a non-finite score for filter ({}, {})",
            bad.layer, bad.filter
        )));
    }
    Ok(out)
}

fn probe_accuracy(model: &Model, mask: &PruneMask, probe: &ProbeSet) -> Result<f64> {
    let (_, correct) = model.evaluate(mask, &probe.images, &probe.labels, 256)?;
    Ok(correct as f64 / probe.len() as f64)
}

/// Greedy oracle: probe-accuracy drop when each live filter alone is additionally masked.
/// A layer's last live filter cannot be masked; it scores the maximal drop of 1.
pub fn oracle_scores(model: &Model, mask: &PruneMask, probe: &ProbeSet) -> Result<Vec<RankingScore>> {
    if probe.is_empty() {
        return Err(Error::Config("oracle needs a non-empty probe set".into()));
    }
    let base = probe_accuracy(model, mask, probe)?;
    let mut out = Vec::new();
    for (l, layer) in model.conv.iter().enumerate() {
        for f in 0..layer.filters() {
            if !mask.is_live(l, f) {
                continue;
            }
            let value = if mask.live_in_layer(l) == 1 {
                1.0
            } else {
                let mut m = mask.clone();
                m.kill(l, f)?;
                base - probe_accuracy(model, &m, probe)?
            };
            out.push(RankingScore {
                layer: l,
                filter: f,
                value,
                metric: Metric::Oracle,
            });
        }
    }
    Ok(out)
}

fn order(a: &RankingScore, b: &RankingScore) -> std::cmp::Ordering {
    a.value
        .total_cmp(&b.value)
        .then(a.layer.cmp(&b.layer))
        .then(a.filter.cmp(&b.filter))
}

/// Scores sorted by ascending importance with the deterministic `(layer, filter)` tie-break.
pub fn sorted(scores: &[RankingScore]) -> Vec<RankingScore> {
    let mut s = scores.to_vec();
    s.sort_by(order);
    s
}

/// The `floor(p/100 · live)` least important filters across the whole network, lowest
/// first. A filter is skipped when taking it would leave its layer without a live filter.
pub fn select_bottom(scores: &[RankingScore], p_percent: f64) -> Result<Vec<(usize, usize)>> {
    if !(p_percent > 0.0 && p_percent < 100.0) {
        return Err(Error::Config(format!("p_percent {p_percent} outside (0, 100)")));
    }
    let total = scores.len();
    let count = (p_percent / 100.0 * total as f64).floor() as usize;
    let layers = scores.iter().map(|s| s.layer).max().map_or(0, |m| m + 1);
    let mut live = vec![0usize; layers];
    for s in scores {
        live[s.layer] += 1;
    }
    let occupied = live.iter().filter(|&&n| n > 0).count();
    if count > total - occupied {
        return Err(Error::Config(format!(
            "pruning {count} of {total} filters would empty a layer"
        )));
    }
    let mut picked = Vec::with_capacity(count);
    for s in sorted(scores) {
        if picked.len() == count {
            break;
        }
        if live[s.layer] > 1 {
            live[s.layer] -= 1;
            picked.push((s.layer, s.filter));
        }
    }
    Ok(picked)
}

/// Writes `metric,layer,filter,value,rank` rows; rank 0 is dropped first.
pub fn write_scores_csv(path: &Path, scores: &[RankingScore]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("metric,layer,filter,value,rank\n");
    let ranked = sorted(scores);
    let mut by_coord: Vec<_> = ranked.iter().enumerate().collect();
    by_coord.sort_by_key(|(_, s)| (s.layer, s.filter));
    for (rank, s) in by_coord {
        body.push_str(&format!("{},{},{},{:e},{}\n", s.metric, s.layer, s.filter, s.value, rank));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
