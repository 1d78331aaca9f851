//! Diagnostics: inter-filter activation correlation, agreement between rankings, and the
//! train/test generalization gap.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::{Mode, Model, PruneMask};
use crate::ranking::{ProbeSet, RankingScore};
use crate::linalg::row_space_basis;
use crate::scheduler::MetricsLog;
use crate::tensor::{norm2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMethod {
    /// Pearson correlation of per-example spatial-mean activations.
    Pearson,
    /// First canonical correlation between two filters' activation maps, examples as samples.
    Cca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    /// Output after ReLU and masking.
    PostActivation,
    /// Conv output before normalization and ReLU; linear in the weights.
    PreActivation,
}

/// Filter-by-filter correlation matrix over one or more layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub layers: Vec<usize>,
    /// Row index where each analyzed layer's filters start.
    pub layer_boundaries: Vec<usize>,
    pub method: CorrelationMethod,
    pub signal: Signal,
    /// `layer:filter` labels for rows and columns.
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// `(layer, filter)` of filters whose activations did not vary over the probe set;
    /// their off-diagonal entries and diagonal are 0.
    pub constant_filters: Vec<(usize, usize)>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("filter");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.matrix) {
            s.push_str(l);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean absolute off-diagonal entry within one analyzed layer.
    pub fn mean_abs_within(&self, layer: usize) -> Option<f64> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        let start = self.layer_boundaries[i];
        let end = self.layer_boundaries.get(i + 1).copied().unwrap_or(self.matrix.len());
        let j = end - start;
        if j < 2 {
            return Some(0.0);
        }
        let mut s = 0.0;
        for a in start..end {
            for b in start..end {
                if a != b {
                    s += self.matrix[a][b].abs();
                }
            }
        }
        Some(s / (j * (j - 1)) as f64)
    }
}

/// Per-filter activation maps over the probe set, `[filter][example][h·w]`, for each layer.
fn activation_maps(
    model: &Model,
    mask: &PruneMask,
    probe: &ProbeSet,
    layers: &[usize],
    signal: Signal,
) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    for &l in layers {
        if l >= model.conv.len() {
            return Err(Error::Config(format!("layer {l} out of range")));
        }
    }
    let mut maps: Vec<Vec<Vec<Vec<f64>>>> = layers
        .iter()
        .map(|&l| vec![Vec::with_capacity(probe.len()); model.conv[l].filters()])
        .collect();
    for chunk in probe.chunks(256) {
        let (x, _) = chunk?;
        let (_, cache) = model.forward(mask, &x, Mode::Eval)?;
        for (i, &l) in layers.iter().enumerate() {
            let t = match signal {
                Signal::PostActivation => &cache.layers[l].post,
                Signal::PreActivation => &cache.layers[l].pre,
            };
            let s = t.shape();
            let (j, hw) = (s[1], s[2] * s[3]);
            for n in 0..s[0] {
                for (f, m) in maps[i].iter_mut().enumerate() {
                    let r = (n * j + f) * hw;
                    m.push(t.data()[r..r + hw].to_vec());
                }
            }
        }
    }
    Ok(maps)
}

/// Orthonormal basis (columns of an `[N, r]` matrix) of the column space of centered `x`
/// (`[N, d]`), dropping directions whose pivot norm is below `1e-8 ×` the largest column norm.
fn whitened_basis(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (n, d) = x.shape();
    let mut rows = Vec::with_capacity(n * d);
    for col in x.column_iter() {
        let m = col.mean();
        rows.extend(col.iter().map(|v| v - m));
    }
    let t = Tensor::new(&[d, n], rows).ok()?;
    let scale = (0..d).map(|j| norm2(t.row(j))).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let basis = row_space_basis(&t, 1e-8 * scale).ok()?;
    Some(DMatrix::from_fn(n, basis.len(), |r, c| basis[c][r]))
}

/// First canonical correlation between the columns of `a` and `b` (rows are samples).
pub fn cca(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("cca", format!("{} vs {} samples", a.nrows(), b.nrows())));
    }
    match (whitened_basis(a), whitened_basis(b)) {
        (Some(x), Some(y)) => first_canonical(&x, &y),
        _ => Err(Error::Undefined("cca of a constant signal".into())),
    }
}

fn first_canonical(ua: &DMatrix<f64>, ub: &DMatrix<f64>) -> Result<f64> {
    let svd = (ua.transpose() * ub)
        .try_svd(false, false, 1e-14, 10_000)
        .ok_or_else(|| Error::Undefined("canonical correlation did not converge".into()))?;
    Ok(svd.singular_values.max().min(1.0))
}

/// Correlation between every pair of filters in `layers`.
///
/// Pearson compares per-example spatial means; CCA takes each example's spatial map as one
/// observation of a `h·w`-dimensional variable. Constant filters get 0 and are listed.
pub fn activation_correlation(
    model: &Model,
    mask: &PruneMask,
    probe: &ProbeSet,
    layers: &[usize],
    method: CorrelationMethod,
    signal: Signal,
) -> Result<CorrelationReport> {
    if probe.len() < 2 {
        return Err(Error::Config("activation correlation needs at least 2 probe examples".into()));
    }
    if layers.is_empty() {
        return Err(Error::Config("no layers to analyze".into()));
    }
    let per_layer = activation_maps(model, mask, probe, layers, signal)?;
    let mut labels = Vec::new();
    let mut boundaries = Vec::new();
    let mut coords = Vec::new();
    let mut maps = Vec::new();
    for (i, &l) in layers.iter().enumerate() {
        boundaries.push(labels.len());
        for (f, m) in per_layer[i].iter().enumerate() {
            labels.push(format!("{l}:{f}"));
            coords.push((l, f));
            maps.push(m);
        }
    }
    let means: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| m.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect())
        .collect();
    let constant: Vec<bool> = means
        .iter()
        .zip(&maps)
        .map(|(mu, m)| match method {
            CorrelationMethod::Pearson => variance(mu) == 0.0,
            CorrelationMethod::Cca => m.iter().all(|a| a == &m[0]),
        })
        .collect();
    let bases: Vec<Option<DMatrix<f64>>> = match method {
        CorrelationMethod::Cca => maps
            .iter()
            .zip(&constant)
            .map(|(m, &c)| {
                if c {
                    None
                } else {
                    whitened_basis(&DMatrix::from_fn(m.len(), m[0].len(), |r, c| m[r][c]))
                }
            })
            .collect(),
        CorrelationMethod::Pearson => Vec::new(),
    };
    let total = maps.len();
    let mut matrix = vec![vec![0.0; total]; total];
    for a in 0..total {
        for b in a..total {
            let v = if constant[a] || constant[b] {
                0.0
            } else if a == b {
                1.0
            } else {
                match method {
                    CorrelationMethod::Pearson => pearson(&means[a], &means[b])?,
                    CorrelationMethod::Cca => match (&bases[a], &bases[b]) {
                        (Some(x), Some(y)) => first_canonical(x, y)?,
                        _ => 0.0,
                    },
                }
            };
            matrix[a][b] = v;
            matrix[b][a] = v;
        }
    }
    Ok(CorrelationReport {
        layers: layers.to_vec(),
        layer_boundaries: boundaries,
        method,
        signal,
        labels,
        matrix,
        constant_filters: coords.iter().zip(&constant).filter(|(_, &c)| c).map(|(&c, _)| c).collect(),
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Pearson correlation; undefined for fewer than 2 points or a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson", format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("correlation of fewer than 2 values".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && x[idx[k + 1]] == x[idx[i]] {
            k += 1;
        }
        let r = (i + k) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=k] {
            ranks[t] = r;
        }
        i = k + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", format!("{} vs {} values", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

/// Correlation between two score sets over the filters both contain.
pub fn metric_agreement(a: &[RankingScore], b: &[RankingScore]) -> Result<Agreement> {
    let bm: BTreeMap<(usize, usize), f64> = b.iter().map(|s| ((s.layer, s.filter), s.value)).collect();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for s in a {
        if let Some(&v) = bm.get(&(s.layer, s.filter)) {
            x.push(s.value);
            y.push(v);
        }
    }
    if x.len() < 2 {
        return Err(Error::Undefined(format!("agreement needs >= 2 shared filters, got {}", x.len())));
    }
    Ok(Agreement {
        pearson: pearson(&x, &y)?,
        spearman: spearman(&x, &y)?,
        n: x.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSummary {
    /// `train_acc − test_acc` per logged epoch.
    pub series: Vec<f64>,
    /// Mean of the last (up to) five entries.
    pub final_gap: f64,
}

pub fn generalization_gap(log: &MetricsLog) -> Result<GapSummary> {
    if log.rows.is_empty() {
        return Err(Error::Undefined("generalization gap of an empty log".into()));
    }
    let series: Vec<f64> = log.rows.iter().map(|r| r.train_acc - r.test_acc).collect();
    let tail = &series[series.len().saturating_sub(5)..];
    Ok(GapSummary {
        final_gap: mean(tail),
        series,
    })
}
