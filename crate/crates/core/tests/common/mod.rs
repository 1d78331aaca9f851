#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use repr::data::{Dataset, Split};
use repr::network::{Mode, Model, ModelSpec, ParamKind, PruneMask};
use repr::optim::{LrSchedule, Rule};
use repr::ranking::ProbeSet;
use repr::scheduler::{ReprSchedule, TrainConfig, TrainData};
use repr::seed;
use repr::Tensor;

pub fn rng(tag: &str, i: u64) -> ChaCha8Rng {
    seed::stream(20_240_601, tag, i, 0)
}

pub fn random_spec(r: &mut ChaCha8Rng) -> ModelSpec {
    ModelSpec {
        input_channels: r.random_range(1..=3),
        height: r.random_range(3..=5),
        width: r.random_range(3..=5),
        layers: r.random_range(1..=3),
        filters: r.random_range(2..=4),
        kernel: if r.random_bool(0.7) { 3 } else { 1 },
        num_classes: r.random_range(2..=4),
        batch_norm: r.random_bool(0.5),
        conv_bias: r.random_bool(0.5),
        dropout: if r.random_bool(0.3) { 0.4 } else { 0.0 },
    }
}

pub fn random_images(r: &mut ChaCha8Rng, n: usize, spec: &ModelSpec) -> Tensor {
    let len = n * spec.input_channels * spec.height * spec.width;
    Tensor::new(
        &[n, spec.input_channels, spec.height, spec.width],
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// Kills each filter with probability `p`, keeping at least one per layer.
pub fn random_mask(r: &mut ChaCha8Rng, model: &Model, p: f64) -> PruneMask {
    let mut mask = PruneMask::full(model);
    for (l, layer) in model.conv.iter().enumerate() {
        for f in 0..layer.filters() {
            if mask.live_in_layer(l) > 1 && r.random_bool(p) {
                mask.kill(l, f).unwrap();
            }
        }
    }
    mask
}

/// Gives biases and batch-norm affine parameters random values so no pre-activation sits
/// exactly on the ReLU kink.
pub fn jitter_params(r: &mut ChaCha8Rng, model: &mut Model) {
    for kind in model.param_kinds() {
        let offset = match kind {
            ParamKind::BnGamma(_) => 1.0,
            ParamKind::ConvBias(_) | ParamKind::BnBeta(_) | ParamKind::FcBias => 0.0,
            _ => continue,
        };
        for v in model.param_mut(kind).unwrap().data_mut() {
            *v = offset + r.random_range(-0.3..0.3);
        }
    }
}

pub fn loss(model: &Model, mask: &PruneMask, x: &Tensor, y: &[usize], mode: Mode, lambda: f64) -> f64 {
    let (_, cache) = model.forward(mask, x, mode).unwrap();
    model.backward(&cache, y, lambda).unwrap().loss
}

/// Whether element `i` of parameter `kind` belongs to a masked filter.
pub fn masked_element(model: &Model, mask: &PruneMask, kind: ParamKind, i: usize) -> bool {
    match (kind.filter_layer(), model.filter_chunk(kind)) {
        (Some(l), Some(chunk)) => !mask.is_live(l, i / chunk),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over live elements.
    pub max_rel: f64,
    /// Whether every masked element had an exactly zero analytic gradient.
    pub masked_zero: bool,
    pub checked: usize,
}

/// Central finite differences over every parameter element.
pub fn fd_check(model: &Model, mask: &PruneMask, x: &Tensor, y: &[usize], mode: Mode, lambda: f64) -> FdReport {
    let eps = 1e-5;
    let (_, cache) = model.forward(mask, x, mode).unwrap();
    let grads = model.backward(&cache, y, lambda).unwrap().grads;
    let kinds = model.param_kinds();
    let mut rep = FdReport {
        max_rel: 0.0,
        masked_zero: true,
        checked: 0,
    };
    for (pi, &kind) in kinds.iter().enumerate() {
        let g = grads.tensors[pi].data();
        for (i, &gi) in g.iter().enumerate() {
            if masked_element(model, mask, kind, i) {
                rep.masked_zero &= gi == 0.0;
                continue;
            }
            let mut m = model.clone();
            m.param_mut(kind).unwrap().data_mut()[i] += eps;
            let up = loss(&m, mask, x, y, mode, lambda);
            m.param_mut(kind).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = loss(&m, mask, x, y, mode, lambda);
            let fd = (up - down) / (2.0 * eps);
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-6);
            rep.max_rel = rep.max_rel.max(rel);
            rep.checked += 1;
        }
    }
    rep
}

/// `|ŵ_a · ŵ_b − δ_ab|` computed pair by pair.
pub fn brute_ortho(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.clone()
            }
        })
        .collect();
    unit.iter()
        .enumerate()
        .map(|(a, ua)| {
            unit.iter()
                .enumerate()
                .map(|(b, ub)| {
                    let g: f64 = ua.iter().zip(ub).map(|(p, q)| p * q).sum();
                    (g - if a == b { 1.0 } else { 0.0 }).abs()
                })
                .collect()
        })
        .collect()
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Average ranks by counting: `#smaller + (#equal + 1) / 2`.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

fn whole(ds: &Dataset) -> Split {
    ds.subset(&(0..ds.len()).collect::<Vec<_>>()).unwrap()
}

/// Small random-image task for exercising the training loop.
pub fn tiny_data(n_train: usize, n_test: usize, hw: usize) -> TrainData {
    let spec = repr::data::SyntheticSpec {
        height: hw,
        width: hw,
        classes: 4,
        motif_size: 2,
        ..repr::data::SyntheticSpec::default()
    };
    let train = repr::data::synthetic(&spec, n_train, 5, 1).unwrap();
    let test = repr::data::synthetic(&spec, n_test, 5, 2).unwrap();
    let probe = repr::data::synthetic(&spec, 32, 5, 3).unwrap();
    TrainData {
        train: whole(&train),
        test: whole(&test),
        probe: Some(ProbeSet {
            images: probe.images,
            labels: probe.labels,
        }),
    }
}

pub fn tiny_config(hw: usize, epochs: usize, schedule: ReprSchedule) -> TrainConfig {
    TrainConfig {
        model: ModelSpec {
            input_channels: 3,
            height: hw,
            width: hw,
            layers: 2,
            filters: 4,
            kernel: 3,
            num_classes: 4,
            batch_norm: true,
            conv_bias: false,
            dropout: 0.2,
        },
        rule: Rule::adam(),
        lr: LrSchedule::Fixed(0.01),
        batch_size: 16,
        epochs,
        seed: 3,
        augment: true,
        eval_chunk: 64,
        schedule,
    }
}
