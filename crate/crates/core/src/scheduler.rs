//! The prune / sub-network / re-initialize training cycle and the training loop around it.
//!
//! Time is measured in epochs. Iteration `i < n` trains the full network for `s1` epochs,
//! ranks and drops the bottom `p%` of filters, trains the sub-network for `s2` epochs, then
//! re-initializes the dropped filters orthogonally to everything the layer has held. After
//! `n` iterations the full network trains until the epoch budget runs out.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{make_batches, Split};
use crate::error::{Error, Result};
use crate::linalg::{null_space_basis, residual_from_row_space};
use crate::network::{argmax, ConvLayer, Model, ModelSpec, Mode, PruneMask};
use crate::optim::{LrSchedule, Optimizer, Rule};
use crate::ranking::{
    live_filter_matrix, metric_scores, ortho_score_of, select_bottom, FilterStats, Metric, ProbeSet,
};
use crate::seed;
use crate::tensor::{dot, norm2, row_normalize, Tensor};

/// Parameters of the cyclic schedule. `n == 0` is plain training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprSchedule {
    pub s1: usize,
    pub s2: usize,
    pub n: usize,
    pub p_percent: f64,
    pub metric: Metric,
    /// Norm of a re-initialized filter relative to the mean norm of the surviving filters.
    pub reinit_scale: f64,
    /// Also re-draw, at small scale, the weights that read a re-initialized filter's output.
    pub reinit_next_layer_kernels: bool,
    /// Number of training steps the mask change is spread over when a sub phase starts.
    pub staged_prune_batches: usize,
    /// Weight of the orthogonality penalty added to the training loss; 0 disables it.
    pub ortho_loss_lambda: f64,
}

impl Default for ReprSchedule {
    fn default() -> Self {
        ReprSchedule {
            s1: 20,
            s2: 10,
            n: 3,
            p_percent: 30.0,
            metric: Metric::Ortho,
            reinit_scale: 0.1,
            reinit_next_layer_kernels: false,
            staged_prune_batches: 1,
            ortho_loss_lambda: 0.0,
        }
    }
}

impl ReprSchedule {
    pub fn standard() -> Self {
        ReprSchedule {
            n: 0,
            ..Self::default()
        }
    }

    pub fn cycle(&self) -> usize {
        self.s1 + self.s2
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n > 0 {
            if self.s1 == 0 {
                p.push("s1 must be >= 1".to_string());
            }
            if self.s2 == 0 {
                p.push("s2 must be >= 1".to_string());
            }
        }
        if !(self.p_percent > 0.0 && self.p_percent < 100.0) {
            p.push(format!("p_percent must be in (0, 100), got {}", self.p_percent));
        }
        if !(self.reinit_scale > 0.0 && self.reinit_scale.is_finite()) {
            p.push(format!("reinit_scale must be positive, got {}", self.reinit_scale));
        }
        if self.staged_prune_batches == 0 {
            p.push("staged_prune_batches must be >= 1".to_string());
        }
        if !(self.ortho_loss_lambda >= 0.0 && self.ortho_loss_lambda.is_finite()) {
            p.push(format!("ortho_loss_lambda must be >= 0, got {}", self.ortho_loss_lambda));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Phase and iteration of the epoch with index `epoch`.
    pub fn phase_at(&self, epoch: usize) -> (Phase, usize) {
        let cycle = self.cycle();
        if self.n == 0 || epoch >= self.n * cycle {
            return (Phase::Residual, self.n);
        }
        let it = epoch / cycle;
        if epoch % cycle < self.s1 {
            (Phase::Full, it)
        } else {
            (Phase::Sub, it)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Full,
    Sub,
    Residual,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Full => "full",
            Phase::Sub => "sub",
            Phase::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    FullStart,
    Rank { metric: Metric },
    /// Number of dropped filters per layer.
    Prune { per_layer: Vec<usize> },
    SubStart,
    Reinit { count: usize },
    ResidualStart,
    /// A re-initialized filter could not be made orthogonal to every constraint.
    Degenerate { layer: usize, filter: usize, path: ReinitPath },
}

/// Something the scheduler did, stamped with the epoch boundary it happened at.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub epoch: usize,
    pub iteration: usize,
    pub kind: EventKind,
}

impl Event {
    /// One-letter code used by [`signature`].
    pub fn code(&self) -> Option<char> {
        match &self.kind {
            EventKind::FullStart => Some('F'),
            EventKind::Rank { .. } => Some('R'),
            EventKind::Prune { .. } => Some('P'),
            EventKind::SubStart => Some('S'),
            EventKind::Reinit { .. } => Some('I'),
            EventKind::ResidualStart => Some('T'),
            EventKind::Degenerate { .. } => None,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} iteration {}: ", self.epoch, self.iteration)?;
        match &self.kind {
            EventKind::FullStart => write!(f, "full phase"),
            EventKind::Rank { metric } => write!(f, "rank by {metric}"),
            EventKind::Prune { per_layer } => {
                write!(f, "drop {} filters (per layer {:?})", per_layer.iter().sum::<usize>(), per_layer)
            }
            EventKind::SubStart => write!(f, "sub-network phase"),
            EventKind::Reinit { count } => write!(f, "re-initialize {count} filters"),
            EventKind::ResidualStart => write!(f, "residual full training"),
            EventKind::Degenerate { layer, filter, path } => {
                write!(f, "degenerate re-init of filter {filter} in layer {layer}: {path}")
            }
        }
    }
}

/// Event codes in order, e.g. `FRPSIFRPSIT`. Degeneracy notes are left out.
pub fn signature(events: &[Event]) -> String {
    events.iter().filter_map(Event::code).collect()
}

/// The scheduler's own state, as much as a resumed run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleState {
    /// Filters dropped in the current iteration, waiting to be re-initialized.
    pub dropped: Vec<(usize, usize)>,
    /// Mask changes not yet applied, one chunk per training step.
    pub pending: Vec<Vec<(usize, usize)>>,
}

/// Splits `selection` into `batches` consecutive chunks, larger chunks first
/// (7 over 3 gives 3, 2, 2). Never produces empty chunks.
pub fn staged_chunks(selection: &[(usize, usize)], batches: usize) -> Vec<Vec<(usize, usize)>> {
    let k = batches.max(1).min(selection.len());
    if k == 0 {
        return Vec::new();
    }
    let base = selection.len() / k;
    let extra = selection.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(selection[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Orthogonality penalty `Σ |Ŵ·Ŵᵀ − I|` of one layer and its gradient with respect to the
/// raw filter matrix `[J, k·k·c]`. All-zero filters contribute a constant and get no gradient.
pub fn ortho_loss_layer(layer: &ConvLayer) -> (f64, Tensor) {
    ortho_loss_of(&layer.filter_matrix())
}

pub fn ortho_loss_of(w: &Tensor) -> (f64, Tensor) {
    let (normed, zero) = row_normalize(w).expect("filter matrix is 2-D");
    let (j, fan) = normed.rows_cols();
    let mut penalty = 0.0;
    let mut grad = Tensor::zeros(&[j, fan]);
    for a in 0..j {
        if zero[a] {
            penalty += 1.0;
            continue;
        }
        let mut gh = vec![0.0; fan];
        for b in 0..j {
            if b == a || zero[b] {
                continue;
            }
            let g = dot(normed.row(a), normed.row(b));
            penalty += g.abs();
            let s = if g > 0.0 {
                2.0
            } else if g < 0.0 {
                -2.0
            } else {
                0.0
            };
            crate::tensor::axpy(s, normed.row(b), &mut gh);
        }
        let wa = normed.row(a);
        let along = dot(wa, &gh);
        let n = norm2(w.row(a));
        for (q, out) in grad.row_mut(a).iter_mut().enumerate() {
            *out = (gh[q] - along * wa[q]) / n;
        }
    }
    (penalty, grad)
}

/// Orthogonality penalty summed over all layers.
pub fn ortho_loss(model: &Model) -> f64 {
    model.conv.iter().map(|l| ortho_loss_layer(l).0).sum()
}

/// `Σ_f O_f` over the live filters of every layer, computed among live filters only.
pub fn ortho_sum(model: &Model, mask: &PruneMask) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..model.conv.len() {
        let (w, _) = live_filter_matrix(model, mask, l);
        total += ortho_score_of(&w)?.scores.iter().sum::<f64>();
    }
    Ok(total)
}

/// How a re-initialized filter was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitPath {
    /// Projected onto the null space of all constraint filters.
    NullSpace,
    /// Filters re-initialized earlier in the same call used up the null space; orthogonal to
    /// the surviving filters and the pre-drop values only.
    PreDrop,
    /// The constraints span the whole space; orthogonal to the surviving filters only.
    LiveResidual,
    /// Even the surviving filters span the space; plain random direction.
    Random,
}

impl ReinitPath {
    /// Whether the surviving filters and pre-drop values left no room for the new filter.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, ReinitPath::LiveResidual | ReinitPath::Random)
    }
}

impl fmt::Display for ReinitPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReinitPath::NullSpace => "null-space projection",
            ReinitPath::PreDrop => "null-space projection against surviving and pre-drop filters",
            ReinitPath::LiveResidual => "constraints span the space, orthogonal to surviving filters only",
            ReinitPath::Random => "surviving filters span the space, random direction",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinitRecord {
    pub layer: usize,
    pub filter: usize,
    pub path: ReinitPath,
    /// Largest |cosine| between the new filter and the constraints it was built against.
    pub max_abs_cos: f64,
}

fn max_abs_cos(v: &[f64], rows: &[Vec<f64>]) -> f64 {
    let nv = norm2(v);
    rows.iter()
        .filter_map(|r| {
            let nr = norm2(r);
            (nr > 0.0 && nv > 0.0).then(|| (dot(v, r) / (nv * nr)).abs())
        })
        .fold(0.0, f64::max)
}

fn rows_tensor(rows: &[Vec<f64>], fan: usize) -> Tensor {
    let data = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), fan], data).expect("constraint rows share one width")
}

/// Re-initializes `dropped` filters in place.
///
/// Per layer, each new filter is a random direction projected onto the null space of the
/// surviving filters, the current (pre-drop) values of the dropped filters and the filters
/// already re-initialized in this call, scaled to `scale ×` the mean surviving-filter norm.
/// When the constraints leave no null space the earlier new filters are dropped from them;
/// failing that the filter is made orthogonal to the surviving filters alone, or is purely
/// random if even that is impossible. Each record carries the path taken. Biases are zeroed, batch norm goes back to identity, optimizer state
/// for the filters is cleared, and with `next_layer` the consuming weights are re-drawn at
/// small scale.
pub fn reinit_filters(
    model: &mut Model,
    optimizer: Option<&mut Optimizer>,
    dropped: &[(usize, usize)],
    scale: f64,
    next_layer: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ReinitRecord>> {
    for &(l, f) in dropped {
        if l >= model.conv.len() || f >= model.conv[l].filters() {
            return Err(Error::Config(format!("filter ({l}, {f}) out of range")));
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(dropped.len());
    for l in 0..model.conv.len() {
        let mut mine: Vec<usize> = dropped.iter().filter(|d| d.0 == l).map(|d| d.1).collect();
        mine.sort_unstable();
        mine.dedup();
        if mine.is_empty() {
            continue;
        }
        let layer = &model.conv[l];
        let fan = layer.fan_in();
        let live: Vec<Vec<f64>> = (0..layer.filters())
            .filter(|f| !mine.contains(f))
            .map(|f| layer.filter(f).to_vec())
            .collect();
        let base: Vec<Vec<f64>> = (0..layer.filters()).map(|f| layer.filter(f).to_vec()).collect();
        let base_ns = null_space_basis(&rows_tensor(&base, fan), None)?;
        let mut constraints = base.clone();
        let mean_norm = if live.is_empty() {
            0.0
        } else {
            live.iter().map(|r| norm2(r)).sum::<f64>() / live.len() as f64
        };
        let target = scale * if mean_norm > 0.0 { mean_norm } else { 2f64.sqrt() };

        for &f in &mine {
            let v: Vec<f64> = (0..fan).map(|_| unit.sample(rng)).collect();
            let ns = null_space_basis(&rows_tensor(&constraints, fan), None)?;
            let mut path = ReinitPath::NullSpace;
            let mut dir = if ns.is_empty() { Vec::new() } else { ns.project(&v) };
            let mut check = &constraints;
            if norm2(&dir) <= 1e-12 * norm2(&v) && !base_ns.is_empty() {
                path = ReinitPath::PreDrop;
                check = &base;
                dir = base_ns.project(&v);
            }
            if norm2(&dir) <= 1e-12 * norm2(&v) {
                path = ReinitPath::LiveResidual;
                check = &live;
                dir = if live.is_empty() {
                    Vec::new()
                } else {
                    residual_from_row_space(&rows_tensor(&live, fan), &v, None)?
                };
                if norm2(&dir) <= 1e-12 * norm2(&v) {
                    path = ReinitPath::Random;
                    dir = v;
                }
            }
            let n = norm2(&dir);
            let new: Vec<f64> = dir.iter().map(|x| x / n * target).collect();
            let cos = if path == ReinitPath::Random { 0.0 } else { max_abs_cos(&new, check) };
            records.push(ReinitRecord {
                layer: l,
                filter: f,
                path,
                max_abs_cos: cos,
            });
            let layer = &mut model.conv[l];
            layer.set_filter_row(f, &new)?;
            if let Some(b) = layer.bias.as_mut() {
                b.data_mut()[f] = 0.0;
            }
            if let Some(bn) = layer.bn.as_mut() {
                bn.reset_channel(f);
            }
            constraints.push(new);
        }

        if next_layer {
            for &f in &mine {
                let (kind, idx) = model.consumer_slices(l, f);
                let t = model.param_mut(kind).expect("consumer exists");
                let rms = (t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64).sqrt();
                let std = scale * if rms > 0.0 { rms } else { 0.1 };
                for i in idx {
                    t.data_mut()[i] = std * unit.sample(rng);
                }
            }
        }
    }
    if let Some(opt) = optimizer {
        opt.reset_slots(model, dropped, next_layer)?;
    }
    Ok(records)
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub rule: Rule,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub eval_chunk: usize,
    pub schedule: ReprSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if let Err(e) = self.model.validate() {
            p.push(e.to_string());
        }
        if let Err(e) = self.lr.validate() {
            p.push(e.to_string());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            p.push("epochs must be >= 1".into());
        }
        p.extend(self.schedule.problems());
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// Training, test and probe splits.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Split,
    pub test: Split,
    pub probe: Option<ProbeSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub ortho_sum: f64,
    pub live_filters: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str =
        "epoch,phase,iteration,train_acc,test_acc,train_loss,ortho_sum,live_filters,lr,test_loss";

    pub fn row_csv(r: &MetricsRow) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase.name(),
            r.iteration,
            r.train_acc,
            r.test_acc,
            r.train_loss,
            r.ortho_sum,
            r.live_filters,
            r.lr,
            r.test_loss
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::row_csv(r));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn test_acc(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.test_acc).collect()
    }

    pub fn train_acc(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_acc).collect()
    }
}

/// A training run in progress. `epoch` is the number of completed epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub mask: PruneMask,
    pub cycle: CycleState,
    pub epoch: usize,
    pub log: MetricsLog,
    pub events: Vec<Event>,
    pub reinits: Vec<ReinitRecord>,
    stats: Option<FilterStats>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(&cfg.model, &mut seed::stream(cfg.seed, "init", 0, 0))?;
        let optimizer = Optimizer::new(cfg.rule, &model);
        let mask = PruneMask::full(&model);
        let first = if cfg.schedule.n > 0 {
            EventKind::FullStart
        } else {
            EventKind::ResidualStart
        };
        Ok(TrainState {
            model,
            optimizer,
            mask,
            cycle: CycleState::default(),
            epoch: 0,
            log: MetricsLog::default(),
            events: vec![Event {
                epoch: 0,
                iteration: 0,
                kind: first,
            }],
            reinits: Vec::new(),
            stats: None,
        })
    }

    /// Rebuilds a state from saved parts; the metrics log and event history start empty.
    pub fn from_parts(
        model: Model,
        optimizer: Optimizer,
        mask: PruneMask,
        cycle: CycleState,
        epoch: usize,
    ) -> Result<Self> {
        mask.check_against(&model)?;
        Ok(TrainState {
            model,
            optimizer,
            mask,
            cycle,
            epoch,
            log: MetricsLog::default(),
            events: Vec::new(),
            reinits: Vec::new(),
            stats: None,
        })
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each one
    /// (after that epoch's boundary actions).
    pub fn run(
        &mut self,
        cfg: &TrainConfig,
        data: &TrainData,
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < cfg.epochs {
            self.run_epoch(cfg, data)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    fn records_stats(&self, cfg: &TrainConfig, epoch: usize) -> bool {
        let s = &cfg.schedule;
        matches!(s.metric, Metric::Gradients | Metric::Taylor)
            && s.n > 0
            && epoch < s.n * s.cycle()
            && epoch % s.cycle() == s.s1 - 1
    }

    /// One epoch of training followed by evaluation and any boundary actions.
    pub fn run_epoch(&mut self, cfg: &TrainConfig, data: &TrainData) -> Result<MetricsRow> {
        let e = self.epoch;
        let (phase, iteration) = cfg.schedule.phase_at(e);
        let record = self.records_stats(cfg, e);
        self.stats = record.then(|| FilterStats::new(&self.model));

        let batches = make_batches(&data.train, cfg.batch_size, cfg.seed, e, cfg.augment)?;
        let steps = batches.num_batches();
        let classes = self.model.num_classes();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in batches.enumerate() {
            if !self.cycle.pending.is_empty() {
                for (l, f) in self.cycle.pending.remove(0) {
                    self.mask.kill(l, f)?;
                }
            }
            let lr = cfg.lr.lr_at(e as f64 + step as f64 / steps as f64);
            let mode = Mode::Train {
                dropout_seed: seed::derive(cfg.seed, "dropout", e as u64, step as u64),
            };
            let (_, cache) = self.model.forward(&self.mask, &batch.images, mode)?;
            let back = self.model.backward(&cache, &batch.labels, cfg.schedule.ortho_loss_lambda)?;
            if !back.loss.is_finite() {
                return Err(Error::NonFinite { epoch: e, loss: back.loss });
            }
            if let Some(stats) = self.stats.as_mut() {
                stats.record(&self.model, &self.mask, &cache, &back);
            }
            loss_sum += back.loss * batch.labels.len() as f64;
            let p = cache.probs.data();
            correct += batch
                .labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| argmax(&p[i * classes..(i + 1) * classes]) == y)
                .count();
            self.optimizer.step(&mut self.model, &back.grads, &self.mask, lr)?;
            self.model.update_running_stats(&cache);
        }
        let n = data.train.len() as f64;
        let (test_loss, test_correct) =
            self.model
                .evaluate(&self.mask, &data.test.images, &data.test.labels, cfg.eval_chunk)?;
        let row = MetricsRow {
            epoch: e,
            phase,
            iteration,
            train_acc: correct as f64 / n,
            test_acc: test_correct as f64 / data.test.len() as f64,
            train_loss: loss_sum / n,
            test_loss,
            ortho_sum: ortho_sum(&self.model, &self.mask)?,
            live_filters: self.mask.live_count(),
            lr: cfg.lr.lr_at(e as f64),
        };
        self.log.rows.push(row.clone());
        self.epoch = e + 1;
        self.boundary(cfg, data)?;
        Ok(row)
    }

    fn push(&mut self, iteration: usize, kind: EventKind) {
        self.events.push(Event {
            epoch: self.epoch,
            iteration,
            kind,
        });
    }

    /// Actions at the boundary before epoch `self.epoch`.
    fn boundary(&mut self, cfg: &TrainConfig, data: &TrainData) -> Result<()> {
        let s = &cfg.schedule;
        let b = self.epoch;
        if s.n == 0 || b > s.n * s.cycle() {
            return Ok(());
        }
        let cycle = s.cycle();
        if b % cycle == s.s1 && b < cfg.epochs {
            let it = b / cycle;
            let stats = self.stats.take().filter(|st| !st.is_empty());
            let scores = metric_scores(
                &self.model,
                &self.mask,
                s.metric,
                data.probe.as_ref(),
                stats.as_ref(),
                seed::derive(cfg.seed, "rank", it as u64, 0),
            )?;
            let selection = select_bottom(&scores, s.p_percent)?;
            self.push(it, EventKind::Rank { metric: s.metric });
            let mut per_layer = vec![0; self.model.conv.len()];
            for &(l, _) in &selection {
                per_layer[l] += 1;
            }
            self.push(it, EventKind::Prune { per_layer });
            self.cycle.pending = staged_chunks(&selection, s.staged_prune_batches);
            self.cycle.dropped = selection;
            self.push(it, EventKind::SubStart);
        } else if b.is_multiple_of(cycle) {
            let it = b / cycle - 1;
            for chunk in std::mem::take(&mut self.cycle.pending) {
                for (l, f) in chunk {
                    self.mask.kill(l, f)?;
                }
            }
            let dropped = std::mem::take(&mut self.cycle.dropped);
            let mut rng = seed::stream(cfg.seed, "reinit", it as u64, 0);
            let records = reinit_filters(
                &mut self.model,
                Some(&mut self.optimizer),
                &dropped,
                s.reinit_scale,
                s.reinit_next_layer_kernels,
                &mut rng,
            )?;
            self.mask.revive_all();
            self.push(it, EventKind::Reinit { count: dropped.len() });
            for r in records.iter().filter(|r| r.path.is_degenerate()) {
                self.push(
                    it,
                    EventKind::Degenerate {
                        layer: r.layer,
                        filter: r.filter,
                        path: r.path,
                    },
                );
            }
            self.reinits.extend(records);
            if b < cfg.epochs {
                if it + 1 < s.n {
                    self.push(it + 1, EventKind::FullStart);
                } else {
                    self.push(s.n, EventKind::ResidualStart);
                }
            }
        }
        Ok(())
    }
}

/// Trains a fresh model for the whole budget.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    state.run(cfg, data, |_| Ok(()))?;
    Ok(state)
}

/// Convenience for drawing a random unit-norm direction in tests and tools.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
    let n = norm2(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_channels: 1,
            height: 4,
            width: 4,
            layers: 2,
            filters: 4,
            kernel: 3,
            num_classes: 3,
            batch_norm: false,
            conv_bias: true,
            dropout: 0.0,
        }
    }

    fn tiny_data() -> TrainData {
        let mut rng = seed::stream(5, "test-data", 0, 0);
        let n = 24;
        let data: Vec<f64> = (0..n * 16).map(|_| rng.random::<f64>()).collect();
        let ds = Dataset {
            images: Tensor::new(&[n, 1, 4, 4], data).unwrap(),
            labels: (0..n).map(|i| i % 3).collect(),
            num_classes: 3,
        };
        let train = ds.subset(&(0..16).collect::<Vec<_>>()).unwrap();
        let test = ds.subset(&(16..20).collect::<Vec<_>>()).unwrap();
        let probe = ds.subset(&(20..24).collect::<Vec<_>>()).unwrap();
        TrainData {
            train,
            test,
            probe: Some(ProbeSet {
                images: probe.images,
                labels: probe.labels,
            }),
        }
    }

    fn tiny_cfg(schedule: ReprSchedule, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: tiny_spec(),
            rule: Rule::Sgd,
            lr: LrSchedule::Fixed(0.05),
            batch_size: 5,
            epochs,
            seed: 3,
            augment: false,
            eval_chunk: 8,
            schedule,
        }
    }

    #[test]
    fn phases_and_boundaries() {
        let s = ReprSchedule::default();
        assert_eq!(s.phase_at(0), (Phase::Full, 0));
        assert_eq!(s.phase_at(19), (Phase::Full, 0));
        assert_eq!(s.phase_at(20), (Phase::Sub, 0));
        assert_eq!(s.phase_at(30), (Phase::Full, 1));
        assert_eq!(s.phase_at(89), (Phase::Sub, 2));
        assert_eq!(s.phase_at(90), (Phase::Residual, 3));
        assert_eq!(ReprSchedule::standard().phase_at(5), (Phase::Residual, 0));
    }

    #[test]
    fn staged_chunk_sizes() {
        let sel: Vec<(usize, usize)> = (0..7).map(|f| (0, f)).collect();
        let sizes: Vec<usize> = staged_chunks(&sel, 3).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(staged_chunks(&sel, 1), vec![sel.clone()]);
        assert_eq!(staged_chunks(&sel[..2], 5).len(), 2);
        assert!(staged_chunks(&[], 3).is_empty());
    }

    #[test]
    fn ortho_loss_of_orthogonal_rows_is_zero() {
        let w = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, -1.0]]).unwrap();
        let (p, g) = ortho_loss_of(&w);
        assert_eq!(p, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (p, g) = ortho_loss_of(&w);
        assert!((p - (2.0 * 0.5f64.sqrt() + 1.0)).abs() < 1e-12);
        assert_eq!(g.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn reinit_is_orthogonal_and_resets() {
        let mut rng = seed::stream(1, "t", 0, 0);
        let mut model = Model::init(&tiny_spec(), &mut rng).unwrap();
        model.conv[0].bias.as_mut().unwrap().data_mut()[1] = 3.0;
        let old: Vec<Vec<f64>> = (0..4).map(|f| model.conv[0].filter(f).to_vec()).collect();
        let recs = reinit_filters(&mut model, None, &[(0, 1), (0, 3)], 0.1, false, &mut rng).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.path == ReinitPath::NullSpace && r.max_abs_cos < 1e-8));
        let n1 = model.conv[0].filter(1).to_vec();
        let n3 = model.conv[0].filter(3).to_vec();
        for r in old.iter().chain([&n3]) {
            assert!(dot(&n1, r).abs() < 1e-8 * norm2(&n1) * norm2(r));
        }
        assert_eq!(model.conv[0].bias.as_ref().unwrap().data()[1], 0.0);
        let mean = (norm2(&old[0]) + norm2(&old[2])) / 2.0;
        assert!((norm2(&n1) - 0.1 * mean).abs() < 1e-12);
    }

    #[test]
    fn reinit_degenerate_falls_back() {
        // 1 input channel, 1x1 kernel: fan-in 1, so a second filter has no null space
        let mut rng = seed::stream(2, "t", 0, 0);
        let spec = ModelSpec {
            kernel: 1,
            ..tiny_spec()
        };
        let mut model = Model::init(&spec, &mut rng).unwrap();
        let recs = reinit_filters(&mut model, None, &[(0, 0)], 0.1, false, &mut rng).unwrap();
        assert_eq!(recs[0].path, ReinitPath::Random);
        assert!(model.conv[0].filter(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reinit_drops_new_filters_from_constraints_when_needed() {
        // fan-in 3 with 2 filters: both dropped leaves a 1-d null space for two new filters
        let mut rng = seed::stream(3, "t", 0, 0);
        let spec = ModelSpec {
            input_channels: 3,
            kernel: 1,
            filters: 2,
            layers: 1,
            ..tiny_spec()
        };
        let mut model = Model::init(&spec, &mut rng).unwrap();
        let old: Vec<Vec<f64>> = (0..2).map(|f| model.conv[0].filter(f).to_vec()).collect();
        let recs = reinit_filters(&mut model, None, &[(0, 0), (0, 1)], 0.1, false, &mut rng).unwrap();
        assert_eq!(recs[0].path, ReinitPath::NullSpace);
        assert_eq!(recs[1].path, ReinitPath::PreDrop);
        assert!(!recs[1].path.is_degenerate());
        for f in 0..2 {
            let n = model.conv[0].filter(f).to_vec();
            for r in &old {
                assert!(dot(&n, r).abs() < 1e-8 * norm2(&n) * norm2(r));
            }
        }
    }

    #[test]
    fn schedule_signature_and_mask() {
        let sched = ReprSchedule {
            s1: 2,
            s2: 1,
            n: 2,
            p_percent: 25.0,
            ..ReprSchedule::default()
        };
        let cfg = tiny_cfg(sched, 8);
        let state = train(&cfg, &tiny_data()).unwrap();
        assert_eq!(signature(&state.events), "FRPSIFRPSIT");
        let sub: Vec<usize> = state.log.rows.iter().map(|r| r.live_filters).collect();
        assert_eq!(sub, vec![8, 8, 6, 8, 8, 6, 8, 8]);
        assert!(state.mask.is_full());
        let epochs: Vec<usize> = state.events.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 2, 2, 3, 3, 5, 5, 5, 6, 6]);
    }

    #[test]
    fn zero_iterations_ignores_schedule_knobs() {
        let data = tiny_data();
        let a = train(&tiny_cfg(ReprSchedule::standard(), 3), &data).unwrap();
        let other = ReprSchedule {
            s1: 1,
            s2: 1,
            metric: Metric::Random,
            p_percent: 50.0,
            ..ReprSchedule::standard()
        };
        let b = train(&tiny_cfg(other, 3), &data).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.model, b.model);
        assert_eq!(signature(&a.events), "T");
    }

    #[test]
    fn invalid_schedule_lists_all_problems() {
        let s = ReprSchedule {
            s1: 0,
            s2: 0,
            p_percent: 100.0,
            ..ReprSchedule::default()
        };
        match s.validate() {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
