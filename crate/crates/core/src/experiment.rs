//! The four subcommands: single training runs, paired comparisons, oracle scoring and
//! checkpoint analysis. Each writes its artifacts under the configured output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{
    activation_correlation, generalization_gap, metric_agreement, Agreement, CorrelationMethod,
    CorrelationReport, Signal,
};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Config, DatasetKind};
use crate::data::{self, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::ranking::{self, Metric, ProbeSet, RankingScore};
use crate::scheduler::{MetricsLog, TrainData, TrainState};

/// Sample seed offset separating the synthetic test set from the training pool.
const TEST_SAMPLE_OFFSET: u64 = 1 << 32;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads or generates the configured dataset and carves the probe split out of the training
/// pool (probe first, then training), checking the two are disjoint.
pub fn prepare_data(cfg: &Config) -> Result<TrainData> {
    let (pool, test) = match cfg.dataset {
        DatasetKind::Synthetic => (
            data::synthetic(&cfg.synthetic, cfg.probe_size + cfg.train_size, cfg.task_seed, cfg.data_seed)?,
            data::synthetic(
                &cfg.synthetic,
                cfg.test_size,
                cfg.task_seed,
                cfg.data_seed.wrapping_add(TEST_SAMPLE_OFFSET),
            )?,
        ),
        DatasetKind::Cifar10 => {
            let d = &cfg.data_dir;
            let train: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            (
                data::load_cifar10_binary(&refs)?,
                data::load_cifar10_binary(&[&d.join("test_batch.bin")])?,
            )
        }
        DatasetKind::Idx => {
            let d = &cfg.data_dir;
            (
                data::load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"))?,
                data::load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"))?,
            )
        }
    };
    check_shape(cfg, &pool, "training")?;
    check_shape(cfg, &test, "test")?;
    if cfg.test_size > test.len() {
        return Err(Error::Config(format!(
            "test_size {} exceeds the {} available test images",
            cfg.test_size,
            test.len()
        )));
    }
    let plan = SplitPlan::leading(pool.len(), cfg.train_size, cfg.probe_size)?;
    plan.check_disjoint()?;
    let probe = if plan.probe.is_empty() {
        None
    } else {
        let s = pool.subset(&plan.probe)?;
        Some(ProbeSet {
            images: s.images,
            labels: s.labels,
        })
    };
    Ok(TrainData {
        train: pool.subset(&plan.train)?,
        test: test.subset(&(0..cfg.test_size).collect::<Vec<_>>())?,
        probe,
    })
}

fn check_shape(cfg: &Config, ds: &Dataset, what: &str) -> Result<()> {
    if ds.image_shape() != cfg.image_shape() {
        return Err(Error::Config(format!(
            "{what} images are {:?}, configuration expects {:?}",
            ds.image_shape(),
            cfg.image_shape()
        )));
    }
    if ds.num_classes > cfg.num_classes() {
        return Err(Error::Config(format!(
            "{what} labels span {} classes, configuration expects {}",
            ds.num_classes,
            cfg.num_classes()
        )));
    }
    Ok(())
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Mean test accuracy over the last (up to) five epochs.
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// Mean `train_acc − test_acc` over the last (up to) five epochs.
    pub gap: f64,
    /// Ortho sum after the last epoch.
    pub ortho_sum: f64,
}

impl RunSummary {
    pub fn of(log: &MetricsLog) -> Result<RunSummary> {
        let gap = generalization_gap(log)?;
        let test = log.test_acc();
        let tail = &test[test.len().saturating_sub(5)..];
        Ok(RunSummary {
            final_test_acc: tail.iter().sum::<f64>() / tail.len() as f64,
            best_test_acc: test.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            gap: gap.final_gap,
            ortho_sum: log.rows.last().map_or(0.0, |r| r.ortho_sum),
        })
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_e{epoch:04}.ckpt"))
}

/// Rows of an earlier `metrics.csv` before `epoch`, kept verbatim so a resumed run extends it.
fn earlier_rows(path: &Path, epoch: usize) -> Result<Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
        .map(str::to_string)
        .collect())
}

/// Trains one model, writing `metrics.csv` and `events.txt` after every epoch, periodic
/// checkpoints, and `final.ckpt`. Resumes from `cfg.resume` when set.
pub fn run_training(cfg: &Config, data: &TrainData, out: &Path) -> Result<TrainState> {
    create_dir(out)?;
    let tc = cfg.train_config()?;
    let (mut state, kept) = match &cfg.resume {
        Some(p) => {
            let s = checkpoint::load(&tc, p)?;
            let kept = earlier_rows(&out.join("metrics.csv"), s.epoch)?;
            (s, kept)
        }
        None => (TrainState::new(&tc)?, Vec::new()),
    };
    let csv = out.join("metrics.csv");
    let events = out.join("events.txt");
    state.run(&tc, data, |s| {
        let mut text = String::from(MetricsLog::HEADER);
        text.push('\n');
        for r in &kept {
            text.push_str(r);
            text.push('\n');
        }
        for r in &s.log.rows {
            text.push_str(&MetricsLog::row_csv(r));
            text.push('\n');
        }
        write(&csv, &text)?;
        let mut ev = String::new();
        for e in &s.events {
            let _ = writeln!(ev, "{e}");
        }
        for r in &s.reinits {
            let _ = writeln!(
                ev,
                "reinit layer {} filter {} via {} (max |cos| {:.3e})",
                r.layer, r.filter, r.path, r.max_abs_cos
            );
        }
        write(&events, &ev)?;
        if cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 {
            checkpoint::save(s, &checkpoint_path(out, s.epoch))?;
        }
        Ok(())
    })?;
    checkpoint::save(&state, &out.join("final.ckpt"))?;
    Ok(state)
}

pub fn cmd_train(cfg: &Config) -> Result<RunSummary> {
    let data = prepare_data(cfg)?;
    let state = run_training(cfg, &data, &cfg.output_dir)?;
    RunSummary::of(&state.log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub log: MetricsLog,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<ArmRun>,
}

impl Comparison {
    pub fn run(&self, arm: &str, seed: u64) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Runs of `arm` in seed order.
    pub fn arm(&self, arm: &str) -> Vec<&ArmRun> {
        let mut v: Vec<&ArmRun> = self.runs.iter().filter(|r| r.arm == arm).collect();
        v.sort_by_key(|r| r.seed);
        v
    }

    /// `arm,seed,` followed by every metrics column, one row per epoch per run.
    pub fn joint_csv(&self) -> String {
        let mut s = format!("arm,seed,{}\n", MetricsLog::HEADER);
        for r in &self.runs {
            for row in &r.log.rows {
                let _ = writeln!(s, "{},{},{}", r.arm, r.seed, MetricsLog::row_csv(row));
            }
        }
        s
    }

    /// Per-run summaries followed by one `mean` row per arm.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("arm,seed,final_test_acc,best_test_acc,gap,ortho_sum\n");
        let line = |s: &mut String, arm: &str, seed: &str, m: &RunSummary| {
            let _ = writeln!(
                s,
                "{arm},{seed},{},{},{},{}",
                m.final_test_acc, m.best_test_acc, m.gap, m.ortho_sum
            );
        };
        let mut arms: Vec<&str> = Vec::new();
        for r in &self.runs {
            line(&mut s, &r.arm, &r.seed.to_string(), &r.summary);
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        for a in arms {
            let runs = self.arm(a);
            let k = runs.len() as f64;
            let mean = |f: fn(&RunSummary) -> f64| runs.iter().map(|r| f(&r.summary)).sum::<f64>() / k;
            let m = RunSummary {
                final_test_acc: mean(|r| r.final_test_acc),
                best_test_acc: mean(|r| r.best_test_acc),
                gap: mean(|r| r.gap),
                ortho_sum: mean(|r| r.ortho_sum),
            };
            line(&mut s, a, "mean", &m);
        }
        s
    }
}

/// Runs every configured arm for every seed on one shared dataset. Each run gets its own
/// subdirectory; `compare.csv` and `summary.csv` go to the output directory.
pub fn run_comparison(
    cfg: &Config,
    data: &TrainData,
    mut on_run: impl FnMut(&ArmRun),
) -> Result<Comparison> {
    create_dir(&cfg.output_dir)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for arm in &cfg.arms {
            let c = cfg.for_arm(arm, seed)?;
            let dir = cfg.output_dir.join(format!("{}_seed{seed}", arm.replace(':', "-")));
            let state = run_training(&c, data, &dir)?;
            let run = ArmRun {
                arm: arm.clone(),
                seed,
                summary: RunSummary::of(&state.log)?,
                log: state.log,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    let cmp = Comparison { runs };
    write(&cfg.output_dir.join("compare.csv"), &cmp.joint_csv())?;
    write(&cfg.output_dir.join("summary.csv"), &cmp.summary_csv())?;
    Ok(cmp)
}

pub fn cmd_compare(cfg: &Config) -> Result<Comparison> {
    let data = prepare_data(cfg)?;
    run_comparison(cfg, &data, |_| {})
}

fn load_checkpoint(cfg: &Config) -> Result<TrainState> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs checkpoint = <path>".into()))?;
    Checkpoint::read(path)?.restore(&cfg.train_config()?)
}

fn probe_of(data: &TrainData) -> Result<&ProbeSet> {
    data.probe
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs probe_size >= 1".into()))
}

/// Oracle scores for the checkpoint's live filters, written to `oracle_scores.csv`.
pub fn cmd_oracle(cfg: &Config) -> Result<Vec<RankingScore>> {
    let data = prepare_data(cfg)?;
    let state = load_checkpoint(cfg)?;
    let scores = ranking::oracle_scores(&state.model, &state.mask, probe_of(&data)?)?;
    create_dir(&cfg.output_dir)?;
    ranking::write_scores_csv(&cfg.output_dir.join("oracle_scores.csv"), &scores)?;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub correlations: Vec<CorrelationReport>,
    /// Agreement of each other metric with the oracle; NaN when either side is constant.
    pub agreement: Vec<(Metric, Agreement)>,
}

impl Analysis {
    pub fn agreement_with(&self, metric: Metric) -> Option<&Agreement> {
        self.agreement.iter().find(|(m, _)| *m == metric).map(|(_, a)| a)
    }
}

/// Correlation matrices and metric agreement for a model on the probe set.
pub fn analyze_state(state: &TrainState, probe: &ProbeSet, seed: u64) -> Result<Analysis> {
    let layers: Vec<usize> = (0..state.model.conv.len()).collect();
    let mut correlations = Vec::new();
    for method in [CorrelationMethod::Pearson, CorrelationMethod::Cca] {
        for signal in [Signal::PostActivation, Signal::PreActivation] {
            correlations.push(activation_correlation(
                &state.model,
                &state.mask,
                probe,
                &layers,
                method,
                signal,
            )?);
        }
    }
    let oracle = ranking::oracle_scores(&state.model, &state.mask, probe)?;
    let mut agreement = Vec::new();
    for m in Metric::ALL {
        if m == Metric::Oracle {
            continue;
        }
        let s = ranking::metric_scores(&state.model, &state.mask, m, Some(probe), None, seed)?;
        let ag = match metric_agreement(&s, &oracle) {
            Err(Error::Undefined(_)) => Agreement {
                pearson: f64::NAN,
                spearman: f64::NAN,
                n: s.len(),
            },
            other => other?,
        };
        agreement.push((m, ag));
    }
    Ok(Analysis {
        correlations,
        agreement,
    })
}

/// Writes `correlation_<method>_<signal>.csv` files and `agreement.csv` for the checkpoint.
pub fn cmd_analyze(cfg: &Config) -> Result<Analysis> {
    let data = prepare_data(cfg)?;
    let state = load_checkpoint(cfg)?;
    let a = analyze_state(&state, probe_of(&data)?, cfg.seed)?;
    create_dir(&cfg.output_dir)?;
    for r in &a.correlations {
        let method = match r.method {
            CorrelationMethod::Pearson => "pearson",
            CorrelationMethod::Cca => "cca",
        };
        let signal = match r.signal {
            Signal::PostActivation => "post",
            Signal::PreActivation => "pre",
        };
        r.write_csv(&cfg.output_dir.join(format!("correlation_{method}_{signal}.csv")))?;
    }
    let mut s = String::from("metric,pearson,spearman,n\n");
    for (m, ag) in &a.agreement {
        let _ = writeln!(s, "{m},{},{},{}", ag.pearson, ag.spearman, ag.n);
    }
    write(&cfg.output_dir.join("agreement.csv"), &s)?;
    Ok(a)
}
