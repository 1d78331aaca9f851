//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use repr::analysis::{pearson, spearman};
use repr::config::Config;
use repr::experiment::{self, Comparison};
use repr::network::{Mode, Model, ModelSpec, PruneMask};
use repr::optim::{Optimizer, Rule};
use repr::ranking::{ortho_matrix_of, ortho_score_of, Metric};
use repr::scheduler::{reinit_filters, signature, train, EventKind, ReprSchedule};
use repr::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn scratch() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..24 {
        let mut r = rng("accept-grad", i);
        let spec = random_spec(&mut r);
        let mut model = Model::init(&spec, &mut r).unwrap();
        jitter_params(&mut r, &mut model);
        let mask = if i % 3 == 0 { PruneMask::full(&model) } else { random_mask(&mut r, &model, 0.3) };
        let x = random_images(&mut r, 3, &spec);
        let y = random_labels(&mut r, 3, spec.num_classes);
        let mode = if i % 2 == 0 { Mode::Train { dropout_seed: i } } else { Mode::Eval };
        let lambda = if i % 4 == 1 { 0.05 } else { 0.0 };
        let rep = fd_check(&model, &mask, &x, &y, mode, lambda);
        ensure!(rep.masked_zero, "instance {i}: masked gradient not zero");
        ensure!(rep.max_rel <= 1e-4, "instance {i} {spec:?}: rel {:.2e}", rep.max_rel);
        worst = worst.max(rep.max_rel);
        checked += rep.checked;
    }
    let mut r = rng("accept-ortho-loss", 0);
    for _ in 0..20 {
        let (j, d) = (r.random_range(2..8), r.random_range(2..12));
        let w = Tensor::new(&[j, d], (0..j * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = repr::scheduler::ortho_loss_of(&w);
        for i in 0..j * d {
            let mut a = w.clone();
            a.data_mut()[i] += 1e-5;
            let mut b = w.clone();
            b.data_mut()[i] -= 1e-5;
            let fd = (repr::scheduler::ortho_loss_of(&a).0 - repr::scheduler::ortho_loss_of(&b).0) / 2e-5;
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            ensure!(rel <= 1e-4, "ortho loss element {i}: {an} vs {fd}");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(format!("24 networks + 20 ortho-loss banks, {checked} elements, max rel {worst:.1e}"))
}

fn random_bank(r: &mut ChaCha8Rng, i: u64) -> (usize, usize, Vec<Vec<f64>>) {
    let j = r.random_range(1..=64);
    let d = r.random_range(1..=40);
    let mut rows: Vec<Vec<f64>> = (0..j).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    if j > 1 && i.is_multiple_of(3) {
        let (a, b) = (r.random_range(0..j), r.random_range(0..j));
        let scale = r.random_range(0.1..10.0);
        rows[b] = rows[a].iter().map(|v| v * scale).collect();
    }
    if i.is_multiple_of(4) {
        let z = r.random_range(0..j);
        rows[z] = vec![0.0; d];
    }
    (j, d, rows)
}

fn ortho_oracle() -> Outcome {
    let mut r = rng("accept-ortho", 0);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (j, d, rows) = random_bank(&mut r, i);
        let t = Tensor::from_rows(&rows).unwrap();
        let m = ortho_matrix_of(&t).unwrap();
        let s = ortho_score_of(&t).unwrap();
        let brute = brute_ortho(&rows);
        for a in 0..j {
            let zero = rows[a].iter().all(|&v| v == 0.0);
            ensure!(zero == m.zero_filters.contains(&a), "bank {i}: zero flag of filter {a}");
            for b in 0..j {
                worst = worst.max((m.p.row(a)[b] - brute[a][b]).abs());
            }
            let row: f64 = brute[a].iter().sum::<f64>() / j as f64;
            worst = worst.max((s.scores[a] - row).abs());
        }
        ensure!(worst <= 1e-10, "bank {i} ({j}x{d}): deviation {worst:.2e}");
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let orthonormal = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    ensure!(ortho_score_of(&orthonormal).unwrap().scores == vec![0.0, 0.0], "orthonormal scores");
    let dup = Tensor::from_rows(&[vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap();
    ensure!(ortho_score_of(&dup).unwrap().scores == vec![0.5, 0.5], "duplicate scores");
    let f3 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]).unwrap();
    let o3 = ortho_score_of(&f3).unwrap().scores[2];
    ensure!(o3 == 2f64.sqrt() / 3.0, "f3 score {o3} vs {}", 2f64.sqrt() / 3.0);
    Ok(format!("100 banks, max deviation {worst:.1e}; worked examples exact"))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (norm(a) * norm(b))).abs()
}

fn reinit_contract() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rebuilt = 0;
    for i in 0..100 {
        let mut r = rng("accept-reinit", i);
        let kernel = [1, 3, 5][r.random_range(0..3)];
        let c = r.random_range(if kernel == 1 { 3 } else { 1 }..=4);
        let fan = c * kernel * kernel;
        let filters = r.random_range(2..fan.min(65));
        let spec = ModelSpec {
            input_channels: c,
            height: 5,
            width: 5,
            layers: 1,
            filters,
            kernel,
            num_classes: 3,
            batch_norm: r.random_bool(0.5),
            conv_bias: true,
            dropout: 0.0,
        };
        let mut model = Model::init(&spec, &mut r).unwrap();
        let mut dropped: Vec<(usize, usize)> = (0..filters).filter(|_| r.random_bool(0.4)).map(|f| (0, f)).collect();
        if dropped.is_empty() {
            dropped.push((0, r.random_range(0..filters)));
        }
        let before: Vec<Vec<f64>> = (0..filters).map(|f| model.conv[0].filter(f).to_vec()).collect();
        let recs = reinit_filters(&mut model, None, &dropped, 0.1, false, &mut r).unwrap();
        ensure!(recs.len() == dropped.len(), "config {i}: {} records", recs.len());
        for rec in &recs {
            ensure!(!rec.path.is_degenerate(), "config {i}: J={filters} < {fan} took {}", rec.path);
            let new = model.conv[0].filter(rec.filter);
            ensure!(norm(new) > 0.0, "config {i}: zero filter");
            // surviving filters keep their values, dropped ones contribute their pre-drop values
            for row in &before {
                worst = worst.max(cos(new, row));
            }
            rebuilt += 1;
        }
        ensure!(worst <= 1e-8, "config {i} (J={filters}, dim {fan}): max |cos| {worst:.2e}");
    }

    let mut r = rng("accept-reinit-degenerate", 0);
    for (c, filters) in [(3, 3), (2, 5)] {
        let spec = ModelSpec {
            input_channels: c,
            height: 3,
            width: 3,
            layers: 1,
            filters,
            kernel: 1,
            num_classes: 2,
            batch_norm: false,
            conv_bias: true,
            dropout: 0.0,
        };
        let mut model = Model::init(&spec, &mut r).unwrap();
        let recs = reinit_filters(&mut model, None, &[(0, 0)], 0.1, false, &mut r).unwrap();
        ensure!(recs[0].path.is_degenerate(), "J={filters} >= {c}: took {}", recs[0].path);
    }
    let data = tiny_data(32, 16, 4);
    let mut cfg = tiny_config(4, 3, ReprSchedule { s1: 1, s2: 1, n: 1, p_percent: 50.0, ..ReprSchedule::default() });
    cfg.model.kernel = 1;
    cfg.model.filters = 3;
    let st = train(&cfg, &data).unwrap();
    let logged = st.events.iter().filter(|e| matches!(e.kind, EventKind::Degenerate { .. })).count();
    let flagged = st.reinits.iter().filter(|r| r.path.is_degenerate()).count();
    ensure!(logged > 0 && logged == flagged, "{logged} degenerate events for {flagged} fallbacks");
    Ok(format!("{rebuilt} filters rebuilt, max |cos| {worst:.1e}; {logged} degenerate fallbacks logged"))
}

/// Copy of `model` with every masked filter's weights, bias and batch-norm shift set to zero.
fn physically_zeroed(model: &Model, mask: &PruneMask) -> Model {
    let mut m = model.clone();
    for (l, layer) in m.conv.iter_mut().enumerate() {
        let fan = layer.fan_in();
        for f in 0..layer.filters() {
            if mask.is_live(l, f) {
                continue;
            }
            layer.set_filter_row(f, &vec![0.0; fan]).unwrap();
            if let Some(b) = layer.bias.as_mut() {
                b.data_mut()[f] = 0.0;
            }
            if let Some(bn) = layer.bn.as_mut() {
                bn.beta.data_mut()[f] = 0.0;
            }
        }
    }
    m
}

fn masked_snapshot(model: &Model, opt: &Optimizer, mask: &PruneMask) -> Vec<(f64, f64, f64, u64)> {
    let mut out = Vec::new();
    for (pi, (kind, p)) in model.param_kinds().into_iter().zip(model.parameters()).enumerate() {
        let s = &opt.slots[pi];
        for i in 0..p.len() {
            if masked_element(model, mask, kind, i) {
                let at = |v: &Vec<f64>| v.get(i).copied().unwrap_or(0.0);
                out.push((p.data()[i], at(&s.first), at(&s.second), s.steps.get(i).copied().unwrap_or(0)));
            }
        }
    }
    out
}

fn mask_semantics() -> Outcome {
    let mut masked_params = 0;
    for i in 0..30 {
        let mut r = rng("accept-mask", i);
        let spec = random_spec(&mut r);
        let mut model = Model::init(&spec, &mut r).unwrap();
        jitter_params(&mut r, &mut model);
        let mask = random_mask(&mut r, &model, 0.4);
        let zeroed = physically_zeroed(&model, &mask);
        let full = PruneMask::full(&model);
        let x = random_images(&mut r, 4, &spec);
        for mode in [Mode::Eval, Mode::Train { dropout_seed: i }] {
            let (a, _) = model.forward(&mask, &x, mode).unwrap();
            let (b, _) = zeroed.forward(&full, &x, mode).unwrap();
            ensure!(a.data() == b.data(), "instance {i} {mode:?}: masked and zeroed outputs differ");
        }

        let rule = if i % 2 == 0 { Rule::adam() } else { Rule::momentum() };
        let mut opt = Optimizer::new(rule, &model);
        let before = masked_snapshot(&model, &opt, &mask);
        for step in 0..100u64 {
            let xb = random_images(&mut r, 2, &spec);
            let yb = random_labels(&mut r, 2, spec.num_classes);
            let (_, cache) = model.forward(&mask, &xb, Mode::Train { dropout_seed: step }).unwrap();
            let g = model.backward(&cache, &yb, 0.01).unwrap().grads;
            opt.step(&mut model, &g, &mask, 0.01).unwrap();
        }
        let after = masked_snapshot(&model, &opt, &mask);
        let same = before.len() == after.len()
            && before.iter().zip(&after).all(|(p, q)| {
                p.0.to_bits() == q.0.to_bits()
                    && p.1.to_bits() == q.1.to_bits()
                    && p.2.to_bits() == q.2.to_bits()
                    && p.3 == q.3
            });
        ensure!(same, "instance {i}: masked parameters or slots changed");
        masked_params += before.len();
    }
    Ok(format!("30 random masks, exact outputs; {masked_params} masked elements frozen over 100 steps"))
}

fn cfg_in(dir: &Path, pairs: &[(&str, &str)]) -> Config {
    let mut all: Vec<(String, String)> = vec![
        ("image_size".into(), "4".into()),
        ("train_size".into(), "48".into()),
        ("probe_size".into(), "16".into()),
        ("test_size".into(), "16".into()),
        ("layers".into(), "2".into()),
        ("filters".into(), "4".into()),
        ("batch_size".into(), "16".into()),
        ("output_dir".into(), dir.display().to_string()),
    ];
    all.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    Config::load(None, &all).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn schedule_shape(dir: &Path) -> Outcome {
    let data = tiny_data(32, 16, 4);
    let mut cfg = tiny_config(4, 100, ReprSchedule::default());
    cfg.batch_size = 32;
    let st = train(&cfg, &data).unwrap();
    let sig = signature(&st.events);
    ensure!(sig == "FRPSIFRPSIFRPSIT", "signature {sig}");
    let boundaries: Vec<usize> = st
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::SubStart | EventKind::Reinit { .. }))
        .map(|e| e.epoch)
        .collect();
    ensure!(boundaries == [20, 30, 50, 60, 80, 90], "boundaries {boundaries:?}");

    let plain = cfg_in(&dir.join("standard"), &[("epochs", "6"), ("n", "0")]);
    let knobs = [("epochs", "6"), ("n", "0"), ("s1", "1"), ("s2", "1"), ("p_percent", "50"), ("metric", "taylor")];
    let zero = cfg_in(&dir.join("zero"), &knobs);
    experiment::cmd_train(&plain).unwrap();
    experiment::cmd_train(&zero).unwrap();
    let (a, b) = (read(&dir.join("standard/metrics.csv")), read(&dir.join("zero/metrics.csv")));
    ensure!(a == b, "n=0 metrics differ from standard training");
    Ok(format!("boundaries {boundaries:?}, signature {sig}; n=0 csv byte-identical"))
}

/// Desk-scale comparison setting shared by criteria 6 to 9.
fn desk_config(dir: &Path) -> Config {
    let pairs: Vec<(String, String)> = [
        ("image_size", "6"),
        ("synth_noise", "0.05"),
        ("synth_label_noise", "0"),
        ("output_dir", &dir.display().to_string()),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    Config::load(None, &pairs).unwrap()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn paired(cmp: &Comparison, a: &str, b: &str, key: impl Fn(&experiment::RunSummary) -> f64) -> (f64, f64, usize) {
    let (ra, rb) = (cmp.arm(a), cmp.arm(b));
    let wins = ra.iter().zip(&rb).filter(|(x, y)| key(&x.summary) > key(&y.summary)).count();
    (mean(ra.iter().map(|r| key(&r.summary))), mean(rb.iter().map(|r| key(&r.summary))), wins)
}

fn directional_benefit(cmp: &Comparison) -> Outcome {
    let acc = |s: &experiment::RunSummary| s.final_test_acc;
    let (ortho, std, wins) = paired(cmp, "repr:ortho", "standard", acc);
    let (random, _, _) = paired(cmp, "repr:random", "standard", acc);
    let detail = format!(
        "mean final test acc ortho {ortho:.4}, random {random:.4}, standard {std:.4}; ortho beats standard in {wins}/5"
    );
    ensure!(ortho > random && random > std && wins >= 4, "{detail}");
    Ok(detail)
}

fn ortho_trajectory(cmp: &Comparison) -> Outcome {
    let (std, ortho, wins) = paired(cmp, "standard", "repr:ortho", |s| s.ortho_sum);
    let detail = format!("final ortho sum ortho {ortho:.3} vs standard {std:.3}; lower in {wins}/5");
    ensure!(wins >= 4, "{detail}");
    Ok(detail)
}

fn generalization(cmp: &Comparison) -> Outcome {
    let gap = |s: &experiment::RunSummary| s.gap;
    let (std, ortho, wins) = paired(cmp, "standard", "repr:ortho", gap);
    let (_, random, random_wins) = paired(cmp, "standard", "repr:random", gap);
    let detail = format!(
        "gap ortho {ortho:.4} vs standard {std:.4}, smaller in {wins}/5 (random {random:.4}, {random_wins}/5)"
    );
    ensure!(wins >= 4, "{detail}");
    Ok(detail)
}

fn statistics(desk: &Path) -> Outcome {
    let mut r = rng("accept-stats", 0);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = r.random_range(3..=20);
        let levels = if i % 2 == 0 { 4 } else { 1000 };
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.25).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 - 1.5).collect();
        let (Ok(p), Ok(s)) = (pearson(&x, &y), spearman(&x, &y)) else {
            continue;
        };
        worst = worst.max((p - brute_pearson(&x, &y)).abs());
        worst = worst.max((s - brute_spearman(&x, &y)).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:.2e}");

    let mut cfg = desk_config(&desk.join("analysis"));
    cfg.checkpoint = Some(desk.join("repr-ortho_seed1/final.ckpt"));
    let a = experiment::cmd_analyze(&cfg).map_err(|e| e.to_string())?;
    let ag = a.agreement_with(Metric::Ortho).ok_or("no ortho agreement")?;
    ensure!(ag.pearson.is_finite() && ag.spearman.is_finite(), "ortho agreement undefined");
    ensure!(desk.join("analysis/agreement.csv").exists(), "agreement.csv missing");
    Ok(format!(
        "max deviation {worst:.1e}; ortho vs oracle pearson {:+.3}, spearman {:+.3} over {} filters",
        ag.pearson, ag.spearman, ag.n
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let base = [("epochs", "8"), ("s1", "2"), ("s2", "1"), ("n", "2"), ("checkpoint_every", "4"), ("staged_prune_batches", "2")];
    experiment::cmd_train(&cfg_in(&dir.join("a"), &base)).unwrap();
    experiment::cmd_train(&cfg_in(&dir.join("b"), &base)).unwrap();
    let whole = read(&dir.join("a/metrics.csv"));
    ensure!(whole == read(&dir.join("b/metrics.csv")), "reruns differ");
    ensure!(read(&dir.join("a/events.txt")) == read(&dir.join("b/events.txt")), "event logs differ");
    let mut resumed = cfg_in(&dir.join("resumed"), &base);
    resumed.resume = Some(dir.join("a/checkpoint_e0004.ckpt"));
    experiment::cmd_train(&resumed).unwrap();
    let tail: Vec<&str> = whole.lines().skip(1 + 4).collect();
    let got = read(&dir.join("resumed/metrics.csv"));
    let got: Vec<&str> = got.lines().skip(1).collect();
    ensure!(got == tail && tail.len() == 4, "resumed rows differ from the unbroken run");
    Ok("rerun byte-identical; resume from epoch 4 reproduces the last 4 rows".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match out {
        Ok(d) => {
            println!("PASS {n:2} {name}: {d} [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("FAIL {n:2} {name}: {d} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let dir = scratch();
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradients);
    ok &= run(2, "ortho metric oracle", ortho_oracle);
    ok &= run(3, "re-initialization contract", reinit_contract);
    ok &= run(4, "mask semantics", mask_semantics);
    ok &= run(5, "schedule shape", || schedule_shape(&dir.join("schedule")));

    let desk = dir.join("desk");
    let started = Instant::now();
    let cmp = catch_unwind(|| {
        let cfg = desk_config(&desk);
        let data = experiment::prepare_data(&cfg).unwrap();
        experiment::run_comparison(&cfg, &data, |r| {
            eprintln!(
                "  {} seed {}: final test acc {:.4}, gap {:.4}, ortho sum {:.3} [{:.0}s]",
                r.arm,
                r.seed,
                r.summary.final_test_acc,
                r.summary.gap,
                r.summary.ortho_sum,
                started.elapsed().as_secs_f64()
            );
        })
        .unwrap()
    });
    match &cmp {
        Ok(cmp) => {
            ok &= run(6, "directional benefit", || directional_benefit(cmp));
            ok &= run(7, "ortho-sum trajectory", || ortho_trajectory(cmp));
            ok &= run(8, "generalization gap", || generalization(cmp));
        }
        Err(_) => {
            for (n, name) in [(6, "directional benefit"), (7, "ortho-sum trajectory"), (8, "generalization gap")] {
                println!("FAIL {n:2} {name}: comparison run failed");
            }
            ok = false;
        }
    }
    ok &= run(9, "statistics machinery", || statistics(&desk));
    ok &= run(10, "determinism and persistence", || determinism(&dir.join("determinism")));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
