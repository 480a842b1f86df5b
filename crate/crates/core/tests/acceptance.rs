//! Acceptance criteria 1 to 10. Every test prints one `criterion N: PASS|FAIL`
//! line straight to stderr (outside the test harness capture) and then
//! asserts. Tests share a lock so wall-clock budgets are measured without
//! contention.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use limbchan_core::autodiff::gradcheck::{check, DEFAULT_STEP};
use limbchan_core::autodiff::{sigmoid, Activation, Graph, GruVars, NormMode, Padding, Tensor, Var};
use limbchan_core::eval::{f1_score, generalization_report, Metrics};
use limbchan_core::experiments::{
    build_scenario, scenario_definition, Benchmark, ComparisonReport, ScenarioOptions, HELD_OUT_CLASS, INFERIOR_MI,
};
use limbchan_core::layers::{attend, gru_cell_step, BatchNorm, Conv1d, Ctx, Dense, GruParams, GruStack, Parameterized, ResidualBlockParams};
use limbchan_core::models::{time_steps, ClassifierConfig, ClassifierInput, ClassifierModel, ImputerConfig, ImputerModel};
use limbchan_core::preprocess::{downsample, ChannelConfig};
use limbchan_core::rng::{seeded_rng, SeededRng};
use limbchan_core::synthetic::{make_synthetic_dataset, SyntheticSpec};
use limbchan_core::train::{imputer_loss, train_classifier, train_imputer, TrainConfig};
use limbchan_core::wfdb::{decode_adc, parse_header, read_signals, DiagnosisLabel, CLASS_TABLE};
use limbchan_core::Error;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id}: {verdict} {title} ({detail})");
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Weighted sum of every element so each output gets its own sensitivity.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&mut seeded_rng(seed), &shape, 1.0));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn params_of<P: Parameterized>(m: &P) -> Vec<Tensor> {
    m.params().iter().map(|p| p.value.clone()).collect()
}

/// Give zero-initialised tensors (biases, batch-norm shift) random values
/// so their gradients are exercised.
fn jitter(tensors: &mut [Tensor], rng: &mut SeededRng) {
    for t in tensors {
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
    }
}

/// Worst relative error per checked unit over all seeds.
#[derive(Default)]
struct GradLedger {
    worst: BTreeMap<&'static str, f64>,
    checked: usize,
}

impl GradLedger {
    fn run<F>(&mut self, name: &'static str, inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, Error>,
    {
        let r = check(inputs, DEFAULT_STEP, f).unwrap_or_else(|e| panic!("{name}: {e}"));
        self.checked += r.checked;
        let w = self.worst.entry(name).or_insert(0.0);
        *w = w.max(r.max_rel_error);
    }
}

fn primitive_checks(ledger: &mut GradLedger, seed: u64) {
    let mut rng = seeded_rng(10_000 + seed);
    let ps = rng.next_u64();
    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], 1.0);
    let bias = rand_tensor(&mut rng, &[4], 1.0);
    ledger.run("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, ps)
    });
    ledger.run("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, ps)
    });
    ledger.run("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, ps)
    });
    ledger.run("add_bias", &[a.clone(), bias], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        project(g, y, ps)
    });
    ledger.run("affine", &[a.clone()], |g, v| {
        let y = g.affine(v[0], -1.7, 0.3);
        project(g, y, ps)
    });
    let away_from_kink = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for (name, kind) in [("sigmoid", Activation::Sigmoid), ("tanh", Activation::Tanh), ("relu", Activation::Relu)] {
        ledger.run(name, &[away_from_kink.clone()], |g, v| {
            let y = g.activation(v[0], kind);
            project(g, y, ps)
        });
    }
    ledger.run("softmax", &[a.clone()], |g, v| {
        let y = g.softmax(v[0]);
        project(g, y, ps)
    });
    ledger.run("sum/mean", &[a.clone()], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let m = g.mean(sq);
        let s = g.sum(v[0]);
        g.add(m, s)
    });

    let (m, k, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(3));
    let lhs = rand_tensor(&mut rng, &[m, k], 1.0);
    let rhs = rand_tensor(&mut rng, &[k, n], 1.0);
    ledger.run("matmul", &[lhs.clone(), rhs], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, ps)
    });
    let side = rand_tensor(&mut rng, &[m, 2], 1.0);
    ledger.run("concat/stack_time/time_mean", &[lhs, side], |g, v| {
        let cat = g.concat(&[v[0], v[1]])?;
        let seq = g.stack_time(&[cat, cat, cat])?;
        let pooled = g.time_mean(seq)?;
        let y = g.stack_time(&[pooled, cat])?;
        project(g, y, ps)
    });

    let batch = 1 + rng.below(2);
    let t_len = 3 + rng.below(5);
    let (c_in, c_out, kernel) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
    let stride = 1 + rng.below(2);
    let padding = if rng.bernoulli(0.5) { Padding::Same } else { Padding::Valid };
    let x = rand_tensor(&mut rng, &[batch, t_len, c_in], 1.0);
    let w = rand_tensor(&mut rng, &[kernel, c_in, c_out], 1.0);
    let cb = rand_tensor(&mut rng, &[c_out], 1.0);
    ledger.run("conv1d", &[x, w, cb], |g, v| {
        let y = g.conv1d(v[0], v[1], Some(v[2]), stride, padding)?;
        project(g, y, ps)
    });

    let rows = 2 + rng.below(2);
    let x = rand_tensor(&mut rng, &[rows, 3, 2], 1.0);
    let gamma = rand_tensor(&mut rng, &[2], 1.0);
    let beta = rand_tensor(&mut rng, &[2], 1.0);
    ledger.run("batchnorm1d train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batchnorm1d(v[0], v[1], v[2], NormMode::Train, 1e-5)?;
        project(g, y, ps)
    });
    ledger.run("batchnorm1d eval", &[x.clone(), gamma, beta], |g, v| {
        let mean = [0.2, -0.4];
        let var = [1.3, 0.6];
        let (y, _) = g.batchnorm1d(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var }, 1e-5)?;
        project(g, y, ps)
    });
    ledger.run("dropout", &[x], |g, v| {
        let mut mask = seeded_rng(ps ^ 0xd0);
        let y = g.dropout(v[0], 0.3, Some(&mut mask))?;
        project(g, y, ps)
    });

    let (b, t, d) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(3));
    let keys = rand_tensor(&mut rng, &[b, t, d], 1.0);
    let query = rand_tensor(&mut rng, &[b, d], 1.0);
    ledger.run("attention_scores/weighted_sum", &[keys, query], |g, v| {
        let s = g.attention_scores(v[0], v[1], 0.6)?;
        let wts = g.softmax(s);
        let c = g.weighted_sum(wts, v[0])?;
        project(g, c, ps)
    });

    let (b, d_in, d_h) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4));
    let mut gru_inputs = vec![rand_tensor(&mut rng, &[b, d_in], 1.0), rand_tensor(&mut rng, &[b, d_h], 0.8)];
    gru_inputs.extend((0..3).map(|_| rand_tensor(&mut rng, &[d_in, d_h], 0.7)));
    gru_inputs.extend((0..3).map(|_| rand_tensor(&mut rng, &[d_h, d_h], 0.7)));
    gru_inputs.extend((0..3).map(|_| rand_tensor(&mut rng, &[d_h], 0.5)));
    ledger.run("gru_cell", &gru_inputs, |g, v| {
        let p = GruVars {
            u: [v[2], v[3], v[4]],
            w: [v[5], v[6], v[7]],
            b: [v[8], v[9], v[10]],
        };
        let s1 = g.gru_cell(v[0], v[1], p)?;
        let s2 = g.gru_cell(v[0], s1, p)?;
        project(g, s2, ps)
    });

    let classes = 2 + rng.below(3);
    let rows = 1 + rng.below(4);
    let logits = rand_tensor(&mut rng, &[rows, classes], 2.0);
    let targets: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
    ledger.run("softmax_cross_entropy", &[logits], |g, v| g.softmax_cross_entropy(v[0], &targets));
    let p = rand_tensor(&mut rng, &[3, 2], 1.0);
    let q = rand_tensor(&mut rng, &[3, 2], 1.0);
    ledger.run("mse_loss", &[p, q], |g, v| g.mse_loss(v[0], v[1]));
}

fn layer_checks(ledger: &mut GradLedger, seed: u64) {
    let mut rng = seeded_rng(20_000 + seed);
    let ps = rng.next_u64();

    let cell = GruParams::new("cell", 2, 3, false, &mut rng);
    let mut inputs = params_of(&cell);
    jitter(&mut inputs, &mut rng);
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[2, 2], 1.0));
    inputs.push(rand_tensor(&mut rng, &[2, 3], 0.8));
    ledger.run("layer: GRU cell", &inputs, |g, v| {
        let s = cell.step(g, &v[..n], v[n], v[n + 1])?;
        project(g, s, ps)
    });

    let stack = GruStack::new("stack", 2, 3, 2, false, &mut rng);
    let mut inputs = params_of(&stack);
    jitter(&mut inputs, &mut rng);
    let n = inputs.len();
    inputs.extend((0..3).map(|_| rand_tensor(&mut rng, &[2, 2], 1.0)));
    ledger.run("layer: stacked GRU", &inputs, |g, v| {
        let (top, finals) = stack.forward(g, &v[..n], &v[n..], None)?;
        let seq = g.stack_time(&top)?;
        let last = g.concat(&finals)?;
        let a = project(g, seq, ps)?;
        let b = project(g, last, ps ^ 1)?;
        g.add(a, b)
    });

    let (t, d) = (1 + rng.below(4), 1 + rng.below(3));
    let query = rand_tensor(&mut rng, &[2, d], 1.0);
    let states = rand_tensor(&mut rng, &[2, t, d], 1.0);
    ledger.run("layer: attention", &[query, states], |g, v| {
        let (c, _) = attend(g, v[0], v[1])?;
        project(g, c, ps)
    });

    let conv = Conv1d::new("conv", 3, 2, 3, 1 + rng.below(2), true, &mut rng);
    let mut inputs = params_of(&conv);
    jitter(&mut inputs, &mut rng);
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[2, 6, 2], 1.0));
    ledger.run("layer: conv1d", &inputs, |g, v| {
        let y = conv.forward(g, &v[..n], v[n])?;
        project(g, y, ps)
    });

    let bn = BatchNorm::new("bn", 3);
    let mut inputs = params_of(&bn);
    jitter(&mut inputs, &mut rng);
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[3, 4, 3], 1.5));
    let train = seed % 2 == 0;
    ledger.run("layer: batchnorm", &inputs, |g, v| {
        let mut ctx = Ctx { train, rng: None, batch_stats: Vec::new() };
        let y = bn.forward(g, &v[..n], v[n], &mut ctx)?;
        project(g, y, ps)
    });

    let stride = 1 + rng.below(2);
    let block = ResidualBlockParams::new("block", 2, 2 + rng.below(2), 3, stride, 0.25, &mut rng);
    let mut inputs = params_of(&block);
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[2, 5, 2], 1.0));
    ledger.run("layer: residual block", &inputs, |g, v| {
        let mut mask = seeded_rng(ps ^ 0xb10c);
        let mut ctx = if train { Ctx::train(&mut mask) } else { Ctx::eval() };
        let y = block.forward(g, &v[..n], v[n], &mut ctx)?;
        project(g, y, ps)
    });

    let dense = Dense::new("fc", 3, 2, &mut rng);
    let mut inputs = params_of(&dense);
    jitter(&mut inputs, &mut rng);
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[4, 3], 1.0));
    let targets: Vec<usize> = (0..4).map(|_| rng.below(2)).collect();
    ledger.run("loss: cross-entropy through dense head", &inputs, |g, v| {
        let logits = dense.forward(g, &v[..n], v[n])?;
        g.softmax_cross_entropy(logits, &targets)
    });

    let channels = ChannelConfig::standard(&["II", "III", "aVF"]).unwrap();
    let config = ImputerConfig {
        hidden: 2,
        layers: 2,
        attention: seed % 2 == 1,
        update_bias: 0.3,
        ..ImputerConfig::default()
    };
    let imputer = ImputerModel::new(channels, config, &mut rng);
    let mut inputs = params_of(&imputer);
    jitter(&mut inputs, &mut rng);
    let x_hat = rand_tensor(&mut rng, &[2, 3, 3], 1.0);
    let target = rand_tensor(&mut rng, &[2, 3, 12], 1.0);
    ledger.run("loss: imputer mse through seq2seq", &inputs, |g, v| {
        let steps = time_steps(g, &x_hat)?;
        let out = imputer.forward_graph(g, v, &steps)?;
        let pred = g.stack_time(&out.outputs)?;
        let tgt = g.constant(target.clone());
        g.mse_loss(pred, tgt)
    });
}

#[test]
fn criterion_01_gradient_correctness() {
    let _guard = serial();
    let start = Instant::now();
    let mut ledger = GradLedger::default();
    for seed in 0..GRAD_SEEDS {
        primitive_checks(&mut ledger, seed);
        layer_checks(&mut ledger, seed);
    }
    let elapsed = start.elapsed();
    let (worst_name, worst) = ledger
        .worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (*k, *v))
        .unwrap();
    let failing: Vec<_> = ledger.worst.iter().filter(|(_, &e)| !(e < GRAD_TOL)).collect();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} units x {GRAD_SEEDS} seeds, {} derivatives, worst {worst:.2e} in {worst_name}, {:.1}s",
            ledger.worst.len(),
            ledger.checked,
            elapsed.as_secs_f64()
        ),
    );
    assert!(failing.is_empty(), "relative error >= {GRAD_TOL}: {failing:?}");
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

/// Row-vector GRU step written out scalar by scalar, biases zero.
fn reference_gru(x: &[f64], s: &[f64], u: [&Tensor; 3], w: [&Tensor; 3]) -> Vec<f64> {
    let d_h = s.len();
    let lin = |m: &Tensor, v: &[f64], j: usize| -> f64 { (0..v.len()).map(|i| v[i] * m.data()[i * d_h + j]).sum() };
    let z: Vec<f64> = (0..d_h).map(|j| sigmoid(lin(u[0], x, j) + lin(w[0], s, j))).collect();
    let r: Vec<f64> = (0..d_h).map(|j| sigmoid(lin(u[1], x, j) + lin(w[1], s, j))).collect();
    let rs: Vec<f64> = s.iter().zip(&r).map(|(a, b)| a * b).collect();
    let h: Vec<f64> = (0..d_h).map(|j| (lin(u[2], x, j) + lin(w[2], &rs, j)).tanh()).collect();
    (0..d_h).map(|j| (1.0 - z[j]) * h[j] + z[j] * s[j]).collect()
}

#[test]
fn criterion_02_gru_step_fidelity() {
    let _guard = serial();
    let mut worst = 0.0f64;
    let mut rnn_worst = 0.0f64;
    for seed in 0..200 {
        let mut rng = seeded_rng(30_000 + seed);
        let (d_in, d_h) = (1 + rng.below(5), 1 + rng.below(8));
        let mut p = GruParams::new("g", d_in, d_h, true, &mut rng);
        for m in p.u.iter_mut().chain(p.w.iter_mut()) {
            m.value = rand_tensor(&mut rng, m.value.shape(), 0.9);
        }
        assert!(p.biases_frozen() && p.b.iter().all(|b| b.value.data().iter().all(|&v| v == 0.0)));
        let x: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let s: Vec<f64> = (0..d_h).map(|_| rng.normal()).collect();
        let got = gru_cell_step(&x, &s, &p).unwrap();
        let want = reference_gru(&x, &s, [&p.u[0].value, &p.u[1].value, &p.u[2].value], [&p.w[0].value, &p.w[1].value, &p.w[2].value]);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }

        // Saturated gates force z = 0 and r = 1 exactly in f64.
        let mut forced = p.clone();
        forced.b[0].value = Tensor::full(&[d_h], -1e3);
        forced.b[1].value = Tensor::full(&[d_h], 1e3);
        let got = gru_cell_step(&x, &s, &forced).unwrap();
        let (uh, wh) = (&p.u[2].value, &p.w[2].value);
        for (j, g) in got.iter().enumerate() {
            let mut pre = 0.0;
            (0..d_in).for_each(|i| pre += x[i] * uh.data()[i * d_h + j]);
            (0..d_h).for_each(|i| pre += s[i] * wh.data()[i * d_h + j]);
            rnn_worst = rnn_worst.max((g - pre.tanh()).abs());
        }
    }
    let pass = worst <= 1e-12 && rnn_worst == 0.0;
    report(
        2,
        "GRU step matches its equations",
        pass,
        &format!("max gap {worst:.1e} over 200 cells, plain-RNN gap {rnn_worst:.1e}"),
    );
    assert!(worst <= 1e-12, "gru_cell_step differs by {worst}");
    assert_eq!(rnn_worst, 0.0, "r = 1, z = 0 is not the plain RNN step");
}

#[test]
fn criterion_03_synthetic_imputation_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let ds = make_synthetic_dataset(&spec).unwrap();
    assert_eq!((ds.n, ds.t, ds.k), (256, 192, 12));
    assert_eq!(spec.noise, 0.0);
    let mean = ds.data.iter().sum::<f64>() / ds.data.len() as f64;
    let var = ds.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ds.data.len() as f64;
    let channels = spec.observed_config().unwrap();
    assert_eq!(channels.len(), 3);
    let model = ImputerConfig {
        hidden: 16,
        init_scale: 2.0,
        ..ImputerConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 3e-3,
        epochs: 200,
        seed: 0,
        patience: None,
        target_loss: Some(0.01 * var),
        ..TrainConfig::imputer_defaults()
    };
    let (imputer, history) = train_imputer(&ds, &channels, &model, &cfg, None).unwrap();
    let all: Vec<usize> = (0..ds.n).collect();
    let mse = imputer_loss(&imputer, &ds, &all, 64).unwrap();
    let elapsed = start.elapsed();
    let epochs = history.epochs.len();
    let pass = mse <= 0.01 * var && epochs <= 200 && elapsed < Duration::from_secs(600);
    report(
        3,
        "synthetic imputation oracle",
        pass,
        &format!("mse/var {:.4} after {epochs} epochs, {:.0}s", mse / var, elapsed.as_secs_f64()),
    );
    assert!(mse <= 0.01 * var, "mse {mse} > 0.01 x {var}");
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
}

struct BenchmarkRun {
    report: ComparisonReport,
    elapsed: Duration,
}

fn benchmark() -> &'static BenchmarkRun {
    static RUN: OnceLock<BenchmarkRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let (_, _, report) = Benchmark::cross_distribution().run().unwrap();
        BenchmarkRun {
            report,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_04_synthetic_classification() {
    let _guard = serial();
    let run = benchmark();
    let row = run.report.resnetpp.row(INFERIOR_MI).expect("trained class in the test split");
    let f1 = row.metrics.f1;
    let pass = f1 >= 0.99 && run.elapsed < Duration::from_secs(600);
    report(
        4,
        "ResNet++ on the trained class",
        pass,
        &format!("F1 {f1:.3} on {} held-out frames, {:.0}s", row.n, run.elapsed.as_secs_f64()),
    );
    assert!(f1 >= 0.99, "trained-class F1 {f1}");
    assert!(run.elapsed < Duration::from_secs(600), "took {:?}", run.elapsed);
}

#[test]
fn criterion_05_cross_distribution_advantage() {
    let _guard = serial();
    let run = benchmark();
    let row = run.report.row(HELD_OUT_CLASS).expect("held-out class in the test split");
    assert!(!row.in_training);
    let pass = row.resnetpp_f1 >= row.baseline_f1 + 0.05;
    report(
        5,
        "held-out class advantage",
        pass,
        &format!("ResNet++ F1 {:.3} vs baseline {:.3} on {} frames", row.resnetpp_f1, row.baseline_f1, row.n),
    );
    assert!(pass, "ResNet++ {} vs baseline {}", row.resnetpp_f1, row.baseline_f1);
}

/// Counts and F1 from the confusion-matrix definition.
fn brute_force(pred: &[bool], truth: &[bool]) -> (usize, usize, usize, usize, f64) {
    let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count();
    let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (tp, fp, fn_, tn, f1)
}

fn agrees(m: &Metrics, oracle: (usize, usize, usize, usize, f64)) -> bool {
    (m.tp, m.fp, m.fn_, m.tn) == (oracle.0, oracle.1, oracle.2, oracle.3) && (m.f1 - oracle.4).abs() <= 1e-12
}

#[test]
fn criterion_06_metric_oracle() {
    let _guard = serial();
    let mut rng = seeded_rng(60_000);
    let mut mismatches = 0;
    let mut cases = 0;
    for case in 0..1000 {
        let n = 1 + rng.below(60);
        let (pred, labels): (Vec<bool>, Vec<DiagnosisLabel>) = (0..n)
            .map(|_| {
                let label = match case % 5 {
                    // all healthy
                    0 => DiagnosisLabel::healthy(),
                    // a single disease class
                    1 => DiagnosisLabel::from_class_name(CLASS_TABLE[3].0),
                    _ => DiagnosisLabel::from_class_name(CLASS_TABLE[rng.below(CLASS_TABLE.len())].0),
                };
                let p = match case % 7 {
                    0 => false,
                    1 => true,
                    _ => rng.bernoulli(0.5),
                };
                (p, label)
            })
            .unzip();
        let truth: Vec<bool> = labels.iter().map(|l| !l.is_healthy).collect();
        cases += 1;
        if !agrees(&f1_score(&pred, &truth).unwrap(), brute_force(&pred, &truth)) {
            mismatches += 1;
        }
        let rep = generalization_report(&pred, &labels).unwrap();
        if !agrees(&rep.overall, brute_force(&pred, &truth)) {
            mismatches += 1;
        }
        let present: Vec<&str> = CLASS_TABLE.iter().map(|c| c.0).filter(|c| labels.iter().any(|l| l.class_name == *c)).collect();
        if rep.rows.len() != present.len() {
            mismatches += 1;
        }
        for row in &rep.rows {
            let healthy_row = DiagnosisLabel::from_class_name(&row.class_name).is_healthy;
            let scope: Vec<usize> = (0..n)
                .filter(|&i| labels[i].class_name == row.class_name || (!healthy_row && labels[i].is_healthy))
                .collect();
            let p: Vec<bool> = scope.iter().map(|&i| pred[i]).collect();
            let t: Vec<bool> = scope.iter().map(|&i| truth[i]).collect();
            let members = (0..n).filter(|&i| labels[i].class_name == row.class_name).count();
            if row.n != members || !agrees(&row.metrics, brute_force(&p, &t)) {
                mismatches += 1;
            }
        }
    }
    let all_negative = f1_score(&[false; 4], &[false; 4]).unwrap();
    let degenerate_ok = all_negative.f1 == 0.0 && all_negative.tn == 4 && f1_score(&[], &[]).is_err();
    let pass = mismatches == 0 && degenerate_ok;
    report(
        6,
        "metric oracle",
        pass,
        &format!("{cases} randomized sets, {mismatches} disagreements"),
    );
    assert_eq!(mismatches, 0);
    assert!(degenerate_ok);
}

const FIXTURE_HEADER: &str = "\
s0001_re 3 1000 5
s0001_re.dat 16 2000(0)/mV 16 0 -12 1234 0 ii
s0001_re.dat 16 1000(-5)/mV 16 0 7 -77 0 iii
s0001_re.dat 16 500/mV 16 0 3 0 0 avf
# age: 61
# Reason for admission: Myocardial infarction
# Acute infarction (localization): inferior
";

const FIXTURE_ADC: [i16; 15] = [
    -12, 7, 3, 32767, -32768, 0, 1, -1, 250, -2000, 999, -999, 0, 5, -5,
];

fn fixture_payload() -> Vec<u8> {
    FIXTURE_ADC.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[test]
fn criterion_07_parser_fidelity() {
    let _guard = serial();
    let header = parse_header(FIXTURE_HEADER).unwrap();
    let reparsed = parse_header(&header.to_text()).unwrap();
    let round_trip = reparsed == header;

    let adc = decode_adc(&header, &fixture_payload()).unwrap();
    let rec = read_signals(&header, &fixture_payload()).unwrap();
    let baselines = [0.0, -5.0, 0.0];
    let gains = [2000.0, 1000.0, 500.0];
    let bit_exact = adc == FIXTURE_ADC
        && rec.signal.shape() == [5, 3]
        && rec
            .signal
            .data()
            .iter()
            .enumerate()
            .all(|(i, &v)| v.to_bits() == ((f64::from(FIXTURE_ADC[i]) - baselines[i % 3]) / gains[i % 3]).to_bits());

    let with = |from: &str, to: &str| FIXTURE_HEADER.replacen(from, to, 1);
    let errors = [
        matches!(parse_header(""), Err(Error::MalformedHeader(_))),
        matches!(parse_header("s0001_re 3 1000"), Err(Error::MalformedHeader(_))),
        matches!(parse_header(&with("s0001_re 3", "s0001_re 4")), Err(Error::MalformedHeader(_))),
        matches!(parse_header(&with("1000 5", "abc 5")), Err(Error::MalformedHeader(_))),
        matches!(parse_header(&with("dat 16 500", "dat 212 500")), Err(Error::UnsupportedFormat(212))),
        matches!(
            decode_adc(&header, &fixture_payload()[..29]),
            Err(Error::TruncatedPayload { expected: 30, found: 29 })
        ),
        matches!(
            read_signals(&parse_header(&with("500/mV", "0/mV")).unwrap(), &fixture_payload()),
            Err(Error::ZeroGain(2))
        ),
    ];
    let errors_ok = errors.iter().all(|&e| e);

    let opts = ScenarioOptions::default();
    let (leads1, _) = scenario_definition(1, &opts).unwrap();
    let (leads2, _) = scenario_definition(2, &opts).unwrap();
    let scenarios_ok = leads1 == ["II", "III", "aVF"]
        && leads2 == ["V1", "V2", "V3"]
        && matches!(scenario_definition(3, &opts), Err(Error::UnknownScenario(3)));

    let pass = round_trip && bit_exact && errors_ok && scenarios_ok;
    report(
        7,
        "record parser fidelity",
        pass,
        &format!("round trip {round_trip}, bit exact {bit_exact}, error cases {errors:?}, scenario leads {scenarios_ok}"),
    );
    assert!(round_trip && bit_exact && errors_ok && scenarios_ok);
}

fn tone(freq: f64, seconds: f64, rate: f64) -> Tensor {
    let n = (seconds * rate) as usize;
    Tensor::new(vec![n, 1], (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()).unwrap()
}

/// Amplitude of the `freq` component by projection onto sine and cosine,
/// ignoring `margin` samples at either end.
fn amplitude_at(y: &[f64], freq: f64, rate: f64, margin: usize) -> f64 {
    let core = &y[margin..y.len() - margin];
    let (mut s, mut c) = (0.0, 0.0);
    for (k, v) in core.iter().enumerate() {
        let ph = 2.0 * PI * freq * (k + margin) as f64 / rate;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    2.0 * (s * s + c * c).sqrt() / core.len() as f64
}

fn rms(y: &[f64], margin: usize) -> f64 {
    let core = &y[margin..y.len() - margin];
    (core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64).sqrt()
}

#[test]
fn criterion_08_resampler() {
    let _guard = serial();
    // skip the filter's reach at both ends
    let margin = 160;
    let low = downsample(&tone(5.0, 10.0, 1000.0), 1000.0, 64.0).unwrap();
    let amp = amplitude_at(low.data(), 5.0, 64.0, margin);
    let high = downsample(&tone(450.0, 10.0, 1000.0), 1000.0, 64.0).unwrap();
    let attenuation_db = 20.0 * (std::f64::consts::FRAC_1_SQRT_2 / rms(high.data(), margin)).log10();
    let pass = low.shape()[0] == 640 && (amp - 1.0).abs() <= 0.02 && attenuation_db >= 40.0;
    report(
        8,
        "resampler 1000 to 64 Hz",
        pass,
        &format!("5 Hz amplitude {amp:.4}, 450 Hz attenuated {attenuation_db:.1} dB"),
    );
    assert!((amp - 1.0).abs() <= 0.02, "5 Hz amplitude {amp}");
    assert!(attenuation_db >= 40.0, "450 Hz attenuation {attenuation_db} dB");
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_limbchan"))
        .args(args)
        .env_remove("LIMBCHAN_DATA_DIR")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL_RUN: &str = "\
seed = 5

[synthetic]
n_frames = 48

[imputer]
hidden = 4
layers = 5
init_scale = 2.0

[baseline]
width_divisor = 8
kernel = 5

[train_imputer]
batch_size = 8
epochs = 2
patience = 0

[train_classifier]
batch_size = 8
epochs = 2
patience = 0
";

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn criterion_09_determinism() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let cfg = config.to_str().unwrap();
    let data = root.join("data");
    run_ok(&["synth", "--config", cfg, "--out", data.to_str().unwrap()]);
    let archive = data.join("frames.lcb");
    let archive = archive.to_str().unwrap();

    let mut identical = true;
    for stage in ["imputer", "baseline"] {
        let runs: Vec<_> = (0..2).map(|i| root.join(format!("{stage}{i}"))).collect();
        for r in &runs {
            run_ok(&["train", "--stage", stage, "--archive", archive, "--scenario", "1", "--config", cfg, "--out", r.to_str().unwrap()]);
        }
        let name = format!("{stage}.lcw");
        identical &= same_bytes(&runs[0].join(&name), &runs[1].join(&name));
        identical &= same_bytes(&runs[0].join(format!("{name}.toml")), &runs[1].join(format!("{name}.toml")));
    }

    let spec = SyntheticSpec {
        n_frames: 40,
        ..Benchmark::cross_distribution().data
    };
    let ds = make_synthetic_dataset(&spec).unwrap();
    let split = build_scenario(1, &ds, 3, &ScenarioOptions::default()).unwrap();
    let train_set = ds.subset(&split.train);
    let mut rng = seeded_rng(9);
    let imputer = ImputerModel::new(
        split.leads.clone(),
        ImputerConfig {
            hidden: 4,
            ..ImputerConfig::default()
        },
        &mut rng,
    );
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        patience: None,
        ..TrainConfig::classifier_defaults()
    };
    let classifier = ClassifierConfig::stage2(12).narrowed(8, 5);
    let (model, _) = train_classifier(&train_set, imputer, &classifier, ClassifierInput::ImputedSignal, false, &cfg, None).unwrap();
    let x = limbchan_core::preprocess::select_columns(&ds.batch(&(0..ds.n).collect::<Vec<_>>()), &split.leads.indices);
    let batched = model.predict(&x).unwrap();
    let (t, c) = (x.shape()[1], x.shape()[2]);
    let mut gap = 0.0f64;
    for i in 0..ds.n {
        let one = Tensor::new(vec![1, t, c], x.data()[i * t * c..(i + 1) * t * c].to_vec()).unwrap();
        let p = model.predict(&one).unwrap();
        for j in 0..2 {
            gap = gap.max((p.data()[j] - batched.data()[2 * i + j]).abs());
        }
    }
    let pass = identical && gap <= 1e-6;
    report(
        9,
        "determinism",
        pass,
        &format!("checkpoints identical {identical}, single vs batch gap {gap:.1e}"),
    );
    assert!(identical, "reruns produced different checkpoints");
    assert!(gap <= 1e-6, "single-frame predictions differ by {gap}");
}

#[test]
fn criterion_10_architecture_counts() {
    let _guard = serial();
    let mut rng = seeded_rng(1);
    let stage2 = ClassifierModel::new(ClassifierConfig::stage2(12), &mut rng);
    let baseline = ClassifierModel::new(ClassifierConfig::baseline(3), &mut rng);
    let channels = ChannelConfig::standard(&["II", "III", "aVF"]).unwrap();
    let imputer = ImputerModel::new(channels, ImputerConfig::default(), &mut rng);
    let (enc, dec) = imputer.gru_layer_counts();
    let counts = (stage2.conv_layer_count(), baseline.conv_layer_count(), enc, dec);
    let pass = counts == (7, 13, 5, 5);
    report(
        10,
        "architecture counts",
        pass,
        &format!("stage 2 convs {}, baseline convs {}, GRU layers {enc}+{dec}", counts.0, counts.1),
    );
    assert_eq!(counts, (7, 13, 5, 5));
}
