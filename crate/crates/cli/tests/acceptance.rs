//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The MNIST criteria need the four IDX files under `data/mnist/` and take
//! roughly an hour of single-core CPU time in total.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ndarray::Array2;
use noisyfl::channel::{derive_rng, mix64, uniform01, StreamTag};
use noisyfl::codec::{range_of, QuantSpec};
use noisyfl::data::{synth_dataset, SynthSpec};
use noisyfl::nn::{backward, forward_loss, init_model, sgd_step, Activation, Batch, BatchSampler, MlpSpec, OptimState, ParamVector};
use noisyfl::sim::{FlConfig, Federation};
use noisyfl::theory::bias_montecarlo;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn noisyfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisyfl"))
        .args(args)
        .output()
        .expect("cannot launch the noisyfl binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn field(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .filter_map(|l| l.strip_prefix(&format!("{key} = ")))
        .find_map(|v| v.split_whitespace().next()?.parse().ok())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn criterion_1() -> Verdict {
    let (d, bits, ber, range) = (1024usize, 16u32, 1e-3, 2.0);
    let start = Instant::now();
    let out = noisyfl(&["verify-lemma3", "--d", "1024", "--bits", "16", "--ber", "1e-3", "--range", "2", "--trials", "500", "--seed", "1"]);
    let secs = start.elapsed().as_secs_f64();
    let text = stdout(&out);
    let (Some(mean), Some(reported_oracle)) = (field(&text, "mean_sq_err"), field(&text, "oracle")) else {
        return verdict(false, format!("could not parse verify-lemma3 output: {text}"));
    };
    // Independent oracle: a flip of bit k moves the code by 2^k steps.
    let step = range / (2f64.powi(bits as i32) - 1.0);
    let oracle: f64 = (0..bits).map(|k| d as f64 * ber * (step * 2f64.powi(k as i32)).powi(2)).sum();
    let bound = d as f64 * ber * range * range / 3.0;
    let dev = (mean - oracle).abs() / oracle;
    let oracle_gap = (oracle / bound - 1.0).abs();
    let agrees = (reported_oracle - oracle).abs() <= 1e-12 * oracle;
    verdict(
        dev <= 0.03 && oracle_gap <= 0.01 && agrees && secs < 10.0 && out.status.success(),
        format!(
            "mean {mean:.6} vs oracle {oracle:.6}: deviation {:.2}% (limit 3%); oracle/bound - 1 = {oracle_gap:.2e} (limit 1%); {secs:.1} s",
            100.0 * dev
        ),
    )
}

fn criterion_2() -> Verdict {
    let (v_min, v_max, ber, bits) = (-1.0f64, 1.0f64, 0.05, 16u8);
    let quant = QuantSpec::new(bits).unwrap();
    let start = Instant::now();
    let step = (v_max - v_min) / (2f64.powi(bits as i32) - 1.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, w) in [("v_min", v_min), ("midpoint", 0.0), ("v_max", v_max)] {
        let w_q = v_min + ((w - v_min) / step).round() * step;
        let model = w_q + ber * (v_max + v_min - 2.0 * w_q);
        let (mean, se) = bias_montecarlo(w, v_min, v_max, ber, quant, 100_000, 2).unwrap();
        let z = (mean - model) / se;
        pass &= z.abs() <= 4.0;
        if name == "midpoint" {
            let z0 = (mean - w) / se;
            pass &= z0.abs() <= 4.0;
            parts.push(format!("{name}: z {z:+.2}, bias z {z0:+.2}"));
        } else {
            parts.push(format!("{name}: z {z:+.2}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 10.0;
    verdict(pass, format!("{} (limit |z| <= 4); {secs:.1} s", parts.join(", ")))
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let spec = MlpSpec::new(vec![4, 3, 2], Activation::Relu).unwrap();
    let mut rng = derive_rng(3, 0, 0, StreamTag::Trial);
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    let mut attempts = 0u64;
    while batches < 5 {
        let params = init_model(&spec, mix64(attempts));
        attempts += 1;
        let x = Array2::from_shape_fn((8, 4), |_| uniform01(&mut rng));
        let y = (0..8).map(|_| (uniform01(&mut rng) * 2.0) as usize).collect();
        let batch = Batch::new(x, y).unwrap();
        if near_relu_kink(&params, &batch) {
            continue;
        }
        let (_, grad) = backward(&params, &spec, &batch).unwrap();
        for j in 0..params.len() {
            let h = 1e-5;
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (forward_loss(&plus, &spec, &batch).unwrap() - forward_loss(&minus, &spec, &batch).unwrap()) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        batches += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-5 && secs < 5.0, format!("max relative error {worst:.2e} over 5 batches (limit 1e-5); {secs:.2} s"))
}

/// True if a first-layer pre-activation is too close to zero for a central
/// difference to be a derivative.
fn near_relu_kink(params: &[f64], batch: &Batch) -> bool {
    batch.features().rows().into_iter().any(|row| {
        (0..3).any(|o| {
            let z: f64 = (0..4).map(|i| row[i] * params[i * 3 + o]).sum::<f64>() + params[12 + o];
            z.abs() < 1e-4
        })
    })
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let blobs = |seed| {
        synth_dataset(&SynthSpec {
            num_classes: 4,
            dim: 12,
            per_class: 100,
            separation: 5.0,
            seed,
        })
        .unwrap()
    };
    let spec = MlpSpec::new(vec![12, 32, 4], Activation::Relu).unwrap();
    let cfg = FlConfig {
        clients: 1,
        rounds: 10,
        local_steps: 5,
        batch_size: 32,
        learning_rate: 0.05,
        momentum: 0.0,
        master_seed: 11,
        ..FlConfig::default()
    };
    let fed = Federation::new(cfg.clone(), spec.clone(), &blobs(1)).unwrap();
    let out = fed.run(&blobs(2)).unwrap();

    let shard = &fed.shards()[0];
    let mut w: ParamVector = fed.initial_params();
    for m in 0..cfg.rounds {
        let mut optim = OptimState::new(cfg.learning_rate, cfg.momentum, w.len()).unwrap();
        let mut rng = derive_rng(cfg.master_seed, m as u64, 0, StreamTag::Sampling);
        let mut sampler = BatchSampler::new(shard.len(), cfg.batch_size).unwrap();
        for _ in 0..cfg.local_steps {
            let batch = shard.batch(sampler.next_indices(&mut rng));
            let (_, g) = backward(&w, &spec, &batch).unwrap();
            sgd_step(&mut w, &g, &mut optim).unwrap();
        }
    }
    let tol = (-20f64).exp2() * range_of(&w);
    let worst = out.final_params.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= tol && secs < 30.0,
        format!("max deviation {worst:.3e} vs limit {tol:.3e} after {} SGD steps; {secs:.1} s", cfg.rounds * cfg.local_steps),
    )
}

/// Final accuracy per seed, read from a run's metrics.csv.
struct RunResult {
    final_acc: BTreeMap<u64, f64>,
    rows: Vec<csv::StringRecord>,
    ok: bool,
    message: String,
}

impl RunResult {
    fn mean(&self) -> f64 {
        self.final_acc.values().sum::<f64>() / self.final_acc.len() as f64
    }

    fn column(&self, idx: usize, row: &csv::StringRecord) -> f64 {
        let _ = self;
        row[idx].parse().unwrap_or(f64::NAN)
    }
}

fn read_metrics(dir: &Path) -> RunResult {
    let path = dir.join("metrics.csv");
    let mut final_acc = BTreeMap::new();
    let mut rows = Vec::new();
    let Ok(mut reader) = csv::Reader::from_path(&path) else {
        return RunResult {
            final_acc,
            rows,
            ok: false,
            message: format!("missing {}", path.display()),
        };
    };
    for rec in reader.records().flatten() {
        let seed: u64 = rec[0].parse().unwrap();
        let acc: f64 = rec[3].parse().unwrap();
        final_acc.insert(seed, acc);
        rows.push(rec);
    }
    RunResult {
        final_acc,
        rows,
        ok: true,
        message: String::new(),
    }
}

fn train(config: &str, extra: &[&str]) -> RunResult {
    let name = format!("{}{}", config, extra.join("").replace('-', "_"));
    let out_dir = work_dir().join(name);
    let cfg = workspace_root().join("configs").join(format!("{config}.toml"));
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()];
    args.extend(extra);
    let start = Instant::now();
    let out = noisyfl(&args);
    eprintln!("  ran {config} {extra:?} in {:.0} s", start.elapsed().as_secs_f64());
    if !out.status.success() {
        return RunResult {
            final_acc: BTreeMap::new(),
            rows: Vec::new(),
            ok: false,
            message: format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()),
        };
    }
    read_metrics(&out_dir)
}

fn mnist_available() -> bool {
    let dir = workspace_root().join("data/mnist");
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| dir.join(f).is_file())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn criterion_5(base: &RunResult) -> Verdict {
    if !base.ok {
        return verdict(false, format!("baseline failed: {}", base.message));
    }
    let b = base.mean();
    let d4 = train("mnist-downlink-1e-4", &[]);
    let d3 = train("mnist-downlink-1e-3", &[]);
    let u1 = train("mnist-uplink-1e-1", &[]);
    let d3_diverged = !d3.ok || !d3.mean().is_finite();
    let checks = [
        b >= 0.93,
        d4.ok && (d4.mean() - b).abs() <= 0.02,
        d3_diverged || b - d3.mean() >= 0.05,
        u1.ok && (u1.mean() - b).abs() <= 0.02,
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "baseline {}% (>= 93: {}); down 1e-4 {}% (within 2: {}); down 1e-3 {}% (>= 5 below: {}); up 1e-1 {}% (within 2: {})",
            pct(b),
            checks[0],
            pct(d4.mean()),
            checks[1],
            if d3.ok { pct(d3.mean()) } else { "diverged".into() },
            checks[2],
            pct(u1.mean()),
            checks[3]
        ),
    )
}

fn criterion_6(base: &RunResult) -> Verdict {
    if !base.ok {
        return verdict(false, format!("baseline failed: {}", base.message));
    }
    let b = base.mean();
    let u3 = train("mnist-weights-uplink-1e-3", &[]);
    let u2 = train("mnist-weights-uplink-1e-2", &[]);
    let checks = [u3.ok && (u3.mean() - b).abs() <= 0.02, !u2.ok || b - u2.mean() >= 0.05];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "baseline {}%; weights up 1e-3 {}% (within 2: {}); weights up 1e-2 {}% (>= 5 below: {})",
            pct(b),
            pct(u3.mean()),
            checks[0],
            if u2.ok { pct(u2.mean()) } else { "diverged".into() },
            checks[1]
        ),
    )
}

/// Mean final accuracy per client count from a sweep's summary.csv.
fn sweep(link: &str) -> Result<BTreeMap<usize, f64>, String> {
    let out_dir = work_dir().join(format!("remark1-{link}"));
    let cfg = workspace_root().join("configs/mnist-baseline.toml");
    let start = Instant::now();
    let out = noisyfl(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--link", link, "--ber", "1e-1", "--clients", "1,2,4,8", "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    eprintln!("  ran {link} sweep in {:.0} s", start.elapsed().as_secs_f64());
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(out_dir.join("summary.csv")).map_err(|e| e.to_string())?;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let n: usize = rec[2].parse().unwrap();
        let acc: f64 = rec[4].parse().unwrap();
        let e = sums.entry(n).or_default();
        e.0 += acc;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect())
}

fn criterion_7() -> Verdict {
    let (down, up) = match (sweep("downlink"), sweep("uplink")) {
        (Ok(d), Ok(u)) => (d, u),
        (Err(e), _) | (_, Err(e)) => return verdict(false, format!("sweep failed: {e}")),
    };
    let fmt = |m: &BTreeMap<usize, f64>| m.iter().map(|(n, a)| format!("n={n}: {}", pct(*a))).collect::<Vec<_>>().join(", ");
    let spread = down.values().cloned().fold(f64::MIN, f64::max) - down.values().cloned().fold(f64::MAX, f64::min);
    let gain = up[&8] - up[&1];
    let checks = [spread <= 0.03, gain >= 0.10];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "downlink [{}] spread {} points (<= 3: {}); uplink [{}] n=8 minus n=1 {} points (>= 10: {})",
            fmt(&down),
            pct(spread),
            checks[0],
            fmt(&up),
            pct(gain),
            checks[1]
        ),
    )
}

/// Median over rounds >= 5 (all seeds pooled) of range_w / mean_range_dw.
fn median_ratio(run: &RunResult) -> f64 {
    median(
        run.rows
            .iter()
            .filter(|r| r[1].parse::<usize>().unwrap() >= 5)
            .map(|r| run.column(4, r) / run.column(5, r))
            .collect(),
    )
}

fn criterion_8(updates: &RunResult, weights: &RunResult) -> (Verdict, f64) {
    if !updates.ok || !weights.ok {
        return (verdict(false, format!("baseline runs failed: {} {}", updates.message, weights.message)), f64::NAN);
    }
    let ru = median_ratio(updates);
    let rw = median_ratio(weights);
    let checks = [ru >= 5.0, (0.8..=1.25).contains(&rw)];
    (
        verdict(
            checks.iter().all(|&c| c),
            format!("updates mode median range ratio {ru:.2} (>= 5: {}); weights mode {rw:.3} (in [0.8, 1.25]: {})", checks[0], checks[1]),
        ),
        ru,
    )
}

fn criterion_9(ratio: f64) -> Verdict {
    if !ratio.is_finite() {
        return verdict(false, "no measured range ratio");
    }
    let den = format!("{ratio}");
    let out = noisyfl(&["predict", "--ber-up", "1e-1", "--clients", "5", "--range-num", "1", "--range-den", &den, "--mode", "updates"]);
    let Some(pred) = field(&stdout(&out), "ber_down") else {
        return verdict(false, format!("could not parse predict output: {}", stdout(&out)));
    };
    let factor = (pred / 1e-4).max(1e-4 / pred);
    verdict(factor <= 3.0, format!("ratio {ratio:.2} gives downlink tolerance {pred:.3e}, a factor {factor:.1} from 1e-4 (limit 3)"))
}

fn criterion_10() -> Verdict {
    let root = workspace_root().join("configs");
    let hand = stdout(&noisyfl(&["bound", "--inputs", root.join("bound-example.toml").to_str().unwrap()]));
    let zero = stdout(&noisyfl(&["bound", "--inputs", root.join("bound-zero-ber.toml").to_str().unwrap()]));
    let line = |t: &str, k: &str| t.lines().find(|l| l.starts_with(k)).map(|l| l.split(" = ").nth(1).unwrap_or("").to_string());
    let (hd, hu) = (line(&hand, "downlink_bound"), line(&hand, "uplink_bound"));
    let (zd, zu) = (line(&zero, "downlink_bound"), line(&zero, "uplink_bound"));
    let pass = hd.as_deref() == Some("22.6667") && hu.as_deref() == Some("21.3333") && zd.is_some() && zd == zu;
    verdict(pass, format!("hand inputs print {hd:?} / {hu:?}; zero-BER inputs print {zd:?} / {zu:?}"))
}

fn criterion_11() -> Verdict {
    let dirs: Vec<PathBuf> = ["1", "8"]
        .iter()
        .map(|t| {
            let dir = work_dir().join(format!("determinism-threads{t}"));
            let cfg = workspace_root().join("configs/mnist-baseline.toml");
            let out = noisyfl(&["--threads", t, "train", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out-dir", dir.to_str().unwrap()]);
            if !out.status.success() {
                eprintln!("  threads {t}: {}", String::from_utf8_lossy(&out.stderr));
            }
            dir.join("metrics.csv")
        })
        .collect();
    match (std::fs::read(&dirs[0]), std::fs::read(&dirs[1])) {
        (Ok(a), Ok(b)) => verdict(a == b && !a.is_empty(), format!("metrics.csv with 1 and 8 threads: {} bytes, identical: {}", a.len(), a == b)),
        _ => verdict(false, "a determinism run produced no metrics"),
    }
}

fn report(id: u32, name: &str, v: &Verdict, failures: &mut u32) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    if !v.pass {
        *failures += 1;
    }
    println!("{tag} criterion {id:>2} {name}: {}", v.detail);
}

fn main() {
    std::fs::create_dir_all(work_dir()).unwrap();
    let mut failures = 0;
    report(1, "lemma3-montecarlo", &criterion_1(), &mut failures);
    report(2, "bias-model", &criterion_2(), &mut failures);
    report(3, "gradient-oracle", &criterion_3(), &mut failures);
    report(4, "centralized-equivalence", &criterion_4(), &mut failures);
    report(10, "theorem-arithmetic", &criterion_10(), &mut failures);

    if mnist_available() {
        let base = train("mnist-baseline", &[]);
        report(5, "remark2-updates", &criterion_5(&base), &mut failures);
        let weights_base = train("mnist-weights-baseline", &[]);
        report(6, "remark2-weights", &criterion_6(&base), &mut failures);
        let (v8, ratio) = criterion_8(&base, &weights_base);
        report(8, "range-ratio", &v8, &mut failures);
        report(9, "predictor-consistency", &criterion_9(ratio), &mut failures);
        report(11, "determinism", &criterion_11(), &mut failures);
        report(7, "remark1-client-count", &criterion_7(), &mut failures);
    } else {
        let missing = verdict(false, "MNIST IDX files not found under data/mnist");
        for (id, name) in [(5, "remark2-updates"), (6, "remark2-weights"), (7, "remark1-client-count"), (8, "range-ratio"), (9, "predictor-consistency"), (11, "determinism")] {
            report(id, name, &missing, &mut failures);
        }
    }

    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
