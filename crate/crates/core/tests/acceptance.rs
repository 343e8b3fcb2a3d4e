//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout and the timed
//! experiments run one at a time.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ctxsep::diffcore::Graph;
use ctxsep::experiments::{
    run_overfit, run_two_stage, two_stage_config, OverfitOptions, TwoStageOptions,
};
use ctxsep::losses::{infonce, pit, si_sdr_with};
use ctxsep::metrics::{sdr_with, Aggregate};
use ctxsep::model::{decode_checkpoint, init_params, Components, Model, ModelConfig};
use ctxsep::selfcheck;
use ctxsep::signal::{load_wav, snr_db, synth_toy_corpus, Manifest};
use ctxsep::trainer::segregate_init;
use ctxsep::Exec;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion<'a> = (&'static str, &'a dyn Fn(&mut Gate));

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }).unwrap();
        out.flush().unwrap();
        if !ok {
            self.failures.push(name.to_string());
        }
    }
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

/// SI-SDR evaluated exactly in rational arithmetic up to the final logarithm.
fn si_sdr_exact(est: &[f64], reference: &[f64]) -> f64 {
    let n = BigRational::from_integer(BigInt::from(est.len()));
    let centre = |v: &[f64]| {
        let xs: Vec<BigRational> = v.iter().map(|&x| rat(x)).collect();
        let mean = xs.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
        xs.into_iter().map(|x| x - &mean).collect::<Vec<_>>()
    };
    let e = centre(est);
    let s = centre(reference);
    let eps = rat(1e-8);
    let dot = e
        .iter()
        .zip(&s)
        .fold(BigRational::zero(), |a, (x, y)| a + x * y);
    let energy = s.iter().fold(BigRational::zero(), |a, y| a + y * y);
    let alpha = dot / (&energy + &eps);
    let target = &alpha * &alpha * &energy;
    let noise = e.iter().zip(&s).fold(BigRational::zero(), |a, (x, y)| {
        let d = x - &alpha * y;
        a + &d * &d
    });
    let ratio = (target + &eps) / (noise + &eps);
    10.0 * ratio.to_f64().unwrap().log10()
}

fn metric_oracles(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut scale_ok = 0;
    let mut worst_low = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let len = rng.random_range(16..256);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: f64 = rng.random_range(0.0..1.0);
        let e: Vec<f64> = s
            .iter()
            .map(|&x| mix * x + (1.0 - mix) * rng.random_range(-1.0..1.0))
            .collect();
        let ours = si_sdr_with(&e, &s, true).unwrap();
        worst = worst.max((ours - si_sdr_exact(&e, &s)).abs());
        let c = rng.random_range(0.1..10.0);
        let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
        let dev = (si_sdr_with(&scaled, &s, true).unwrap() - ours).abs();
        worst_scale = worst_scale.max(dev);
        if dev < 1e-6 {
            scale_ok += 1;
        } else if dev > worst_low.0 {
            worst_low = (dev, ours);
        }
    }
    let sdr = sdr_with(&[0.9, 0.0], &[1.0, 0.0]).unwrap();
    let sdr_formula = 10.0 * ((1.0 + 1e-8) / (0.01 + 1e-8f64)).log10();
    let sdr_gap = (sdr - 20.0).abs();
    gate.line(
        "metric oracles",
        worst < 1e-6 && worst_scale < 1e-6 && sdr_gap < 1e-9,
        format!(
            "si_sdr vs exact rational max |err| {worst:.1e} dB; scale invariance max {worst_scale:.1e} dB, within 1e-6 on {scale_ok}/100 \
             (worst outlier at SI-SDR {:.1} dB, where eps is comparable to the projected energy); \
             sdr([0.9,0],[1,0]) = {sdr:.10} dB, matches its eps-regularised definition to {:.0e} \
             but sits {sdr_gap:.2e} dB from 20 (eps = 1e-8 in both energies)",
            worst_low.1,
            (sdr - sdr_formula).abs()
        ),
    );
}

fn enumerate(n: usize, prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == n {
        out.push(prefix.clone());
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            prefix.push(j);
            enumerate(n, prefix, used, out);
            prefix.pop();
            used[j] = false;
        }
    }
}

fn pit_oracle(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut total = 0;
    for n in [2, 3, 4] {
        let mut perms = Vec::new();
        enumerate(n, &mut Vec::new(), &mut vec![false; n], &mut perms);
        for _ in 0..1000 {
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            let mut best: Option<(Vec<usize>, f64)> = None;
            for p in &perms {
                let t: f64 = p.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
                if best.as_ref().is_none_or(|b| t < b.1) {
                    best = Some((p.clone(), t));
                }
            }
            let (bp, bt) = best.unwrap();
            let (p, t) = pit(&m).unwrap();
            total += 1;
            if p.0 != bp || t != bt {
                mismatches += 1;
            }
        }
    }
    gate.line(
        "PIT oracle",
        mismatches == 0,
        format!(
            "{}/{total} random matrices (S=2,3,4) match enumeration exactly",
            total - mismatches
        ),
    );
}

fn infonce_analytics(gate: &mut Gate) {
    let eval = |cands: Vec<Vec<f64>>, temp: f64| {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(vec![2, 1], vec![1.0, 0.0]);
        let l = infonce(&mut g, pred, &[cands], temp).unwrap();
        g.scalar(l)
    };
    let single = eval(vec![vec![0.3, 0.7]], 0.1);
    let pos = vec![1.0, 0.0];
    let neg = vec![0.0, 1.0];
    let w1 = eval(vec![pos.clone(), neg.clone()], 1.0);
    let w01 = eval(vec![pos, neg], 0.1);
    let e1 = (1.0 + (-1.0f64).exp()).ln();
    let e01 = (1.0 + (-10.0f64).exp()).ln();
    let ok = single == 0.0 && (w1 - e1).abs() < 1e-9 && (w01 - e01).abs() < 1e-9;
    gate.line(
        "InfoNCE analytics",
        ok,
        format!(
            "single {single:e}; omega=1 {w1:.12} vs {e1:.12}; omega=0.1 {w01:.6e} vs {e01:.6e}"
        ),
    );
}

/// Two-sided one-sample KS p-value against U(lo, hi) (asymptotic Kolmogorov distribution).
fn ks_uniform(values: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum::<f64>()
        .clamp(0.0, 1.0);
    (d, p)
}

fn mixing(gate: &mut Gate, dir: &Path) {
    let manifest = synth_toy_corpus(500, 0.25, 31, dir.join("mixing"), Exec::default()).unwrap();
    let m = Manifest::read(&manifest).unwrap();
    let mut worst = 0.0f64;
    let mut snrs = Vec::new();
    for e in &m.entries {
        let s1 = load_wav(m.resolve(&e.sources[0])).unwrap();
        let s2 = load_wav(m.resolve(&e.sources[1])).unwrap();
        worst = worst.max((snr_db(&s1, &s2) - e.snr_db).abs());
        snrs.push(e.snr_db);
    }
    let in_range = snrs.iter().all(|v| (-5.0..=5.0).contains(v));
    let (d, p) = ks_uniform(&snrs, -5.0, 5.0);
    gate.line(
        "mixing",
        worst <= 0.01 && in_range && p > 0.01,
        format!(
            "{} mixtures: max |measured - manifest| SNR {worst:.2e} dB; KS vs U[-5,5] D={d:.4} p={p:.3}",
            snrs.len()
        ),
    );
}

fn shapes(gate: &mut Gate) {
    let cfg = ModelConfig::small();
    let params = init_params(&cfg, &Components::separation(), 0).unwrap();
    let model = Model::new(&cfg, &params);
    let x: Vec<f32> = (0..16_000).map(|n| (n as f32 * 0.01).sin() * 0.5).collect();
    let mut g = Graph::<f32>::new();
    let e = model.encode(&mut g, &x).unwrap();
    let frames = g.shape(e)[1];
    let outs = model.forward_separation(&mut g, &x).unwrap();
    let lens: Vec<usize> = outs.iter().map(|&o| g.shape(o)[1]).collect();
    let expected = (frames - 1) * cfg.enc_stride + cfg.enc_kernel;
    let ok = frames == 999
        && lens.iter().all(|&l| l == expected)
        && expected == cfg.reconstruction_len(999)
        && expected <= 16_000;
    gate.line(
        "shape bookkeeping",
        ok,
        format!("tau=16000 -> T={frames} -> outputs {lens:?} = (T-1)*16+32 = {expected}"),
    );
}

fn gradients(gate: &mut Gate) {
    let r = selfcheck::run(None, Exec::default()).unwrap();
    let grads: Vec<_> = r
        .checks
        .iter()
        .filter(|c| c.name.starts_with("grad "))
        .collect();
    let ok = grads.iter().all(|c| c.passed) && r.max_grad_error <= 1e-4 && r.seconds < 60.0;
    let failing: Vec<&str> = grads
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    gate.line(
        "gradient suite",
        ok,
        format!(
            "{} cases (all primitives, model + PIT SI-SDR, model + PIT InfoNCE), max rel err {:.2e}, {:.1} s{}",
            grads.len(),
            r.max_grad_error,
            r.seconds,
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    );
}

fn overfit(gate: &mut Gate, dir: &Path) {
    let r = run_overfit(
        &dir.join("overfit"),
        &OverfitOptions::default(),
        Exec::default(),
    )
    .unwrap();
    gate.line(
        "overfit experiment",
        r.si_sdri >= 5.0 && r.seconds < 600.0,
        format!(
            "{} steps, loss {:.2} -> {:.2}, SI-SDRi {:.2} dB on the training mixture, {:.0} s",
            r.steps, r.initial_loss, r.final_loss, r.si_sdri, r.seconds
        ),
    );
}

fn two_stage(gate: &mut Gate, dir: &Path) {
    let opts = TwoStageOptions::default();
    let r = run_two_stage(&dir.join("pipeline"), &opts, Exec::default()).unwrap();
    let agg = r.dev_aggregate().cloned().unwrap();
    gate.line(
        "two-stage pipeline",
        r.contextual_reduction >= 0.30 && agg.si_sdri_mean >= 3.0 && r.seconds < 1800.0,
        format!(
            "{}/{} mixtures; contextual dev loss {:.3} -> {:.3} at best epoch {} ({:.1}% reduction; first step train loss {:.3}); \
             dev SI-SDRi {:.2} dB, SDRi {:.2} dB; {:.0} s",
            opts.num_train,
            opts.num_dev,
            r.group.initial_dev_contextual,
            r.group.best_dev_contextual,
            r.group.best_epoch,
            100.0 * r.contextual_reduction,
            r.group.first_step_loss,
            agg.si_sdri_mean,
            agg.sdri_mean,
            r.seconds
        ),
    );
}

fn small_pipeline(dir: &Path, exec: Exec) -> (Vec<u8>, Vec<u8>, Aggregate) {
    let opts = TwoStageOptions {
        num_train: 8,
        num_dev: 4,
        group_epochs: 2,
        segregate_epochs: 2,
        ..TwoStageOptions::default()
    };
    let r = run_two_stage(dir, &opts, exec).unwrap();
    (
        std::fs::read(&r.group.checkpoint).unwrap(),
        std::fs::read(&r.segregate.checkpoint).unwrap(),
        r.dev.aggregate.unwrap(),
    )
}

fn determinism(gate: &mut Gate, dir: &Path) {
    let a = small_pipeline(&dir.join("det_a"), Exec::Parallel);
    let b = small_pipeline(&dir.join("det_b"), Exec::Sequential);
    let ok = a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    gate.line(
        "determinism",
        ok,
        format!(
            "two seeded pipeline runs (parallel vs sequential): group ckpt equal {}, segregate ckpt equal {}, aggregates equal {} (si_sdri {:.6})",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            a.2.si_sdri_mean
        ),
    );
}

fn hand_off(gate: &mut Gate, dir: &Path) {
    let work = dir.join("det_a");
    if !work.join("run").join("segregate.caws").exists() {
        small_pipeline(&work, Exec::default());
    }
    let opts = TwoStageOptions::default();
    let mut run = two_stage_config(&work, &opts);
    let group_path = run.data.out_dir.join("group.caws");
    run.train.two_stage = true;
    run.train.group_ckpt = Some(group_path.clone());
    let group = decode_checkpoint(&std::fs::read(&group_path).unwrap()).unwrap();
    let init = segregate_init(&run).unwrap();
    let mut compared = 0;
    let mut equal = true;
    for (name, p) in init.iter() {
        if name.starts_with("encoder/") || name.starts_with("context/") {
            compared += 1;
            let src = &group.get(name).unwrap().value;
            equal &= p
                .value
                .iter()
                .zip(src)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let seg = decode_checkpoint(&std::fs::read(run.data.out_dir.join("segregate.caws")).unwrap())
        .unwrap();
    let leaked = init
        .names()
        .chain(seg.names())
        .any(|n| n.starts_with("predictor/") || n.starts_with("signal_head/"));
    let group_has_predictors = group.names().any(|n| n.starts_with("predictor/"));
    gate.line(
        "stage hand-off",
        equal && compared > 0 && !leaked && group_has_predictors,
        format!(
            "{compared} encoder/context tensors bit-equal to the group checkpoint: {equal}; \
             predictor/signal-head tensors in stage-2 params or checkpoint: {leaked}"
        ),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // libtest-style flags are ignored; any other argument filters criteria by name
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let wanted =
        |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let dir = tempfile::tempdir().unwrap();
    let mut gate = Gate {
        failures: Vec::new(),
    };
    let start = Instant::now();
    let d = dir.path();
    let criteria: [Criterion; 10] = [
        ("gradient", &gradients),
        ("metric", &metric_oracles),
        ("pit", &pit_oracle),
        ("infonce", &infonce_analytics),
        ("mixing", &|g| mixing(g, d)),
        ("shape", &shapes),
        ("overfit", &|g| overfit(g, d)),
        ("two_stage", &|g| two_stage(g, d)),
        ("determinism", &|g| determinism(g, d)),
        ("hand_off", &|g| hand_off(g, d)),
    ];
    let mut ran = 0;
    for (name, run) in criteria {
        if wanted(name) {
            run(&mut gate);
            ran += 1;
        }
    }
    println!(
        "acceptance: {}/{ran} criteria failed ({:.0} s)",
        gate.failures.len(),
        start.elapsed().as_secs_f64()
    );
    if std::env::var_os("CTXSEP_ACCEPT_STRICT").is_some() && !gate.failures.is_empty() {
        eprintln!("failed criteria: {:?}", gate.failures);
        std::process::exit(1);
    }
}
