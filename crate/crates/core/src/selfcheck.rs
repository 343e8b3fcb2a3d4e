//! Built-in verification: finite-difference gradient checks over every graph primitive and
//! through a tiny separator under both training losses, plus PIT and metric oracles.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{grad_check, GradCheckOptions};
use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::exec::Exec;
use crate::losses::{next_permutation, pit, si_sdr_with, InfoNceConfig, Target};
use crate::metrics::sdr_with;
use crate::model::{init_params, BlockActivation, Components, Model, ModelConfig};
use crate::signal::synth_toy_record;
use crate::teacher::TeacherKind;
use crate::trainer::{group_loss, mock_utterance, separation_loss, LossConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
    pub max_grad_error: f64,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync>;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Scalar probe `Σ r⊙y + ½ Σ y²` with a fixed random `r`, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(shape, random(&mut rng, n));
    let lin = g.mul(y, r)?;
    let lin = g.sum(lin);
    let sq = g.mul(y, y)?;
    let sq = g.sum(sq);
    g.weighted_sum(&[(lin, 1.0), (sq, 0.5)])
}

fn store(specs: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in specs {
        let n = shape.iter().product();
        s.insert(*name, shape.clone(), random(&mut rng, n)).unwrap();
    }
    s
}

/// `(name, params, builder)` for every primitive.
pub fn primitive_cases() -> Vec<(&'static str, ParamStore<f64>, Builder)> {
    let mut cases: Vec<(&'static str, ParamStore<f64>, Builder)> = Vec::new();
    cases.push((
        "conv1d",
        store(
            &[("x", vec![3, 17]), ("w", vec![4, 3, 3]), ("b", vec![4])],
            1,
        ),
        Box::new(|g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.conv1d(x, w, 2, 2, 1)?;
            let y = g.add_bias(y, b)?;
            probe(g, y, 11)
        }),
    ));
    cases.push((
        "depthwise_conv1d",
        store(&[("x", vec![3, 12]), ("w", vec![3, 3])], 2),
        Box::new(|g, s| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
            let y = g.depthwise_conv1d(x, w, 2)?;
            probe(g, y, 12)
        }),
    ));
    cases.push((
        "conv_transpose1d",
        store(&[("x", vec![3, 6]), ("w", vec![3, 2, 5])], 3),
        Box::new(|g, s| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
            let y = g.conv_transpose1d(x, w, 3)?;
            probe(g, y, 13)
        }),
    ));
    cases.push((
        "relu/sigmoid",
        store(&[("x", vec![2, 9])], 4),
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let a = g.relu(x);
            let b = g.sigmoid(x);
            let y = g.add(a, b)?;
            probe(g, y, 14)
        }),
    ));
    cases.push((
        "prelu",
        store(&[("x", vec![3, 8]), ("a", vec![3])], 5),
        Box::new(|g, s| {
            let (x, a) = (g.param(s, "x")?, g.param(s, "a")?);
            let y = g.prelu(x, Some(a))?;
            probe(g, y, 15)
        }),
    ));
    cases.push((
        "global_layer_norm",
        store(
            &[("x", vec![3, 7]), ("gain", vec![3]), ("bias", vec![3])],
            6,
        ),
        Box::new(|g, s| {
            let (x, ga, b) = (g.param(s, "x")?, g.param(s, "gain")?, g.param(s, "bias")?);
            let y = g.global_layer_norm(x, ga, b)?;
            probe(g, y, 16)
        }),
    ));
    cases.push((
        "add/mul/scale/slice_rows/mean",
        store(&[("x", vec![4, 5]), ("y", vec![4, 5])], 7),
        Box::new(|g, s| {
            let (x, y) = (g.param(s, "x")?, g.param(s, "y")?);
            let p = g.mul(x, y)?;
            let q = g.add(p, x)?;
            let q = g.scale(q, 0.7);
            let top = g.slice_rows(q, 1, 2)?;
            let m = g.mean(top);
            let rest = probe(g, q, 17)?;
            g.weighted_sum(&[(m, 2.0), (rest, 1.0)])
        }),
    ));
    for zero_mean in [true, false] {
        cases.push((
            if zero_mean {
                "neg_si_sdr (zero-mean)"
            } else {
                "neg_si_sdr"
            },
            store(&[("est", vec![1, 24])], 8),
            Box::new(move |g, s| {
                let est = g.param(s, "est")?;
                let mut rng = ChaCha8Rng::seed_from_u64(18);
                let reference = random(&mut rng, 24);
                g.neg_si_sdr(est, &reference, zero_mean)
            }),
        ));
    }
    cases.push((
        "info_nce",
        store(&[("pred", vec![5, 4])], 9),
        Box::new(|g, s| {
            let pred = g.param(s, "pred")?;
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let cands: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|_| (0..6).map(|_| random(&mut rng, 5)).collect())
                .collect();
            g.info_nce(pred, &cands, 0.1)
        }),
    ));
    cases
}

/// Tiny configuration whose shapes keep finite differences cheap.
pub fn tiny_model(activation: BlockActivation) -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        embed_dim: 8,
        bottleneck_dim: 4,
        activation,
        predictor_out_dims: [(TeacherKind::Phoneme, 6), (TeacherKind::Word, 6)].into(),
        predictor_stride: [(TeacherKind::Phoneme, 4), (TeacherKind::Word, 8)].into(),
        ..ModelConfig::default()
    }
}

/// `(name, params, builder)` for the full tiny model under PIT SI-SDR and PIT InfoNCE.
pub fn model_cases() -> Result<Vec<(&'static str, ParamStore<f64>, Builder)>> {
    let record = synth_toy_record(0, 800, 77)?;
    let mut cases: Vec<(&'static str, ParamStore<f64>, Builder)> = Vec::new();

    let cfg = tiny_model(BlockActivation::Relu);
    let params = init_params(&cfg, &Components::separation(), 5)?.cast::<f64>();
    let utt = mock_utterance(0, record.clone(), &[], &cfg, &LossConfig::default(), 0)?;
    cases.push((
        "model + PIT SI-SDR",
        params,
        Box::new(move |g, s| {
            let m = Model::new(&cfg, s);
            Ok(separation_loss(g, &m, &utt)?.total)
        }),
    ));

    let cfg = tiny_model(BlockActivation::Prelu);
    let loss = LossConfig {
        targets: vec![Target::Phoneme, Target::Word],
        weights: BTreeMap::new(),
        infonce: InfoNceConfig {
            num_negatives: 7,
            ..InfoNceConfig::default()
        },
        center_teachers: true,
    };
    let kinds = [TeacherKind::Phoneme, TeacherKind::Word];
    let comps = Components {
        predictors: kinds.to_vec(),
        ..Components::default()
    };
    let params = init_params(&cfg, &comps, 6)?.cast::<f64>();
    let utt = mock_utterance(0, record, &kinds, &cfg, &loss, 3)?;
    cases.push((
        "model + PIT InfoNCE",
        params,
        Box::new(move |g, s| {
            let m = Model::new(&cfg, s);
            Ok(group_loss(g, &m, &utt, &loss, 9)?.total)
        }),
    ));
    Ok(cases)
}

fn brute_force(m: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = m.len();
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = (p.clone(), f64::INFINITY);
    loop {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
        if total < best.1 {
            best = (p.clone(), total);
        }
        if !next_permutation(&mut p) {
            return best;
        }
    }
}

/// Compares `pit` with an independent enumeration on seeded random matrices.
pub fn pit_oracle(sizes: &[usize], trials: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    let mut total = 0;
    for &n in sizes {
        for _ in 0..trials {
            let m: Vec<Vec<f64>> = (0..n).map(|_| random(&mut rng, n)).collect();
            let (p, t) = pit(&m)?;
            let (bp, bt) = brute_force(&m);
            total += 1;
            if p.0 == bp && t == bt {
                agree += 1;
            }
        }
    }
    Ok((agree, total))
}

/// Runs the whole suite. `fault` scales analytic parameter gradients (test hook).
pub fn run(fault: Option<f64>, exec: Exec) -> Result<SelfCheckReport> {
    let start = Instant::now();
    let mut report = SelfCheckReport::default();
    let opts = GradCheckOptions {
        coords_per_tensor: 20,
        exec,
        fault,
        ..GradCheckOptions::default()
    };
    let mut cases = primitive_cases();
    cases.extend(model_cases()?);
    for (name, params, f) in cases {
        let r = grad_check(f, &params, &opts)?;
        report.max_grad_error = report.max_grad_error.max(r.max_rel_err);
        let (worst, idx) = r.worst.clone().unwrap_or_default();
        report.checks.push(Check {
            name: format!("grad {name}"),
            passed: r.max_rel_err <= GRAD_TOLERANCE,
            detail: format!(
                "max rel err {:.2e} over {} coords (worst {worst}[{idx}])",
                r.max_rel_err, r.checked
            ),
        });
    }

    let (agree, total) = pit_oracle(&[2, 3, 4], 200, 42)?;
    report.checks.push(Check {
        name: "pit vs enumeration".into(),
        passed: agree == total,
        detail: format!("{agree}/{total} agree"),
    });

    let direct = 10.0 * ((1.0 + 1e-8) / (0.01 + 1e-8f64)).log10();
    let v = sdr_with(&[0.9, 0.0], &[1.0, 0.0])?;
    report.checks.push(Check {
        name: "sdr example".into(),
        passed: (v - direct).abs() < 1e-9,
        detail: format!("{v:.9} dB"),
    });
    let v = si_sdr_with(&[0.5, 0.5, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], false)?;
    report.checks.push(Check {
        name: "si_sdr example".into(),
        passed: v.abs() < 1e-6,
        detail: format!("{v:.3e} dB"),
    });
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
