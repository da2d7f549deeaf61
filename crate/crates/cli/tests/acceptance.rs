//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion with the
//! measured values. The process exits non-zero on a failure only when
//! `ACCEPTANCE_STRICT=1`, so that `cargo test` reports the full table either way.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tmc_core::autodiff::gradcheck::{max_relative_error, weighted_sum, GradCheck};
use tmc_core::autodiff::{Tape, Var};
use tmc_core::data::Dataset;
use tmc_core::gaussian::{
    enumerate_subsets, fuse, fuse_nodes, kl_node, mixture_kl_bound_node, poe_node, product_of_experts,
    DiagonalGaussian, FusionMode, GaussianNode, ViewSubset,
};
use tmc_core::losses::{bce_node, recon_node, tmc_loss, tmc_node, ContrastiveBatch, TmcConfig};
use tmc_core::model::{LayerSpec, ModelConfig, MultiViewVae};
use tmc_core::mvt1::{Payload, TensorFile};
use tmc_core::parallel::Execution;
use tmc_core::synth::{self, SynthConfig};
use tmc_core::train::{self, AblationResult, ProbeConfig, RunConfig};
use tmc_core::{Result, Tensor};
use tmc_dsp::filter::{design_cheby2, FilterKind, IirFilter};
use tmc_dsp::filterbank::{BANDS, CHANNELS, FEATURE_RATE, FILTER_ORDER, STOPBAND_DB};
use tmc_dsp::stft::{stft_log_magnitude, BINS, HOP, WINDOW};
use tmc_dsp::{eeg_filter_bank, EegRecording};

const POE_TOL: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const TMC_HAND_TOL: f64 = 1e-9;
const PROBE_MIN: f64 = 0.99;
const SIMILARITY_GAP: f64 = 0.10;
const P_MAX: f64 = 0.05;
const ACCURACY_SLACK: f64 = 0.01;
const TOP_CELL_SEEDS: usize = 3;
const CHANCE_BAND: (f64, f64) = (0.44, 0.56);
/// Equiripple stopbands touch the attenuation target exactly; evaluation may land ulps above it.
const ROUNDING_DB: f64 = 1e-9;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------------------
// 1. Product of experts against numerical integration

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * PI * var).ln())
}

/// Mean and variance of the normalised density product by composite Simpson integration.
fn integrated_product(experts: &[(f64, f64)]) -> (f64, f64) {
    let lo = experts.iter().map(|(m, v)| m - 12.0 * v.sqrt()).fold(f64::INFINITY, f64::min);
    let hi = experts.iter().map(|(m, v)| m + 12.0 * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let logs: Vec<f64> = (0..=n)
        .map(|i| experts.iter().map(|&(m, v)| log_normal_pdf(lo + i as f64 * h, m, v)).sum())
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let w = match i {
            0 => 1.0,
            _ if i == n => 1.0,
            _ if i % 2 == 1 => 4.0,
            _ => 2.0,
        };
        let x = lo + i as f64 * h;
        let p = w * (l - peak).exp();
        z += p;
        m1 += p * x;
        m2 += p * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

fn poe_oracle() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let experts: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-2.0f64..2.0).exp()))
            .collect();
        let gs = experts
            .iter()
            .map(|&(m, v)| DiagonalGaussian::from_variance(vec![m], &[v]))
            .collect::<Result<Vec<_>>>()?;
        // The fused posterior includes the N(0, 1) prior as one more expert.
        let p = product_of_experts(&gs, true)?;
        let mut with_prior = experts.clone();
        with_prior.push((0.0, 1.0));
        let (m, v) = integrated_product(&with_prior);
        worst = worst.max((p.mean()[0] - m).abs()).max((p.variance()[0] - v).abs());
    }
    let t = start.elapsed();
    verdict(
        worst <= POE_TOL && within(t, 10.0),
        format!("100 sets, max deviation {worst:.2e} (tol {POE_TOL:.0e}), {:.2}s (limit 10s)", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 2. MoPoE special cases

fn restricted(keep: impl Fn(ViewSubset) -> bool) -> Result<Vec<ViewSubset>> {
    Ok(enumerate_subsets(3, FusionMode::Mopoe)?.into_iter().filter(|&s| keep(s)).collect())
}

fn node_values(tape: &Tape, m: &tmc_core::gaussian::MixtureNode) -> Vec<(Vec<f64>, Vec<f64>)> {
    m.components
        .iter()
        .map(|c| (tape.value(c.mean).data().to_vec(), tape.value(c.log_variance).data().to_vec()))
        .collect()
}

fn bits(v: &[(Vec<f64>, Vec<f64>)]) -> Vec<u64> {
    v.iter().flat_map(|(a, b)| a.iter().chain(b).map(|x| x.to_bits())).collect()
}

fn special_cases() -> Result<Verdict> {
    let singletons = restricted(|s| s.len() == 1)?;
    let full = restricted(|s| s.len() == 3)?;
    let moe = enumerate_subsets(3, FusionMode::Moe)?;
    let poe = enumerate_subsets(3, FusionMode::Poe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..=6);
        let mut draw = |rows: usize| -> Result<(Tensor, Tensor)> {
            let m = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv = (0..rows * d).map(|_| rng.random_range(-4.0..4.0)).collect();
            Ok((Tensor::new(vec![rows, d], m)?, Tensor::new(vec![rows, d], lv)?))
        };
        let views = [draw(1)?, draw(1)?, draw(1)?];
        let posts = views
            .iter()
            .map(|(m, lv)| DiagonalGaussian::new(m.data().to_vec(), lv.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        if fuse(&posts, &singletons)? != fuse(&posts, &moe)? || fuse(&posts, &full)? != fuse(&posts, &poe)? {
            mismatches += 1;
        }
        if fuse(&posts, &full)?.components()[0] != product_of_experts(&posts, true)? {
            mismatches += 1;
        }

        // The same comparison on the differentiable path over a batch of rows.
        let batch = [draw(3)?, draw(3)?, draw(3)?];
        let mut tape = Tape::new();
        let nodes: Vec<GaussianNode> = batch
            .iter()
            .map(|(m, lv)| GaussianNode {
                mean: tape.constant(m.clone()),
                log_variance: tape.constant(lv.clone()),
            })
            .collect();
        let pairs = [(&singletons, &moe), (&full, &poe)];
        for (a, b) in pairs {
            let fa = fuse_nodes(&mut tape, &nodes, a)?;
            let fb = fuse_nodes(&mut tape, &nodes, b)?;
            if bits(&node_values(&tape, &fa)) != bits(&node_values(&tape, &fb)) {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("50 inputs, value and tape paths, {mismatches} bitwise mismatches"))
}

// ---------------------------------------------------------------------------
// 3. Gradients

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            // Keep kinked ops away from their kinks.
            if v.abs() < 0.05 {
                v + v.signum() * 0.05
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let m = || vec![vec![3, 4], vec![3, 4]];
    let gaussian = |v: &[Var]| GaussianNode {
        mean: v[0],
        log_variance: v[1],
    };
    vec![
        ("add", m(), Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_broadcast", vec![vec![1], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", m(), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", m(), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("neg", vec![vec![2, 5]], Box::new(|t, v| Ok(t.neg(v[0])))),
        ("scale", vec![vec![2, 5]], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("offset", vec![vec![2, 5]], Box::new(|t, v| t.offset(v[0], 0.3))),
        ("exp", vec![vec![2, 5]], Box::new(|t, v| Ok(t.exp(v[0])))),
        (
            "log",
            vec![vec![2, 5]],
            Box::new(|t, v| {
                let e = t.exp(v[0]);
                let p = t.offset(e, 0.5)?;
                t.log(p)
            }),
        ),
        ("relu", vec![vec![2, 5]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("sigmoid", vec![vec![2, 5]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("clamp", vec![vec![2, 5]], Box::new(|t, v| Ok(t.clamp(v[0], -0.6, 0.7)))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| t.sum(v[0], None))),
        ("sum_axis", vec![vec![3, 4]], Box::new(|t, v| t.sum(v[0], Some(0)))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| t.mean(v[0], None))),
        ("mean_axis", vec![vec![3, 4]], Box::new(|t, v| t.mean(v[0], Some(1)))),
        ("conv2d", vec![vec![2, 7, 6], vec![3, 2, 3, 3]], Box::new(|t, v| t.conv2d(v[0], v[1], 1))),
        ("conv2d_stride", vec![vec![2, 2, 7, 6], vec![3, 2, 3, 2]], Box::new(|t, v| t.conv2d(v[0], v[1], 2))),
        ("conv_transpose2d", vec![vec![3, 3, 3], vec![3, 2, 2, 2]], Box::new(|t, v| t.conv_transpose2d(v[0], v[1], 2))),
        (
            "conv_transpose2d_padded",
            vec![vec![3, 3, 3], vec![3, 2, 2, 2]],
            Box::new(|t, v| t.conv_transpose2d_padded(v[0], v[1], 2, (1, 1))),
        ),
        ("pick_rows", vec![vec![4, 3], vec![4, 3], vec![4, 3]], Box::new(|t, v| t.pick_rows(&[2, 0, 0, 1], v))),
        (
            "poe",
            vec![vec![2, 3]; 4],
            Box::new(move |t, v| {
                let experts = [gaussian(&v[..2]), gaussian(&v[2..])];
                Ok(poe_node(t, &experts, true)?.mean)
            }),
        ),
        (
            "poe_log_variance",
            vec![vec![2, 3]; 4],
            Box::new(move |t, v| {
                let experts = [gaussian(&v[..2]), gaussian(&v[2..])];
                Ok(poe_node(t, &experts, true)?.log_variance)
            }),
        ),
        ("kl", m(), Box::new(move |t, v| kl_node(t, gaussian(v)))),
        (
            "mixture_kl",
            vec![vec![2, 3]; 4],
            Box::new(move |t, v| {
                let nodes = [gaussian(&v[..2]), gaussian(&v[2..])];
                let m = fuse_nodes(t, &nodes, &enumerate_subsets(2, FusionMode::Mopoe)?)?;
                mixture_kl_bound_node(t, &m)
            }),
        ),
        ("tmc", vec![vec![4, 3], vec![4, 3]], Box::new(|t, v| tmc_node(t, v[0], v[1], TmcConfig::default()))),
        (
            "bce",
            vec![vec![4, 1]],
            Box::new(|t, v| {
                let p = t.sigmoid(v[0]);
                bce_node(t, p, &[1.0, 0.0, 0.0, 1.0])
            }),
        ),
        ("recon", m(), Box::new(|t, v| recon_node(t, v[0], v[1]))),
    ]
}

fn tiny_model(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        fusion,
        eeg_shape: vec![4],
        speech_shape: vec![5],
        eeg_encoder: vec![LayerSpec::Affine { out: 6 }, LayerSpec::Relu],
        speech_encoder: vec![LayerSpec::Affine { out: 6 }, LayerSpec::Relu],
        common_hidden: 5,
        classifier_hidden: vec![4, 3],
        tmc: true,
        ..ModelConfig::default()
    }
}

fn normal_batch(n: usize, dims: [usize; 3], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |d: usize| -> Result<Tensor> {
        Tensor::new(vec![n, d], (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect())
    };
    let (e, s1, s2) = (draw(dims[0])?, draw(dims[1])?, draw(dims[2])?);
    Dataset::new(e, s1, s2, Some((0..n).map(|i| (i % 2) as u8).collect()), (0..n as u64).collect())
}

/// Worst relative error of the total-loss gradient over every parameter entry.
fn end_to_end_error(fusion: FusionMode) -> Result<f64> {
    let data = normal_batch(4, [4, 5, 5], 3)?;
    let mut model = MultiViewVae::new(tiny_model(fusion), 5)?;
    let loss_at = |m: &MultiViewVae| -> Result<f64> {
        let pass = m.forward_train(&data, &mut ChaCha8Rng::seed_from_u64(11))?;
        pass.tape.value(pass.loss).item()
    };
    let pass = model.forward_train(&data, &mut ChaCha8Rng::seed_from_u64(11))?;
    let grads = pass.tape.backward(pass.loss)?;
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|&v| grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; pass.tape.value(v).numel()]))
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (p, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let orig = model.params()[p].value.data()[i];
            model.params_mut()[p].value.data_mut()[i] = orig + h;
            let up = loss_at(&model)?;
            model.params_mut()[p].value.data_mut()[i] = orig - h;
            let down = loss_at(&model)?;
            model.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - ai).abs() / numeric.abs().max(ai.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = op_cases();
    let (mut worst_op, mut worst_name) = (0.0f64, "");
    for (name, shapes, f) in &cases {
        let inputs = shapes.iter().map(|s| random(s, &mut rng)).collect::<Result<Vec<_>>>()?;
        let err = max_relative_error(&inputs, GradCheck::default(), |t, v| {
            let out = f(t, v)?;
            weighted_sum(t, out, 7)
        })?;
        if err > worst_op {
            worst_op = err;
            worst_name = name;
        }
    }
    let mut worst_e2e = 0.0f64;
    for fusion in FusionMode::ALL {
        worst_e2e = worst_e2e.max(end_to_end_error(fusion)?);
    }
    let t = start.elapsed();
    verdict(
        worst_op <= OP_TOL && worst_e2e <= END_TO_END_TOL && within(t, 120.0),
        format!(
            "{} ops worst {worst_op:.2e} ({worst_name}, tol {OP_TOL:.0e}); end-to-end worst {worst_e2e:.2e} over 3 fusions (tol {END_TO_END_TOL:.0e}); {:.1}s (limit 120s)",
            cases.len(),
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Contrastive hand case

fn tmc_hand_case() -> Result<Verdict> {
    let batch = ContrastiveBatch::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.5)?;
    let value = tmc_loss(&batch)?;
    let expected = 3f64.ln() - 2.0 / 3.0;
    let err = (value - expected).abs();
    verdict(err <= TMC_HAND_TOL, format!("loss {value:.12}, expected ln3 - 2/3 = {expected:.12}, |diff| {err:.1e}"))
}

// ---------------------------------------------------------------------------
// 5-7. Training-based criteria on the default synthetic data

fn desk_config() -> RunConfig {
    RunConfig {
        epochs: 30,
        model: ModelConfig {
            latent_dim: 32,
            ..ModelConfig::default()
        },
        seeds: SEEDS.to_vec(),
        ..RunConfig::default()
    }
}

fn task_probe() -> Result<Verdict> {
    let start = Instant::now();
    let config = desk_config();
    let data = train::prepare_data(&config, Execution::Parallel)?;
    let outcome = train::train(&config, &data.splits, Execution::Parallel, None)?;
    let d = train::diagnose(
        &outcome.model,
        &data.splits.train,
        &data.splits.test,
        Execution::Parallel,
        ProbeConfig::default(),
    )?;
    let t = start.elapsed();
    verdict(
        d.task_probe_accuracy >= PROBE_MIN && within(t, 600.0),
        format!(
            "probe on z_t {:.4} (min {PROBE_MIN}), model accuracy {:.4}, {:.0}s (limit 600s)",
            d.task_probe_accuracy,
            d.eval.accuracy,
            t.as_secs_f64()
        ),
    )
}

fn cell(result: &AblationResult, fusion: FusionMode, tmc: bool, f: fn(&train::AblationRun) -> f64) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| {
            result
                .runs
                .iter()
                .find(|r| r.seed == s && r.fusion == fusion && r.tmc == tmc)
                .map(f)
                .unwrap_or(f64::NAN)
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn similarity_gap(result: &AblationResult) -> Result<Verdict> {
    let with = cell(result, FusionMode::Mopoe, true, |r| r.similarity);
    let without = cell(result, FusionMode::Mopoe, false, |r| r.similarity);
    let gap = mean(&with) - mean(&without);
    let p = train::one_tailed_t_test(&with, &without)?;
    verdict(
        gap >= SIMILARITY_GAP && p < P_MAX,
        format!(
            "cosine(z_c, z_t) TMC {:.4} vs beta=0 {:.4}, gap {gap:+.4} (min {SIMILARITY_GAP}), p {p:.3} (max {P_MAX})",
            mean(&with),
            mean(&without)
        ),
    )
}

fn accuracy_ordering(result: &AblationResult) -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for fusion in FusionMode::ALL {
        let on = mean(&cell(result, fusion, true, |r| r.accuracy));
        let off = mean(&cell(result, fusion, false, |r| r.accuracy));
        ok &= on >= off - ACCURACY_SLACK;
        parts.push(format!("{fusion} {on:.4}/{off:.4}"));
    }
    let mut top = 0;
    for &s in &SEEDS {
        let runs: Vec<_> = result.runs.iter().filter(|r| r.seed == s).collect();
        let best = runs.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
        if runs.iter().any(|r| r.fusion == FusionMode::Mopoe && r.tmc && r.accuracy == best) {
            top += 1;
        }
    }
    ok &= top >= TOP_CELL_SEEDS;
    verdict(
        ok,
        format!(
            "accuracy +TMC/no-TMC {} (slack {ACCURACY_SLACK}); mopoe+tmc top in {top}/5 seeds (min {TOP_CELL_SEEDS})",
            parts.join(", ")
        ),
    )
}

fn ablation_grid() -> Result<(AblationResult, f64)> {
    let start = Instant::now();
    let config = desk_config();
    let data = train::prepare_data(&config, Execution::Parallel)?;
    let result = train::ablate(&config, &data, Execution::Parallel)?;
    Ok((result, start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 8. Untrained model

fn chance_level() -> Result<Verdict> {
    let generated = synth::generate(
        &SynthConfig {
            n_samples: 1200,
            seed: 8,
            ..SynthConfig::default()
        },
        Execution::Parallel,
    )?;
    let labels = generated.data.labels()?;
    let mut picked: Vec<usize> = Vec::with_capacity(600);
    for class in [0u8, 1] {
        picked.extend(labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).take(300));
    }
    picked.sort_unstable();
    let data = generated.data.select(&picked)?;
    let zeros = data.labels()?.iter().filter(|&&l| l == 0).count();
    let model = MultiViewVae::new(ModelConfig::default(), 0)?;
    let acc = train::evaluate(&model, &data, Execution::Parallel)?.accuracy;
    verdict(
        data.len() == 600 && zeros == 300 && (CHANCE_BAND.0..=CHANCE_BAND.1).contains(&acc),
        format!("{} windows ({zeros} label 0), accuracy {acc:.4} (band {CHANCE_BAND:?})", data.len()),
    )
}

// ---------------------------------------------------------------------------
// 9. DSP

fn bank() -> Result<Vec<IirFilter>> {
    BANDS
        .iter()
        .map(|&(lo, hi)| design_cheby2(FilterKind::Bandpass, FILTER_ORDER, &[lo, hi], STOPBAND_DB, 512.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| tmc_core::Error::Domain(e.to_string()))
}

fn dsp_suite() -> Result<Verdict> {
    let start = Instant::now();
    let dsp = |e: tmc_dsp::DspError| tmc_core::Error::Domain(e.to_string());
    let mut failures = Vec::new();

    let mut designs = bank()?;
    let lowpass = design_cheby2(FilterKind::Lowpass, 8, &[8000.0], 40.0, 44_100.0).map_err(dsp)?;
    designs.push(lowpass.clone());
    let max_radius = designs.iter().map(|f| f.max_pole_radius()).fold(0.0, f64::max);
    if max_radius >= 1.0 {
        failures.push(format!("pole radius {max_radius}"));
    }

    let alpha = design_cheby2(FilterKind::Bandpass, 8, &[8.0, 12.0], 40.0, 512.0).map_err(dsp)?;
    let points = [
        ("lowpass 12 kHz", lowpass.gain_db(12_000.0)),
        ("alpha 4 Hz", alpha.gain_db(4.0)),
        ("alpha 24 Hz", alpha.gain_db(24.0)),
    ];
    for (name, g) in points {
        if g > -40.0 + ROUNDING_DB {
            failures.push(format!("{name} {g:.1} dB"));
        }
    }
    let pass_gain = alpha.gain_db(10.0);
    if pass_gain < -6.0 {
        failures.push(format!("alpha 10 Hz {pass_gain:.2} dB"));
    }
    let worst_dc = designs[..5].iter().map(|f| f.gain_db(0.0)).fold(f64::NEG_INFINITY, f64::max);
    if worst_dc > -STOPBAND_DB + ROUNDING_DB {
        failures.push(format!("bandpass DC {worst_dc:.1} dB"));
    }

    let tone: Vec<f64> = (0..48_000).map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
    let s = stft_log_magnitude(&tone).map_err(dsp)?;
    let frames = s.shape()[1];
    if (WINDOW, HOP, BINS) != (512, 192, 257) || s.shape() != [257, (48_000 - 512) / 192 + 1] {
        failures.push(format!("stft shape {:?}", s.shape()));
    }
    let col: Vec<f64> = (0..BINS).map(|b| s.data()[b * frames + frames / 2]).collect();
    let peak = (0..BINS).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap_or(0);
    if peak != 32 {
        failures.push(format!("1 kHz peak at bin {peak}"));
    }

    // White noise through the filter bank: the delta band keeps its energy below 6 Hz.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 512 * 128;
    let noise: Vec<Vec<f64>> = (0..CHANNELS.len()).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rec = EegRecording::new(CHANNELS.iter().map(|c| c.to_string()).collect(), 512, noise).map_err(dsp)?;
    let features = eeg_filter_bank(&rec).map_err(dsp)?;
    let t = features.shape()[2];
    let delta = &features.data()[..t];
    let settled = &delta[FEATURE_RATE as usize * 8..];
    let mut buf: Vec<num_complex::Complex64> = settled.iter().map(|&v| v.into()).collect();
    rustfft::FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let (mut low, mut total) = (0.0, 0.0);
    for (k, c) in buf[..buf.len() / 2].iter().enumerate() {
        let f = k as f64 * FEATURE_RATE as f64 / buf.len() as f64;
        total += c.norm_sqr();
        if f < 6.0 {
            low += c.norm_sqr();
        }
    }
    let share = low / total;
    if share <= 0.9 || features.shape()[..2] != [5, 10] {
        failures.push(format!("delta energy below 6 Hz {share:.3}, shape {:?}", features.shape()));
    }

    let t = start.elapsed();
    if !within(t, 30.0) {
        failures.push(format!("runtime {:.1}s", t.as_secs_f64()));
    }
    let summary = format!(
        "max pole radius {max_radius:.4}; 12 kHz {:.1} dB, 4 Hz {:.1} dB, 24 Hz {:.1} dB, 10 Hz {pass_gain:.2} dB, DC <= {worst_dc:.12} dB; stft {:?} peak bin {peak}; delta share {share:.3}; {:.1}s (limit 30s)",
        points[0].1,
        points[1].1,
        points[2].1,
        s.shape(),
        t.as_secs_f64()
    );
    let pass = failures.is_empty();
    verdict(pass, if pass { summary } else { format!("{summary}; failed: {}", failures.join(", ")) })
}

// ---------------------------------------------------------------------------
// 10. Determinism and the file format

fn determinism() -> Result<Verdict> {
    let config = RunConfig {
        epochs: 3,
        batch_size: 64,
        data: train::DataConfig {
            synthetic: Some(SynthConfig {
                n_samples: 600,
                ..SynthConfig::default()
            }),
            ..Default::default()
        },
        model: ModelConfig {
            latent_dim: 16,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let mut csv = Vec::new();
    for exec in [Execution::Parallel, Execution::Sequential] {
        let dir = tempfile::tempdir().map_err(|e| tmc_core::Error::io(std::env::temp_dir(), e))?;
        let data = train::prepare_data(&config, exec)?;
        let outcome = train::train(&config, &data.splits, exec, None)?;
        train::write_outcome(dir.path(), &outcome)?;
        let path = dir.path().join("metrics.csv");
        csv.push(std::fs::read(&path).map_err(|e| tmc_core::Error::io(&path, e))?);
    }
    let csv_equal = csv[0] == csv[1];

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = 0;
    let mut total = 0;
    let special = [0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, f64::INFINITY, f64::NEG_INFINITY];
    let mut shapes: Vec<Vec<usize>> = vec![vec![], vec![0], vec![3, 0, 2], vec![7]];
    for _ in 0..40 {
        let rank = rng.random_range(1..=3);
        shapes.push((0..rank).map(|_| rng.random_range(1..5)).collect());
    }
    for shape in &shapes {
        let n: usize = shape.iter().product();
        let wide: Vec<f64> = (0..n)
            .map(|i| if i < special.len() && shape.len() == 1 { special[i] } else { f64::from_bits(rng.random::<u64>() >> 2) })
            .collect();
        let narrow: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() >> 2)).collect();
        for payload in [Payload::F64(wide), Payload::F32(narrow)] {
            let file = TensorFile::new(shape.clone(), payload)?;
            let bytes = file.encode();
            let back = TensorFile::decode(&bytes)?;
            let same = back.shape() == file.shape()
                && match (back.payload(), file.payload()) {
                    (Payload::F64(a), Payload::F64(b)) => a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())),
                    (Payload::F32(a), Payload::F32(b)) => a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())),
                    _ => false,
                }
                && back.encode() == bytes;
            exact += same as usize;
            total += 1;
        }
    }
    verdict(
        csv_equal && exact == total,
        format!(
            "metrics.csv identical across reruns: {csv_equal} ({} bytes); MVT1 bit-exact {exact}/{total} (rank 0, empty and f32/f64)",
            csv[0].len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, outcome: Result<Verdict>) -> bool {
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected = |id: usize| filter.as_deref().is_none_or(|f| f.split(',').any(|x| x == id.to_string()));
    let mut results = Vec::new();
    let mut run = |id: usize, name: &str, f: &dyn Fn() -> Result<Verdict>| {
        if selected(id) {
            results.push(report(id, name, f()));
        }
    };
    run(1, "product of experts vs numerical integration", &poe_oracle);
    run(2, "MoPoE special cases", &special_cases);
    run(3, "gradients vs finite differences", &gradients);
    run(4, "contrastive hand case", &tmc_hand_case);
    run(5, "task-related probe", &task_probe);
    if selected(6) || selected(7) {
        match ablation_grid() {
            Ok((grid, secs)) => {
                println!("           ablation grid: 6 cells x 5 seeds in {secs:.0}s");
                run(6, "similarity gain from TMC", &|| similarity_gap(&grid));
                run(7, "accuracy ordering across fusions", &|| accuracy_ordering(&grid));
            }
            Err(e) => {
                let failed = || Err(tmc_core::Error::Domain(format!("ablation grid: {e}")));
                run(6, "similarity gain from TMC", &failed);
                run(7, "accuracy ordering across fusions", &failed);
            }
        }
    }
    run(8, "untrained model at chance", &chance_level);
    run(9, "DSP suite", &dsp_suite);
    run(10, "determinism and MVT1 round-trips", &determinism);

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
