//! End-to-end acceptance checks. Each test prints one PASS/FAIL line straight
//! to stdout (bypassing capture), and the tests take a shared lock so the
//! timing-sensitive ones never overlap with anything else.

use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use groupclip_core::clip::{
    flat_two_phase, naive_oracle_grouped, per_layer_clipped_grads, ClipPolicy, NO_CLIP,
};
use groupclip_core::nn::{
    backward_per_layer, forward, loss, Activation, LossKind, MlpSpec, Model, Targets,
};
use groupclip_core::optim::{
    dp_step, BatchSpec, ClipBackend, Dataset, StepConfig, TrainState, UpdateRule,
};
use groupclip_core::pipeline::{
    balanced_partition, CostModel, Pipeline, PipelineConfig, Workaround,
};
use groupclip_core::privacy::{
    budget_fraction, calibrate_sigma, rdp_sgm, split_budget, NoiseStrategy,
};
use groupclip_core::quantile::{count_below, QuantileEstimator};
use groupclip_core::Tensor;
use groupclip_harness::bench::{bench, BenchConfig, BenchMode};
use groupclip_harness::compare::{compare, mean_accuracy, CompareRow};
use groupclip_harness::config::Mode;
use groupclip_harness::presets;
use groupclip_harness::run::{run, write_artifacts};
use groupclip_oracles::{central_difference, sampled_gaussian_rdp_quadrature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{LogNormal, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion(n: u32, name: &str, budget: Duration, body: impl FnOnce() -> Outcome) {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = start.elapsed();
    let outcome = outcome.and_then(|detail| {
        if took <= budget {
            Ok(detail)
        } else {
            Err(format!(
                "{detail}; took {took:.1?}, over the {budget:?} budget"
            ))
        }
    });
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!(
        "criterion {n:>2} {status}  {name}: {detail} [{:.1}s]\n",
        took.as_secs_f64()
    );
    // Written to the handle directly so it shows even when output is captured.
    let _ = std::io::stdout().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {n} ({name}) failed: {e}");
    }
}

// Random models and batches.

struct Instance {
    model: Model,
    x: Tensor,
    targets: Targets,
    kind: LossKind,
}

fn gaussian(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_instance(
    rng: &mut ChaCha20Rng,
    depth: usize,
    width: usize,
    batch: usize,
    seq: bool,
) -> Instance {
    let depth = rng.random_range(1..=depth);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=width)).collect();
    let act = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let mut spec = MlpSpec::new(widths.clone(), act);
    spec.init_gains = (0..depth).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut model = Model::mlp(&spec, rng).unwrap();
    // Off-zero biases keep ReLU inputs away from the kink.
    let mut p = model.flat_params();
    let noise = gaussian(rng, p.len(), 0.1);
    p.iter_mut().zip(noise).for_each(|(a, n)| *a += n);
    model.set_flat_params(&p).unwrap();

    let b = rng.random_range(1..=batch);
    let t = if seq { rng.random_range(1..=3) } else { 1 };
    let (d, out) = (widths[0], widths[depth]);
    let shape = |w: usize| if seq { vec![b, t, w] } else { vec![b, w] };
    let x = Tensor::new(shape(d), gaussian(rng, b * t * d, 1.0)).unwrap();
    let (kind, targets) = if rng.random_bool(0.5) {
        let labels = (0..b * t).map(|_| rng.random_range(0..out)).collect();
        (LossKind::CrossEntropy, Targets::Classes(labels))
    } else {
        let v = Tensor::new(shape(out), gaussian(rng, b * t * out, 1.0)).unwrap();
        (LossKind::Mse, Targets::Values(v))
    };
    Instance {
        model,
        x,
        targets,
        kind,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Unclipped per-example norms of every group.
fn group_norms(inst: &Instance) -> Vec<Vec<f64>> {
    let k = inst.model.num_groups();
    let singles: Vec<Vec<usize>> = (0..k).map(|g| vec![g]).collect();
    naive_oracle_grouped(
        &inst.model,
        &inst.x,
        &inst.targets,
        inst.kind,
        &singles,
        &vec![NO_CLIP; k],
    )
    .unwrap()
    .into_iter()
    .map(|s| s.norms)
    .collect()
}

fn joint_norms(norms: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    (0..norms[0].len())
        .map(|i| {
            members
                .iter()
                .map(|&g| norms[g][i].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// A threshold inside the spread of `norms`.
fn threshold_among(rng: &mut ChaCha20Rng, norms: &[f64]) -> f64 {
    let pick = norms[rng.random_range(0..norms.len())];
    (pick * rng.random_range(0.7..1.3)).max(1e-6)
}

fn flat_sums(states: &[groupclip_core::clip::GroupGradState]) -> Vec<f64> {
    states.iter().flat_map(|s| s.flat()).collect()
}

/// Groups hosted by each device of `partition`.
fn device_groups(model: &Model, partition: &[std::ops::Range<usize>]) -> Vec<Vec<usize>> {
    partition
        .iter()
        .map(|r| {
            (0..model.num_groups())
                .filter(|&k| r.contains(&model.group_layer(k)))
                .collect()
        })
        .collect()
}

#[test]
fn c01_clipping_paths_match_the_naive_oracle() {
    criterion(
        1,
        "fused, two-phase and pipeline clipping vs naive oracle",
        Duration::from_secs(120),
        || {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            let mut worst = [0.0f64; 3];
            let cases = 120;
            for case in 0..cases {
                let inst = random_instance(&mut rng, 4, 64, 32, case % 4 == 3);
                let k = inst.model.num_groups();
                let b = inst.x.batch();
                let norms = group_norms(&inst);
                let (logits, tape) = forward(&inst.model, &inst.x).unwrap();
                let (_, dl) = loss(&logits, &inst.targets, inst.kind).unwrap();
                let naive = |groups: &[Vec<usize>], c: &[f64]| {
                    naive_oracle_grouped(&inst.model, &inst.x, &inst.targets, inst.kind, groups, c)
                        .unwrap()
                };

                let per_layer: Vec<f64> =
                    norms.iter().map(|n| threshold_among(&mut rng, n)).collect();
                let fused = per_layer_clipped_grads(&inst.model, &tape, &dl, &per_layer).unwrap();
                let singles: Vec<Vec<usize>> = (0..k).map(|g| vec![g]).collect();
                worst[0] = worst[0].max(max_abs_diff(
                    &flat_sums(&fused),
                    &flat_sums(&naive(&singles, &per_layer)),
                ));

                let all: Vec<usize> = (0..k).collect();
                let c = threshold_among(&mut rng, &joint_norms(&norms, &all));
                let two = flat_two_phase(&inst.model, &tape, &dl, c).unwrap();
                worst[1] = worst[1].max(max_abs_diff(
                    &flat_sums(&two),
                    &flat_sums(&naive(&[all], &[c])),
                ));

                // Noiseless pipeline step at lr 1 moves the parameters by -sum / B.
                let devices = rng.random_range(1..=k);
                let partition = balanced_partition(&inst.model, devices).unwrap();
                let members = device_groups(&inst.model, &partition);
                let dev_c: Vec<f64> = members
                    .iter()
                    .map(|m| threshold_among(&mut rng, &joint_norms(&norms, m)))
                    .collect();
                let cfg = PipelineConfig {
                    partition,
                    microbatches: rng.random_range(1..=b.min(4)),
                    thresholds: dev_c.clone(),
                    sigma: 0.0,
                    lr: 1.0,
                    costs: CostModel::default(),
                };
                let before = inst.model.flat_params();
                let mut pipe = Pipeline::new(&inst.model, cfg).unwrap();
                pipe.step(&inst.x, &inst.targets, inst.kind, 0, 0).unwrap();
                let after = pipe.model().unwrap().flat_params();
                let recovered: Vec<f64> = before
                    .iter()
                    .zip(&after)
                    .map(|(p, q)| (p - q) * b as f64)
                    .collect();
                worst[2] = worst[2].max(max_abs_diff(
                    &recovered,
                    &flat_sums(&naive(&members, &dev_c)),
                ));
            }
            let detail = format!(
                "{cases} instances, max abs diff fused {:.1e}, two-phase {:.1e}, pipeline {:.1e}",
                worst[0], worst[1], worst[2]
            );
            ensure(worst.iter().all(|&w| w <= 1e-10), || detail.clone())?;
            Ok(detail)
        },
    );
}

/// Summed-loss gradient from the tape's per-layer `(a, e)` pairs.
fn tape_gradient(inst: &Instance) -> Vec<f64> {
    let model = &inst.model;
    let (logits, tape) = forward(model, &inst.x).unwrap();
    let (_, dl) = loss(&logits, &inst.targets, inst.kind).unwrap();
    let mut groups = vec![Vec::new(); model.num_groups()];
    backward_per_layer(model, &tape, &dl, |k, a, e| {
        let (inp, out) = (a.width(), e.width());
        let mut g = vec![0.0; out * inp + out];
        for r in 0..a.rows() {
            let ar = &a.data()[r * inp..(r + 1) * inp];
            let er = &e.data()[r * out..(r + 1) * out];
            for o in 0..out {
                for i in 0..inp {
                    g[o * inp + i] += er[o] * ar[i];
                }
                g[out * inp + o] += er[o];
            }
        }
        groups[k] = g;
        Ok(())
    })
    .unwrap();
    groups.concat()
}

#[test]
fn c02_gradients_match_finite_differences() {
    criterion(
        2,
        "backprop vs central finite differences",
        Duration::from_secs(60),
        || {
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            let mut worst = 0.0f64;
            let models = 24;
            for case in 0..models {
                let inst = random_instance(&mut rng, 4, 32, 16, case % 3 == 2);
                let analytic = tape_gradient(&inst);
                let summed = |p: &[f64]| {
                    let mut m = inst.model.clone();
                    m.set_flat_params(p).unwrap();
                    let (logits, _) = forward(&m, &inst.x).unwrap();
                    loss(&logits, &inst.targets, inst.kind).unwrap().0 * inst.x.batch() as f64
                };
                let fd = central_difference(summed, &inst.model.flat_params(), 1e-6);
                let diff = analytic
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                worst = worst.max(diff / scale);
            }
            let detail = format!("{models} models, max relative error {worst:.2e}");
            ensure(worst < 1e-5, || detail.clone())?;
            Ok(detail)
        },
    );
}

#[test]
fn c03_budget_split_identity() {
    criterion(3, "budget split identity", Duration::from_secs(10), || {
        let mut worst = 0.0f64;
        let mut points = 0;
        for i in 0..=45 {
            let sigma = 0.5 + 0.1 * i as f64;
            for k in 1..=64usize {
                let floor = sigma * (k as f64).sqrt() / 2.0;
                for mult in [1.001, 1.1, 2.0, 10.0, 1e3] {
                    let sigma_b = floor * mult;
                    let s_new = split_budget(sigma, sigma_b, k).map_err(|e| e.to_string())?;
                    let lhs = s_new.powi(-2) + k as f64 / (4.0 * sigma_b * sigma_b);
                    let rhs = sigma.powi(-2);
                    worst = worst.max(((lhs - rhs) / rhs).abs());
                    points += 1;
                }
            }
        }
        let r = budget_fraction(1.0, 10.0, 4);
        let detail = format!(
            "{points} grid points, max relative error {worst:.1e}; budget_fraction(1, 10, 4) = {r}"
        );
        ensure(worst <= 1e-12 && r == 0.01, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn c04_accountant() {
    criterion(4, "RDP accountant", Duration::from_secs(60), || {
        for alpha in 2..=64u32 {
            for sigma in [0.5, 0.8, 1.0, 2.0, 7.3] {
                let full = rdp_sgm(alpha, sigma, 1.0).map_err(|e| e.to_string())?;
                let want = alpha as f64 / (2.0 * sigma * sigma);
                ensure(full == want, || {
                    format!("rho = 1, alpha {alpha}, sigma {sigma}: {full} vs {want}")
                })?;
                let none = rdp_sgm(alpha, sigma, 0.0).map_err(|e| e.to_string())?;
                ensure(none == 0.0, || format!("rho = 0 gives {none}"))?;
            }
        }
        let mut worst = 0.0f64;
        for alpha in 2..=32u32 {
            for sigma in [0.8, 1.0, 2.0] {
                for rho in [0.001, 0.01, 0.1] {
                    let ours = rdp_sgm(alpha, sigma, rho).map_err(|e| e.to_string())?;
                    let quad = sampled_gaussian_rdp_quadrature(alpha as f64, sigma, rho);
                    worst = worst.max(((ours - quad) / quad).abs());
                }
            }
        }
        ensure(worst <= 1e-3, || {
            format!("quadrature disagreement {worst:.2e}")
        })?;
        let cal = |e: f64, t: u64| calibrate_sigma(e, 1e-5, 0.01, t).map_err(|e| e.to_string());
        let by_eps = [0.5, 1.0, 2.0, 4.0, 8.0].map(|e| cal(e, 1000));
        let by_eps: Vec<f64> = by_eps.into_iter().collect::<Result<_, _>>()?;
        let by_steps = [100u64, 1000, 10000].map(|t| cal(3.0, t));
        let by_steps: Vec<f64> = by_steps.into_iter().collect::<Result<_, _>>()?;
        ensure(by_eps.windows(2).all(|w| w[1] < w[0]), || {
            format!("sigma by epsilon {by_eps:?}")
        })?;
        ensure(by_steps.windows(2).all(|w| w[1] > w[0]), || {
            format!("sigma by steps {by_steps:?}")
        })?;
        Ok(format!(
            "limits exact; quadrature max relative error {worst:.1e}; sigma falls with epsilon {by_eps:.3?} and rises with T {by_steps:.3?}"
        ))
    });
}

/// Empirical CDF of a large reference sample.
struct Cdf(Vec<f64>);

impl Cdf {
    fn at(&self, x: f64) -> f64 {
        self.0.partition_point(|&v| v <= x) as f64 / self.0.len() as f64
    }
}

#[test]
fn c05_quantile_estimation() {
    criterion(
        5,
        "private quantile estimation",
        Duration::from_secs(60),
        || {
            let dist = LogNormal::new(0.0, 1.0).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let mut reference: Vec<f64> = (0..400_000).map(|_| rng.sample(dist)).collect();
            reference.sort_by(f64::total_cmp);
            let cdf = Cdf(reference);
            let batch = 256;
            let track = |q: f64, c0: f64, sigma_b: f64, steps: usize, seed: u64| -> Vec<f64> {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let mut est = QuantileEstimator::new(c0, q, 0.3, sigma_b, batch).unwrap();
                (0..steps)
                    .map(|_| {
                        let norms: Vec<f64> = (0..batch).map(|_| rng.sample(dist)).collect();
                        let z = sigma_b * rng.sample::<f64, _>(StandardNormal);
                        est.update(count_below(&norms, est.threshold()), z);
                        cdf.at(est.threshold())
                    })
                    .collect()
            };
            let mut worst_final = 0.0f64;
            for q in [0.3, 0.5, 0.85] {
                for c0 in [0.01, 1.0, 100.0] {
                    let path = track(q, c0, 0.0, 200, 50);
                    let dev = (path[199] - q).abs();
                    worst_final = worst_final.max(dev);
                    ensure(dev <= 0.05, || {
                        format!("noiseless q {q} from {c0}: CDF {:.3} after 200", path[199])
                    })?;
                }
            }
            let sigma_b = 0.02 * batch as f64;
            let mut worst_noisy = 0.0f64;
            for q in [0.3, 0.5, 0.85] {
                let devs: Vec<f64> = (0..5)
                    .map(|seed| {
                        let path = track(q, 1.0, sigma_b, 1000, 500 + seed);
                        path[200..].iter().map(|f| (f - q).abs()).sum::<f64>() / 800.0
                    })
                    .collect();
                let mean = devs.iter().sum::<f64>() / 5.0;
                worst_noisy = worst_noisy.max(mean);
                ensure(mean < 0.05, || {
                    format!("noisy q {q}: mean deviation {mean:.4}")
                })?;
            }
            Ok(format!(
            "noiseless |F(C_200) - q| <= {worst_final:.3}; noisy (sigma_b/B = 0.02) mean deviation <= {worst_noisy:.3}"
        ))
        },
    );
}

fn pipeline_cfg(
    model: &Model,
    thresholds: Vec<f64>,
    j: usize,
    sigma: f64,
    lr: f64,
) -> PipelineConfig {
    PipelineConfig {
        partition: balanced_partition(model, thresholds.len()).unwrap(),
        microbatches: j,
        thresholds,
        sigma,
        lr,
        costs: CostModel::default(),
    }
}

#[test]
fn c06_pipeline_simulator() {
    criterion(6, "pipeline simulator", Duration::from_secs(120), || {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        // (a) One device per layer against the single-device equal-budget step.
        let mut worst_a = 0.0f64;
        for case in 0..30 {
            let inst = random_instance(&mut rng, 4, 32, 24, case % 4 == 1);
            let b = inst.x.batch();
            let norms = group_norms(&inst);
            let c: Vec<f64> = norms.iter().map(|n| threshold_among(&mut rng, n)).collect();
            let sigma = rng.random_range(0.3..3.0);
            let lr = rng.random_range(0.05..1.0);
            let (seed, step) = (rng.random::<u64>(), rng.random_range(0..1000u64));

            let data = Dataset::new(inst.x.clone(), inst.targets.clone(), inst.kind).unwrap();
            let policy = ClipPolicy::FixedPerLayer(c.clone());
            let mut state =
                TrainState::new(inst.model.clone(), &policy, &UpdateRule::sgd(), b, seed).unwrap();
            state.step = step;
            let cfg = StepConfig {
                rule: UpdateRule::sgd(),
                lr,
                strategy: NoiseStrategy::EqualBudget,
                noise_multiplier: sigma,
                batch: BatchSpec::Fixed(b),
                backend: ClipBackend::Fused,
            };
            dp_step(&mut state, &data, &(0..b).collect::<Vec<_>>(), &cfg).unwrap();

            let j = rng.random_range(1..=b.min(6));
            let mut pipe =
                Pipeline::new(&inst.model, pipeline_cfg(&inst.model, c, j, sigma, lr)).unwrap();
            pipe.step(&inst.x, &inst.targets, inst.kind, seed, step)
                .unwrap();
            let d = max_abs_diff(
                &pipe.model().unwrap().flat_params(),
                &state.model.flat_params(),
            );
            worst_a = worst_a.max(d);
        }
        ensure(worst_a <= 1e-10, || {
            format!("(a) max abs diff {worst_a:.1e}")
        })?;

        // (b) Microbatch count does not change the update.
        let mut worst_b = 0.0f64;
        for _ in 0..10 {
            let inst = loop {
                let i = random_instance(&mut rng, 4, 32, 24, false);
                if i.x.batch() >= 8 {
                    break i;
                }
            };
            let c: Vec<f64> = group_norms(&inst)
                .iter()
                .map(|n| threshold_among(&mut rng, n))
                .collect();
            let results: Vec<Vec<f64>> = [1, 2, 4, 8]
                .iter()
                .map(|&j| {
                    let mut p = Pipeline::new(
                        &inst.model,
                        pipeline_cfg(&inst.model, c.clone(), j, 1.0, 0.5),
                    )
                    .unwrap();
                    p.step(&inst.x, &inst.targets, inst.kind, 9, 3).unwrap();
                    p.model().unwrap().flat_params()
                })
                .collect();
            for r in &results[1..] {
                worst_b = worst_b.max(max_abs_diff(r, &results[0]));
            }
        }
        ensure(worst_b <= 1e-10, || {
            format!("(b) max abs diff across J {worst_b:.1e}")
        })?;

        // (c) and (d) on a fixed model.
        let mut init = ChaCha20Rng::seed_from_u64(60);
        let model = Model::mlp(
            &MlpSpec::new(vec![6, 8, 8, 8, 3], Activation::Relu),
            &mut init,
        )
        .unwrap();
        let x = Tensor::new(vec![16, 6], gaussian(&mut init, 96, 1.0)).unwrap();
        let y = Targets::Classes((0..16).map(|i| i % 3).collect());
        let mut checked = 0;
        for devices in 2..=4usize {
            for j in [1usize, 2, 4, 8] {
                let cfg = pipeline_cfg(&model, vec![0.5; devices], j, 1.0, 0.1);
                let per = Pipeline::new(&model, cfg.clone())
                    .unwrap()
                    .step(&x, &y, LossKind::CrossEntropy, 1, 0)
                    .unwrap();
                ensure(per.comm.syncs == 1 && per.comm.norm_messages == 0, || {
                    format!("(c) per-device K={devices} J={j}: {:?}", per.comm)
                })?;
                for w in [
                    Workaround::Retain,
                    Workaround::Offload,
                    Workaround::Rematerialize,
                ] {
                    let flat = Pipeline::new(&model, cfg.clone())
                        .unwrap()
                        .flat_step(&x, &y, LossKind::CrossEntropy, 1, 0, w)
                        .unwrap();
                    ensure(
                        flat.comm.syncs == j as u64
                            && flat.comm.norm_messages == (j * devices) as u64,
                        || format!("(c) flat {w:?} K={devices} J={j}: {:?}", flat.comm),
                    )?;
                    if j >= 2 {
                        ensure(flat.comm.makespan > per.comm.makespan, || {
                            format!(
                                "(d) {w:?} K={devices} J={j}: flat {} vs per-device {}",
                                flat.comm.makespan, per.comm.makespan
                            )
                        })?;
                    }
                    checked += 1;
                }
            }
        }
        Ok(format!(
            "(a) 30 cases max diff {worst_a:.1e}; (b) J in 1,2,4,8 max diff {worst_b:.1e}; \
             (c)+(d) {checked} device/microbatch/workaround settings"
        ))
    });
}

#[test]
fn c07_fused_clipping_efficiency() {
    criterion(
        7,
        "clipping efficiency on 3x512 MLP, B=256",
        Duration::from_secs(300),
        || {
            let cfg = BenchConfig::default();
            let rows = bench(&cfg, &BenchMode::ALL).map_err(|e| e.to_string())?;
            let get = |m: BenchMode| rows.iter().find(|r| r.mode == m).unwrap();
            let plain = get(BenchMode::NonPrivate);
            let naive = get(BenchMode::NaiveFlat);
            let fused = get(BenchMode::FusedPerLayer);
            let two = get(BenchMode::TwoPhaseFlat);
            let overhead = fused.median_ms() / plain.median_ms();
            let naive_ratio = naive.median_ms() / fused.median_ms();
            let memory_ratio = naive.peak_grad_bytes as f64 / fused.peak_grad_bytes as f64;
            let detail = format!(
            "median ms: plain {:.2}, fused {:.2}, two-phase {:.2}, naive {:.1}; \
             fused/plain {overhead:.3} (within 15%: {}), naive/fused {naive_ratio:.1}, memory ratio {memory_ratio:.0}",
            plain.median_ms(),
            fused.median_ms(),
            two.median_ms(),
            naive.median_ms(),
            overhead <= 1.15
        );
            ensure(
                overhead <= 1.25 && naive_ratio >= 1.5 && memory_ratio >= cfg.batch_size as f64,
                || detail.clone(),
            )?;
            Ok(detail)
        },
    );
}

fn drift_rows() -> &'static (Vec<CompareRow>, Duration) {
    static ROWS: OnceLock<(Vec<CompareRow>, Duration)> = OnceLock::new();
    ROWS.get_or_init(|| {
        let cfg = presets::drift().unwrap();
        let start = Instant::now();
        let modes = [Mode::AdaptivePerlayer, Mode::FixedPerlayer, Mode::Flat];
        let rows = compare(&cfg, &modes, &[0, 1, 2], 1).unwrap();
        (rows, start.elapsed())
    })
}

#[test]
fn c08_adaptive_clipping_utility() {
    criterion(
        8,
        "utility ordering on the drift task",
        Duration::from_secs(900),
        || {
            let (rows, took) = drift_rows();
            ensure(*took < Duration::from_secs(900), || {
                format!("runs took {took:?}")
            })?;
            let acc = |m| 100.0 * mean_accuracy(rows, m).unwrap();
            let (a, f, fl) = (
                acc(Mode::AdaptivePerlayer),
                acc(Mode::FixedPerlayer),
                acc(Mode::Flat),
            );
            let detail = format!(
                "mean test accuracy over 3 seeds: adaptive {a:.2}, fixed {f:.2}, flat {fl:.2} \
             (adaptive - fixed {:+.2}, adaptive - flat {:+.2})",
                a - f,
                a - fl
            );
            ensure(a >= f + 1.0 && a >= fl - 1.0, || detail.clone())?;
            Ok(detail)
        },
    );
}

#[test]
fn c09_runs_are_byte_identical() {
    criterion(
        9,
        "byte-identical artifacts",
        Duration::from_secs(120),
        || {
            let mut drift = presets::drift().unwrap();
            drift.optimizer.epochs = 5;
            let mut configs = vec![presets::baseline().unwrap()];
            for mode in [
                Mode::AdaptivePerlayer,
                Mode::FixedPerlayer,
                Mode::Flat,
                Mode::Nonprivate,
            ] {
                let mut c = drift.clone();
                c.policy.mode = mode;
                c.seed = 11;
                configs.push(c);
            }
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            for (i, cfg) in configs.iter().enumerate() {
                let paths: Vec<_> = (0..2)
                    .map(|r| dir.path().join(format!("{i}-{r}")))
                    .collect();
                for p in &paths {
                    let out = run(cfg).map_err(|e| e.to_string())?;
                    write_artifacts(&out, cfg, p).map_err(|e| e.to_string())?;
                }
                for name in ["metrics.csv", "norms.csv", "checkpoint.bin", "config.toml"] {
                    let read = |p: &std::path::Path| std::fs::read(p.join(name)).unwrap();
                    ensure(read(&paths[0]) == read(&paths[1]), || {
                        format!(
                            "{name} differs for config {i} ({})",
                            cfg.policy.mode.as_str()
                        )
                    })?;
                }
            }
            Ok(format!(
                "{} configs run twice; metrics, norms, checkpoint and config identical",
                configs.len()
            ))
        },
    );
}

#[test]
fn c10_first_layer_norms_grow() {
    criterion(
        10,
        "group-1 median norm grows on the drift task",
        Duration::from_secs(900),
        || {
            let (rows, _) = drift_rows();
            let mut parts = Vec::new();
            for r in rows.iter().filter(|r| r.mode == Mode::AdaptivePerlayer) {
                let (first, last) = (r.first_epoch_medians[0], r.last_epoch_medians[0]);
                parts.push(format!("seed {}: {first:.4} -> {last:.4}", r.seed));
                ensure(last > first, || {
                    format!("seed {}: {first} -> {last}", r.seed)
                })?;
            }
            Ok(format!(
                "adaptive runs, epoch 1 -> final epoch: {}",
                parts.join(", ")
            ))
        },
    );
}
