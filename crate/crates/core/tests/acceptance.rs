//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Built with `harness = false`.

use std::time::{Duration, Instant};

use offload_calib::calib::{
    fit_temperature, reliability_curve, scaled_softmax, softmax, SearchConfig,
};
use offload_calib::cascade::{
    calibrate_exits, decide_exit, run_cascade, CalibrationSet, ConfidenceRule, ExitDecision,
    ExitPolicy,
};
use offload_calib::cli::{cmd_gen, cmd_simulate, cmd_sweep};
use offload_calib::config::{fork_seed, ExperimentConfig, GenMode, GeneratorSpec, Scenario};
use offload_calib::latency::{batch_time, comm_delay, sample_latency, Aggregation, LatencyProfile};
use offload_calib::metrics::{evaluate, Batching, DeadlineSpec, EvalSettings, ExperimentReport};
use offload_calib::syngen::oracle::{brute_force_cascade, refined_grid_temperature};
use offload_calib::syngen::{
    demo_scenario, gen_cascade_trace, gen_oracle_trace, two_branch_scenario, OracleGenConfig,
};
use offload_calib::trace::{
    parse_trace, serialize_trace, split_dataset, DatasetSplit, LogitRecord, TraceDataset,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_logits(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-5.0..5.0)).collect()
}

fn c1_softmax() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let temps = [0.1, 0.5, 1.0, 2.0, 10.0];
    for n in 0..1000 {
        let k = rng.random_range(2..=20);
        let z = random_logits(&mut rng, k);
        let base = softmax(&z).unwrap();
        let one = scaled_softmax(&z, 1.0).unwrap();
        check(base == one, format!("vector {n}: T=1 differs from softmax"))?;
        let (class, _) = base.argmax();
        let mut prev = f64::INFINITY;
        for &t in &temps {
            let p = scaled_softmax(&z, t).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            check(
                (sum - 1.0).abs() <= 1e-9,
                format!("vector {n}, T={t}: sum {sum}"),
            )?;
            let (c, conf) = p.argmax();
            check(c == class, format!("vector {n}, T={t}: argmax moved"))?;
            check(
                conf < prev,
                format!("vector {n}, T={t}: max prob not decreasing"),
            )?;
            prev = conf;
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(1),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("1000 vectors in {elapsed:.2?}"))
}

fn c2_recovery() -> Outcome {
    let mut lines = Vec::new();
    for (i, &s) in [0.5, 1.0, 2.5, 5.0].iter().enumerate() {
        let start = Instant::now();
        let ds = gen_oracle_trace(&OracleGenConfig {
            num_classes: 10,
            num_samples: 20_000,
            alpha: 0.5,
            scale: s,
            seed: 100 + i as u64,
        })
        .unwrap();
        let logits = ds.exit_logits(1);
        let labels = ds.labels();
        let fit = fit_temperature(&logits, &labels, &SearchConfig::default()).unwrap();
        let oracle = refined_grid_temperature(&logits, &labels, 0.05, 20.0, 0.05, 1e-3).unwrap();
        let elapsed = start.elapsed();
        let t = fit.temperature;
        check(
            (t - s).abs() <= 0.05 * s,
            format!("s={s}: fitted T={t:.4} outside 5%"),
        )?;
        check(
            (t - oracle).abs() <= 5e-3,
            format!("s={s}: fit {t:.5} vs grid oracle {oracle:.5}"),
        )?;
        check(
            elapsed < Duration::from_secs(10),
            format!("s={s}: took {elapsed:?}"),
        )?;
        lines.push(format!("s={s}: T={t:.4} grid={oracle:.3} ({elapsed:.1?})"));
    }
    Ok(lines.join("; "))
}

// K=2 with a flat Dirichlet makes the top confidence uniform on [0.5, 1], so
// every occupied bin holds about 10,000 samples and binomial noise stays
// near 0.005. With K=10, alpha=0.5 the top bins hold a handful of samples.
fn c3_reliability() -> Outcome {
    let ds = gen_oracle_trace(&OracleGenConfig {
        num_classes: 2,
        num_samples: 50_000,
        alpha: 1.0,
        scale: 1.0,
        seed: 3,
    })
    .unwrap();
    let mut conf = Vec::with_capacity(ds.len());
    let mut correct = Vec::with_capacity(ds.len());
    for r in ds.records() {
        let (c, p) = softmax(r.exit_logits(1)).unwrap().argmax();
        conf.push(p);
        correct.push(c == r.label);
    }
    let curve = reliability_curve(&conf, &correct, 10).unwrap();
    let gap = curve.max_gap();
    check(gap <= 0.02, format!("max gap {gap:.4}"))?;
    Ok(format!("max gap {gap:.4} over {} bins", curve.bins.len()))
}

fn c4_fixture() -> Outcome {
    let search = SearchConfig::default();
    let z = vec![vec![2.0, 0.0]; 3];
    let fit = fit_temperature(&z, &[0, 0, 1], &search).unwrap();
    let expect = 2.0 / std::f64::consts::LN_2;
    check(
        (fit.temperature - expect).abs() <= 1e-3 && !fit.clamped,
        format!("T={} expected {expect}", fit.temperature),
    )?;
    let low = fit_temperature(&z, &[0, 0, 0], &search).unwrap();
    check(
        low.clamped && low.temperature == search.t_min,
        format!(
            "all-correct fixture gave T={} clamped={}",
            low.temperature, low.clamped
        ),
    )?;
    let high = fit_temperature(&z, &[1, 1, 1], &search).unwrap();
    check(
        high.clamped && high.temperature == search.t_max,
        format!(
            "all-wrong fixture gave T={} clamped={}",
            high.temperature, high.clamped
        ),
    )?;
    Ok(format!(
        "T={:.5}; clamps at {} and {}",
        fit.temperature, low.temperature, high.temperature
    ))
}

fn c5_cascade_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fully_on_device = 0;
    for n in 0..10_000u64 {
        let b = rng.random_range(1..=3);
        let k = rng.random_range(2..=10);
        let integer = rng.random_bool(0.2);
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        if integer {
                            f64::from(rng.random_range(-2i32..=2))
                        } else {
                            rng.random_range(-6.0..6.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let record = LogitRecord {
            sample_id: n,
            label: rng.random_range(0..k),
            logits,
        };
        let temps: Vec<f64> = (0..b)
            .map(|_| {
                if rng.random_bool(0.3) {
                    1.0
                } else {
                    rng.random_range(0.2..5.0)
                }
            })
            .collect();
        let rule = if rng.random_bool(0.5) {
            ConfidenceRule::MaxProbability
        } else {
            ConfidenceRule::Entropy
        };
        let d = rng.random_range(1..=b);
        let p_tar = rng.random_range(0.01..0.99);
        let policy = ExitPolicy::new(p_tar, temps, rule, d).unwrap();
        let got = decide_exit(&record, &policy).unwrap();
        let want = brute_force_cascade(&record, &policy);
        check(got == want, format!("record {n}: {got:?} != {want:?}"))?;
        if got.on_device {
            fully_on_device += 1;
        }
    }
    Ok(format!("10000 records agree ({fully_on_device} on device)"))
}

const SEED: u64 = 0;

struct Pipeline {
    split: DatasetSplit,
    temperatures: Vec<f64>,
}

fn pipeline(dataset: &TraceDataset) -> Pipeline {
    let split = split_dataset(dataset, 0.3, fork_seed(SEED, "split")).unwrap();
    let temperatures = calibrate_exits(
        &split.validation,
        &SearchConfig::default(),
        CalibrationSet::All,
    )
    .unwrap()
    .iter()
    .map(|r| r.temperature)
    .collect();
    Pipeline {
        split,
        temperatures,
    }
}

fn demo() -> Pipeline {
    pipeline(&gen_cascade_trace(&demo_scenario(fork_seed(SEED, "generate"))).unwrap())
}

fn report(
    p: &Pipeline,
    temps: &[f64],
    d: usize,
    p_tar: f64,
    profile: &LatencyProfile,
    t_tar: Option<f64>,
) -> ExperimentReport {
    let policy = ExitPolicy::new(p_tar, temps.to_vec(), ConfidenceRule::MaxProbability, d).unwrap();
    let decisions = run_cascade(&p.split.test, &policy).unwrap();
    evaluate(
        &decisions,
        p_tar,
        policy.is_calibrated(),
        profile,
        t_tar.map(|t| DeadlineSpec::new(t).unwrap()),
        EvalSettings {
            batching: Batching::new(512, false).unwrap(),
            aggregation: Aggregation::Mean,
        },
    )
    .unwrap()
}

fn conventional(p: &Pipeline) -> Vec<f64> {
    vec![1.0; p.temperatures.len()]
}

fn c6_device_probability(p: &Pipeline) -> Outcome {
    let profile = LatencyProfile::illustrative();
    check(
        p.temperatures[0] > 1.0,
        format!("fitted exit-1 T={}", p.temperatures[0]),
    )?;
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 / 21.0).collect();
    let (mut prev_conv, mut prev_cal) = (f64::INFINITY, f64::INFINITY);
    for &pt in &grid {
        let conv =
            report(p, &conventional(p), 1, pt, &profile, None).device_classification_probability;
        let cal =
            report(p, &p.temperatures, 1, pt, &profile, None).device_classification_probability;
        check(
            conv <= prev_conv,
            format!("conventional rises at p_tar={pt:.2}"),
        )?;
        check(
            cal <= prev_cal,
            format!("calibrated rises at p_tar={pt:.2}"),
        )?;
        check(
            cal <= conv,
            format!("p_tar={pt:.2}: calibrated {cal} > conventional {conv}"),
        )?;
        prev_conv = conv;
        prev_cal = cal;
    }
    Ok(format!(
        "T1={:.3}; 20 grid points ordered",
        p.temperatures[0]
    ))
}

fn c7_accuracy_outage(p: &Pipeline) -> Outcome {
    let profile = LatencyProfile::illustrative();
    let mut strictly_lower = 0;
    for i in 0..=15 {
        let pt = 0.75 + 0.01 * i as f64;
        let conv = report(p, &conventional(p), 1, pt, &profile, None);
        let cal = report(p, &p.temperatures, 1, pt, &profile, None);
        if let (Some(a), Some(b)) = (cal.device_accuracy, conv.device_accuracy) {
            check(a >= b, format!("p_tar={pt:.2}: device acc {a:.4} < {b:.4}"))?;
        }
        match (cal.outage_probability, conv.outage_probability) {
            (Some(a), Some(b)) => {
                check(a <= b, format!("p_tar={pt:.2}: outage {a} > {b}"))?;
                if a < b {
                    strictly_lower += 1;
                }
            }
            other => return Err(format!("p_tar={pt:.2}: outage undefined {other:?}")),
        }
    }
    check(
        strictly_lower >= 1,
        "calibrated outage never strictly lower",
    )?;
    Ok(format!(
        "strictly lower outage at {strictly_lower}/16 points"
    ))
}

fn c8_deadline(p: &Pipeline) -> Outcome {
    let profile = LatencyProfile::illustrative();
    let grid: Vec<f64> = (0..=50).map(|i| 0.005 + 0.001 * i as f64).collect();
    let miss = |temps: &[f64], t: f64| {
        report(p, temps, 1, 0.85, &profile, Some(t))
            .missed_deadline_probability
            .unwrap()
    };
    let conv: Vec<f64> = grid.iter().map(|&t| miss(&conventional(p), t)).collect();
    let cal: Vec<f64> = grid.iter().map(|&t| miss(&p.temperatures, t)).collect();
    for w in 1..grid.len() {
        check(
            conv[w] <= conv[w - 1],
            format!("conventional rises at t_tar={}", grid[w]),
        )?;
        check(
            cal[w] <= cal[w - 1],
            format!("calibrated rises at t_tar={}", grid[w]),
        )?;
    }
    let first = cal
        .iter()
        .position(|&m| m < 0.2)
        .ok_or("calibrated miss probability never drops below 0.2")?;
    for i in first..grid.len() {
        check(
            cal[i] <= conv[i],
            format!(
                "t_tar={}: calibrated {} > conventional {}",
                grid[i], cal[i], conv[i]
            ),
        )?;
    }
    Ok(format!(
        "calibrated < 0.2 from t_tar={:.3}; there {} vs conventional {}",
        grid[first], cal[first], conv[first]
    ))
}

fn c9_two_branch() -> Outcome {
    let two = gen_cascade_trace(&two_branch_scenario(fork_seed(SEED, "generate"))).unwrap();
    let one = two.select_exits(&[1, 3]).unwrap();
    let p2 = pipeline(&two);
    let p1 = pipeline(&one);
    let outage = |p: &Pipeline, temps: &[f64], d: usize, profile: LatencyProfile| {
        report(p, temps, d, 0.85, &profile, None)
            .outage_probability
            .ok_or_else(|| "outage undefined".to_string())
    };
    let conv2 = outage(
        &p2,
        &conventional(&p2),
        2,
        LatencyProfile::illustrative_two_branch(),
    )?;
    let conv1 = outage(&p1, &conventional(&p1), 1, LatencyProfile::illustrative())?;
    let cal2 = outage(
        &p2,
        &p2.temperatures,
        2,
        LatencyProfile::illustrative_two_branch(),
    )?;
    let cal1 = outage(&p1, &p1.temperatures, 1, LatencyProfile::illustrative())?;
    check(
        conv2 >= conv1,
        format!("conventional two-branch {conv2} < one-branch {conv1}"),
    )?;
    check(
        cal2 <= cal1 + 0.05,
        format!("calibrated two-branch {cal2} > one-branch {cal1} + 0.05"),
    )?;
    Ok(format!(
        "conventional {conv2} vs {conv1}; calibrated {cal2} vs {cal1}"
    ))
}

fn decision(exit: usize, d: usize) -> ExitDecision {
    ExitDecision {
        sample_id: 0,
        exit_index: exit,
        predicted_class: 0,
        label: 0,
        confidence: 0.5,
        on_device: exit <= d,
        correct: true,
    }
}

fn c10_latency() -> Outcome {
    let c = comm_delay(57_600, 18.8e6).unwrap();
    let expect = 0.024_510_638_297_872_34;
    check(
        ((c - expect) / expect).abs() <= 1e-12,
        format!("comm delay {c:e}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let d = rng.random_range(1..=3);
        let profile = LatencyProfile {
            device_segment_delays: (0..d).map(|_| rng.random_range(0.0..0.05)).collect(),
            partition_output_bytes: rng.random_range(1..1_000_000),
            uplink_rate_bps: rng.random_range(1e5..1e8),
            cloud_delay_s: rng.random_range(0.0..0.01),
            element_bytes: 4,
        };
        let exit = rng.random_range(1..=d + 1);
        let br = sample_latency(&decision(exit, d), &profile).unwrap();
        check(
            br.total_s.to_bits() == (br.device_s + br.comm_s + br.cloud_s).to_bits(),
            "breakdown not additive",
        )?;
        let mut device = 0.0;
        for s in &profile.device_segment_delays[..exit.min(d)] {
            device += s;
        }
        check(
            br.device_s == device,
            "device time is not the segment prefix sum",
        )?;
    }

    let batch: Vec<ExitDecision> = (0..100)
        .map(|i| decision(1 + usize::from(i % 3 == 0), 1))
        .collect();
    let mut prev = f64::INFINITY;
    for mbps in [1.0, 2.0, 5.0, 10.0, 18.8, 50.0, 100.0] {
        let profile = LatencyProfile {
            uplink_rate_bps: mbps * 1e6,
            ..LatencyProfile::illustrative()
        };
        let t = batch_time(&batch, &profile, Aggregation::Mean).unwrap();
        check(
            t < prev,
            format!("batch time not decreasing at {mbps} Mbps"),
        )?;
        prev = t;
    }
    Ok(format!("comm delay {c:.10} s"))
}

fn c11_determinism() -> Outcome {
    let mut checked = 0;
    for ds in [
        gen_oracle_trace(&OracleGenConfig {
            num_classes: 7,
            num_samples: 2000,
            alpha: 0.3,
            scale: 2.5,
            seed: 11,
        })
        .unwrap(),
        gen_cascade_trace(&two_branch_scenario(11)).unwrap(),
    ] {
        let bytes = serialize_trace(&ds);
        let back = parse_trace(bytes.as_slice()).map_err(|e| e.to_string())?;
        check(back == ds, "parse(serialize(trace)) differs")?;
        check(serialize_trace(&back) == bytes, "re-serialization differs")?;
        checked += ds.len();
    }

    let run = || -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = |name: &str| Some(dir.path().join(name));
        let mut cfg = ExperimentConfig {
            seed: Some(42),
            generator: Some(GeneratorSpec {
                mode: Some(GenMode::Cascade),
                scenario: Some(Scenario::Demo),
                n: Some(4000),
                ..GeneratorSpec::default()
            }),
            p_tar: Some(0.85),
            t_tar: Some(0.03),
            t_tar_grid: Some(vec![0.02, 0.03]),
            calibrate: Some(true),
            ..ExperimentConfig::default()
        };
        cfg.output.trace = path("trace.jsonl");
        cmd_gen(&cfg).map_err(|e| e.to_string())?;
        cfg.output.csv = path("simulate.csv");
        cfg.output.json = path("simulate.json");
        cmd_simulate(&cfg).map_err(|e| e.to_string())?;
        cfg.calibrate = None;
        cfg.output.csv = path("sweep.csv");
        cfg.output.json = path("sweep.json");
        cmd_sweep(&cfg).map_err(|e| e.to_string())?;
        [
            "trace.jsonl",
            "simulate.csv",
            "simulate.json",
            "sweep.csv",
            "sweep.json",
        ]
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).map_err(|e| e.to_string()))
        .collect()
    };
    let a = run()?;
    let b = run()?;
    check(a == b, "outputs differ between identical runs")?;
    Ok(format!(
        "{checked} records round-tripped; 5 output files byte-identical"
    ))
}

fn main() {
    let demo = demo();
    let criteria: Vec<Criterion> = vec![
        ("softmax and temperature", Box::new(c1_softmax)),
        ("temperature recovery", Box::new(c2_recovery)),
        ("reliability at s=1", Box::new(c3_reliability)),
        ("closed-form and clamp fixtures", Box::new(c4_fixture)),
        ("cascade oracle equivalence", Box::new(c5_cascade_oracle)),
        (
            "device probability vs p_tar",
            Box::new(|| c6_device_probability(&demo)),
        ),
        (
            "device accuracy and outage",
            Box::new(|| c7_accuracy_outage(&demo)),
        ),
        ("missed deadline vs t_tar", Box::new(|| c8_deadline(&demo))),
        ("two-branch outage", Box::new(c9_two_branch)),
        ("latency arithmetic", Box::new(c10_latency)),
        ("determinism and round-trip", Box::new(c11_determinism)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
