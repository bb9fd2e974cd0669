//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Criterion 6 trains two desk-scale models (about 8 minutes on one core with
//! optimizations); the rest finish in seconds.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{gauss, gaussian_instance, jacobi_eigenvalues, oracle_k, stream, two_pass_covariance, DeskRun};
use layerscope::arch::{generate_builtin, BuiltinOptions, LayerKind};
use layerscope::engine::{empirical_rf, Placement, ToySpec, TrainConfig};
use layerscope::probes::{train_probe, ProbeConfig, ProbeFeatures, ProbeMode};
use layerscope::report::{emit_report, load_report, rf_section, Anchor, CSV_FILE, REPORT_FILE};
use layerscope::rf::{border_layer, compute_rf, compute_rf_at};
use layerscope::saturation::saturation_of;
use layerscope::store::{read_dump, write_dump, TensorDump};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn last_conv_r(name: &str) -> usize {
    let g = generate_builtin(name, &BuiltinOptions::default()).unwrap();
    compute_rf(&g).unwrap().r(*g.conv_nodes().last().unwrap())
}

fn c1_rf_anchors() -> Outcome {
    let (vgg19, cifar, r34) = (last_conv_r("vgg19"), last_conv_r("resnet18_cifar"), last_conv_r("resnet34"));
    check(vgg19 == 252, format!("vgg19 r = {vgg19}"))?;
    check(cifar == 109, format!("resnet18_cifar r = {cifar}"))?;
    check(r34 > 800 && r34 == 899, format!("resnet34 r = {r34}"))?;
    Ok(format!("vgg19 {vgg19}, resnet18_cifar {cifar}, resnet34 {r34}"))
}

fn c2_border_anchor() -> Outcome {
    let g = generate_builtin("vgg16", &BuiltinOptions::default()).unwrap();
    let b = border_layer(&g, &compute_rf(&g).unwrap(), 32);
    check(b.border_node.as_deref() == Some("conv8"), format!("border {:?}", b.border_node))?;
    Ok("vgg16 @ 32px -> conv8".into())
}

fn c3_empirical_equivalence() -> Outcome {
    let mut graphs = common::sequential_builtins();
    graphs.extend((0..50).map(common::random_sequential_graph));
    let mut nodes = 0;
    for g in &graphs {
        let rf = compute_rf(g).unwrap();
        let last = *g.topo_order().iter().rev().find(|&&id| g.node(id).kind.is_spatial()).unwrap();
        let mut n = rf.r(last) + 4 * rf.jump(last) + 8;
        while compute_rf_at(g, n).is_err() {
            n += rf.jump(last);
        }
        let emp = empirical_rf(g, n).map_err(|e| format!("{}: {e}", g.name))?;
        for (id, e) in emp.nodes.iter().enumerate() {
            let Some(e) = e else { continue };
            if g.node(id).kind == LayerKind::Input {
                continue;
            }
            check(!e.clipped && e.width == rf.r(id), format!("{} {}: empirical {} vs analytic {}", g.name, e.name, e.width, rf.r(id)))?;
            nodes += 1;
        }
    }
    Ok(format!("{} graphs, {nodes} nodes equal", graphs.len()))
}

fn c4_saturation_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let (n, d, rows) = gaussian_instance(seed);
        let rows32: Vec<f32> = rows.iter().map(|&v| v as f32).collect();
        let exact: Vec<f64> = rows32.iter().map(|&v| v as f64).collect();
        let oracle = jacobi_eigenvalues(two_pass_covariance(&exact, n, d), d);
        let got = saturation_of(&stream(&rows32, n, d, seed), 0.99).map_err(|e| e.to_string())?;
        check(got.k == oracle_k(&oracle, 0.99), format!("seed {seed}: k {} vs oracle {}", got.k, oracle_k(&oracle, 0.99)))?;
        for (a, b) in got.eigvals.iter().zip(&oracle) {
            let rel = (a - b).abs() / b.abs().max(1e-6 * oracle[0]);
            worst = worst.max(rel);
            check(rel <= 1e-6, format!("seed {seed}: eigenvalue {a} vs {b}"))?;
        }
    }
    for seed in 0..50 {
        let (n, d, rows) = gaussian_instance(1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let rotated: Vec<f32> = rows
            .chunks(d)
            .flat_map(|r| q.iter().map(move |u| u.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() as f32))
            .collect();
        let plain: Vec<f32> = rows.iter().map(|&v| v as f32).collect();
        let k0 = saturation_of(&stream(&plain, n, d, seed), 0.99).unwrap().k;
        let k1 = saturation_of(&stream(&rotated, n, d, seed), 0.99).unwrap().k;
        check(k0 == k1, format!("rotation seed {seed}: k {k0} vs {k1}"))?;
    }
    Ok(format!("200 instances, worst eigenvalue rel err {worst:.1e}; 50 rotations"))
}

fn features(x: Vec<f32>, y: Vec<usize>, cols: usize) -> ProbeFeatures {
    ProbeFeatures {
        layer_name: "acceptance".into(),
        mode: ProbeMode::Vector,
        rows: y.len(),
        cols,
        x,
        y,
    }
}

fn c5_probe_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dim = 16;
    let mut dir: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v *= 5.0 / norm);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..2000 {
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        x.extend(dir.iter().map(|&d| (sign * d + gauss(&mut rng)) as f32));
        y.push(i % 2);
    }
    let blobs = features(x, y, dim);
    let cfg = ProbeConfig::default();
    let sep = train_probe(&blobs, &cfg).map_err(|e| e.to_string())?;
    check(sep.accuracy >= 0.99, format!("blobs accuracy {}", sep.accuracy))?;
    let again = train_probe(&blobs.clone(), &cfg).unwrap();
    check(again == sep, "rerun with the same seed differs")?;

    let x: Vec<f32> = (0..5000 * 20).map(|_| gauss(&mut rng) as f32).collect();
    let mut y: Vec<usize> = (0..5000).map(|i| i % 10).collect();
    y.shuffle(&mut rng);
    let chance = train_probe(&features(x, y, 20), &cfg).unwrap().accuracy;
    check((chance - 0.1).abs() <= 0.03, format!("permuted-label accuracy {chance}"))?;
    Ok(format!("blobs {:.4}, permuted {chance:.4}, reruns bit-identical", sep.accuracy))
}

struct DeskCase {
    run: DeskRun,
    border_index: usize,
}

fn desk_case(spec: ToySpec) -> DeskCase {
    let dir = tempfile::tempdir().unwrap();
    let run = common::desk_run(&spec, &TrainConfig::default(), dir.path());
    let border = run.report.rf.border_node.clone().expect("desk10 has a border at this size");
    let border_index = run.report.layers.iter().position(|l| l.name == border).unwrap();
    DeskCase { run, border_index }
}

fn c6_phenomenology(a: &DeskCase, b: &DeskCase) -> Outcome {
    let ra = &a.run.report;
    check(
        b.border_index > a.border_index,
        format!("border (b) {:?} not after (a) {:?}", b.run.report.rf.border_node, ra.rf.border_node),
    )?;
    let tail = ra.tail.as_ref().ok_or("no tail analysis")?;
    let range = tail.tail.clone().ok_or_else(|| {
        let sats: Vec<String> = ra.layers.iter().map(|l| format!("{:.3}", l.saturation.unwrap_or(f64::NAN))).collect();
        format!("no tail detected; saturations {}", sats.join(" "))
    })?;
    check(tail.anchor == Some(Anchor::Suffix), "tail is a prefix")?;
    check(range.start >= a.border_index, format!("tail starts at conv index {} before border {}", range.start, a.border_index))?;
    let gain = tail.mean_gain.unwrap_or(0.0);
    check(tail.confirmed == Some(true) && gain < 0.005, format!("tail not confirmed, mean gain {gain}"))?;
    let before = ra.stages.solving_mean_saturation.ok_or("no solving-stage saturation")?;
    let after = ra.stages.post_border_mean_saturation.ok_or("no post-border saturation")?;
    check(after < 0.5 * before, format!("after/before saturation {:.3}", after / before))?;
    Ok(format!(
        "border {} -> {}; tail {}..{} of {}, gain {gain:.4}; saturation after/before {:.3}",
        ra.rf.border_node.as_deref().unwrap_or("-"),
        b.run.report.rf.border_node.as_deref().unwrap_or("-"),
        ra.layers[range.start].name,
        ra.layers[range.end - 1].name,
        ra.layers.len(),
        after / before
    ))
}

fn c7_final_probe_parity(cases: &[&DeskCase]) -> Outcome {
    let mut seen = Vec::new();
    for c in cases {
        let r = &c.run.report;
        if r.model_accuracy < 0.9 {
            continue;
        }
        let last = r.layers.last().unwrap();
        let probe = last.probe_accuracy.ok_or("last conv has no probe")?;
        check(
            probe >= r.model_accuracy - 0.02,
            format!("{} @ {}px: probe {probe:.4} vs model {:.4}", last.name, r.input_size, r.model_accuracy),
        )?;
        seen.push(format!("{}px probe {probe:.4} / model {:.4}", r.input_size, r.model_accuracy));
    }
    check(!seen.is_empty(), "no converged run")?;
    Ok(seen.join("; "))
}

fn c8_round_trip(a: &DeskCase) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let rank = rng.gen_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=6)).collect();
        let len: usize = shape.iter().product();
        let data: Vec<f32> = (0..len)
            .map(|_| loop {
                let v = f32::from_bits(rng.gen());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = TensorDump::new(format!("t{i}"), shape, data).map_err(|e| e.to_string())?;
        let path = dir.path().join("t.actd");
        write_dump(&t, &path).map_err(|e| e.to_string())?;
        let back = read_dump(&path).map_err(|e| e.to_string())?;
        let bits = |d: &TensorDump| d.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        check(back.shape == t.shape && back.layer_name == t.layer_name && bits(&back) == bits(&t), format!("tensor {i} differs"))?;
    }
    let (first, second) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&a.run.report, first.path()).map_err(|e| e.to_string())?;
    let loaded = load_report(first.path()).map_err(|e| e.to_string())?;
    emit_report(&loaded, second.path()).map_err(|e| e.to_string())?;
    for f in [REPORT_FILE, CSV_FILE] {
        let same = std::fs::read(first.path().join(f)).unwrap() == std::fs::read(second.path().join(f)).unwrap();
        check(same, format!("{f} re-emission differs"))?;
    }
    Ok("1000 tensors bit-exact; report.json and report.csv re-emitted byte-identical".into())
}

fn c9_known_discrepancy() -> Outcome {
    let g = generate_builtin("resnet18", &BuiltinOptions::default()).unwrap();
    let section = rf_section(&g, Some(224)).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_string_pretty(&section).unwrap();
    text.push('\n');
    let golden = include_str!("golden/resnet18_rf.json");
    check(text == golden, "rf section differs from the golden file")?;
    let v: serde_json::Value = serde_json::from_str(golden).unwrap();
    check(v["published"]["computed_final_r"] == 435, "computed value missing")?;
    check(v["published"]["published_final_r"] == 413, "published value missing")?;
    check(v["recurrence_note"].as_str().is_some_and(|s| s.contains("k - 1")), "recurrence note missing")?;
    Ok("golden report carries 435, 413 and the recurrence note".into())
}

fn run(id: u32, what: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if took > budget => Err(format!("{detail}; took {took:.1?}, budget {budget:?}")),
        other => other,
    };
    match &outcome {
        Ok(detail) => println!("PASS  criterion {id}: {what} ({detail}) [{took:.1?}]"),
        Err(reason) => println!("FAIL  criterion {id}: {what}: {reason} [{took:.1?}]"),
    }
    outcome.is_ok()
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run(1, "receptive-field anchors", secs(1), c1_rf_anchors);
    ok &= run(2, "border anchor", secs(1), c2_border_anchor);
    ok &= run(3, "analytic vs gradient-support RF", secs(120), c3_empirical_equivalence);
    ok &= run(4, "saturation vs brute-force PCA", secs(60), c4_saturation_oracle);
    ok &= run(5, "probe sanity", secs(60), c5_probe_sanity);

    let start = Instant::now();
    let a = catch_unwind(|| desk_case(ToySpec::default()));
    let b = catch_unwind(|| {
        desk_case(ToySpec {
            canvas_size: 64,
            placement: Placement::Random,
            ..ToySpec::default()
        })
    });
    let desk_time = start.elapsed();
    match (&a, &b) {
        (Ok(a), Ok(b)) => {
            ok &= run(6, "desk-scale phenomenology", secs(20 * 60).saturating_sub(desk_time), || {
                c6_phenomenology(a, b).map(|d| format!("{d}; training and analysis {desk_time:.1?}"))
            });
            ok &= run(7, "final-layer probe parity", secs(60), || c7_final_probe_parity(&[a, b]));
            ok &= run(8, "format round-trip", secs(30), || c8_round_trip(a));
        }
        _ => {
            println!("FAIL  criterion 6: desk-scale phenomenology: training run panicked");
            println!("FAIL  criterion 7: final-layer probe parity: no desk-scale runs");
            println!("FAIL  criterion 8: format round-trip: no desk-scale report");
            ok = false;
        }
    }
    ok &= run(9, "known receptive-field discrepancy surfaced", secs(1), c9_known_discrepancy);
    if !ok {
        std::process::exit(1);
    }
}
