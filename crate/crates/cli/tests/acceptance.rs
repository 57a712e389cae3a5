//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge_core::analysis::estimate_memory;
use segforge_core::attrs;
use segforge_core::bench::{energy_wh, parse_report_csv};
use segforge_core::executor::{
    eval_node, execute, execute_planned, execute_single, plan_memory, verify_plan, ConvKernel,
};
use segforge_core::graph::{Graph, OpKind, TensorSpec};
use segforge_core::metrics::{category_iou, class_iou, cross_entropy_loss, softmax_probs, ConfusionMatrix, IouTable, LabelSchema};
use segforge_core::modelfile::{save, to_bytes};
use segforge_core::optimizer::{dequantize_weights, quantize_weights, run_pass, PipelineConfig};
use segforge_core::synth::{random_graph, random_input, random_tensor};
use segforge_core::tensor::Tensor;
use segforge_core::zoo::{build_encoder, build_fcn, FcnVariant, InitSpec};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

// ---------------------------------------------------------------------------
// 1. Encoder memory at 256×512.

/// Layer name, printed activation (h, w, c), printed parameter formula
/// (k, cin, cout) with cin taken from the previous row's activation channels.
const ENCODER_ROWS: [(&str, [usize; 3], Option<(usize, usize, usize)>); 21] = [
    ("conv1_1", [256, 512, 64], Some((3, 3, 64))),
    ("conv1_2", [256, 512, 64], Some((3, 64, 64))),
    ("pool1", [128, 256, 64], None),
    ("conv2_1", [128, 256, 128], Some((3, 64, 128))),
    ("conv2_2", [128, 256, 128], Some((3, 128, 128))),
    ("pool2", [64, 128, 128], None),
    ("conv3_1", [64, 128, 256], Some((3, 128, 256))),
    ("conv3_2", [64, 128, 256], Some((3, 256, 256))),
    ("conv3_3", [64, 128, 256], Some((3, 256, 256))),
    ("pool3", [32, 64, 256], None),
    ("conv4_1", [32, 64, 512], Some((3, 256, 512))),
    ("conv4_2", [32, 64, 512], Some((3, 512, 512))),
    ("conv4_3", [32, 64, 512], Some((3, 512, 512))),
    ("pool4", [16, 32, 512], None),
    ("conv5_1", [16, 32, 512], Some((3, 512, 512))),
    ("conv5_2", [16, 32, 512], Some((3, 512, 512))),
    ("conv5_3", [16, 32, 512], Some((3, 512, 512))),
    ("pool5", [8, 16, 512], None),
    ("conv6", [8, 16, 4096], Some((1, 512, 4096))),
    ("conv7", [8, 16, 4096], Some((1, 4096, 4096))),
    ("conv1by1", [8, 16, 35], Some((1, 4096, 35))),
];

fn encoder_memory() -> Check {
    let g = build_encoder(256, 512, 35, InitSpec::zeros()).map_err(|e| e.to_string())?;
    let r = estimate_memory(&g, &TensorSpec::f32(vec![256, 512, 3]), 1).map_err(|e| e.to_string())?;
    ensure(r.rows.len() == ENCODER_ROWS.len(), || format!("{} rows, expected {}", r.rows.len(), ENCODER_ROWS.len()))?;
    for (name, act, formula) in ENCODER_ROWS {
        let row = r.row(name).ok_or_else(|| format!("no row {name}"))?;
        ensure(row.shape == act, || format!("{name}: activation {:?}, expected {act:?}", row.shape))?;
        let params = formula.map_or(0, |(k, cin, cout)| (k * k * cin + 1) * cout);
        ensure(row.params == params, || format!("{name}: {} params, expected {params}", row.params))?;
    }
    let (act, par) = (r.act_mib(), r.param_mib());
    ensure(within(act, 154.0, 0.02), || format!("activations {act:.2} MiB"))?;
    ensure(within(par, 128.0, 0.02), || format!("parameters {par:.2} MiB"))?;
    Ok(format!("activations {act:.2} MiB, parameters {par:.2} MiB, 21 rows exact"))
}

// ---------------------------------------------------------------------------
// 2. Serialized model sizes.

fn model_sizes() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let init = InitSpec::normal(0.0, 0.01, 0);
    let fcn8 = build_fcn(FcnVariant::Fcn8s, 256, 512, 35, init).map_err(|e| e.to_string())?;
    let float_bytes = save(&fcn8, dir.path().join("fcn8s.sgm")).map_err(|e| e.to_string())?;
    let (q, _) = quantize_weights(&fcn8).map_err(|e| e.to_string())?;
    drop(fcn8);
    let quant_bytes = save(&q, dir.path().join("fcn8s_q.sgm")).map_err(|e| e.to_string())?;
    drop(q);
    let fcn32 = build_fcn(FcnVariant::Fcn32s, 256, 512, 35, init).map_err(|e| e.to_string())?;
    let fcn32_bytes = save(&fcn32, dir.path().join("fcn32s.sgm")).map_err(|e| e.to_string())?;
    for (p, n) in [("fcn8s.sgm", float_bytes), ("fcn8s_q.sgm", quant_bytes), ("fcn32s.sgm", fcn32_bytes)] {
        let on_disk = std::fs::metadata(dir.path().join(p)).map_err(|e| e.to_string())?.len() as usize;
        ensure(on_disk == n, || format!("{p}: reported {n} bytes, file has {on_disk}"))?;
    }
    let (f, qm, t) = (float_bytes as f64 / 1e6, quant_bytes as f64 / 1e6, fcn32_bytes as f64 / 1e6);
    let ratio = qm / f;
    ensure(within(f, 153.7, 0.02), || format!("float FCN-8s {f:.3} MB"))?;
    ensure(within(qm, 38.5, 0.02), || format!("quantized FCN-8s {qm:.3} MB"))?;
    ensure((0.248..=0.26).contains(&ratio), || format!("ratio {ratio:.4}"))?;
    ensure(fcn32_bytes < float_bytes, || format!("FCN-32s {t:.3} MB not below FCN-8s {f:.3} MB"))?;
    Ok(format!("FCN-8s {f:.3} MB -> {qm:.3} MB (ratio {ratio:.4}), FCN-32s {t:.3} MB"))
}

// ---------------------------------------------------------------------------
// 3. Energy per test set.

fn energy() -> Check {
    let cases = [(34.0, 22.65, 0.326), (460.0, 4.16, 0.810), (9.0, 35.27, 0.134)];
    let mut got = Vec::new();
    for (ms, w, want) in cases {
        let e = energy_wh(1525, ms, w);
        ensure((e - want).abs() <= 1e-3, || format!("{ms} ms at {w} W: {e:.4} Wh, expected {want}"))?;
        got.push(format!("{e:.4}"));
    }
    Ok(format!("{} Wh", got.join(", ")))
}

// ---------------------------------------------------------------------------
// 4. Optimizer pass soundness.

const STRUCTURAL: [&str; 7] = [
    "add_default_attributes",
    "strip_unused_nodes",
    "remove_identity_nodes",
    "merge_duplicate_nodes",
    "fuse_resize_and_conv",
    "fuse_conv_bias_relu",
    "sort_by_execution_order",
];
const FOLDS: [&str; 2] = ["fold_constants", "fold_batch_norms"];

/// Largest |logit| change from quantizing FCN-8s weights, measured at 2.35e-4
/// for seeded N(0, 0.01) weights at 64×128 and pinned with headroom.
const QUANT_DRIFT_BOUND: f32 = 5e-4;

fn check_passes(g: &Graph, x: &Tensor, label: &str) -> Result<(), String> {
    let run = |g: &Graph| execute_single(g, x, None).map_err(|e| format!("{label}: {e}"));
    let apply = |g: &Graph, pass: &str| {
        run_pass(g, pass, &PipelineConfig::default()).map(|r| r.0).map_err(|e| format!("{label}: {pass}: {e}"))
    };
    let reference = run(g)?;
    for pass in STRUCTURAL.iter().chain(FOLDS.iter()).chain(["quantize_weights"].iter()) {
        let once = apply(g, pass)?;
        if STRUCTURAL.contains(pass) {
            ensure(run(&once)?.bitwise_eq(&reference), || format!("{label}: {pass} changed outputs"))?;
        } else if FOLDS.contains(pass) {
            let d = run(&once)?.max_abs_diff(&reference);
            ensure(d <= 1e-5, || format!("{label}: {pass} drifted {d}"))?;
        }
        let twice = apply(&once, pass)?;
        ensure(to_bytes(&once) == to_bytes(&twice), || format!("{label}: {pass} not idempotent"))?;
    }
    Ok(())
}

fn pass_soundness() -> Check {
    for seed in 0..100 {
        let (g, spec) = random_graph(seed);
        check_passes(&g, &random_input(&spec, seed ^ 0xabc), &format!("random graph {seed}"))?;
    }
    let g = build_fcn(FcnVariant::Fcn8s, 64, 128, 35, InitSpec::normal(0.0, 0.01, 42)).map_err(|e| e.to_string())?;
    let x = random_input(&TensorSpec::f32(vec![64, 128, 3]), 1);
    check_passes(&g, &x, "FCN-8s")?;
    let (q, _) = quantize_weights(&g).map_err(|e| e.to_string())?;
    let a = execute_single(&g, &x, None).map_err(|e| e.to_string())?;
    let b = execute_single(&dequantize_weights(&q), &x, None).map_err(|e| e.to_string())?;
    let drift = a.max_abs_diff(&b);
    ensure(drift <= QUANT_DRIFT_BOUND, || format!("quantization drift {drift:e} > {QUANT_DRIFT_BOUND:e}"))?;
    Ok(format!("100 random graphs + FCN-8s sound and idempotent, quantization drift {drift:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. Metric oracles.

/// TP/FP/FN per key from raw pixels; `None` keys are void.
fn tally(pairs: &[(Vec<u8>, Vec<u8>)], key: impl Fn(u8) -> Option<String>) -> BTreeMap<String, [u64; 3]> {
    let mut t: BTreeMap<String, [u64; 3]> = BTreeMap::new();
    for (gt, pred) in pairs {
        for (&g, &p) in gt.iter().zip(pred) {
            let Some(gk) = key(g) else { continue };
            let pk = key(p);
            if pk.as_ref() == Some(&gk) {
                t.entry(gk).or_default()[0] += 1;
            } else {
                t.entry(gk).or_default()[2] += 1;
                if let Some(pk) = pk {
                    t.entry(pk).or_default()[1] += 1;
                }
            }
        }
    }
    t
}

fn compare(table: &IouTable, oracle: &BTreeMap<String, [u64; 3]>, what: &str) -> Result<(), String> {
    let mut defined = Vec::new();
    for e in &table.entries {
        let want = oracle
            .get(&e.name)
            .filter(|c| c.iter().sum::<u64>() > 0)
            .map(|c| c[0] as f64 / c.iter().sum::<u64>() as f64);
        ensure(e.iou == want, || format!("{what} {}: {:?} vs oracle {want:?}", e.name, e.iou))?;
        defined.extend(want);
    }
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    ensure(table.mean == mean, || format!("{what} mean {:?} vs oracle {mean:?}", table.mean))
}

fn metric_oracles() -> Check {
    let schema = LabelSchema::cityscapes();
    let class = |l: u8| {
        let c = &schema.classes()[l as usize];
        (!c.void).then(|| c.name.clone())
    };
    let category = |l: u8| {
        let c = &schema.classes()[l as usize];
        (!c.void).then(|| c.category.clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..35)).collect();
        let pred: Vec<u8> = gt.iter().map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..35) }).collect();
        let mut cm = ConfusionMatrix::for_schema(&schema);
        let t = |v: &Vec<u8>| Tensor::from_labels(8, 8, v.clone()).map_err(|e| e.to_string());
        cm.accumulate(&t(&gt)?, &t(&pred)?, &schema).map_err(|e| e.to_string())?;
        let pairs = [(gt, pred)];
        compare(&class_iou(&cm, &schema), &tally(&pairs, class), &format!("pair {i} class"))?;
        compare(&category_iou(&cm, &schema), &tally(&pairs, category), &format!("pair {i} category"))?;
    }
    let probs = softmax_probs(&Tensor::zeros(vec![8, 8, 35])).map_err(|e| e.to_string())?;
    let gt = Tensor::from_labels(8, 8, (0..64).map(|i| (i % 35) as u8).collect()).map_err(|e| e.to_string())?;
    let ce = cross_entropy_loss(&probs, &gt, &schema).map_err(|e| e.to_string())?.loss;
    ensure((ce - 3.5553).abs() <= 1e-4, || format!("uniform cross-entropy {ce}"))?;
    Ok(format!("200 pairs match the pixel tally, uniform cross-entropy {ce:.5}"))
}

// ---------------------------------------------------------------------------
// 6. Kernel oracles.

fn run_op(kind: OpKind, k: usize, s: usize, x: &Tensor, w: &Tensor, kernel: ConvKernel) -> Result<Tensor, String> {
    let mut g = Graph::new("op");
    let xi = g.add_input("x");
    let wi = g.add_const("w", w.clone());
    let attrs = attrs! { "strides" => s as i64, "padding" => "same", "kernel" => vec![k as i64, k as i64] };
    let id = g.add(kind, "op", &[xi, wi], attrs);
    eval_node(g.node(id), &[x, w], kernel).map_err(|e| e.to_string())
}

/// Nested-loop reference for both conv directions. `transpose` scatters
/// input pixels through each tap instead of gathering.
#[allow(clippy::too_many_arguments)]
fn conv_reference(transpose: bool, h: usize, w: usize, cin: usize, cout: usize, k: usize, s: usize, x: &[f32], wt: &[f32]) -> (Vec<usize>, Vec<f32>) {
    let (oh, ow) = if transpose { (h * s, w * s) } else { (h.div_ceil(s), w.div_ceil(s)) };
    let (py, px) = if transpose {
        (k.saturating_sub(s) / 2, k.saturating_sub(s) / 2)
    } else {
        (((oh - 1) * s + k).saturating_sub(h) / 2, ((ow - 1) * s + k).saturating_sub(w) / 2)
    };
    let mut out = vec![0.0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        let src = if transpose {
                            let (ty, tx) = (oy + py, ox + px);
                            (ty >= ky && tx >= kx && (ty - ky) % s == 0 && (tx - kx) % s == 0)
                                .then(|| ((ty - ky) / s, (tx - kx) / s))
                        } else {
                            let iy = (oy * s + ky) as i64 - py as i64;
                            let ix = (ox * s + kx) as i64 - px as i64;
                            (iy >= 0 && ix >= 0).then_some((iy as usize, ix as usize))
                        };
                        let Some((iy, ix)) = src.filter(|&(iy, ix)| iy < h && ix < w) else { continue };
                        for ci in 0..cin {
                            acc += x[(iy * w + ix) * cin + ci] * wt[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (vec![oh, ow, cout], out)
}

fn unary(kind: OpKind, x: &Tensor) -> Result<Tensor, String> {
    let mut g = Graph::new("u");
    let xi = g.add_input("x");
    let id = g.add(kind, "op", &[xi], attrs! {});
    eval_node(g.node(id), &[x], ConvKernel::Direct).map_err(|e| e.to_string())
}

fn kernel_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f32;
    for case in 0..50 {
        let (h, w) = (rng.random_range(2..=9), rng.random_range(2..=9));
        let (cin, cout, k, s) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=3));
        let x = random_tensor(vec![h, w, cin], &mut rng, 1.0);
        let wt = random_tensor(vec![k, k, cin, cout], &mut rng, 1.0);
        let (xs, ws) = (x.to_f32_vec(), wt.to_f32_vec());
        for (kind, transpose) in [(OpKind::Conv2D, false), (OpKind::ConvTranspose2D, true)] {
            let (shape, want) = conv_reference(transpose, h, w, cin, cout, k, s, &xs, &ws);
            let direct = run_op(kind, k, s, &x, &wt, ConvKernel::Direct)?;
            ensure(direct.shape() == shape.as_slice() && direct.to_f32_vec() == want, || {
                format!("case {case}: direct {kind:?} differs from nested loops")
            })?;
            let scale = want.iter().fold(1.0f32, |m, v| m.max(v.abs()));
            let gemm = run_op(kind, k, s, &x, &wt, ConvKernel::Im2col)?.to_f32_vec();
            let d = gemm.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max) / scale;
            worst = worst.max(d);
            ensure(d <= 1e-6, || format!("case {case}: im2col {kind:?} off by {d:e} relative"))?;
        }
        let pooled = unary(OpKind::MaxPool2x2, &x)?.to_f32_vec();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for c in 0..cin {
                    let at = |dy: usize, dx: usize| xs[((2 * oy + dy) * w + 2 * ox + dx) * cin + c];
                    let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    ensure(pooled[(oy * (w / 2) + ox) * cin + c] == m, || format!("case {case}: pool differs"))?;
                }
            }
        }
        let probs = unary(OpKind::Softmax, &random_tensor(vec![h, w, cout + 1], &mut rng, 20.0))?.to_f32_vec();
        for row in probs.chunks(cout + 1) {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("case {case}: softmax row sums to {sum}"))?;
        }
    }
    Ok(format!("50 cases, direct bitwise, im2col worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 7. Memory planner.

fn memory_planner() -> Check {
    let big = build_fcn(FcnVariant::Fcn8s, 256, 512, 35, InitSpec::zeros()).map_err(|e| e.to_string())?;
    let plan = plan_memory(&big, &TensorSpec::f32(vec![256, 512, 3])).map_err(|e| e.to_string())?;
    verify_plan(&plan).map_err(|e| e.to_string())?;
    let (arena, naive) = (plan.arena_size, plan.naive_size());
    ensure(arena < naive, || format!("arena {arena} not below naive {naive}"))?;
    drop(big);

    let g = build_fcn(FcnVariant::Fcn8s, 64, 128, 35, InitSpec::normal(0.0, 0.01, 7)).map_err(|e| e.to_string())?;
    let spec = TensorSpec::f32(vec![64, 128, 3]);
    let small = plan_memory(&g, &spec).map_err(|e| e.to_string())?;
    verify_plan(&small).map_err(|e| e.to_string())?;
    let inputs = HashMap::from([("image".to_string(), random_input(&spec, 3))]);
    let a = execute(&g, &inputs, None).map_err(|e| e.to_string())?;
    let b = execute_planned(&g, &small, &inputs, None).map_err(|e| e.to_string())?;
    ensure(a.bitwise_eq(&b), || "planned execution differs from naive".into())?;
    Ok(format!("256×512 arena {:.1} MB vs {:.1} MB naive, 64×128 planned run bitwise equal", arena as f64 / 1e6, naive as f64 / 1e6))
}

// ---------------------------------------------------------------------------
// 8. Command-line pipeline.

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_segforge")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("segforge {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let at = |a: &str, b: &str| Path::new(&p(a)).join(b).to_string_lossy().into_owned();
    cli(&["fixtures", "--out", &p("fx"), "--count", "3"])?;
    cli(&["build", "--arch", "fcn8s", "--height", "64", "--width", "128", "--out", &p("fcn8s.sgm")])?;
    cli(&["optimize", "--in", &p("fcn8s.sgm"), "--passes", "all", "--out", &p("fcn8s_opt.sgm")])?;
    cli(&["run", "--in", &p("fcn8s_opt.sgm"), "--images", &at("fx", "images"), "--out-dir", &p("pred")])?;
    let eval = cli(&["--format", "csv", "eval", "--pred", &p("pred"), "--gt", &at("fx", "labels")])?;
    ensure(eval.lines().any(|l| l.starts_with("category,mean,")), || format!("eval output:\n{eval}"))?;
    cli(&[
        "bench", "--in", &p("fcn8s_opt.sgm"), "--iters", "3", "--warmup", "1",
        "--power", &at("fx", "power/ina.log"), "--power-format", "ina-sysfs",
        "--passes-label", "all", "--report", &p("report.csv"),
    ])?;
    let text = std::fs::read_to_string(p("report.csv")).map_err(|e| e.to_string())?;
    let rows = parse_report_csv(&text).map_err(|e| e.to_string())?;
    let row = rows.first().ok_or("empty report")?;
    let err = row.derived_error(1525);
    ensure(err <= 1e-9, || format!("derived columns disagree by {err:e}"))?;
    let want = energy_wh(1525, row.median_ms, 4.16);
    ensure((row.energy_wh - want).abs() <= 1e-9 * want.max(1.0), || format!("energy {} vs {want}", row.energy_wh))?;
    Ok(format!("{} {} MB, {:.2} ms, {:.4} Wh, derived error {err:.1e}", row.model, row.size_mb, row.median_ms, row.energy_wh))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 8] = [
        ("encoder memory estimate", Duration::from_secs(1), encoder_memory),
        ("serialized model sizes", Duration::from_secs(30), model_sizes),
        ("energy per test set", Duration::from_secs(1), energy),
        ("optimizer pass soundness", Duration::from_secs(300), pass_soundness),
        ("metric oracle equivalence", Duration::from_secs(60), metric_oracles),
        ("executor kernel oracles", Duration::from_secs(60), kernel_oracles),
        ("memory planner", Duration::from_secs(120), memory_planner),
        ("end-to-end command line", Duration::from_secs(300), end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = check();
        let elapsed = t.elapsed();
        let result = result.and_then(|m| {
            if elapsed < limit {
                Ok(m)
            } else {
                Err(format!("took {elapsed:.1?}, limit {limit:?} ({m})"))
            }
        });
        match result {
            Ok(m) => println!("PASS criterion {} ({name}): {m} [{elapsed:.2?}]", i + 1),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {m} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
