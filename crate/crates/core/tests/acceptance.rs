//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report reads top to
//! bottom. Every check compares against hand-computed values or an oracle
//! written here, not against the library's own helpers. Exits nonzero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use edgeopt::data::{gen_synthetic, Dataset, SyntheticSpec};
use edgeopt::exit::{
    attach_exits, cascade_infer, output_probs, sweep_thresholds, train_exit_heads, CascadeModel,
    HeadNet, HeadPreset, SweepOptions, SweepPoint, TrainConfig,
};
use edgeopt::experiment::{example_config, run_experiment, ExperimentOutcome, Technique};
use edgeopt::graph::{Graph, InputSpec, LayerSpec, Op, PoolAttrs};
use edgeopt::metrics::{self, summarize, Baseline, EvalRecord};
use edgeopt::prob::{entropy, max_entropy};
use edgeopt::prune::{prune_structured, rounded_keep_count, PruneConfig};
use edgeopt::quant::{
    apply_dq, apply_ptq, compute_qparams, covered_param_bytes, QuantMode, QuantParams, QuantPlan,
};
use edgeopt::zoo::{self, ClassifierStyle, ZooSpec};
use edgeopt::{forward, load_model, LayerKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // Negated on purpose: a NaN comparison must fail the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn half_ulp(v: f32) -> f64 {
    let a = v.abs();
    (f32::from_bits(a.to_bits() + 1) as f64 - a as f64) / 2.0
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.f32_values().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn c1_compression_arithmetic() -> Check {
    // (baseline MB, optimized MB, published ratio) from the results tables.
    let rows = [
        (233.20, 59.10, 3.95),
        (233.20, 98.50, 2.37),
        (9.40, 2.50, 3.76),
        (5.50, 1.50, 3.67),
    ];
    let mut shown = Vec::new();
    for (base, opt, published) in rows {
        let r = ok(metrics::compression_rate(base, opt))?;
        let rounded = metrics::round2(r);
        ensure!(
            (rounded - published).abs() <= 0.01 + 1e-12,
            "({base}, {opt}) gave {rounded}, published {published}"
        );
        shown.push(format!("{rounded:.2}x"));
    }
    Ok(shown.join(" "))
}

// ---------------------------------------------------------------- 2

fn toy_data(classes: usize, samples: usize, split: u64) -> std::result::Result<Dataset, String> {
    let spec = SyntheticSpec {
        noise: 0.2,
        difficulty_spread: 0.4,
        dc_share: 0.25,
        ..SyntheticSpec::new(classes, samples, vec![1, 3, 8, 8], 7).with_split(split)
    };
    ok(gen_synthetic(&spec))
}

fn toy_backbone(classes: usize) -> std::result::Result<Graph, String> {
    let spec = ZooSpec {
        classifier: ClassifierStyle::Flatten,
        ..ZooSpec::new([3, 8, 8], vec![8, 16], classes, 3)
    };
    ok(zoo::toy_resnet(&spec))
}

fn trained_cascade(
    points: &[&str],
    train: &Dataset,
    epochs: usize,
) -> std::result::Result<(Graph, CascadeModel), String> {
    let backbone = toy_backbone(train.num_classes)?;
    let cascade = ok(attach_exits(&backbone, points, HeadPreset::Simple, 1))?;
    let cfg = TrainConfig {
        epochs,
        seed: 3,
        ..TrainConfig::default()
    };
    let (trained, _) = ok(train_exit_heads(&cascade, train, &cfg))?;
    Ok((backbone, trained))
}

fn c2_entropy_gate() -> Check {
    let mut one_hot = vec![0.0f32; 10];
    one_hot[3] = 1.0;
    let h0 = ok(entropy(&one_hot))?;
    ensure!(h0 == 0.0, "entropy(one-hot) = {h0}");
    let uniform = vec![0.01f32; 100];
    let hu = ok(entropy(&uniform))? as f64;
    ensure!((hu - 4.60517).abs() <= 1e-5, "entropy(uniform 100) = {hu}");

    let train = toy_data(4, 200, 0)?;
    let eval = toy_data(4, 60, 1)?;
    let (backbone, mut cascade) = trained_cascade(&["s0b0_out", "s1_down_relu"], &train, 2)?;

    ok(cascade.set_thresholds(0.0))?;
    for (i, s) in eval.samples.iter().enumerate() {
        let p = ok(cascade_infer(&cascade, &s.input))?;
        ensure!(
            p.exit_index == cascade.heads.len(),
            "T=0: sample {i} exited at head {}",
            p.exit_index
        );
        let reference = ok(output_probs(&backbone, &ok(forward(&backbone, &s.input))?))?;
        let same = p
            .probs
            .iter()
            .map(|v| v.to_bits())
            .eq(reference.iter().map(|v| v.to_bits()));
        ensure!(same, "T=0: sample {i} differs from the backbone");
    }

    ok(cascade.set_thresholds(max_entropy(4)))?;
    let early = eval
        .samples
        .iter()
        .map(|s| cascade_infer(&cascade, &s.input).map(|p| p.exit_index == 0))
        .collect::<edgeopt::Result<Vec<bool>>>();
    let early = ok(early)?;
    ensure!(
        early.iter().all(|&e| e),
        "T=ln n: only {} of {} exited at head 0",
        early.iter().filter(|&&e| e).count(),
        early.len()
    );
    Ok(format!("H(one-hot)=0, H(U100)={hu:.5}; T=0: 0% exits, {} outputs bit-identical; T=ln 4: 100% exits", eval.len()))
}

// ---------------------------------------------------------------- 3

fn c3_quantization_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = 200_000;
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let mag = 10f32.powf(rng.random_range(-3.0..3.0));
        let (a, b) = (
            rng.random_range(-1.0f32..1.0) * mag,
            rng.random_range(-1.0f32..1.0) * mag,
        );
        let (lo, hi) = (a.min(b), a.max(b));
        let qp = ok(compute_qparams(lo, hi))?;
        ensure!(
            qp.dequantize(qp.quantize(0.0)) == 0.0,
            "pair {i}: zero not exact for [{lo}, {hi}]"
        );
        // Any point of the calibrated range, including the implied zero.
        let x = rng.random_range(lo.min(0.0)..=hi.max(0.0));
        let q = qp.quantize(x);
        // s * (q - z) needs up to 32 significant bits: exact in f64, while
        // the f32 that `dequantize` returns adds at most half an ulp.
        let lattice = qp.scale as f64 * (q as f64 - qp.zero_point as f64);
        let err = (lattice - x as f64).abs();
        let half = qp.scale as f64 / 2.0;
        ensure!(
            err <= half,
            "pair {i}: |s(q-z)-x| = {err} > scale/2 = {half} for x={x} in [{lo}, {hi}]"
        );
        let stored = qp.dequantize(q);
        ensure!(
            stored as f64 == lattice || (stored as f64 - lattice).abs() <= half_ulp(stored),
            "pair {i}: f32 rounding of {lattice}"
        );
        worst = worst.max(err / half);
    }

    // FC layer whose inputs, weights and bias lie on the quantization
    // lattices with power-of-two scales: every product and partial sum is
    // exact in f32, so the integer path must agree bit for bit.
    let (in_f, out_f) = (6, 5);
    let xqp = QuantParams::new(0.25, 8).unwrap();
    let wqp = QuantParams::new(0.125, 128).unwrap();
    let yqp = QuantParams::new(1.0 / 32.0, 128).unwrap();
    let w: Vec<f32> = (0..in_f * out_f)
        .map(|_| 0.125 * rng.random_range(-2i32..=2) as f32)
        .collect();
    let bias: Vec<f32> = (0..out_f)
        .map(|_| rng.random_range(-16i32..=16) as f32 / 32.0)
        .collect();
    let layer = LayerSpec::fully_connected(
        "fc",
        "x",
        "y",
        Tensor::from_f32(vec![out_f, in_f], w).unwrap(),
        Tensor::from_f32(vec![out_f], bias).unwrap(),
    );
    let g = Graph::new(
        "lattice",
        InputSpec {
            name: "x".into(),
            shape: vec![1, in_f],
        },
        vec![layer],
        "y",
        out_f,
    );
    let plan = QuantPlan {
        mode: QuantMode::Ptq,
        quantized_kinds: [LayerKind::FullyConnected].into(),
        calibration_summary: BTreeMap::new(),
        activation_params: [("x".to_string(), xqp), ("y".to_string(), yqp)].into(),
        weight_params: [("fc".to_string(), wqp)].into(),
    };
    let ptq = ok(apply_ptq(&g, &plan))?;

    // The dynamic path measures ranges itself, so its lattice must contain
    // the extremes: inputs span [-2, 61.75] (scale 1/4, zero point 8) and
    // weights [-16, 15.875] (scale 1/8, zero point 128).
    let mut w: Vec<f32> = (0..in_f * out_f)
        .map(|_| 0.125 * rng.random_range(-128i32..=127) as f32)
        .collect();
    w[0] = -16.0;
    w[1] = 15.875;
    let bias: Vec<f32> = (0..out_f)
        .map(|_| rng.random_range(-512i32..=512) as f32 / 32.0)
        .collect();
    let layer = LayerSpec::fully_connected(
        "fc",
        "x",
        "y",
        Tensor::from_f32(vec![out_f, in_f], w).unwrap(),
        Tensor::from_f32(vec![out_f], bias).unwrap(),
    );
    let g_dyn = Graph::new(
        "lattice",
        InputSpec {
            name: "x".into(),
            shape: vec![1, in_f],
        },
        vec![layer],
        "y",
        out_f,
    );
    let dq = ok(apply_dq(&g_dyn, &[LayerKind::FullyConnected].into()))?;

    let trials = 2000;
    for t in 0..trials {
        let x: Vec<f32> = (0..in_f)
            .map(|_| 0.25 * rng.random_range(-8i32..=8) as f32)
            .collect();
        let input = Tensor::from_f32(vec![1, in_f], x).unwrap();
        ensure!(
            bits(&ok(forward(&ptq, &input))?) == bits(&ok(forward(&g, &input))?),
            "static FC differs from f32 on trial {t}"
        );

        let mut x: Vec<f32> = (0..in_f)
            .map(|_| 0.25 * rng.random_range(-8i32..=247) as f32)
            .collect();
        x[0] = -2.0;
        x[1] = 61.75;
        let input = Tensor::from_f32(vec![1, in_f], x).unwrap();
        ensure!(
            bits(&ok(forward(&dq, &input))?) == bits(&ok(forward(&g_dyn, &input))?),
            "dynamic FC differs from f32 on trial {t}"
        );
    }
    Ok(format!("{pairs} pairs, worst error {worst:.4} x scale/2; zero exact; lattice FC bit-identical on {trials} inputs (static and dynamic)"))
}

// ---------------------------------------------------------------- 4

fn c4_pruning() -> Check {
    let spec = ZooSpec {
        blocks_per_stage: 2,
        ..ZooSpec::new([3, 8, 8], vec![8, 16], 4, 11)
    };
    for arch in ["resnet", "mobilenet", "chain"] {
        let g = ok(zoo::build(arch, &spec))?;
        for cg in [1, 8] {
            let (p, report) = ok(prune_structured(&g, &ok(PruneConfig::new(0.0, cg))?))?;
            ensure!(p == g, "{arch}: pr=0, cg={cg} changed the graph");
            ensure!(
                report.params_after == report.params_before,
                "{arch}: pr=0 changed the parameter count"
            );
        }
    }

    // conv(12) -> relu -> maxpool -> conv(2) -> relu -> flatten -> fc, with
    // three filters of the first conv zeroed. pr=0.25 keeps 9 of 12 (exactly
    // the nonzero ones) and round(1.5)=2 of 2 in the second conv.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand_t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::from_f32(
            shape,
            (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        )
        .unwrap()
    };
    let zeroed = [2usize, 7, 11];
    let mut w1 = rand_t(vec![12, 1, 3, 3]).into_f32_vec();
    let mut b1 = rand_t(vec![12]).into_f32_vec();
    for &f in &zeroed {
        w1[f * 9..(f + 1) * 9].fill(0.0);
        b1[f] = 0.0;
    }
    let layers = vec![
        LayerSpec::conv2d(
            "c1",
            "x",
            "c1",
            Tensor::from_f32(vec![12, 1, 3, 3], w1).unwrap(),
            Tensor::from_f32(vec![12], b1).unwrap(),
            1,
            1,
        ),
        LayerSpec::new("r1", Op::ReLU, &["c1"], "r1"),
        LayerSpec::new(
            "p1",
            Op::MaxPool(PoolAttrs {
                kernel: [2, 2],
                stride: [2, 2],
            }),
            &["r1"],
            "p1",
        ),
        LayerSpec::conv2d(
            "c2",
            "p1",
            "c2",
            rand_t(vec![2, 12, 3, 3]),
            rand_t(vec![2]),
            1,
            1,
        ),
        LayerSpec::new("r2", Op::ReLU, &["c2"], "r2"),
        LayerSpec::new("flat", Op::Flatten, &["r2"], "flat"),
        LayerSpec::fully_connected("fc", "flat", "logits", rand_t(vec![3, 32]), rand_t(vec![3])),
    ];
    let g = Graph::new(
        "zero-filters",
        InputSpec {
            name: "x".into(),
            shape: vec![1, 1, 8, 8],
        },
        layers,
        "logits",
        3,
    );
    let (p, report) = ok(prune_structured(&g, &ok(PruneConfig::new(0.25, 1))?))?;
    let c1 = report
        .layers
        .iter()
        .find(|l| l.layer == "c1")
        .ok_or("no record for c1")?;
    ensure!(
        c1.removed == zeroed,
        "removed {:?}, expected {:?}",
        c1.removed,
        zeroed
    );
    ensure!(
        report
            .layers
            .iter()
            .all(|l| l.layer == "c1" || l.removed.is_empty()),
        "other layers lost filters"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100 {
        let x = Tensor::from_f32(
            vec![1, 1, 8, 8],
            (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        ensure!(
            bits(&ok(forward(&g, &x))?) == bits(&ok(forward(&p, &x))?),
            "input {i}: outputs differ after removal"
        );
    }

    // Hand-computed: keep = nearest multiple of cg to (1 - pr) * C, at least cg.
    #[rustfmt::skip]
    #[allow(clippy::type_complexity)]
    let expected: [(usize, [(usize, [usize; 4]); 4]); 2] = [
        (16, [(32, [32, 32, 32, 16]), (48, [48, 48, 32, 32]), (64, [64, 64, 48, 48]), (128, [128, 112, 96, 96])]),
        (32, [(32, [32, 32, 32, 32]), (48, [32, 32, 32, 32]), (64, [64, 64, 64, 32]), (128, [128, 128, 96, 96])]),
    ];
    let prs = [0.05, 0.10, 0.20, 0.30];
    let mut cells = 0;
    for (cg, rows) in expected {
        for (channels, keeps) in rows {
            for (pr, want) in prs.iter().zip(keeps) {
                let got = rounded_keep_count(channels, &ok(PruneConfig::new(*pr, cg))?);
                ensure!(
                    got == want,
                    "cg={cg} pr={pr} C={channels}: got {got}, expected {want}"
                );
                cells += 1;
            }
        }
    }
    Ok(format!("pr=0 no-op on 3 archs; 3 zero filters removed, 100 outputs bit-identical; {cells} grid cells match"))
}

// ---------------------------------------------------------------- 5

fn rescan_accuracy_opt(points: &[SweepPoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        let better = p.accuracy > b.accuracy
            || (p.accuracy == b.accuracy && p.early_exit_rate > b.early_exit_rate)
            || (p.accuracy == b.accuracy
                && p.early_exit_rate == b.early_exit_rate
                && p.threshold < b.threshold);
        if better {
            best = i;
        }
    }
    best
}

fn rescan_inference_opt(points: &[SweepPoint], floor: f64) -> usize {
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if p.accuracy < floor {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let q = &points[b];
                let better = p.expected_macs < q.expected_macs
                    || (p.expected_macs == q.expected_macs && p.accuracy > q.accuracy);
                Some(if better { i } else { b })
            }
        };
    }
    best.expect("the accuracy optimum always qualifies")
}

fn c5_sweep() -> Check {
    let train = toy_data(4, 600, 0)?;
    let eval = toy_data(4, 300, 1)?;
    let (_, cascade) = trained_cascade(&["s0b0_out"], &train, 10)?;
    let report = ok(sweep_thresholds(
        &cascade,
        &eval,
        &SweepOptions::linear(4, 50),
    ))?;
    ensure!(
        report.points.len() == 50,
        "{} thresholds, expected 50",
        report.points.len()
    );
    ensure!(
        report
            .points
            .windows(2)
            .all(|w| w[0].threshold < w[1].threshold),
        "grid not ascending"
    );
    for w in report.points.windows(2) {
        ensure!(
            w[0].early_exit_rate <= w[1].early_exit_rate,
            "exit rate falls from T={} to T={}",
            w[0].threshold,
            w[1].threshold
        );
    }

    // Re-scan: run real inference at every threshold and score it directly.
    let n = eval.len() as f64;
    let mut rescanned = Vec::with_capacity(report.points.len());
    for p in &report.points {
        let mut c = cascade.clone();
        ok(c.set_thresholds(p.threshold))?;
        let (mut correct, mut early, mut macs) = (0usize, 0usize, 0u64);
        for s in &eval.samples {
            let pred = ok(cascade_infer(&c, &s.input))?;
            correct += (pred.label == s.label) as usize;
            early += (pred.exit_index < c.heads.len()) as usize;
            macs += pred.macs_executed;
        }
        let point = SweepPoint {
            threshold: p.threshold,
            accuracy: 100.0 * correct as f64 / n,
            early_exit_rate: 100.0 * early as f64 / n,
            expected_macs: macs as f64 / n,
            ..p.clone()
        };
        ensure!(
            (point.accuracy - p.accuracy).abs() < 1e-9,
            "T={}: accuracy {} vs rescan {}",
            p.threshold,
            p.accuracy,
            point.accuracy
        );
        ensure!(
            (point.early_exit_rate - p.early_exit_rate).abs() < 1e-9,
            "T={}: exit rate mismatch",
            p.threshold
        );
        ensure!(
            (point.expected_macs - p.expected_macs).abs() < 1e-6,
            "T={}: expected MACs mismatch",
            p.threshold
        );
        rescanned.push(point);
    }
    let acc = rescan_accuracy_opt(&rescanned);
    let inf = rescan_inference_opt(&rescanned, f64::NEG_INFINITY);
    ensure!(
        acc == report.acc_opt,
        "acc_opt {} vs rescan {acc}",
        report.acc_opt
    );
    ensure!(
        inf == report.inf_opt,
        "inf_opt {} vs rescan {inf}",
        report.inf_opt
    );

    // A finite budget as well.
    let budget = 2.0;
    let budgeted = ok(sweep_thresholds(
        &cascade,
        &eval,
        &SweepOptions {
            budget: Some(budget),
            ..SweepOptions::linear(4, 50)
        },
    ))?;
    let inf_b = rescan_inference_opt(&rescanned, rescanned[acc].accuracy - budget);
    ensure!(
        inf_b == budgeted.inf_opt,
        "budgeted inf_opt {} vs rescan {inf_b}",
        budgeted.inf_opt
    );
    let (a, i) = (&rescanned[acc], &rescanned[inf]);
    Ok(format!(
        "50 thresholds, exit rate {:.1}% -> {:.1}% non-decreasing; acc_opt T={:.3} ({:.2}%), inf_opt T={:.3} ({:.0} MACs) confirmed by re-scan",
        rescanned[0].early_exit_rate,
        rescanned[49].early_exit_rate,
        a.threshold,
        a.accuracy,
        i.threshold,
        i.expected_macs
    ))
}

// ---------------------------------------------------------------- 6

fn weights_hash(graphs: &[Graph]) -> String {
    let mut h = Sha256::new();
    for g in graphs {
        for l in &g.layers {
            h.update(l.name.as_bytes());
            for t in [&l.weight, &l.bias].into_iter().flatten() {
                for v in t.f32_values().iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

fn c6_frozen_backbone() -> Check {
    let train = toy_data(4, 200, 0)?;
    let backbone = toy_backbone(4)?;
    let cascade = ok(attach_exits(
        &backbone,
        &["s0b0_out", "s1_down_relu"],
        HeadPreset::Block,
        2,
    ))?;
    let before = weights_hash(&cascade.segments);
    ensure!(
        before == weights_hash(std::slice::from_ref(&backbone)),
        "split changed the backbone weights"
    );
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (trained, _) = ok(train_exit_heads(&cascade, &train, &cfg))?;
    let after = weights_hash(&trained.segments);
    ensure!(
        before == after,
        "backbone hash changed: {before} -> {after}"
    );
    ensure!(
        trained.backbone() == backbone,
        "reassembled backbone differs"
    );
    ensure!(trained.heads != cascade.heads, "heads did not train");

    // Central differences on the trained first head, at its real input.
    let head = &trained.heads[0];
    let net = ok(HeadNet::from_graph(&head.graph))?;
    let features = ok(forward(&trained.segments[0], &train.samples[0].input))?;
    let x: Vec<f64> = features.f32_values().iter().map(|&v| v as f64).collect();
    let label = train.samples[0].label;
    let (_, grad) = net.gradient(&x, label);
    let theta = net.param_vector();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..theta.len());
        let mut probe = net.clone();
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        probe.set_param_vector(&t);
        let up = probe.loss(&x, label);
        t[i] = theta[i] - h;
        probe.set_param_vector(&t);
        let down = probe.loss(&x, label);
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        let rel = if scale < 1e-10 {
            0.0
        } else {
            (grad[i] - fd).abs() / scale
        };
        ensure!(
            rel < 1e-4,
            "parameter {i}: analytic {} vs finite difference {fd} (rel {rel:.2e})",
            grad[i]
        );
        worst = worst.max(rel);
    }
    Ok(format!(
        "backbone sha256 {}.. unchanged; 20 coordinates of {}, worst rel err {worst:.1e}",
        &before[..12],
        theta.len()
    ))
}

// ---------------------------------------------------------------- 7

fn run_example(technique: Technique, dir: &Path) -> std::result::Result<ExperimentOutcome, String> {
    ok(run_experiment(&example_config(
        technique,
        dir.join(technique.as_str()),
    )))
}

fn c7_trends() -> Check {
    let tmp = ok(tempfile::tempdir())?;
    let ptq_ee = run_example(Technique::PtqEe, tmp.path())?;
    let ptq = run_example(Technique::Ptq, tmp.path())?;

    let sweep = ptq_ee.sweep.as_ref().ok_or("no sweep report")?;
    let (acc, inf) = (sweep.acc_opt_point(), sweep.inf_opt_point());
    let backbone = sweep.backbone_macs as f64;
    ensure!(
        inf.expected_macs < acc.expected_macs && acc.expected_macs < backbone,
        "(a) inf_opt {} / acc_opt {} / backbone {backbone}",
        inf.expected_macs,
        acc.expected_macs
    );

    let (ee_macs, q_macs) = (ptq_ee.summary().expected_macs, ptq.summary().expected_macs);
    ensure!(
        ee_macs < q_macs,
        "(b) PTQ-EE {ee_macs} MACs vs PTQ {q_macs}"
    );

    let base = ok(load_model(ptq.output_dir.join("model.edgeopt")))?;
    let quantized = ok(load_model(ptq.output_dir.join("quantized.edgeopt")))?;
    let (cb, ca) = covered_param_bytes(&base, &quantized);
    let ratio = cb as f64 / ca as f64;
    ensure!(ratio >= 3.5, "(c) covered bytes shrink {ratio:.2}x");
    Ok(format!(
        "(a) {:.0} < {:.0} < {backbone:.0} MACs; (b) PTQ-EE {ee_macs:.0} < PTQ {q_macs:.0}; (c) covered bytes {cb} -> {ca} ({ratio:.2}x); accuracy acc_opt {:.2}%, inf_opt {:.2}%",
        inf.expected_macs, acc.expected_macs, acc.accuracy, inf.accuracy
    ))
}

// ---------------------------------------------------------------- 8

#[derive(serde::Deserialize)]
struct OraclePair {
    p: Vec<String>,
    q: Vec<String>,
    loyalty: String,
}

fn c8_loyalty() -> Check {
    let records: Vec<EvalRecord> = (0..50)
        .map(|i| {
            let mut probs = vec![0.1f32, 0.2, 0.3, 0.4];
            probs.rotate_left(i % 4);
            EvalRecord::final_exit(i % 4, probs, 0.001, 100)
        })
        .collect();
    let base = Baseline {
        records: &records,
        model_bytes: 1000,
        expected_macs: 100.0,
    };
    let s = ok(summarize("self", &records, 1000, Some(base), None))?;
    ensure!(
        s.label_loyalty == Some(100.0),
        "self label loyalty {:?}",
        s.label_loyalty
    );
    ensure!(
        s.probability_loyalty == Some(100.0),
        "self probability loyalty {:?}",
        s.probability_loyalty
    );

    #[derive(serde::Deserialize)]
    struct Fixture {
        pairs: Vec<OraclePair>,
    }
    let text = include_str!("fixtures/jsd_oracle.json");
    let fixture: Fixture = ok(serde_json::from_str(text))?;
    let parse = |v: &[String]| {
        v.iter()
            .map(|s| s.parse::<f32>().unwrap())
            .collect::<Vec<f32>>()
    };
    let (mut opt, mut reference) = (Vec::new(), Vec::new());
    let mut worst = 0.0f64;
    let mut oracle_mean = 0.0;
    for (i, pair) in fixture.pairs.iter().enumerate() {
        let (p, q) = (parse(&pair.p), parse(&pair.q));
        let want: f64 = pair.loyalty.parse().unwrap();
        let got = ok(metrics::sample_probability_loyalty(&p, &q))?;
        ensure!(
            (got - want).abs() <= 1e-6,
            "pair {i}: {got} vs oracle {want}"
        );
        worst = worst.max((got - want).abs());
        oracle_mean += want;
        opt.push(EvalRecord::final_exit(0, q, 0.0, 0));
        reference.push(EvalRecord::final_exit(0, p, 0.0, 0));
    }
    ensure!(
        fixture.pairs.len() == 1000,
        "fixture has {} pairs",
        fixture.pairs.len()
    );
    let mean = ok(metrics::probability_loyalty(&opt, &reference))?;
    let oracle_mean = 100.0 * oracle_mean / fixture.pairs.len() as f64;
    ensure!(
        (mean - oracle_mean).abs() <= 1e-6,
        "mean {mean} vs oracle {oracle_mean}"
    );
    Ok(format!("self-loyalty 100.00/100.00; 1000 pairs vs 50-digit oracle, worst |err| {worst:.1e}; mean {mean:.4}%"))
}

// ---------------------------------------------------------------- 9

fn files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn c9_determinism() -> Check {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let ra = run_example(Technique::PtqEe, a.path())?;
    let rb = run_example(Technique::PtqEe, b.path())?;
    let mut listed = Vec::new();
    ok(files(&ra.output_dir, &mut listed))?;
    listed.sort();
    let (mut json, mut binary) = (0, 0);
    for path in &listed {
        let rel = path.strip_prefix(&ra.output_dir).unwrap();
        let other = rb.output_dir.join(rel);
        let (x, y) = (ok(std::fs::read(path))?, ok(std::fs::read(&other))?);
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let mut vx: serde_json::Value = ok(serde_json::from_slice(&x))?;
                let mut vy: serde_json::Value = ok(serde_json::from_slice(&y))?;
                metrics::strip_timing(&mut vx);
                metrics::strip_timing(&mut vy);
                let (sx, sy) = (ok(serde_json::to_vec(&vx))?, ok(serde_json::to_vec(&vy))?);
                ensure!(sx == sy, "{} differs between runs", rel.display());
                json += 1;
            }
            Some("edgeopt") => {
                ensure!(x == y, "{} differs between runs", rel.display());
                binary += 1;
            }
            _ => {}
        }
    }
    ensure!(json >= 5, "only {json} JSON reports written");
    Ok(format!(
        "{json} JSON reports identical modulo timing, {binary} model files byte-identical"
    ))
}

// ----------------------------------------------------------------

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Check);
    let criteria: [Criterion; 9] = [
        (
            "compression-rate arithmetic",
            Duration::from_secs(1),
            c1_compression_arithmetic,
        ),
        ("entropy gate", Duration::from_secs(5), c2_entropy_gate),
        (
            "quantization round trip",
            Duration::from_secs(30),
            c3_quantization_round_trip,
        ),
        (
            "prune identity and zero filters",
            Duration::from_secs(30),
            c4_pruning,
        ),
        ("exit-rate monotonicity", Duration::from_secs(60), c5_sweep),
        (
            "frozen-backbone training",
            Duration::from_secs(60),
            c6_frozen_backbone,
        ),
        ("desk-scale trends", Duration::from_secs(300), c7_trends),
        ("loyalty metrics", Duration::from_secs(10), c8_loyalty),
        (
            "end-to-end determinism",
            Duration::from_secs(120),
            c9_determinism,
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *budget => {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
            other => other,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {} {status} [{name}] ({:.2} s): {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
