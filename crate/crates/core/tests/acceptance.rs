//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use coast_core::analysis::{arr_curve, savgol_smooth};
use coast_core::bundle::{decode_bundle, read_bundle, write_bundle, BundleError, DenseTensor, TensorBundle};
use coast_core::{
    generate, layer_flops, normalized_entropy, pool_global, route_layer, run_schedule, split_budget, total_flops,
    BudgetSplit, Hyperparams, Matrix, ModelDims, PruneConfig, SynthSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($msg)+));
            }
        }
    };
}

// ---------------------------------------------------------------- 1

fn dense_flops() -> Outcome {
    let dims = ModelDims::LLAVA_1_5_7B;
    let report = total_flops(&[576; 32], &dims).map_err(|e| e.to_string())?;
    // Independent evaluation of 8nd^2 + 4n^2d + 6ndm in floating point.
    let (n, d, m) = (640.0f64, 4096.0f64, 11008.0f64);
    let analytic = 32.0 * (8.0 * n * d * d + 4.0 * n * n * d + 6.0 * n * d * m);
    let rel_analytic = (report.total as f64 - analytic).abs() / analytic;
    let rel_reported = (report.total as f64 / 1e12 - 8.54).abs() / 8.54;
    ensure!(report.total_tflops() == 8.504, "total {} TFLOPs", report.total_tflops());
    ensure!(rel_analytic < 1e-3, "off analytic sum by {rel_analytic}");
    ensure!(rel_reported < 0.02, "off 8.54 by {rel_reported}");
    ensure!(layer_flops(640, &dims) * 32 == report.total, "per-layer sum mismatch");
    Ok(format!(
        "{:.3} TFLOPs, {:.2e} from analytic, {:.2}% from 8.54",
        report.total_tflops(),
        rel_analytic,
        100.0 * rel_reported
    ))
}

// ---------------------------------------------------------------- 2

/// Brute-force routing: full sorts and its own cosine.
fn reference_kept(hidden: &[Vec<f64>], s_glo: &[f64], s_last: &[f64], split: &BudgetSplit) -> Vec<usize> {
    let n = hidden.len();
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            (ab / (na * nb)).clamp(-1.0, 1.0)
        }
    };
    let mut by_last: Vec<usize> = (0..n).collect();
    by_last.sort_by(|&a, &b| s_last[b].partial_cmp(&s_last[a]).unwrap().then(a.cmp(&b)));
    let anchors: Vec<usize> = by_last[..split.k_a].to_vec();
    let mut by_glo: Vec<usize> = (0..n).collect();
    by_glo.sort_by(|&a, &b| s_glo[a].partial_cmp(&s_glo[b]).unwrap().then(a.cmp(&b)));
    let refs: Vec<usize> = by_glo[..split.k_r].to_vec();

    let cands: Vec<usize> = (0..n).filter(|i| !anchors.contains(i)).collect();
    let score = |c: usize| -> f64 {
        let mut best = f64::NEG_INFINITY;
        for &a in &anchors {
            best = best.max(cos(&hidden[c], &hidden[a]));
        }
        let mut total = 0.0;
        for &r in &refs {
            total += cos(&hidden[c], &hidden[r]);
        }
        best - total / refs.len() as f64
    };
    let scored: Vec<(usize, f64)> = cands.iter().map(|&c| (c, score(c))).collect();
    let mut desc = scored.clone();
    desc.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let top: Vec<usize> = desc[..split.n1].iter().map(|p| p.0).collect();
    let mut asc: Vec<(usize, f64)> = scored.into_iter().filter(|p| !top.contains(&p.0)).collect();
    asc.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = anchors;
    kept.extend(top);
    kept.extend(asc[..split.n2].iter().map(|p| p.0));
    kept.sort();
    kept
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, BudgetSplit) {
    let n = rng.random_range(8..=64usize);
    let d = rng.random_range(4..=16usize);
    let mut hidden: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut s_glo: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut s_last: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.5).collect();
    // Exact duplicates give bitwise-equal scores, exercising tie-breaks.
    if rng.random_bool(0.5) {
        for _ in 0..rng.random_range(1..=n / 3) {
            let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
            hidden[dst] = hidden[src].clone();
            s_glo[dst] = s_glo[src];
            s_last[dst] = s_last[src];
        }
    }
    if rng.random_bool(0.1) {
        hidden[rng.random_range(0..n)] = vec![0.0; d];
    }
    let split = if rng.random_bool(0.5) {
        let k = rng.random_range(1..=n);
        let hp = Hyperparams {
            rho_a: rng.random_range(0.01..=1.0),
            rho_r: rng.random_range(0.01..=1.0),
            eta: rng.random_range(0.01..=1.0),
            ..Hyperparams::default()
        };
        split_budget(n, k, rng.random(), &hp).unwrap()
    } else {
        let k_a = rng.random_range(1..=n);
        let free = n - k_a;
        let n1 = rng.random_range(0..=free);
        let n2 = rng.random_range(0..=free - n1);
        BudgetSplit {
            k_a,
            k_rest: n1 + n2,
            n1,
            n2,
            k_r: rng.random_range(1..=n),
            h: 0.5,
        }
    };
    (hidden, s_glo, s_last, split)
}

fn routing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ties = 0;
    for trial in 0..1000 {
        let (hidden, s_glo, s_last, split) = random_instance(&mut rng);
        let m = Matrix::from_rows(&hidden).unwrap();
        let got = route_layer(&m, &s_glo, &s_last, &split).map_err(|e| format!("trial {trial}: {e}"))?;
        let want = reference_kept(&hidden, &s_glo, &s_last, &split);
        ensure!(
            got.kept == want,
            "trial {trial}: kept {:?} vs reference {want:?}",
            got.kept
        );
        ensure!(got.kept.len() == split.total(), "trial {trial}: size");
        let mut sorted = got.scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ties += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
    }
    Ok(format!("1000/1000 instances identical ({ties} with tied scores)"))
}

// ---------------------------------------------------------------- 3

fn random_hyperparams(rng: &mut ChaCha8Rng) -> Hyperparams {
    let a = rng.random::<f64>();
    let b = rng.random::<f64>();
    Hyperparams {
        rho_a: rng.random_range(0.001..=1.0),
        rho_r: rng.random_range(0.001..=1.0),
        eta: rng.random_range(0.001..=1.0),
        alpha_min: a.min(b),
        alpha_max: a.max(b),
    }
}

fn budget_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10_000 {
        let n = rng.random_range(1..=5000usize);
        let k = rng.random_range(1..=n);
        let hp = random_hyperparams(&mut rng);
        let s = split_budget(n, k, rng.random(), &hp).map_err(|e| e.to_string())?;
        ensure!(s.k_a + s.n1 + s.n2 == k, "tuple {i}: {s:?} for k={k}");
        ensure!(s.k_a >= 1 && s.k_r >= 1, "tuple {i}: {s:?}");
    }
    for i in 0..1000 {
        let n = rng.random_range(1..=5000usize);
        let k = rng.random_range(1..=n);
        let hp = random_hyperparams(&mut rng);
        let (h1, h2) = (rng.random::<f64>(), rng.random::<f64>());
        let lo = split_budget(n, k, h1.min(h2), &hp).unwrap();
        let hi = split_budget(n, k, h1.max(h2), &hp).unwrap();
        ensure!(lo.n2 <= hi.n2, "pair {i}: n2 {} > {}", lo.n2, hi.n2);
    }
    Ok("10000 tuples conserve k_target; 1000 pairs monotone".into())
}

// ---------------------------------------------------------------- 4

fn entropy_boundaries() -> Outcome {
    let uniform = normalized_entropy(&[0.25; 64]).h;
    let mut one_hot = vec![0.0; 64];
    one_hot[17] = 0.4;
    let spike = normalized_entropy(&one_hot).h;
    let third = normalized_entropy(&[0.5, 0.25, 0.25]).h;
    ensure!((uniform - 1.0).abs() <= 1e-9, "uniform {uniform}");
    ensure!(spike.abs() <= 1e-9, "one-hot {spike}");
    ensure!((third - 0.946395).abs() <= 1e-6, "[0.5,0.25,0.25] gives {third}");
    Ok(format!("uniform {uniform:.12}, one-hot {spike:.12}, case {third:.6}"))
}

// ---------------------------------------------------------------- 5

fn split_boundaries() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hp = Hyperparams::default();
    let n = 1_000_000;
    for _ in 0..1000 {
        let k = rng.random_range(1..=200_000usize);
        let k_rest = k - (4 * k) / 5;
        let lo = split_budget(n, k, 0.0, &hp).unwrap();
        let hi = split_budget(n, k, 1.0, &hp).unwrap();
        ensure!(lo.k_rest == k_rest, "k_rest {} vs {k_rest}", lo.k_rest);
        ensure!(lo.n2 == 5 * k_rest / 100, "H=0, k_rest {k_rest}: n2 {}", lo.n2);
        ensure!(hi.n2 == 60 * k_rest / 100, "H=1, k_rest {k_rest}: n2 {}", hi.n2);
    }
    Ok("1000 random k_rest match floor(0.05 k_rest) and floor(0.60 k_rest)".into())
}

// ---------------------------------------------------------------- 6, 7

const ARR_LAYERS: usize = 6;
const ARR_PRUNE: usize = 2;

fn null_curves(samples: u64) -> Result<Vec<Vec<f64>>, String> {
    use rayon::prelude::*;
    (0..samples)
        .into_par_iter()
        .map(|seed| {
            let spec = SynthSpec::new(2, 576, ARR_LAYERS, 1, seed);
            let b = generate(&spec).map_err(|e| e.to_string())?;
            let scores: Vec<Vec<f64>> = (0..ARR_LAYERS)
                .map(|l| pool_global(&b.attention(l).unwrap()).unwrap())
                .collect();
            Ok(arr_curve(&scores, ARR_PRUNE, 128).map_err(|e| e.to_string())?.per_layer)
        })
        .collect()
}

fn arr_null() -> Outcome {
    let curves = null_curves(2000)?;
    let mut means = Vec::new();
    for j in 1..curves[0].len() {
        let m = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
        ensure!(
            (m - 128.0 / 576.0).abs() <= 0.010,
            "layer {}: mean ARR {m}",
            ARR_PRUNE + j
        );
        means.push(format!("{m:.4}"));
    }
    Ok(format!(
        "2000 samples, layers {}..{}: [{}] vs 0.2222",
        ARR_PRUNE + 1,
        ARR_LAYERS - 1,
        means.join(", ")
    ))
}

fn arr_prune_zero() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=80usize);
        let layers = rng.random_range(1..=5usize);
        let prune = rng.random_range(0..layers);
        let k = rng.random_range(1..n);
        // Coarse values force many ties.
        let scores: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..n).map(|_| rng.random_range(0..4) as f64).collect())
            .collect();
        let c = arr_curve(&scores, prune, k).map_err(|e| e.to_string())?;
        ensure!(c.per_layer[0] == 0.0, "prune-layer ARR {}", c.per_layer[0]);
        cases += 1;
    }
    for per_layer in null_curves(50)? {
        ensure!(per_layer[0] == 0.0, "synthetic prune-layer ARR {}", per_layer[0]);
        cases += 1;
    }
    Ok(format!("{cases} inputs, all exactly 0"))
}

// ---------------------------------------------------------------- 8

fn savgol_exactness() -> Outcome {
    let quad: Vec<f64> = (0..31).map(|i| 0.3 * (i * i) as f64 - 2.0 * i as f64 + 5.0).collect();
    let sq = savgol_smooth(&quad, 7, 2).map_err(|e| e.to_string())?;
    let interior = (3..28).map(|i| (sq[i] - quad[i]).abs()).fold(0.0, f64::max);
    let constant = vec![0.42; 31];
    let sc = savgol_smooth(&constant, 7, 2).unwrap();
    let const_err = sc.iter().zip(&constant).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let linear: Vec<f64> = (0..31).map(|i| 0.7 - 0.05 * i as f64).collect();
    let sl = savgol_smooth(&linear, 7, 2).unwrap();
    let lin_err = sl.iter().zip(&linear).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(interior <= 1e-9, "quadratic interior error {interior}");
    ensure!(const_err <= 1e-9, "constant error {const_err}");
    ensure!(lin_err <= 1e-9, "linear error {lin_err}");
    Ok(format!(
        "max errors: quadratic {interior:.1e}, constant {const_err:.1e}, linear {lin_err:.1e}"
    ))
}

// ---------------------------------------------------------------- 9

fn random_bundle(seed: u64) -> TensorBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SynthSpec {
        concentration: [0.0, 0.7, 4.0, f64::INFINITY][rng.random_range(0..4)],
        ..SynthSpec::new(
            rng.random_range(1..6),
            rng.random_range(1..40),
            rng.random_range(1..5),
            rng.random_range(1..9),
            seed,
        )
    };
    let mut b = generate(&spec).unwrap();
    b.sample_id = format!("rand-{seed}-é");
    if rng.random_bool(0.5) {
        let len = rng.random_range(1..20);
        let values: Vec<f32> = (0..len)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
            .collect();
        b.insert("extra/raw", DenseTensor::new(vec![len], values).unwrap());
    }
    b
}

fn bits(b: &TensorBundle) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    b.tensors
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                t.shape().to_vec(),
                t.values().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn bundle_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..100 {
        let b = random_bundle(seed);
        let path = dir.path().join(format!("{seed}.ctb"));
        write_bundle(&b, &path).map_err(|e| format!("bundle {seed}: {e}"))?;
        let back = read_bundle(&path).map_err(|e| format!("bundle {seed}: {e}"))?;
        ensure!(bits(&back) == bits(&b), "bundle {seed}: payload bits differ");
        ensure!(
            (back.sample_id.as_str(), back.n_text, back.n_visual, back.n_layers)
                == (b.sample_id.as_str(), b.n_text, b.n_visual, b.n_layers),
            "bundle {seed}: header differs"
        );
    }
    let expect = [
        ("bad_magic.ctb", "BadMagic"),
        ("truncated.ctb", "TruncatedPayload"),
        ("nonfinite.ctb", "NonFiniteValue"),
    ];
    for (file, kind) in expect {
        let bytes = std::fs::read(fixture(file)).map_err(|e| e.to_string())?;
        match decode_bundle(&bytes) {
            Err(e) => ensure!(e.kind() == kind, "{file}: {e}"),
            Ok(_) => return Err(format!("{file} decoded")),
        }
    }
    ensure!(
        matches!(read_bundle(fixture("bad_magic.ctb")), Err(BundleError::BadMagic(_))),
        "bad magic via path"
    );
    Ok("100 bundles bit-exact; corrupted fixtures raise BadMagic/TruncatedPayload/NonFiniteValue".into())
}

// ---------------------------------------------------------------- 10

fn golden_end_to_end() -> Outcome {
    let bundle = read_bundle(fixture("golden16.ctb")).map_err(|e| e.to_string())?;
    let cfg = PruneConfig::from_json(&std::fs::read_to_string(fixture("golden16_config.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("golden16_expected.json")).unwrap()).unwrap();
    let trace = run_schedule(&bundle, &cfg).map_err(|e| e.to_string())?;
    let want: Vec<usize> = serde_json::from_value(expected["survivors"].clone()).unwrap();
    ensure!(trace.survivors == want, "survivors {:?} vs {want:?}", trace.survivors);
    for (stage, exp) in trace.stages.iter().zip(expected["stages"].as_array().unwrap()) {
        let r = &stage.routing;
        for (field, got) in [
            ("anchors", &r.anchors),
            ("references", &r.references),
            ("top_n1", &r.top_n1),
            ("bottom_n2", &r.bottom_n2),
            ("kept", &r.kept),
        ] {
            let want: Vec<usize> = serde_json::from_value(exp[field].clone()).unwrap();
            ensure!(got == &want, "layer {} {field}: {got:?} vs {want:?}", stage.layer);
        }
    }
    Ok(format!("survivors {:?}", trace.survivors))
}

// ----------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
    limit: Option<Duration>,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "dense FLOPs",
            run: dense_flops,
            limit: Some(Duration::from_secs(1)),
        },
        Criterion {
            id: 2,
            name: "routing oracle",
            run: routing_oracle,
            limit: Some(Duration::from_secs(30)),
        },
        Criterion {
            id: 3,
            name: "budget conservation",
            run: budget_conservation,
            limit: None,
        },
        Criterion {
            id: 4,
            name: "entropy boundaries",
            run: entropy_boundaries,
            limit: None,
        },
        Criterion {
            id: 5,
            name: "split boundaries",
            run: split_boundaries,
            limit: None,
        },
        Criterion {
            id: 6,
            name: "ARR null model",
            run: arr_null,
            limit: Some(Duration::from_secs(60)),
        },
        Criterion {
            id: 7,
            name: "ARR prune-layer zero",
            run: arr_prune_zero,
            limit: None,
        },
        Criterion {
            id: 8,
            name: "Savitzky-Golay exactness",
            run: savgol_exactness,
            limit: None,
        },
        Criterion {
            id: 9,
            name: "bundle round-trip",
            run: bundle_round_trip,
            limit: None,
        },
        Criterion {
            id: 10,
            name: "golden end-to-end",
            run: golden_end_to_end,
            limit: None,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f)
        {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!(
            "[{tag}] criterion {:>2} {:<26} {:>9.2?}  {detail}",
            c.id, c.name, elapsed
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
