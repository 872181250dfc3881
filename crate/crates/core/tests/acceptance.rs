//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steer_sae::analysis::dictionary_similarity;
use steer_sae::data::Dataset;
use steer_sae::ksae::preactivations;
use steer_sae::presets::{preset, CLIP_WIDTH, LAMBDA_SWEEP};
use steer_sae::steering::{
    steer, steer_array, EncoderMode, SteerRequest, Variant,
};
use steer_sae::trainer::{
    load_checkpoint, save_checkpoint, train_dataset, write_metrics_log, TrainConfig, TrainOutput,
};
use steer_sae::{
    backward, encode_topk, forward_loss, generate_synthetic, init_params, npy, EmbeddingMatrix, KSaeConfig,
    KSaeParams, SyntheticData, SyntheticSpec,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Sparsity invariant

/// Reference TopK: full sort by value descending, index ascending.
fn topk_oracle(pre: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pre.len()).filter(|&j| pre[j] > 0.0).collect();
    idx.sort_by(|&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn sparsity_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a5a);
    let mut violations = 0usize;
    let mut ties_seen = 0usize;
    for call in 0..10_000 {
        let d = rng.random_range(1..=8);
        let expansion = rng.random_range(1..=4);
        let n = d * expansion;
        let k = rng.random_range(1..=n);
        let rows = rng.random_range(1..=4);
        // Half the calls draw from a coarse grid so exact ties are common.
        let coarse = call % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if coarse {
                rng.random_range(-2i32..=2) as f32 * 0.5
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let mut p = KSaeParams::<f32>::zeros(d, n);
        p.w_enc.mapv_inplace(|_| draw(&mut rng));
        p.b_enc.mapv_inplace(|_| draw(&mut rng));
        p.b_pre.mapv_inplace(|_| draw(&mut rng));
        let x = Array2::from_shape_fn((rows, d), |_| draw(&mut rng));
        let cfg = KSaeConfig::new(d, expansion, k, 0, 0.0);

        let z = encode_topk(&p, &cfg, x.view()).expect("valid instance");
        let pre = preactivations(&p, x.view()).expect("valid instance");
        for (r, code) in z.codes.iter().enumerate() {
            let row: Vec<f32> = pre.row(r).to_vec();
            if coarse {
                // Grid values make the pre-activation exact; recompute it directly.
                for (j, &v) in row.iter().enumerate() {
                    let direct: f32 = (0..d).map(|i| p.w_enc[[j, i]] * (x[[r, i]] - p.b_pre[i])).sum::<f32>() + p.b_enc[j];
                    if direct != v {
                        violations += 1;
                    }
                }
                let mut sorted = row.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if k < n && sorted[k - 1] > 0.0 && sorted[k - 1] == sorted[k] {
                    ties_seen += 1;
                }
            }
            let expect = topk_oracle(&row, k);
            let ok = code.len() <= k
                && code.values.iter().all(|&v| v > 0.0)
                && code.indices == expect
                && code.indices.iter().zip(&code.values).all(|(&j, &v)| v == row[j]);
            if !ok {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0 && ties_seen > 0,
        format!("10000 calls, {violations} violations, {ties_seen} rows with a tie at the k-th slot"),
    )
}

// ---------------------------------------------------------------------------
// Gradient correctness

struct Instance {
    p: KSaeParams<f64>,
    cfg: KSaeConfig,
    x: Array2<f64>,
    dead: Vec<bool>,
    mean: Array1<f64>,
}

fn random_instance(seed: u64) -> Instance {
    let cfg = KSaeConfig::new(4, 2, 2, 2, 1.0 / 32.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |s: f64| rng.random_range(-s..s);
    let mut p = KSaeParams::<f64>::zeros(4, 8);
    p.w_enc.mapv_inplace(|_| u(1.0));
    p.b_enc.mapv_inplace(|_| u(0.3));
    p.w_dec.mapv_inplace(|_| u(1.0));
    p.b_pre.mapv_inplace(|_| u(0.5));
    let x = Array2::from_shape_fn((4, 4), |_| u(2.0));
    let mean = Array1::from_shape_fn(4, |_| u(0.2));
    let dead: Vec<bool> = (0..8).map(|_| u(1.0) > 0.0).collect();
    Instance { p, cfg, x, dead, mean }
}

/// Straight-line scalar loss, written independently of the library.
fn scalar_loss(inst: &Instance, p: &KSaeParams<f64>) -> f64 {
    let (d, n, k, k_aux) = (inst.cfg.d, inst.cfg.n(), inst.cfg.k, inst.cfg.k_aux);
    let select = |pre: &[f64], allowed: &dyn Fn(usize) -> bool, kk: usize| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).filter(|&j| allowed(j) && pre[j] > 0.0).collect();
        idx.sort_by(|&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b)));
        let mut z = vec![0.0; n];
        for &j in idx.iter().take(kk) {
            z[j] = pre[j];
        }
        z
    };
    let any_dead = inst.dead.iter().any(|&b| b);
    let (mut se, mut sa, mut den) = (0.0, 0.0, 0.0);
    for r in 0..inst.x.nrows() {
        let mut pre = vec![0.0; n];
        for j in 0..n {
            let mut s = p.b_enc[j];
            for i in 0..d {
                s += p.w_enc[[j, i]] * (inst.x[[r, i]] - p.b_pre[i]);
            }
            pre[j] = s;
        }
        let z = select(&pre, &|_| true, k);
        let za = select(&pre, &|j| inst.dead[j], k_aux);
        for i in 0..d {
            let mut xh = p.b_pre[i];
            let mut eh = 0.0;
            for j in 0..n {
                xh += p.w_dec[[i, j]] * z[j];
                eh += p.w_dec[[i, j]] * za[j];
            }
            let e = inst.x[[r, i]] - xh;
            se += e * e;
            sa += (e - eh) * (e - eh);
            let c = inst.x[[r, i]] - inst.mean[i];
            den += c * c;
        }
    }
    let aux = if any_dead && k_aux > 0 { sa / den } else { 0.0 };
    se / den + inst.cfg.alpha * aux
}

/// Smallest distance of any selection decision from flipping: pre-activations
/// near zero, and the gap between the last selected and first rejected value.
fn decision_margin(inst: &Instance) -> f64 {
    let pre = preactivations(&inst.p, inst.x.view()).unwrap();
    let mut margin = f64::INFINITY;
    for row in pre.rows() {
        for &v in row {
            margin = margin.min(v.abs());
        }
        for (allowed, kk) in [(None, inst.cfg.k), (Some(&inst.dead), inst.cfg.k_aux)] {
            let mut vals: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > 0.0 && allowed.is_none_or(|m| m[j]))
                .map(|(_, &v)| v)
                .collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            if vals.len() > kk && kk > 0 {
                margin = margin.min(vals[kk - 1] - vals[kk]);
            }
        }
    }
    margin
}

fn coordinates(p: &mut KSaeParams<f64>) -> Vec<&mut f64> {
    p.w_enc
        .iter_mut()
        .chain(p.b_enc.iter_mut())
        .chain(p.w_dec.iter_mut())
        .chain(p.b_pre.iter_mut())
        .collect()
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-5;
    const MARGIN: f64 = 1e-3;
    let start = Instant::now();
    let mut accepted = 0;
    let mut seed = 0u64;
    let mut worst = 0f64;
    while accepted < 25 && seed < 10_000 {
        let inst = random_instance(seed);
        seed += 1;
        if decision_margin(&inst) < MARGIN || !inst.dead.iter().any(|&b| b) {
            continue;
        }
        accepted += 1;
        let fwd = forward_loss(&inst.p, &inst.cfg, inst.x.view(), &inst.dead, inst.mean.view()).unwrap();
        let mut analytic = backward(&inst.p, &inst.cfg, inst.x.view(), &fwd).unwrap();
        let analytic: Vec<f64> = coordinates(&mut analytic).into_iter().map(|v| *v).collect();
        let count = analytic.len();
        for c in 0..count {
            let mut plus = inst.p.clone();
            *coordinates(&mut plus)[c] += H;
            let mut minus = inst.p.clone();
            *coordinates(&mut minus)[c] -= H;
            let fd = (scalar_loss(&inst, &plus) - scalar_loss(&inst, &minus)) / (2.0 * H);
            let a = analytic[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        accepted >= 20 && worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!(
            "{accepted} instances, max relative error {worst:.2e} (limit 1e-5), {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Training helpers

fn recovery_data(seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        dim: 16,
        atoms: 32,
        sparsity: 3,
        samples: 50_000,
        noise_std: 0.01,
        seed,
        active_atoms: None,
    })
    .unwrap()
}

fn recovery_config() -> (KSaeConfig, TrainConfig) {
    let ksae = KSaeConfig::new(16, 2, 3, 8, 1.0 / 32.0);
    let train = TrainConfig {
        lr: 4e-4,
        batch_size: 256,
        total_steps: 2000,
        seed: 1,
        ..Default::default()
    };
    (ksae, train)
}

fn recovery_run() -> (SyntheticData, TrainOutput) {
    let data = recovery_data(7);
    let (ksae, train) = recovery_config();
    let ds = Arc::new(Dataset::new(data.samples.clone(), 3));
    let out = train_dataset(ds, &ksae, &train, |_, _| {}).unwrap();
    (data, out)
}

fn unit_norm_constraint() -> Outcome {
    let data = recovery_data(21);
    let (ksae, mut train) = recovery_config();
    train.total_steps = 500;
    let ds = Arc::new(Dataset::new(data.samples, 5));
    let mut worst = 0f64;
    let mut steps = 0;
    let result = train_dataset(ds, &ksae, &train, |_, p| {
        steps += 1;
        for norm in p.decoder_column_norms() {
            worst = worst.max((norm - 1.0).abs());
        }
    });
    outcome(
        result.is_ok() && steps == 500 && worst <= 1e-6,
        format!("{steps} steps observed, max | ||W_dec[:, j]|| - 1 | = {worst:.2e} (limit 1e-6)"),
    )
}

fn dictionary_recovery(data: &SyntheticData, out: &TrainOutput, elapsed: Duration) -> Outcome {
    let mse = out.metrics.last().map_or(f32::INFINITY, |m| m.loss_mse);
    let sim = dictionary_similarity(&out.checkpoint.params, &data.dictionary).unwrap();
    outcome(
        f64::from(mse) < 0.1 && sim >= 0.9 && elapsed < Duration::from_secs(300),
        format!(
            "final loss_mse {mse:.4} (limit < 0.1), dictionary_similarity {sim:.4} (limit >= 0.9), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn aux_efficacy() -> Outcome {
    // Half of the atoms are never sampled; the sampled half spans a proper
    // subspace of the embedding space.
    let data = generate_synthetic(&SyntheticSpec {
        dim: 32,
        atoms: 64,
        sparsity: 3,
        samples: 50_000,
        noise_std: 0.01,
        seed: 11,
        active_atoms: Some(32),
    })
    .unwrap();
    let ds = Arc::new(Dataset::new(data.samples, 11));
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=3u64 {
        let dead = |alpha: f64| {
            let ksae = KSaeConfig::new(32, 2, 3, 24, alpha);
            let train = TrainConfig {
                batch_size: 256,
                total_steps: 2000,
                seed,
                ..Default::default()
            };
            train_dataset(Arc::clone(&ds), &ksae, &train, |_, _| {})
                .unwrap()
                .metrics
                .last()
                .unwrap()
                .dead_count
        };
        let (with_aux, without) = (dead(1.0 / 32.0), dead(0.0));
        pass &= with_aux < without;
        lines.push(format!("seed {seed}: {with_aux} vs {without}"));
    }
    outcome(pass, format!("dead latents alpha=1/32 vs alpha=0: {}", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// Steering

fn random_model(d: usize, expansion: usize, k: usize, seed: u64) -> (KSaeParams<f32>, KSaeConfig) {
    let cfg = KSaeConfig::new(d, expansion, k, 0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = Array2::from_shape_fn((8, d), |_| rng.random_range(-1.0f32..1.0));
    let mut p = init_params(&cfg, sample.view(), seed).unwrap();
    p.b_enc.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
    (p, cfg)
}

fn random_tokens(rows: usize, d: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0f32..1.0))
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn steering_algebra() -> Outcome {
    let (p, cfg) = random_model(24, 4, 6, 3);
    let x = random_tokens(7, 24, 4);
    let xc = random_tokens(7, 24, 5);

    let (same, off0) = steer_array(&p, &cfg, x.view(), xc.view(), 0.0, EncoderMode::ReluOnly, Variant::Full).unwrap();
    let identity = same.iter().zip(x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) && off0.iter().all(|&v| v == 0.0);

    let p64 = p.cast::<f64>();
    let x64 = x.mapv(f64::from);
    let xc64 = xc.mapv(f64::from);
    let (_, unit) = steer_array(&p64, &cfg, x64.view(), xc64.view(), 1.0, EncoderMode::ReluOnly, Variant::Full).unwrap();
    let mut linearity = 0f64;
    for &lambda in &LAMBDA_SWEEP {
        let (_, off) = steer_array(&p, &cfg, x.view(), xc.view(), lambda, EncoderMode::ReluOnly, Variant::Full).unwrap();
        let expected = unit.mapv(|v| f64::from(lambda) * v);
        let rel = frob(&(off.mapv(f64::from) - &expected)) / frob(&expected);
        linearity = linearity.max(rel);
    }

    let full_k = KSaeConfig { k: cfg.n(), ..cfg.clone() };
    let mut topk_equal = true;
    for &lambda in &LAMBDA_SWEEP {
        let (a, _) = steer_array(&p, &full_k, x.view(), xc.view(), lambda, EncoderMode::TopK, Variant::Full).unwrap();
        let (b, _) = steer_array(&p, &full_k, x.view(), xc.view(), lambda, EncoderMode::ReluOnly, Variant::Full).unwrap();
        topk_equal &= a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    outcome(
        identity && linearity <= 1e-6 && topk_equal,
        format!(
            "lambda=0 bitwise identity {identity}, max linearity error {linearity:.2e} (limit 1e-6), topk(k=n)==relu bitwise {topk_equal}"
        ),
    )
}

/// `x_C - (W_dec ReLU(W_enc (x_C - b_pre) + b_enc) + b_pre)` by scalar loops.
fn error_oracle(p: &KSaeParams<f64>, xc: &Array2<f64>) -> Array2<f64> {
    let (d, n) = (p.d(), p.n());
    let mut out = Array2::zeros(xc.dim());
    for r in 0..xc.nrows() {
        let mut a = vec![0.0; n];
        for j in 0..n {
            let mut s = p.b_enc[j];
            for i in 0..d {
                s += p.w_enc[[j, i]] * (xc[[r, i]] - p.b_pre[i]);
            }
            a[j] = s.max(0.0);
        }
        for i in 0..d {
            let mut recon = p.b_pre[i];
            for j in 0..n {
                recon += p.w_dec[[i, j]] * a[j];
            }
            out[[r, i]] = xc[[r, i]] - recon;
        }
    }
    out
}

fn variant_decomposition() -> Outcome {
    // [I; -I] encoder with [I, -I] decoder reconstructs every input exactly.
    let d = 6;
    let cfg = KSaeConfig::new(d, 2, 2 * d, 0, 0.0);
    let mut exact = KSaeParams::<f32>::zeros(d, 2 * d);
    for i in 0..d {
        exact.w_enc[[i, i]] = 1.0;
        exact.w_enc[[d + i, i]] = -1.0;
        exact.w_dec[[i, i]] = 1.0;
        exact.w_dec[[i, d + i]] = -1.0;
    }
    exact.b_pre = Array1::from_shape_fn(d, |i| 0.1 * i as f32 - 0.2);
    let x = random_tokens(5, d, 8);
    let xc = random_tokens(5, d, 9);
    let mut v3_err = 0f64;
    for &lambda in &LAMBDA_SWEEP {
        let req = SteerRequest {
            variant: Variant::V3,
            ..SteerRequest::new(
                EmbeddingMatrix::from_array(x.clone()).unwrap(),
                EmbeddingMatrix::from_array(xc.clone()).unwrap(),
                lambda,
            )
        };
        let got = steer(&exact, &cfg, &req).unwrap().x_steered.to_array().mapv(f64::from);
        let expected = x.mapv(f64::from) + &xc.mapv(|v| f64::from(lambda) * f64::from(v));
        v3_err = v3_err.max((got - expected).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }

    let mut decomposition_err = 0f64;
    for seed in 0..10 {
        let (p, cfg) = random_model(12, 3, 4, 100 + seed);
        let p64 = p.cast::<f64>();
        let x = random_tokens(4, 12, 200 + seed).mapv(f64::from);
        let xc = random_tokens(4, 12, 300 + seed).mapv(f64::from);
        let error = error_oracle(&p64, &xc);
        for &lambda in &LAMBDA_SWEEP {
            let lambda = f64::from(lambda);
            let (full, _) = steer_array(&p64, &cfg, x.view(), xc.view(), lambda, EncoderMode::ReluOnly, Variant::Full).unwrap();
            let (v2, _) = steer_array(&p64, &cfg, x.view(), xc.view(), lambda, EncoderMode::ReluOnly, Variant::V2).unwrap();
            let term = error.mapv(|e| -lambda * e);
            let diff = &full - &v2 - &term;
            decomposition_err = decomposition_err.max(diff.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
    }
    outcome(
        v3_err <= 1e-6 && decomposition_err <= 1e-6,
        format!(
            "exact model: |v3 - (x + lambda x_C)| max {v3_err:.2e}; random models: |(full - v2) - (-lambda Error)| max {decomposition_err:.2e} (limit 1e-6)"
        ),
    )
}

fn concept_steering(data: &SyntheticData, out: &TrainOutput) -> Outcome {
    let p = &out.checkpoint.params;
    let cfg = &out.checkpoint.ksae;
    let d = cfg.d;
    let monotone_for = |atom: usize| -> (bool, Vec<f64>) {
        let a = data.atom(atom);
        let concept = EmbeddingMatrix::new(1, d, a.iter().map(|v| 2.0 * v).collect()).unwrap();
        let x = EmbeddingMatrix::new(1, d, data.samples.row(0).to_vec()).unwrap();
        let mut grid = LAMBDA_SWEEP.to_vec();
        grid.sort_by(f32::total_cmp);
        let proj: Vec<f64> = grid
            .iter()
            .map(|&lambda| {
                let res = steer(p, cfg, &SteerRequest::new(x.clone(), concept.clone(), lambda)).unwrap();
                res.x_steered.row(0).iter().zip(&a).map(|(&u, &v)| f64::from(u) * f64::from(v)).sum()
            })
            .collect();
        let up = proj.windows(2).all(|w| w[1] > w[0]);
        let down = proj.windows(2).all(|w| w[1] < w[0]);
        (up || down, proj)
    };
    let (pass, proj) = monotone_for(0);
    let all = (0..data.dictionary.dim()).filter(|&j| monotone_for(j).0).count();
    let shown: Vec<String> = proj.iter().map(|v| format!("{v:.4}")).collect();
    outcome(
        pass,
        format!(
            "atom 0 projection over sorted lambda grid [{}]; strictly monotone for {all}/{} atoms",
            shown.join(", "),
            data.dictionary.dim()
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism, formats, throughput

fn files_equal(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    names == other && names.iter().all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap())
}

fn determinism(first: &TrainOutput) -> Outcome {
    let (_, second) = recovery_run();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&first.checkpoint, &a).unwrap();
    save_checkpoint(&second.checkpoint, &b).unwrap();
    write_metrics_log(&first.metrics, a.join("metrics.jsonl")).unwrap();
    write_metrics_log(&second.metrics, b.join("metrics.jsonl")).unwrap();
    let same = files_equal(&a, &b);
    outcome(same, format!("two {}-step runs, checkpoint and metrics files byte-identical: {same}", first.metrics.len()))
}

fn format_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dir = tempfile::tempdir().unwrap();
    let mut npy_ok = true;
    for (rows, cols) in [(1, 1), (3, 5), (77, 768), (1000, 3)] {
        let mut values: Vec<f32> = Vec::with_capacity(rows * cols);
        while values.len() < rows * cols {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                values.push(v);
            }
        }
        values[0] = -0.0;
        let m = EmbeddingMatrix::new(rows, cols, values).unwrap();
        let path = dir.path().join(format!("{rows}x{cols}.npy"));
        npy::write_array(&m, &path).unwrap();
        let back = npy::read_array(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        npy_ok &= back.rows() == rows
            && back.dim() == cols
            && back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits())
            && (bytes.len() - rows * cols * 4).is_multiple_of(64);
    }

    let (p, cfg) = random_model(8, 4, 3, 13);
    let ckpt = steer_sae::trainer::Checkpoint {
        ksae: KSaeConfig { k_aux: 5, alpha: 1.0 / 32.0, ..cfg },
        train: TrainConfig::default(),
        step: 123,
        provenance: "acceptance".into(),
        running_mean: p.b_pre.clone(),
        params: p,
        norm_violation: None,
    };
    let path = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let ckpt_ok = load_checkpoint(&path).unwrap() == ckpt;

    let (k, t) = preset("paper-unsafe").unwrap().resolve(CLIP_WIDTH);
    let preset_ok = k.k == 32
        && k.expansion_factor == 4
        && k.n() == 3072
        && k.k_aux == 256
        && k.alpha == 1.0 / 32.0
        && t.batch_size == 4096
        && t.lr == 4e-4
        && t.total_steps == 10_000;
    outcome(
        npy_ok && ckpt_ok && preset_ok,
        format!("npy round trip {npy_ok}, checkpoint round trip {ckpt_ok}, preset constants {preset_ok}"),
    )
}

fn throughput() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (p, cfg) = random_model(CLIP_WIDTH, 4, 32, 31);
    let x = EmbeddingMatrix::from_array(random_tokens(77, CLIP_WIDTH, 32)).unwrap();
    let xc = EmbeddingMatrix::from_array(random_tokens(77, CLIP_WIDTH, 33)).unwrap();
    let req = SteerRequest::new(x, xc, -0.5);
    let mut times: Vec<Duration> = pool.install(|| {
        steer(&p, &cfg, &req).unwrap();
        (0..7)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(steer(&p, &cfg, &req).unwrap());
                t.elapsed()
            })
            .collect()
    });
    times.sort();
    let median = times[times.len() / 2];
    outcome(
        median <= Duration::from_millis(50),
        format!(
            "77x768 prompt, n={}, one worker thread: median {:.1} ms (limit 50 ms)",
            cfg.n(),
            median.as_secs_f64() * 1e3
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("sparsity invariant", sparsity_invariant());
    record("gradient correctness", gradient_correctness());
    record("unit-norm constraint", unit_norm_constraint());
    let start = Instant::now();
    let (data, run) = recovery_run();
    let elapsed = start.elapsed();
    record("dictionary recovery", dictionary_recovery(&data, &run, elapsed));
    record("auxiliary-loss efficacy", aux_efficacy());
    record("steering algebra", steering_algebra());
    record("variant decomposition", variant_decomposition());
    record("synthetic concept steering", concept_steering(&data, &run));
    record("determinism", determinism(&run));
    record("format fidelity", format_fidelity());
    record("steering throughput", throughput());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
