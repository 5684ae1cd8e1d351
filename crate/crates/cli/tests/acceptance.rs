//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use convattn::io::{self, Model};
use convattn::rank::{verify_lower_bound, RankSetting};
use convattn::two_phase::{
    backward, forward_loss, full_mask, run_two_phase, transfer, AttnClassifier, Batch, Classifier, ConvClassifier,
    LinearHead, TwoPhaseConfig,
};
use convattn::{
    conv2d, conv_to_mhsa, evaluate_converted, evaluate_converted_traced, head_count, image_max_abs_diff,
    AttentionHead, BoundaryMode, ConvKernel, Image, Matrix, MhsaWeights, PatchGeometry, Real, RelativeBiasTable,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_kernel<T: Real>(rng: &mut ChaCha8Rng, k: usize, di: usize, dout: usize) -> ConvKernel<T> {
    ConvKernel::from_fn(k, di, dout, |_, _, _, _| T::from_f64(rng.random_range(-1.0..1.0))).unwrap()
}

fn random_image<T: Real>(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image<T> {
    Image::from_fn(h, w, c, |_, _, _| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Max |MHSA − conv| over `images` random images, in f64 and f32.
fn equivalence_diffs(rng: &mut ChaCha8Rng, k: usize, p: usize, di: usize, dout: usize, side: usize, images: usize) -> (f64, f64, usize) {
    let kernel = random_kernel::<f64>(rng, k, di, dout);
    let m64 = conv_to_mhsa(&kernel, p, 40.0, BoundaryMode::Phantom).unwrap();
    let k32 = kernel.cast::<f32>();
    let m32 = conv_to_mhsa(&k32, p, 40.0, BoundaryMode::Phantom).unwrap();
    let (mut d64, mut d32) = (0.0f64, 0.0f64);
    for _ in 0..images {
        let img = random_image::<f64>(rng, side, side, di);
        let got = evaluate_converted(&m64, &img).unwrap();
        d64 = d64.max(image_max_abs_diff(&got, &conv2d(&img, &kernel).unwrap(), None).unwrap());
        let img32 = img.cast::<f32>();
        let got = evaluate_converted(&m32, &img32).unwrap();
        d32 = d32.max(image_max_abs_diff(&got, &conv2d(&img32, &k32).unwrap(), None).unwrap());
    }
    (d64, d32, m64.num_heads())
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut w64, mut w32, mut cells) = (0.0f64, 0.0f64, 0);
    for k in [1, 3, 5, 7] {
        for p in [2, 4, 8, 16] {
            if k >= 2 * p {
                continue;
            }
            for di in [1, 3] {
                for dout in [1, 3] {
                    let (d64, d32, _) = equivalence_diffs(&mut rng, k, p, di, dout, 32, 10);
                    ensure(d64 <= 1e-8 && d32 <= 1e-4, || {
                        format!("K={k} P={p} D_in={di} D_out={dout}: f64 {d64:.2e}, f32 {d32:.2e}")
                    })?;
                    w64 = w64.max(d64);
                    w32 = w32.max(d32);
                    cells += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    ensure(t <= Duration::from_secs(120), || format!("took {t:.1?}"))?;
    Ok(format!("{cells} cells x 10 images, max diff f64 {w64:.2e}, f32 {w32:.2e}, {t:.1?}"))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for k in [3, 5] {
        for (di, dout) in [(1, 1), (3, 1), (1, 3), (3, 3)] {
            let (d64, d32, n_h) = equivalence_diffs(&mut rng, k, 1, di, dout, 12, 10);
            ensure(n_h == k * k, || format!("K={k}: N_H = {n_h}, expected {}", k * k))?;
            ensure(d64 <= 1e-8 && d32 <= 1e-4, || format!("K={k}: f64 {d64:.2e}, f32 {d32:.2e}"))?;
            w64 = w64.max(d64);
            w32 = w32.max(d32);
        }
    }
    Ok(format!("P=1, K in {{3,5}}, N_H = K^2, max diff f64 {w64:.2e}, f32 {w32:.2e}"))
}

fn criterion_3() -> Check {
    for k in [3, 5, 7] {
        let n = head_count(k, 16).map_err(|e| e.to_string())?;
        ensure(n == 9, || format!("head_count({k}, 16) = {n}"))?;
    }
    // A 1×1 kernel never leaves its own patch: the formula gives a single head,
    // within the 9-head budget that covers every K < 2P.
    let n = head_count(1, 16).map_err(|e| e.to_string())?;
    ensure(n == 1, || format!("head_count(1, 16) = {n}"))?;
    let n = head_count(5, 1).map_err(|e| e.to_string())?;
    ensure(n == 25, || format!("head_count(5, 1) = {n}"))?;
    Ok("N_H = 9 for K in {3,5,7} at P=16 (K=1 needs 1 <= 9), N_H = 25 at K=5, P=1".into())
}

/// Lowest attention mass on the target key over all rows whose target exists.
fn min_target_mass<T: Real>(rows: usize, cols: usize) -> f64 {
    let grid = PatchGeometry::from_grid(rows, cols, 1).unwrap();
    let n = grid.len();
    let mut worst = 1.0f64;
    let mut scores = vec![T::zero(); n];
    for tr in -1..=1isize {
        for tc in -1..=1isize {
            let table = convattn::build_hard_bias::<T>((tr, tc), grid, 40.0).unwrap();
            for q in 0..n {
                let (qr, qc) = grid.coords(q);
                let (kr, kc) = (qr as isize + tr, qc as isize + tc);
                if kr < 0 || kc < 0 || kr >= rows as isize || kc >= cols as isize {
                    continue;
                }
                for (key, s) in scores.iter_mut().enumerate() {
                    let (r, c) = grid.coords(key);
                    *s = table.get(qr as isize - r as isize, qc as isize - c as isize).unwrap();
                }
                let probs = convattn::softmax_row(&scores);
                worst = worst.min(probs[grid.token(kr as usize, kc as usize)].as_f64());
            }
        }
    }
    worst
}

fn criterion_4() -> Check {
    let mut worst = 1.0f64;
    for (r, c) in [(1, 1), (2, 2), (14, 14), (32, 32), (64, 64), (16, 256)] {
        worst = worst.min(min_target_mass::<f64>(r, c)).min(min_target_mass::<f32>(r, c));
    }
    // Through a full converted layer: every head's row on the padded 16×16 grid.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = conv_to_mhsa(&random_kernel::<f64>(&mut rng, 3, 1, 1), 2, 40.0, BoundaryMode::Phantom).unwrap();
    let trace = evaluate_converted_traced(&model, &random_image(&mut rng, 28, 28, 1)).unwrap();
    let grid = trace.attended_grid;
    for (h, probs) in trace.attention.probs.iter().enumerate() {
        let (tr, tc) = model.offsets().offsets()[h];
        for q in 0..grid.len() {
            let (qr, qc) = grid.coords(q);
            let (kr, kc) = (qr as isize + tr, qc as isize + tc);
            if kr < 0 || kc < 0 || kr >= grid.grid_rows() as isize || kc >= grid.grid_cols() as isize {
                continue;
            }
            worst = worst.min(probs.get(q, grid.token(kr as usize, kc as usize)));
        }
    }
    ensure(worst >= 1.0 - 1e-6, || format!("minimum target mass {worst}"))?;
    Ok(format!("M=40, up to 4096 keys, minimum target mass 1 - {:.1e}", 1.0 - worst))
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_rel = f64::INFINITY;
    let mut max_r9 = 0.0f64;
    for trial in 0..50 {
        let k = random_kernel::<f64>(&mut rng, 3, 16, 1);
        let r8 = verify_lower_bound(RankSetting::Pixel, &k, 8).map_err(|e| e.to_string())?;
        let r9 = verify_lower_bound(RankSetting::Pixel, &k, 9).map_err(|e| e.to_string())?;
        ensure(r8.rank == 9, || format!("trial {trial}: rank {}", r8.rank))?;
        ensure(r8.residual > 1e-6 * r8.sigma_max, || format!("trial {trial}: residual(8) {:.2e}", r8.relative_residual))?;
        ensure(r9.residual <= 1e-10 * r9.sigma_max, || format!("trial {trial}: residual(9) {:.2e}", r9.relative_residual))?;
        min_rel = min_rel.min(r8.relative_residual);
        max_r9 = max_r9.max(r9.relative_residual);
    }
    let t = start.elapsed();
    ensure(t <= Duration::from_secs(10), || format!("took {t:.1?}"))?;
    Ok(format!("50/50 rank 9, min residual(8)/s1 {min_rel:.2e}, max residual(9)/s1 {max_r9:.1e}, {t:.1?}"))
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut min_rel = f64::INFINITY;
    for p in [3, 4, 8] {
        for trial in 0..50 {
            let k = ConvKernel::<f64>::from_fn(3, 1, 1, |_, _, _, _| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .unwrap();
            let r = verify_lower_bound(RankSetting::Patch { patch: p }, &k, 8).map_err(|e| e.to_string())?;
            ensure(r.rank == 9 && r.certified_gap, || {
                format!("P={p} trial {trial}: rank {}, residual(8)/s1 {:.2e}", r.rank, r.relative_residual)
            })?;
            min_rel = min_rel.min(r.relative_residual);
        }
    }
    let t = start.elapsed();
    ensure(t <= Duration::from_secs(30), || format!("took {t:.1?}"))?;
    Ok(format!("150/150 rank 9 with certified gap, min residual(8)/s1 {min_rel:.2e}, {t:.1?}"))
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_head(rng: &mut ChaCha8Rng, features: usize) -> LinearHead<f64> {
    LinearHead::new(rand_matrix(rng, features, 2), vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).unwrap()
}

fn grad_error<M: Classifier<f64> + Clone>(model: &M, b: &Batch<'_, f64>) -> f64 {
    let h = 1e-5;
    let (_, grads) = backward(model, b, &full_mask()).unwrap();
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (*id, p.len())).collect();
    let loss_at = |t: usize, i: usize, d: f64| {
        let mut m = model.clone();
        m.params_mut()[t].1[i] += d;
        forward_loss(&m, b).unwrap().loss
    };
    let mut worst = 0.0f64;
    for (t, (id, len)) in ids.into_iter().enumerate() {
        let a = grads.get(id).unwrap();
        let n: Vec<f64> = (0..len).map(|i| (loss_at(t, i, h) - loss_at(t, i, -h)) / (2.0 * h)).collect();
        let diff = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
        worst = worst.max(if scale < 1e-7 { diff } else { diff / scale });
    }
    worst
}

fn criterion_7() -> Check {
    let (mut conv_worst, mut attn_worst) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let imgs: Vec<Image<f64>> = (0..3).map(|_| random_image(&mut rng, 4, 4, 1)).collect();
        let batch = Batch {
            images: imgs.iter().collect(),
            labels: (0..3).map(|_| rng.random_range(0..2)).collect(),
        };
        let conv = ConvClassifier::new(random_kernel(&mut rng, 3, 1, 2), rand_head(&mut rng, 2)).unwrap();
        conv_worst = conv_worst.max(grad_error(&conv, &batch));

        let phantom = seed % 2 == 0;
        let rings = usize::from(phantom);
        let radius = 1 + 2 * rings;
        let side = 2 * radius + 1;
        let heads = (0..9)
            .map(|_| AttentionHead {
                w_q: rand_matrix(&mut rng, 4, 4),
                w_k: rand_matrix(&mut rng, 4, 4),
                w_v: rand_matrix(&mut rng, 4, 4),
                bias: RelativeBiasTable::new(radius, radius, rand_matrix(&mut rng, side, side).into_vec()).unwrap(),
            })
            .collect();
        let mhsa = MhsaWeights::new(heads, rand_matrix(&mut rng, 36, 8)).unwrap();
        let mode = if phantom { BoundaryMode::Phantom } else { BoundaryMode::Strict };
        let attn = AttnClassifier::new(mhsa, rand_head(&mut rng, 2), 2, mode, rings).unwrap();
        attn_worst = attn_worst.max(grad_error(&attn, &batch));
    }
    ensure(conv_worst <= 1e-4 && attn_worst <= 1e-4, || {
        format!("relative error conv {conv_worst:.2e}, attention {attn_worst:.2e}")
    })?;
    Ok(format!("20 seeds, worst relative error conv {conv_worst:.1e}, attention {attn_worst:.1e}"))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn default_config() -> TwoPhaseConfig {
    let text = std::fs::read_to_string(workspace_root().join("configs/default.json")).unwrap();
    TwoPhaseConfig::from_json(&text).unwrap()
}

fn criterion_8() -> Check {
    let cfg = default_config();
    let start = Instant::now();
    let out = run_two_phase::<f64>(&cfg).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let again = run_two_phase::<f64>(&cfg).map_err(|e| e.to_string())?;
    let r = &out.report;
    ensure(r == &again.report, || "reruns differ".into())?;
    ensure(r.transfer.passed, || format!("transfer check failed: {:?}", r.transfer))?;
    let p1 = r.phase1.last().unwrap();
    let p2_start = &r.phase2[0];
    let p2 = r.phase2.last().unwrap();
    let gap = (p1.val_loss - p2_start.val_loss).abs();
    ensure(gap <= 1e-4, || format!("phase-2 epoch-0 val loss differs by {gap:.2e}"))?;
    ensure(p2.val_acc >= p1.val_acc - 0.01, || format!("val acc {} -> {}", p1.val_acc, p2.val_acc))?;
    ensure(t <= Duration::from_secs(300), || format!("took {t:.1?}"))?;
    Ok(format!(
        "val loss gap {gap:.1e}, val acc {:.2} -> {:.2} (baseline {:.2}), {t:.1?}",
        p1.val_acc, p2.val_acc, r.baseline_val_acc
    ))
}

fn golden_kernel<T: Real>() -> ConvKernel<T> {
    ConvKernel::from_fn(3, 2, 3, |x, y, i, j| {
        T::from_f64(((x * 31 + y * 17 + i * 5 + j * 3) % 23) as f64 / 8.0 - 1.25)
    })
    .unwrap()
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kernel = random_kernel::<f64>(&mut rng, 5, 2, 3);
    let conv = ConvClassifier::init(&mut rng, 3, 2, 3, 4).unwrap();
    let attn = transfer(&conv, 2, 40.0, BoundaryMode::Phantom, 8, 8).unwrap();
    let mut mhsa = attn.mhsa.clone();
    for h in mhsa.heads_mut() {
        h.w_q = rand_matrix(&mut rng, 8, 8);
    }
    let models = vec![
        Model::Kernel(kernel.clone()),
        Model::Mhsa(mhsa),
        Model::Converted(conv_to_mhsa(&kernel, 4, 40.0, BoundaryMode::Strict).unwrap()),
        Model::ConvClassifier(conv),
        Model::AttnClassifier(attn),
    ];
    for m in &models {
        let bytes = io::to_bytes(m).map_err(|e| e.to_string())?;
        let back = io::from_bytes::<f64>(&bytes).map_err(|e| e.to_string())?;
        ensure(&back == m, || format!("{} round trip differs", m.kind().name()))?;
        ensure(io::to_bytes(&back).unwrap() == bytes, || format!("{} re-save differs", m.kind().name()))?;
    }
    let m32 = Model::Converted(conv_to_mhsa(&kernel.cast::<f32>(), 2, 40.0, BoundaryMode::Phantom).unwrap());
    let b32 = io::to_bytes(&m32).unwrap();
    ensure(io::from_bytes::<f32>(&b32).unwrap() == m32, || "f32 round trip differs".into())?;

    let data = workspace_root().join("crates/core/tests/data");
    let k = golden_kernel::<f64>();
    let golden: [(&str, Model<f64>); 2] = [
        ("golden_kernel_f64.c2a", Model::Kernel(k.clone())),
        ("golden_converted_f64.c2a", Model::Converted(conv_to_mhsa(&k, 2, 40.0, BoundaryMode::Phantom).unwrap())),
    ];
    for (name, expected) in &golden {
        let loaded = io::load::<f64>(data.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(&loaded == expected, || format!("{name} differs from the reference model"))?;
    }
    let g32 = Model::Converted(conv_to_mhsa(&golden_kernel::<f32>(), 4, 40.0, BoundaryMode::Strict).unwrap());
    let loaded = io::load::<f32>(data.join("golden_converted_f32.c2a")).map_err(|e| e.to_string())?;
    ensure(loaded == g32, || "golden_converted_f32.c2a differs".into())?;
    Ok("5 model kinds bit-exact, 3 golden archives load with zero diffs".into())
}

struct Run {
    code: i32,
    stdout: String,
}

fn cli(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_convattn"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
    }
}

fn summary(run: &Run) -> Result<Value, String> {
    let line = run.stdout.trim_end();
    ensure(!line.contains('\n'), || format!("more than one stdout line: {line}"))?;
    ensure(line.ends_with("\"ok\":true}") || line.ends_with("\"ok\":false}"), || {
        format!("summary does not end with ok: {line}")
    })?;
    serde_json::from_str(line).map_err(|e| format!("bad JSON {line}: {e}"))
}

fn expect(args: &[&str], code: i32) -> Result<Value, String> {
    let a = cli(args);
    let v = summary(&a)?;
    ensure(a.code == code, || format!("`{}` exited {}, expected {code}: {}", args.join(" "), a.code, a.stdout))?;
    ensure(v["ok"] == Value::Bool(code == 0), || format!("`{}` ok flag mismatch", args.join(" ")))?;
    let b = cli(args);
    ensure(a.stdout == b.stdout && a.code == b.code, || format!("`{}` is not deterministic", args.join(" ")))?;
    Ok(v)
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n).display().to_string();
    let mut checked = 0;
    let mut run = |args: &[&str], code: i32| -> Result<Value, String> {
        checked += 1;
        expect(args, code)
    };

    let v = run(&["head-count", "--kernel", "3", "--patch", "16"], 0)?;
    ensure(v["N_H"] == 9, || format!("{v}"))?;
    let v = run(&["head-count", "--kernel", "5", "--patch", "1"], 0)?;
    ensure(v["N_H"] == 25, || format!("{v}"))?;
    let v = run(&["head-count", "--kernel", "4", "--patch", "16"], 2)?;
    ensure(v["error"].as_str().unwrap_or("").contains("kernel size must be odd"), || format!("{v}"))?;
    run(&["head-count", "--kernel", "3", "--patch", "16", "--bogus"], 2)?;
    run(&["no-such-command"], 2)?;

    let (k3, k5, kid) = (p("k3.c2a"), p("k5.c2a"), p("kid.c2a"));
    run(&["--seed", "3", "make-kernel", "--kernel", "3", "--in-channels", "2", "--out-channels", "2", "--out", &k3], 0)?;
    let v = run(&["convert", "--in", &k3, "--patch", "16", "--out", &p("m3.c2a")], 0)?;
    ensure(v["N_H"] == 9, || format!("{v}"))?;
    let h = io::peek(p("m3.c2a")).map_err(|e| e.to_string())?;
    ensure(h.metadata.num_heads == Some(9), || "archive N_H".into())?;

    run(&["make-kernel", "--kernel", "3", "--in-channels", "2", "--out-channels", "2", "--kind", "identity", "--out", &kid], 0)?;
    run(&["convert", "--in", &kid, "--patch", "4", "--out", &p("mid.c2a")], 0)?;
    let v = run(&["verify", "--conv", &kid, "--mhsa", &p("mid.c2a"), "--height", "16", "--width", "16", "--trials", "3", "--tol", "1e-6"], 0)?;
    ensure(v["maxAbsDiff"].as_f64().unwrap_or(1.0) <= 1e-6, || format!("{v}"))?;

    let f32_args = ["--dtype", "f32", "--seed", "5"];
    let with = |extra: &[&str]| -> Vec<String> { f32_args.iter().chain(extra).map(|s| s.to_string()).collect() };
    let call = |v: Vec<String>| v;
    let mk = call(with(&["make-kernel", "--kernel", "5", "--in-channels", "3", "--out-channels", "2", "--out", &k5]));
    run(&mk.iter().map(String::as_str).collect::<Vec<_>>(), 0)?;
    for (mode, name) in [("phantom", "m5p.c2a"), ("strict", "m5s.c2a")] {
        let a = with(&["convert", "--in", &k5, "--patch", "16", "--boundary", mode, "--out", &p(name)]);
        run(&a.iter().map(String::as_str).collect::<Vec<_>>(), 0)?;
    }
    let verify = |mhsa: &str, tol: &str, extra: &[&str]| -> Vec<String> {
        let mut a = with(&["verify", "--conv", &k5, "--mhsa", mhsa, "--height", "64", "--width", "64", "--trials", "20", "--tol", tol]);
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    };
    let cases = [
        (verify(&p("m5p.c2a"), "1e-4", &[]), 0),
        (verify(&p("m5s.c2a"), "1e-4", &[]), 1),
        (verify(&p("m5s.c2a"), "1e-4", &["--interior-only"]), 0),
        (verify(&p("m5p.c2a"), "0", &[]), 1),
    ];
    for (args, code) in &cases {
        run(&args.iter().map(String::as_str).collect::<Vec<_>>(), *code)?;
    }
    run(&["convert", "--in", &p("missing.c2a"), "--patch", "4", "--out", &p("x.c2a")], 2)?;
    run(&["--dtype", "f64", "convert", "--in", &k5, "--patch", "4", "--out", &p("x.c2a")], 2)?;

    let v = run(&["rank-bound", "--setting", "pixel", "--kernel", "3", "--dim", "16", "--heads", "8"], 0)?;
    ensure(v["certifiedGapFraction"] == 1.0, || format!("{v}"))?;
    let v = run(&["rank-bound", "--setting", "pixel", "--kernel", "3", "--dim", "16", "--heads", "9"], 0)?;
    ensure(v["certifiedGapFraction"] == 0.0, || format!("{v}"))?;
    let v = run(&["rank-bound", "--setting", "patch", "--kernel", "3", "--patch", "4", "--heads", "8"], 0)?;
    ensure(v["rank"] == 9 && v["certifiedGapFraction"] == 1.0, || format!("{v}"))?;
    run(&["rank-bound", "--setting", "patch", "--kernel", "3", "--dim", "4", "--heads", "8"], 2)?;

    std::fs::write(p("bad.json"), "{ \"configVersion\": 1, ").unwrap();
    run(&["train", "--config", &p("bad.json"), "--out-dir", &p("t0")], 2)?;
    let mut cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(workspace_root().join("configs/default.json")).unwrap()).unwrap();
    cfg["dataset"]["samples"] = 80.into();
    cfg["phase1"]["epochs"] = 3.into();
    cfg["phase2"]["epochs"] = 0.into();
    std::fs::write(p("small.json"), cfg.to_string()).unwrap();
    let v = run(&["train", "--config", &p("small.json"), "--out-dir", &p("t1")], 0)?;
    ensure(v["phase1ValAcc"] == v["phase2ValAcc"] && v["transferPassed"] == true, || format!("{v}"))?;
    let p1 = std::fs::read_to_string(dir.path().join("t1/phase1.jsonl")).unwrap();
    let p2 = std::fs::read_to_string(dir.path().join("t1/phase2.jsonl")).unwrap();
    ensure(p2.lines().count() == 1 && p1.lines().count() == 4, || "metric log lengths".into())?;
    let last: Value = serde_json::from_str(p1.lines().last().unwrap()).unwrap();
    let first: Value = serde_json::from_str(p2.lines().next().unwrap()).unwrap();
    let gap = (last["valLoss"].as_f64().unwrap() - first["valLoss"].as_f64().unwrap()).abs();
    ensure(gap <= 1e-4 && last["valAcc"] == first["valAcc"], || format!("{last} vs {first}"))?;
    for name in ["conv_classifier.c2a", "attn_classifier.c2a", "report.json"] {
        ensure(dir.path().join("t1").join(name).exists(), || format!("missing {name}"))?;
    }
    Ok(format!("{checked} invocations with expected exit codes, each repeated with identical output"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("equivalence grid", criterion_1),
        ("pixel special case", criterion_2),
        ("head-count table", criterion_3),
        ("hard attention", criterion_4),
        ("pixel lower bound", criterion_5),
        ("patch lower bound", criterion_6),
        ("gradient correctness", criterion_7),
        ("two-phase transfer", criterion_8),
        ("serialization", criterion_9),
        ("cli contract", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
