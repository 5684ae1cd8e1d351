//! `convattn` command-line tool.
//!
//! Every run prints one JSON summary line to stdout whose last field is
//! `"ok"`. Human-readable progress goes to stderr unless `--quiet` is set.
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use convattn::io::{self, Model};
use convattn::rank::{verify_lower_bound, RankSetting};
use convattn::two_phase::{run_two_phase, EpochMetrics, TwoPhaseConfig};
use convattn::{
    conv2d, conv_to_mhsa, evaluate_converted, head_count, image_max_abs_diff, ring_radius, BoundaryMode,
    ConvKernel, DType, Error, Image, Real,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

#[derive(Parser, Debug)]
#[command(name = "convattn", version, about = "Convert convolutions into exactly equivalent self-attention layers")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Floating-point precision of computations and archives.
    #[arg(long, global = true, default_value = "f64")]
    dtype: DType,

    /// Suppress human-readable output on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelKind {
    Random,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Setting {
    Pixel,
    Patch,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the number of heads needed for a K×K kernel on P×P patches.
    HeadCount {
        #[arg(long)]
        kernel: usize,
        #[arg(long)]
        patch: usize,
    },
    /// Write a convolution kernel archive.
    MakeKernel {
        #[arg(long)]
        kernel: usize,
        #[arg(long, default_value_t = 1)]
        in_channels: usize,
        #[arg(long, default_value_t = 1)]
        out_channels: usize,
        #[arg(long, value_enum, default_value = "random")]
        kind: KernelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a kernel archive into an MHSA archive.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = convattn::DEFAULT_BIAS_SCALE)]
        bias_scale: f64,
        #[arg(long, default_value = "phantom")]
        boundary: BoundaryMode,
    },
    /// Compare a kernel with its converted MHSA layer on random images.
    Verify {
        #[arg(long)]
        conv: PathBuf,
        #[arg(long)]
        mhsa: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        tol: f64,
        /// Only compare pixels of patches at least R patches from the border.
        #[arg(long)]
        interior_only: bool,
    },
    /// Check a head-count lower bound over random kernels.
    RankBound {
        #[arg(long, value_enum)]
        setting: Setting,
        #[arg(long)]
        kernel: usize,
        /// Input channels (pixel setting).
        #[arg(long)]
        dim: Option<usize>,
        /// Patch size (patch setting).
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        heads: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Run the two-phase training pipeline from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train-out")]
        out_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::HeadCount { .. } => "head-count",
            Command::MakeKernel { .. } => "make-kernel",
            Command::Convert { .. } => "convert",
            Command::Verify { .. } => "verify",
            Command::RankBound { .. } => "rank-bound",
            Command::Train { .. } => "train",
        }
    }
}

/// Failure that maps to a non-zero exit code.
enum Failure {
    Usage(String),
    Criterion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Criterion(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

struct Outcome {
    fields: Map<String, Value>,
    ok: bool,
}

impl Outcome {
    fn ok(fields: Value) -> Self {
        Self::with(fields, true)
    }

    fn with(fields: Value, ok: bool) -> Self {
        let Value::Object(fields) = fields else {
            unreachable!("summaries are objects")
        };
        Self { fields, ok }
    }
}

struct Ctx {
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn print_summary(command: Option<&str>, mut fields: Map<String, Value>, ok: bool) {
    let mut out = Map::new();
    if let Some(c) = command {
        out.insert("command".into(), c.into());
    }
    out.append(&mut fields);
    out.insert("ok".into(), ok.into());
    println!("{}", Value::Object(out));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.kind().to_string();
            print_summary(None, Map::from_iter([("error".to_string(), Value::from(msg))]), false);
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        quiet: cli.quiet,
    };
    let name = cli.command.name();
    let result = match cli.dtype {
        DType::F32 => run::<f32>(&cli.command, &ctx),
        DType::F64 => run::<f64>(&cli.command, &ctx),
    };
    match result {
        Ok(o) => {
            let ok = o.ok;
            print_summary(Some(name), o.fields, ok);
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(f) => {
            let (msg, code) = match f {
                Failure::Usage(m) => (m, 2),
                Failure::Criterion(m) => (m, 1),
            };
            ctx.say(format!("error: {msg}"));
            print_summary(Some(name), Map::from_iter([("error".to_string(), Value::from(msg))]), false);
            ExitCode::from(code)
        }
    }
}

fn run<T: Real>(cmd: &Command, ctx: &Ctx) -> Result<Outcome, Failure> {
    match cmd {
        Command::HeadCount { kernel, patch } => cmd_head_count(*kernel, *patch, ctx),
        Command::MakeKernel {
            kernel,
            in_channels,
            out_channels,
            kind,
            out,
        } => cmd_make_kernel::<T>(*kernel, *in_channels, *out_channels, *kind, out, ctx),
        Command::Convert {
            input,
            patch,
            out,
            bias_scale,
            boundary,
        } => cmd_convert::<T>(input, *patch, out, *bias_scale, *boundary, ctx),
        Command::Verify {
            conv,
            mhsa,
            height,
            width,
            trials,
            tol,
            interior_only,
        } => cmd_verify::<T>(conv, mhsa, (*height, *width), *trials, *tol, *interior_only, ctx),
        Command::RankBound {
            setting,
            kernel,
            dim,
            patch,
            heads,
            trials,
        } => cmd_rank_bound(*setting, *kernel, *dim, *patch, *heads, *trials, ctx),
        Command::Train { config, out_dir } => cmd_train::<T>(config, out_dir, ctx),
    }
}

fn cmd_head_count(kernel: usize, patch: usize, ctx: &Ctx) -> Result<Outcome, Failure> {
    let r = ring_radius(kernel, patch)?;
    let n = head_count(kernel, patch)?;
    ctx.say(format!("K={kernel} P={patch}: R={r}, N_H={n}"));
    Ok(Outcome::ok(json!({"K": kernel, "P": patch, "R": r, "N_H": n})))
}

fn cmd_make_kernel<T: Real>(
    k: usize,
    din: usize,
    dout: usize,
    kind: KernelKind,
    out: &Path,
    ctx: &Ctx,
) -> Result<Outcome, Failure> {
    let kernel = match kind {
        KernelKind::Identity => {
            if din != dout {
                return Err(Failure::Usage("identity kernels need --in-channels = --out-channels".into()));
            }
            ConvKernel::<T>::identity(k, din)?
        }
        KernelKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            ConvKernel::<T>::from_fn(k, din, dout, |_, _, _, _| T::from_f64(rng.random_range(-1.0..1.0)))?
        }
    };
    io::save(&Model::Kernel(kernel), out)?;
    ctx.say(format!("wrote {k}x{k} kernel ({din} -> {dout} channels) to {}", out.display()));
    Ok(Outcome::ok(json!({
        "K": k,
        "D_in": din,
        "D_out": dout,
        "path": out.display().to_string(),
    })))
}

fn load_kernel<T: Real>(path: &Path) -> Result<ConvKernel<T>, Failure> {
    match io::load::<T>(path)? {
        Model::Kernel(k) => Ok(k),
        Model::ConvClassifier(c) => Ok(c.kernel),
        other => Err(Failure::Usage(format!(
            "{} holds a {} archive, expected a kernel",
            path.display(),
            other.kind().name()
        ))),
    }
}

fn cmd_convert<T: Real>(
    input: &Path,
    patch: usize,
    out: &Path,
    bias_scale: f64,
    boundary: BoundaryMode,
    ctx: &Ctx,
) -> Result<Outcome, Failure> {
    let kernel = load_kernel::<T>(input)?;
    let model = conv_to_mhsa(&kernel, patch, bias_scale, boundary)?;
    let n_h = model.num_heads();
    io::save(&Model::Converted(model), out)?;
    ctx.say(format!(
        "converted K={} kernel at P={patch} into {n_h} heads ({} mode), wrote {}",
        kernel.size(),
        boundary,
        out.display()
    ));
    Ok(Outcome::ok(json!({
        "K": kernel.size(),
        "P": patch,
        "N_H": n_h,
        "M": bias_scale,
        "boundaryMode": boundary.name(),
        "path": out.display().to_string(),
    })))
}

fn cmd_verify<T: Real>(
    conv: &Path,
    mhsa: &Path,
    (height, width): (usize, usize),
    trials: usize,
    tol: f64,
    interior_only: bool,
    ctx: &Ctx,
) -> Result<Outcome, Failure> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Failure::Usage("--tol must be finite and >= 0".into()));
    }
    let kernel = load_kernel::<T>(conv)?;
    let model = match io::load::<T>(mhsa)? {
        Model::Converted(m) => m,
        other => {
            return Err(Failure::Usage(format!(
                "{} holds a {} archive, expected a converted model",
                mhsa.display(),
                other.kind().name()
            )))
        }
    };
    let interior = interior_only.then(|| (model.patch(), model.offsets().radius()));
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut max_diff = 0.0f64;
    for _ in 0..trials {
        let img = Image::<T>::from_fn(height, width, kernel.in_channels(), |_, _, _| {
            T::from_f64(rng.random_range(-1.0..1.0))
        });
        let want = conv2d(&img, &kernel)?;
        let got = evaluate_converted(&model, &img)?;
        max_diff = max_diff.max(image_max_abs_diff(&got, &want, interior)?);
    }
    let ok = trials > 0 && max_diff <= tol;
    ctx.say(format!(
        "{trials} trials on {height}x{width}: max |MHSA - conv| = {max_diff:.3e} (tol {tol:e}) -> {}",
        if ok { "PASS" } else { "FAIL" }
    ));
    Ok(Outcome::with(
        json!({"trials": trials, "maxAbsDiff": max_diff, "tol": tol, "interiorOnly": interior_only}),
        ok,
    ))
}

fn cmd_rank_bound(
    setting: Setting,
    k: usize,
    dim: Option<usize>,
    patch: Option<usize>,
    heads: usize,
    trials: usize,
    ctx: &Ctx,
) -> Result<Outcome, Failure> {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be >= 1".into()));
    }
    let (rank_setting, din, extra) = match (setting, dim, patch) {
        (Setting::Pixel, Some(d), None) => (RankSetting::Pixel, d, ("dim", d)),
        (Setting::Patch, None, Some(p)) => (RankSetting::Patch { patch: p }, 1, ("P", p)),
        (Setting::Pixel, _, _) => return Err(Failure::Usage("pixel setting needs --dim and no --patch".into())),
        (Setting::Patch, _, _) => return Err(Failure::Usage("patch setting needs --patch and no --dim".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut ranks = Vec::with_capacity(trials);
    let mut rel = Vec::with_capacity(trials);
    let mut certified = 0usize;
    for _ in 0..trials {
        let kernel = ConvKernel::<f64>::from_fn(k, din, 1, |_, _, _, _| match setting {
            Setting::Pixel => rng.random_range(-1.0..1.0),
            // Bounded away from zero so every tap is nonzero.
            Setting::Patch => {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            }
        })?;
        let report = verify_lower_bound(rank_setting, &kernel, heads)?;
        ranks.push(report.rank);
        rel.push(report.relative_residual);
        certified += report.certified_gap as usize;
    }
    let fraction = certified as f64 / trials as f64;
    let min_rank = *ranks.iter().min().expect("trials >= 1");
    let max_rank = *ranks.iter().max().expect("trials >= 1");
    let min_rel = rel.iter().copied().fold(f64::INFINITY, f64::min);
    let max_rel = rel.iter().copied().fold(0.0, f64::max);
    let mean_rel = rel.iter().sum::<f64>() / trials as f64;
    ctx.say(format!(
        "{trials} random K={k} kernels, N_H={heads}: rank {min_rank}..{max_rank}, \
         residual/sigma_1 in [{min_rel:.3e}, {max_rel:.3e}], certified gap in {:.1}% of trials",
        100.0 * fraction
    ));
    let mut fields = json!({"setting": match setting { Setting::Pixel => "pixel", Setting::Patch => "patch" }, "K": k});
    fields[extra.0] = extra.1.into();
    let rest = json!({
        "heads": heads,
        "trials": trials,
        "rank": if min_rank == max_rank { Value::from(min_rank) } else { Value::Null },
        "minRank": min_rank,
        "maxRank": max_rank,
        "minRelativeResidual": min_rel,
        "meanRelativeResidual": mean_rel,
        "maxRelativeResidual": max_rel,
        "certifiedGapFraction": fraction,
    });
    if let (Value::Object(a), Value::Object(b)) = (&mut fields, rest) {
        a.extend(b);
    }
    Ok(Outcome::ok(fields))
}

fn write_jsonl(path: &Path, log: &[EpochMetrics]) -> Result<(), Failure> {
    let mut text = String::new();
    for m in log {
        text.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train<T: Real>(config: &Path, out_dir: &Path, ctx: &Ctx) -> Result<Outcome, Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", config.display())))?;
    let cfg = TwoPhaseConfig::from_json(&text)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    ctx.say(format!(
        "two-phase run: {} samples, {}x{}x{}, {} classes; phase 1 {} epochs, phase 2 {} epochs ({})",
        cfg.dataset.samples,
        cfg.dataset.height,
        cfg.dataset.width,
        cfg.dataset.channels,
        cfg.dataset.num_classes,
        cfg.phase1.epochs,
        cfg.phase2.epochs,
        T::DTYPE.name()
    ));
    let start = std::time::Instant::now();
    let out = run_two_phase::<T>(&cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let r = &out.report;
    for (phase, log) in [("phase 1", &r.phase1), ("phase 2", &r.phase2)] {
        for m in log.iter() {
            ctx.say(format!(
                "{phase} epoch {:>3}: train loss {:.4}  val loss {:.4}  val acc {:.3}",
                m.epoch, m.train_loss, m.val_loss, m.val_acc
            ));
        }
    }
    ctx.say(format!("finished in {elapsed:.2} s"));
    ctx.say(format!(
        "transfer: max logit diff {:.3e} (tol {:e}) -> {}",
        r.transfer.max_logit_diff,
        r.transfer.tolerance,
        if r.transfer.passed { "PASS" } else { "FAIL" }
    ));

    write_jsonl(&out_dir.join("phase1.jsonl"), &r.phase1)?;
    write_jsonl(&out_dir.join("phase2.jsonl"), &r.phase2)?;
    io::save(&Model::ConvClassifier(out.conv.clone()), out_dir.join("conv_classifier.c2a"))?;
    io::save(&Model::AttnClassifier(out.attn.clone()), out_dir.join("attn_classifier.c2a"))?;
    let report = serde_json::to_string_pretty(r).expect("report serializes");
    write_file(&out_dir.join("report.json"), report.as_bytes())?;

    let p1 = r.phase1.last().expect("log has epoch 0");
    let p2 = r.phase2.last().expect("log has epoch 0");
    Ok(Outcome::with(
        json!({
            "baselineValAcc": r.baseline_val_acc,
            "phase1ValAcc": p1.val_acc,
            "phase1ValLoss": p1.val_loss,
            "phase2InitialValLoss": r.phase2[0].val_loss,
            "phase2ValAcc": p2.val_acc,
            "phase2ValLoss": p2.val_loss,
            "maxLogitDiff": r.transfer.max_logit_diff,
            "transferPassed": r.transfer.passed,
            "outDir": out_dir.display().to_string(),
        }),
        r.transfer.passed,
    ))
}
