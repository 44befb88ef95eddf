//! `clora`: train, verify and report on collaborative low-rank adapters.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration or I/O error,
//! 4 a verification ran and failed. Failures print one line
//! `error: kind=<kind> msg=<message>` to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clora_core::checkpoint::{self, ModelCheckpoint};
use clora_core::linalg::{seeded_rng, DEFAULT_RANK_TOL};
use clora_core::lrm::{param_count, rank_audit, AdapterBank, AdapterConfig, Variant};
use clora_core::sade::{complexity_table, Backbone, DEFAULT_TOKENS, TABLE_BATCHES};
use clora_core::train::{
    ablate, build_adapters, parse_key_values, set_vit_field, train, AblationRow, Regularizer,
    SyntheticTask, TaskSpec, TrainConfig,
};
use clora_core::verify::{gradient_check, merge_check, toy_config};
use clora_core::vit::{AttachMode, Placement, VitConfig, VitWeights};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "clora",
    version,
    about = "Collaborative low-rank adaptation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune adapters and head on a synthetic task.
    Train(TrainArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Compare adapted and merged forward passes on a random model.
    VerifyMerge(VerifyMergeArgs),
    /// Finite-difference check of the full objective's adapter gradients.
    GradCheck(GradCheckArgs),
    /// Numerical rank of ΔW against its bound on random banks.
    RankAudit(RankAuditArgs),
    /// Trainable scalar count of an adapter configuration.
    CountParams(CountParamsArgs),
    /// Cost reduction of the weight-space regularizer over the token-level one.
    ComplexityReport(ComplexityArgs),
    /// Inspect or round-trip CLORA1 checkpoints.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory for file artifacts.
    #[arg(long, env = "CLORA_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "L")]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Patch tokens per sample.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Plain-text key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Batch size.
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training samples in the synthetic task.
    #[arg(long)]
    train_size: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Train the head only, without adapters.
    #[arg(long)]
    head_only: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Seeds per variant, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MergeMode {
    PreBlock,
    QvUpdate,
    Both,
}

#[derive(Args, Debug)]
struct VerifyMergeArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long = "L", default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, value_enum, default_value_t = MergeMode::Both)]
    mode: MergeMode,
    #[arg(long, default_value_t = 20)]
    inputs: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegArg {
    None,
    Rsr,
    Sr,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long = "L", default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value_t = 2)]
    r: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = RegArg::Rsr)]
    regularizer: RegArg,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct RankAuditArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 6)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    p: usize,
    #[arg(long, default_value = "clora")]
    variant: String,
    /// Random banks to audit.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct CountParamsArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value = "clora")]
    variant: String,
    /// Prediction-head parameters added to the count.
    #[arg(long, default_value_t = 0)]
    c: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    /// vit-base, vit-large or vit-huge; repeatable. All three by default.
    #[arg(long)]
    backbone: Vec<String>,
    /// Batch sizes; repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    b: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_TOKENS)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand, Debug)]
enum CheckpointCommand {
    /// List the tensors in a checkpoint.
    Inspect { path: PathBuf },
    /// Save and reload a checkpoint and compare every tensor bit for bit.
    /// Without a path, a random model with adapters is used.
    Roundtrip {
        path: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

enum Failure {
    Error(clora_core::Error),
    Verify(String),
}

impl From<clora_core::Error> for Failure {
    fn from(e: clora_core::Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("error: kind=verification msg={}", one_line(&msg));
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace('\n', " ")
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::VerifyMerge(a) => cmd_verify_merge(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::RankAudit(a) => cmd_rank_audit(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::ComplexityReport(a) => cmd_complexity(a),
        Command::Checkpoint(c) => cmd_checkpoint(c),
    }
}

fn out_dir(out: &OutArg) -> Result<Option<&Path>, Failure> {
    match &out.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.as_path()))
        }
        None => Ok(None),
    }
}

/// Desk-scale defaults, then the config file, then explicit flags.
fn resolve(
    flags: &TrainFlags,
    layers_default: usize,
    train_default: usize,
    epochs_default: usize,
) -> Result<(TrainConfig, VitConfig, TaskSpec), Failure> {
    let mut config = TrainConfig {
        p: 2,
        r: 4,
        epochs: epochs_default,
        warmup_epochs: epochs_default / 10,
        ..TrainConfig::default()
    };
    let mut vit = VitConfig {
        d: 32,
        layers: layers_default,
        heads: 4,
        n: 16,
        patch_dim: 12,
        ffn_hidden: 64,
        classes: 2,
    };
    let mut train_size = train_default;
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)?;
        for (key, value) in parse_key_values(&text)? {
            if key == "train_size" {
                train_size = value.parse().map_err(|_| {
                    clora_core::Error::Config(format!("bad value {value:?} for `train_size`"))
                })?;
            } else if !config.set(&key, &value)? && !set_vit_field(&mut vit, &key, &value)? {
                return Err(
                    clora_core::Error::Config(format!("unknown config key `{key}`")).into(),
                );
            }
        }
    }
    config.seed = flags.seed;
    if let Some(v) = flags.p {
        config.p = v;
    }
    if let Some(v) = flags.r {
        config.r = v;
    }
    if let Some(v) = flags.alpha {
        config.alpha = v;
    }
    if let Some(v) = flags.b {
        config.batch = v;
    }
    if let Some(v) = flags.lr {
        config.lr = v;
    }
    if let Some(v) = flags.epochs {
        config.epochs = v;
        config.warmup_epochs = config.warmup_epochs.min(v);
    }
    if let Some(v) = flags.train_size {
        train_size = v;
    }
    if let Some(v) = flags.model.d {
        vit.d = v;
        vit.ffn_hidden = 2 * v;
    }
    if let Some(v) = flags.model.layers {
        vit.layers = v;
    }
    if let Some(v) = flags.model.heads {
        vit.heads = v;
    }
    if let Some(v) = flags.model.n {
        vit.n = v;
    }
    config.validate()?;
    vit.validate()?;
    let task = TaskSpec {
        train: train_size,
        seed: flags.seed,
        ..TaskSpec::separable(vit.n, vit.patch_dim, flags.seed)
    };
    Ok((config, vit, task))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (mut config, vit, spec) = resolve(&a.flags, 2, 512, 30)?;
    if a.head_only {
        config.insert_mha = false;
        config.insert_ffn = false;
    }
    let task = SyntheticTask::generate(spec)?;
    let weights = VitWeights::init(vit, &mut seeded_rng(a.flags.seed.wrapping_add(1)))?;
    let adapters = build_adapters(&config, &vit)?;
    let result = train(&task, &weights, adapters, &config)?;
    let test_acc =
        clora_core::train::evaluate(&result.weights, result.adapters.as_ref(), &task.test)?;
    let adapter_scalars = result
        .adapters
        .as_ref()
        .map_or(0, |ad| ad.bank.scalar_count());

    println!(
        "epochs={} final_train_loss={:.6}",
        result.history.len(),
        result.history.last().map_or(f64::NAN, |r| r.train_loss)
    );
    println!(
        "val_acc={:.4} test_acc={:.4}",
        result.final_val_acc(),
        test_acc
    );
    println!("trainable_params={}", adapter_scalars + vit.head_params());
    println!(
        "backbone_digest={} unchanged={}",
        result.digest_after,
        result.digest_before == result.digest_after
    );
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("history.csv"), result.history_csv())?;
        ModelCheckpoint {
            weights: result.weights.clone(),
            adapters: result.adapters.clone(),
        }
        .save(&dir.join("model.clora"))?;
        println!("wrote {}", dir.display());
    } else {
        print!("{}", result.history_csv());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let (config, vit, spec) = resolve(&a.flags, 3, 256, 15)?;
    let task = SyntheticTask::generate(spec)?;
    let weights = VitWeights::init(vit, &mut seeded_rng(a.flags.seed.wrapping_add(1)))?;
    let seeds: Vec<u64> = (0..a.seeds).map(|s| a.flags.seed + s).collect();
    let rows = ablate(&task, &weights, &config, &seeds)?;
    let mut csv = String::from(AblationRow::csv_header());
    for row in &rows {
        csv.push_str(&row.csv_line());
    }
    println!(
        "{:<10} {:>4} {:>4} {:>5} {:>8} {:>9} {:>14}",
        "variant", "MHA", "FFN", "SADE", "params", "val_acc", "reg_flops"
    );
    for row in &rows {
        let mark = |b: bool| if b { "yes" } else { "no" };
        println!(
            "{:<10} {:>4} {:>4} {:>5} {:>8} {:>9.4} {:>14}",
            row.variant.name,
            mark(row.mha_modules > 0),
            mark(row.ffn_modules > 0),
            mark(row.regularizer != Regularizer::None),
            row.param_count,
            row.mean_val_acc,
            row.regularizer_flops.total()
        );
    }
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("ablation.csv"), csv)?;
        println!("wrote {}", dir.join("ablation.csv").display());
    }
    Ok(())
}

fn cmd_verify_merge(a: VerifyMergeArgs) -> CmdResult {
    let config = toy_config(a.d, a.layers, a.heads);
    let modes: &[AttachMode] = match a.mode {
        MergeMode::PreBlock => &[AttachMode::PreBlock],
        MergeMode::QvUpdate => &[AttachMode::QvUpdate],
        MergeMode::Both => &[AttachMode::PreBlock, AttachMode::QvUpdate],
    };
    let mut failed = Vec::new();
    for &mode in modes {
        let report = merge_check(config, mode, a.r, a.p, a.inputs, a.seed)?;
        println!(
            "mode={:?} inputs={} max_rel_err={:.3e} merged_flops={} frozen_flops={} flops_equal={}",
            mode,
            report.inputs,
            report.max_rel_err,
            report.merged_flops.total(),
            report.frozen_flops.total(),
            report.flops_equal()
        );
        if report.max_rel_err.is_nan() || report.max_rel_err >= a.tol || !report.flops_equal() {
            failed.push(format!("{mode:?}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "merge check failed for {}",
            failed.join(",")
        )))
    }
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let reg = match a.regularizer {
        RegArg::None => Regularizer::None,
        RegArg::Rsr => Regularizer::Rsr,
        RegArg::Sr => Regularizer::Sr,
    };
    let report = gradient_check(
        toy_config(a.d, a.layers, 2.min(a.d)),
        a.p,
        a.r,
        a.alpha,
        reg,
        a.seed,
    )?;
    println!(
        "checked={} loss={:.6} max_rel_err={:.3e}",
        report.checked, report.loss, report.max_rel_err
    );
    if report.max_rel_err < a.tol {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "gradient relative error {:.3e} >= {}",
            report.max_rel_err, a.tol
        )))
    }
}

fn cmd_rank_audit(a: RankAuditArgs) -> CmdResult {
    let variant: Variant = a.variant.parse()?;
    let config = AdapterConfig {
        d: a.d,
        r: a.r,
        m: a.m,
        p: a.p,
        variant,
    };
    let mut rng = seeded_rng(a.seed);
    let mut violations = 0;
    for trial in 0..a.trials {
        let bank = AdapterBank::random(&config, &mut rng)?;
        let ranks = (0..bank.m())
            .map(|j| rank_audit(&bank, j, a.tol))
            .collect::<clora_core::Result<Vec<_>>>()?;
        let bound = bank.rank_bound();
        let max = ranks.iter().map(|r| r.rank).max().unwrap_or(0);
        violations += ranks.iter().filter(|r| !r.ok).count();
        println!(
            "trial={} variant={} bound={} ranks={} at_bound={}",
            trial + 1,
            variant,
            bound,
            ranks
                .iter()
                .map(|r| r.rank.to_string())
                .collect::<Vec<_>>()
                .join(","),
            max == bound
        );
    }
    if violations == 0 {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "{violations} modules exceed their rank bound"
        )))
    }
}

fn cmd_count_params(a: CountParamsArgs) -> CmdResult {
    let variant: Variant = a.variant.parse()?;
    let count = param_count(
        &AdapterConfig {
            d: a.d,
            r: a.r,
            m: a.m,
            p: a.p,
            variant,
        },
        a.c,
    )?;
    println!("{count}");
    Ok(())
}

fn cmd_complexity(a: ComplexityArgs) -> CmdResult {
    let backbones = if a.backbone.is_empty() {
        Backbone::ALL.to_vec()
    } else {
        a.backbone
            .iter()
            .map(|s| s.parse())
            .collect::<clora_core::Result<Vec<Backbone>>>()?
    };
    let batches = if a.b.is_empty() {
        TABLE_BATCHES.to_vec()
    } else {
        a.b.clone()
    };
    let rows = complexity_table(&backbones, &batches, a.n)?;
    let cell = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{v:.1}%"));
    let mut text = String::new();
    match a.format {
        Format::Text => {
            let _ = write!(text, "{:<10} {:>5} {:>9}", "backbone", "d", "threshold");
            for b in &batches {
                let _ = write!(text, " {:>7}", format!("b={b}"));
            }
            text.push('\n');
            for row in &rows {
                let _ = write!(
                    text,
                    "{:<10} {:>5} {:>9.2}",
                    row.backbone.label(),
                    row.d,
                    row.threshold
                );
                for &(_, r) in &row.reductions {
                    let _ = write!(text, " {:>7}", cell(r));
                }
                text.push('\n');
            }
        }
        Format::Csv => {
            text.push_str("backbone,d,n,threshold,b,reduction_percent\n");
            for row in &rows {
                for &(b, r) in &row.reductions {
                    let value = r.map_or("-".to_string(), |v| format!("{v:.1}"));
                    let _ = writeln!(
                        text,
                        "{},{},{},{:.2},{},{}",
                        row.backbone.label(),
                        row.d,
                        row.n,
                        row.threshold,
                        b,
                        value
                    );
                }
            }
        }
    }
    print!("{text}");
    if let Some(dir) = out_dir(&a.out)? {
        let name = match a.format {
            Format::Text => "complexity.txt",
            Format::Csv => "complexity.csv",
        };
        fs::write(dir.join(name), &text)?;
    }
    Ok(())
}

fn cmd_checkpoint(c: CheckpointCommand) -> CmdResult {
    match c {
        CheckpointCommand::Inspect { path } => {
            let tensors = checkpoint::load(&path)?;
            for (name, m) in &tensors {
                println!("{name}\t{}x{}", m.rows(), m.cols());
            }
            println!(
                "tensors={} scalars={}",
                tensors.len(),
                tensors.iter().map(|(_, m)| m.len()).sum::<usize>()
            );
            Ok(())
        }
        CheckpointCommand::Roundtrip { path, seed, out } => {
            let tensors = match &path {
                Some(p) => checkpoint::load(p)?,
                None => random_model(seed)?.to_tensors(),
            };
            let bytes = checkpoint::to_bytes(&tensors)?;
            let back = match out_dir(&out)? {
                Some(dir) => {
                    let file = dir.join("roundtrip.clora");
                    fs::write(&file, &bytes)?;
                    checkpoint::load(&file)?
                }
                None => checkpoint::from_bytes(&bytes)?,
            };
            let exact = tensors.len() == back.len()
                && tensors.iter().zip(&back).all(|((n1, m1), (n2, m2))| {
                    n1 == n2
                        && m1.shape() == m2.shape()
                        && m1
                            .data()
                            .iter()
                            .zip(m2.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                });
            println!(
                "tensors={} bytes={} bit_exact={}",
                tensors.len(),
                bytes.len(),
                exact
            );
            if exact {
                Ok(())
            } else {
                Err(Failure::Verify(
                    "checkpoint round trip changed tensor bits".into(),
                ))
            }
        }
    }
}

fn random_model(seed: u64) -> clora_core::Result<ModelCheckpoint> {
    let vit = toy_config(16, 2, 2);
    let mut rng = seeded_rng(seed);
    let weights = VitWeights::init(vit, &mut rng)?;
    let bank = AdapterBank::random(
        &AdapterConfig {
            d: vit.d,
            r: 2,
            m: 2 * vit.layers,
            p: 2,
            variant: Variant::Clora,
        },
        &mut rng,
    )?;
    let adapters =
        clora_core::vit::Adapters::new(bank, AttachMode::PreBlock, Placement::BOTH, &vit)?;
    Ok(ModelCheckpoint {
        weights,
        adapters: Some(adapters),
    })
}
