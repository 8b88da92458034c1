//! Command-line orchestration. Every command echoes its arguments into the
//! files it writes so a run can be reproduced exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{emit_curve, AttackMode, AttackScenario, RankedLogits, ScenarioKind};
use crate::attack::{paired_regressions, robust_accuracy, AttackConfig, AttackReport, Norm, TargetRule};
use crate::data::{self, load_mnist, synth_blobs, Dataset, WeightsMeta};
use crate::error::{Error, Result};
use crate::losses::{LossFamily, LossKind};
use crate::nn::{self, PgdTraining, TrainConfig, DESK_ARCH};
use crate::precision::{profile_for, ALL_PROFILES};
use crate::tstar::solve_t_star;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tmifpe", version, about = "Scaled cross-entropy error analysis and PGD attack lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Solve t* for a logit vector and report g and δ_sup per precision.
    Analyze(AnalyzeArgs),
    /// Train a dense classifier with cross-entropy.
    Train(TrainArgs),
    /// Attack a trained model with one loss.
    Attack(AttackArgs),
    /// Attack with every loss and print robust accuracy against CE.
    Compare(CompareArgs),
    /// Write the four scenario error curves as CSV.
    Figure1(Figure1Args),
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Comma-separated logits.
    #[arg(long, allow_hyphen_values = true)]
    pub logits: String,
    /// One of uu, us, tu, ts.
    #[arg(long)]
    pub scenario: String,
    /// True label (untargeted) or target (targeted). Defaults to the argmax
    /// for uu/ts and the runner-up for us/tu.
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct DataArgs {
    /// `synth` or `mnist`.
    #[arg(long, default_value = "synth")]
    pub dataset: String,
    #[arg(long, default_value = "data/mnist")]
    pub mnist_dir: PathBuf,
    /// Keep only the first n samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
}

impl DataArgs {
    /// Training split, or the held-out split when `train` is false. Synthetic
    /// test data uses the next seed.
    pub fn load(&self, train: bool) -> Result<Dataset> {
        let ds = match self.dataset.as_str() {
            "mnist" => load_mnist(&self.mnist_dir, train, None)?,
            "synth" => {
                let seed = if train { self.data_seed } else { self.data_seed.wrapping_add(1) };
                synth_blobs(seed, self.classes, self.per_class, self.dim, self.separation)?
            }
            other => return Err(Error::InvalidConfig(format!("unknown dataset '{other}'"))),
        };
        Ok(match self.limit {
            Some(n) => ds.take(n),
            None => ds,
        })
    }

    fn default_widths(&self) -> Vec<usize> {
        match self.dataset.as_str() {
            "mnist" => DESK_ARCH.to_vec(),
            _ => vec![self.dim, 32, self.classes],
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Layer widths including input and output, e.g. 784,128,64,10.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub sgd_momentum: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on PGD examples with this ℓ∞ radius (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub adv_eps: f32,
    #[arg(long, default_value_t = 5)]
    pub adv_steps: usize,
    /// Defaults to 2.5·eps/steps.
    #[arg(long)]
    pub adv_step_size: Option<f32>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct AttackFlags {
    #[arg(long, default_value = "linf")]
    pub norm: String,
    #[arg(long, default_value_t = 0.3)]
    pub eps: f32,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.75)]
    pub momentum: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub precision: u32,
    #[arg(long, default_value = "untargeted")]
    pub mode: String,
    #[arg(long, default_value = "runner-up")]
    pub target_rule: String,
}

impl AttackFlags {
    pub fn config(&self, family: LossFamily) -> Result<AttackConfig> {
        let mode = match self.mode.as_str() {
            "untargeted" => AttackMode::Untargeted,
            "targeted" => AttackMode::Targeted,
            other => return Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        };
        let config = AttackConfig {
            norm: self.norm.parse::<Norm>()?,
            eps: self.eps,
            iterations: self.iters,
            momentum: self.momentum,
            loss: LossKind { family, mode },
            seed: self.seed,
            profile: profile_for(self.precision)?,
            target_rule: self.target_rule.parse::<TargetRule>()?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Weights manifest written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "tmifpe")]
    pub loss: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackFlags,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackFlags,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Figure1Args {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Log-spaced grid points between 1e-2 and 1e3.
    #[arg(long, default_value_t = 2001)]
    pub points: usize,
}

/// Parses `std::env::args` and runs the command.
pub fn run_from_env() -> Result<()> {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> Result<()> {
    let echo = serde_json::to_value(&cli.command).expect("arguments serialize");
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, echo).map(|_| ()),
        Command::Train(a) => cmd_train(a, echo).map(|_| ()),
        Command::Attack(a) => cmd_attack(a, echo).map(|_| ()),
        Command::Compare(a) => cmd_compare(a, echo).map(|_| ()),
        Command::Figure1(a) => {
            let paths = cmd_figure1(&a.out, a.points)?;
            let files: Vec<String> =
                paths.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
            data::write_report(&a.out.join("figure1.json"), &serde_json::json!({ "config": echo, "files": files }))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn parse_logits(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad logit '{v}'"))))
        .collect()
}

#[derive(Debug, Serialize)]
struct AnalyzeOutput<'a> {
    config: serde_json::Value,
    logits: &'a [f64],
    solutions: Vec<crate::tstar::ScaleFactorSolution>,
}

pub fn cmd_analyze(args: &AnalyzeArgs, echo: serde_json::Value) -> Result<Vec<crate::tstar::ScaleFactorSolution>> {
    let logits = parse_logits(&args.logits)?;
    let ranked = RankedLogits::new(&logits)?;
    let kind = ScenarioKind::parse(&args.scenario)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario '{}'", args.scenario)))?;
    let label = args.label.unwrap_or_else(|| if kind.is_stationary() { ranked.argmax() } else { ranked.class_at(2) });
    let scenario = AttackScenario::for_label(&ranked, kind, label)?;
    let mut solutions = Vec::new();
    for profile in ALL_PROFILES {
        let s = solve_t_star(&ranked, &scenario, &profile)?;
        println!(
            "{:>2}-bit  {}  t* = {:.6}  c* = {:.6}  g(t*) = {:.6e}  delta_sup = {:.6e}{}",
            profile.bits,
            kind.tag(),
            s.t_star,
            s.c_star,
            s.g_at_star,
            s.delta_sup_at_star[&profile.bits],
            if s.underflow_at_star { "  (clamped at 1)" } else { "" }
        );
        solutions.push(s);
    }
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        data::write_report(
            &out.join("analyze.json"),
            &AnalyzeOutput { config: echo, logits: &logits, solutions: solutions.clone() },
        )?;
    }
    Ok(solutions)
}

#[derive(Debug, Serialize)]
struct TrainOutput<'a> {
    config: serde_json::Value,
    train_config: &'a TrainConfig,
    widths: &'a [usize],
    report: &'a nn::TrainReport,
}

pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad width '{v}'"))))
        .collect()
}

pub fn cmd_train(args: &TrainArgs, echo: serde_json::Value) -> Result<PathBuf> {
    let train_set = args.data.load(true)?;
    let test_set = args.data.load(false)?;
    let widths = match &args.widths {
        Some(w) => parse_widths(w)?,
        None => args.data.default_widths(),
    };
    let adversarial = (args.adv_eps > 0.0).then(|| PgdTraining {
        eps: args.adv_eps,
        steps: args.adv_steps,
        step_size: args.adv_step_size.unwrap_or(2.5 * args.adv_eps / args.adv_steps.max(1) as f32),
    });
    let config = TrainConfig {
        epochs: args.epochs,
        batch: args.batch,
        learning_rate: args.lr,
        momentum: args.sgd_momentum,
        seed: args.seed,
        adversarial,
    };
    let (model, report) = nn::train(&train_set, Some(&test_set), &widths, &config)?;
    for e in &report.epochs {
        println!("epoch {:>3}  loss {:.6}", e.epoch, e.loss);
    }
    println!(
        "train accuracy {:.4}  test accuracy {:.4}",
        report.train_accuracy,
        report.test_accuracy.unwrap_or(f64::NAN)
    );
    ensure_dir(&args.out)?;
    let manifest = args.out.join("model.manifest");
    data::save_weights(&manifest, &model, &WeightsMeta { seed: args.seed, precision: 32 })?;
    data::write_report(
        &args.out.join("train_report.json"),
        &TrainOutput { config: echo, train_config: &config, widths: &widths, report: &report },
    )?;
    println!("wrote {}", manifest.display());
    Ok(manifest)
}

fn load_model(path: &Path) -> Result<nn::ModelWeights> {
    if !path.exists() {
        return Err(Error::InvalidConfig(format!("model not found: {}", path.display())));
    }
    Ok(data::load_weights(path)?.0)
}

#[derive(Debug, Serialize)]
struct AttackOutput<'a> {
    config: serde_json::Value,
    #[serde(flatten)]
    report: &'a AttackReport,
}

pub fn cmd_attack(args: &AttackArgs, echo: serde_json::Value) -> Result<AttackReport> {
    let model = load_model(&args.model)?;
    let data = args.data.load(false)?;
    let config = args.attack.config(args.loss.parse()?)?;
    let report = robust_accuracy(&model, &data, &config)?;
    println!(
        "{}  samples {}  clean {:.4}  robust {:.4}",
        config.loss.family.display_name(),
        report.aggregate.samples,
        report.aggregate.clean_accuracy,
        report.aggregate.robust_accuracy
    );
    ensure_dir(&args.out)?;
    data::write_report(
        &args.out.join(format!("attack_{}.json", config.loss.family.name())),
        &AttackOutput { config: echo, report: &report },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub loss: LossFamily,
    pub robust_accuracy: f64,
    /// Robust accuracy minus CE's, in percentage points.
    pub delta_vs_ce: f64,
}

#[derive(Debug, Serialize)]
pub struct CompareOutput {
    pub config: serde_json::Value,
    pub clean_accuracy: f64,
    pub rows: Vec<CompareRow>,
    /// Samples CE broke that T-MIFPE did not.
    pub tmifpe_regressions: Vec<u64>,
    pub reports: Vec<AttackReport>,
}

/// Table with a clean-accuracy column and one column per loss. Deltas are
/// `robust − robust_CE` in percentage points.
pub fn format_compare_table(clean: f64, rows: &[CompareRow]) -> String {
    let mut header = format!("{:<10}", "Clean");
    let mut line = format!("{:<10}", format!("{:.2}", 100.0 * clean));
    for r in rows {
        let _ = write!(header, " {:<18}", r.loss.display_name());
        let cell = if r.loss == LossFamily::Ce {
            format!("{:.2}", 100.0 * r.robust_accuracy)
        } else {
            format!("{:.2} ({:+.2})", 100.0 * r.robust_accuracy, r.delta_vs_ce)
        };
        let _ = write!(line, " {cell:<18}");
    }
    format!("{}\n{}\n", header.trim_end(), line.trim_end())
}

pub fn compare_losses(model: &nn::ModelWeights, data: &Dataset, flags: &AttackFlags) -> Result<(f64, Vec<CompareRow>, Vec<AttackReport>)> {
    let mut reports = Vec::new();
    for family in LossFamily::ALL {
        reports.push(robust_accuracy(model, data, &flags.config(family)?)?);
    }
    let ce = reports[0].aggregate.robust_accuracy;
    let rows = LossFamily::ALL
        .iter()
        .zip(&reports)
        .map(|(&loss, r)| CompareRow {
            loss,
            robust_accuracy: r.aggregate.robust_accuracy,
            delta_vs_ce: 100.0 * (r.aggregate.robust_accuracy - ce),
        })
        .collect();
    Ok((reports[0].aggregate.clean_accuracy, rows, reports))
}

pub fn cmd_compare(args: &CompareArgs, echo: serde_json::Value) -> Result<CompareOutput> {
    let model = load_model(&args.model)?;
    let data = args.data.load(false)?;
    let (clean, rows, reports) = compare_losses(&model, &data, &args.attack)?;
    print!("{}", format_compare_table(clean, &rows));
    let regressions = paired_regressions(&reports[0], &reports[4]);
    if !regressions.is_empty() {
        eprintln!("note: {} samples broken by CE but not by T-MIFPE: {:?}", regressions.len(), regressions);
    }
    let out = CompareOutput { config: echo, clean_accuracy: clean, rows, tmifpe_regressions: regressions, reports };
    ensure_dir(&args.out)?;
    data::write_report(&args.out.join("compare.json"), &out)?;
    Ok(out)
}

/// One subplot of the four-scenario error figure.
#[derive(Debug, Clone, Copy)]
pub struct FigurePanel {
    pub name: &'static str,
    pub logits: [f64; 10],
    pub label: usize,
    pub kind: ScenarioKind,
}

const PANEL_A: [f64; 10] = [2.5, -1.3, 0.8, 3.8, -0.9, 1.7, -2.1, 3.6, 0.4, -1.5];

pub const FIGURE1: [FigurePanel; 4] = [
    FigurePanel { name: "a", logits: PANEL_A, label: 3, kind: ScenarioKind::UntargetedUnsuccessful },
    FigurePanel {
        name: "b",
        logits: [1.2, -1.5, 0.5, 1.9, -1.2, 4.2, -2.3, 2.0, 0.1, -1.8],
        label: 3,
        kind: ScenarioKind::UntargetedSuccessful,
    },
    // Panel (a)'s logits attacked toward its runner-up class.
    FigurePanel { name: "c", logits: PANEL_A, label: 7, kind: ScenarioKind::TargetedUnsuccessful },
    FigurePanel {
        name: "d",
        logits: [1.0, 4.5, 0.3, 1.2, -1.0, 1.5, -2.5, 2.8, 0.0, -1.8],
        label: 1,
        kind: ScenarioKind::TargetedSuccessful,
    },
];

pub fn figure1_grid(points: usize) -> Vec<f64> {
    let n = points.max(2);
    let (lo, hi) = (1e-2f64.ln(), 1e3f64.ln());
    (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Writes `figure1_<panel>_<scenario>.csv` for each panel into `out`.
pub fn cmd_figure1(out: &Path, points: usize) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let grid = figure1_grid(points);
    let mut paths = Vec::new();
    for panel in FIGURE1 {
        let ranked = RankedLogits::new(&panel.logits)?;
        let scenario = AttackScenario::for_label(&ranked, panel.kind, panel.label)?;
        let set = emit_curve(&ranked, &scenario, &grid, &ALL_PROFILES)?;
        let path = out.join(format!("figure1_{}_{}.csv", panel.name, panel.kind.tag()));
        data::write_curves(&path, &set, &ALL_PROFILES)?;
        let stars: Vec<String> =
            set.curves.iter().map(|c| format!("t*_{} = {:.6}", c.profile.bits, c.t_star)).collect();
        println!("({}) {}  {}", panel.name, panel.kind.tag(), stars.join("  "));
        paths.push(path);
    }
    Ok(paths)
}
