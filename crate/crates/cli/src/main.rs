//! `preflab` — reproducible experiments for personalized preference
//! optimization on the toy analytic policy.
//!
//! Subcommands: `simulate | train | evaluate | verify | gradcheck`. Every
//! artifact lands under `--out` with fixed filenames (dataset.train.jsonl,
//! dataset.eval.jsonl, groundtruth.json, policy.ckpt, usermodel.ckpt,
//! head.ckpt, trace.csv, report.json, lengths.csv, winrate.csv). Exit codes:
//! 0 success, 1 verification failure, 2 usage error, 3 i/o error.

mod config;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use preflab_core::corpus::{load_dataset, save_dataset, Token, UserInfo};
use preflab_core::objectives::{
    save_head, ObjectiveConfig, ObjectiveKind, RewardHead, RmAggregation,
};
use preflab_core::policy::{load_policy, save_policy, PolicyParams};
use preflab_core::simlab::{
    default_profile_dims, eval_accuracy, eval_lengths, gen_conflicting_length_dataset,
    gen_profile_dataset, oracle_winrate, sample_policy_responses, split_dataset, SimSpec,
    UserGroundTruth,
};
use preflab_core::tensor::Matrix;
use preflab_core::trainer::{train, write_trace_csv, ParamBundle, TrainConfig};
use preflab_core::usermodel::{load_user_model, save_user_model, ImplicitUserModel};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use config::{pick, pick_required, FileConfig};

#[derive(Parser)]
#[command(name = "preflab", version, about = "Personalized preference-optimization lab")]
struct Cli {
    /// JSON config file; explicit flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomness; mandatory for simulate/train/evaluate.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts (default `.`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic personalized preference dataset.
    Simulate(SimulateArgs),
    /// Train a policy (and user model / reward head) on a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints: accuracies, length statistics, win-rates.
    Evaluate(EvaluateArgs),
    /// Run the built-in verification suite.
    Verify {
        /// Restrict to one family: lemma1 | lemma2 | reductions | gradcheck.
        #[arg(long)]
        only: Option<String>,
    },
    /// Finite-difference gradient check across all objectives.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Number of seeded random bundles per objective.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset family: tldr-lengths | profiles.
    #[arg(long)]
    preset: Option<String>,
    /// Number of users (tldr-lengths).
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    majority_fraction: Option<f64>,
    #[arg(long)]
    samples_per_user: Option<usize>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    len_short: Option<usize>,
    #[arg(long)]
    len_long: Option<usize>,
    /// Number of preference dimensions (profiles preset, 1..=3).
    #[arg(long)]
    dims: Option<usize>,
    /// Marker token id for the marker-presence dimension.
    #[arg(long)]
    marker: Option<u32>,
    /// Fraction of samples held out as the eval split.
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// sft-mle | vanilla-rm | vanilla-dpo | p-dpo | p-ipo | p-ipo-diff | p-rm.
    #[arg(long)]
    objective: Option<String>,
    /// Ablation preset: ind-tu1 | ind-tu10 | ind-alpha1 | ind-no-generic |
    /// cluster-k2 | cluster-k5.
    #[arg(long)]
    preset: Option<String>,
    /// Training dataset (default {out}/dataset.train.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frozen reference checkpoint; required by the DPO/IPO family and used
    /// as the initial policy unless --init-policy is given.
    #[arg(long)]
    sft: Option<PathBuf>,
    /// Initial policy checkpoint (default: the SFT reference, else seeded).
    #[arg(long)]
    init_policy: Option<PathBuf>,
    /// uniform | individualized | individualized-no-generic | cluster.
    #[arg(long)]
    user_model: Option<String>,
    /// User token length T_u.
    #[arg(long)]
    t_u: Option<usize>,
    /// Number of cluster centers K.
    #[arg(long)]
    k: Option<usize>,
    /// Embedding width for fresh policy inits.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    /// soft-prompt | linear (P-RM only).
    #[arg(long)]
    rm_aggregation: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Evaluation dataset (default {out}/dataset.eval.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    sft: Option<PathBuf>,
    /// User-model checkpoint; omitted means no personalization.
    #[arg(long)]
    user_model: Option<PathBuf>,
    /// Ground-truth file (default {out}/groundtruth.json).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    /// Also sample per-user length statistics into lengths.csv.
    #[arg(long)]
    lengths: bool,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Number of distinct eval prompts used for sampling.
    #[arg(long)]
    num_prompts: Option<usize>,
    /// Two policy checkpoints to compare by oracle-judge win-rate.
    #[arg(long, num_args = 2, value_names = ["A_CKPT", "B_CKPT"])]
    winrate: Option<Vec<PathBuf>>,
    /// Optional user-model checkpoints for the win-rate bundles.
    #[arg(long)]
    winrate_user_model_a: Option<PathBuf>,
    #[arg(long)]
    winrate_user_model_b: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Io(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Verification(m) => m,
        }
    }
}

impl From<preflab_core::Error> for CliError {
    fn from(e: preflab_core::Error) -> Self {
        match e {
            preflab_core::Error::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<String> for CliError {
    fn from(m: String) -> Self {
        CliError::Usage(m)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(CliError::Usage)?,
        None => FileConfig::default(),
    };
    let out = pick(cli.out.clone(), file.out.clone(), PathBuf::from("."));
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Simulate(args) => {
            let seed = seed.ok_or_else(|| CliError::Usage("missing required --seed".into()))?;
            cmd_simulate(&args, &file, seed, &out)
        }
        Command::Train(args) => {
            let seed = seed.ok_or_else(|| CliError::Usage("missing required --seed".into()))?;
            cmd_train(&args, &file, seed, &out)
        }
        Command::Evaluate(args) => {
            let seed = seed.ok_or_else(|| CliError::Usage("missing required --seed".into()))?;
            cmd_evaluate(&args, &file, seed, &out)
        }
        Command::Verify { only } => cmd_verify(only.as_deref()),
        Command::Gradcheck { epsilon, seeds } => cmd_gradcheck(epsilon, seeds),
    }
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Usage(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn cmd_simulate(
    args: &SimulateArgs,
    file: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let section = &file.simulate;
    let preset = pick_required(args.preset.clone(), section.preset.clone(), "preset")?;
    let (dataset, truth) = match preset.as_str() {
        "tldr-lengths" => {
            let spec = SimSpec {
                num_users: pick(args.m, section.m, 10),
                majority_fraction: pick(args.majority_fraction, section.majority_fraction, 0.7),
                samples_per_user: pick(args.samples_per_user, section.samples_per_user, 500),
                vocab_size: pick(args.vocab_size, section.vocab_size, 12),
                prompt_len: pick(args.prompt_len, section.prompt_len, 3),
                len_short: pick(args.len_short, section.len_short, 1),
                len_long: pick(args.len_long, section.len_long, 8),
                seed,
            };
            gen_conflicting_length_dataset(&spec)?
        }
        "profiles" => {
            let n_dims = pick(args.dims, section.dims, 3);
            let marker = Token(pick(args.marker, section.marker, 1));
            let all = default_profile_dims(marker);
            if n_dims == 0 || n_dims > all.len() {
                return Err(CliError::Usage(format!(
                    "--dims must lie in 1..={}, got {n_dims}",
                    all.len()
                )));
            }
            gen_profile_dataset(
                &all[..n_dims],
                pick(args.samples_per_user, section.samples_per_user, 300),
                pick(args.vocab_size, section.vocab_size, 8),
                pick(args.prompt_len, section.prompt_len, 2),
                seed,
            )?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown --preset `{other}`; expected tldr-lengths or profiles"
            )))
        }
    };
    let eval_fraction = pick(args.eval_fraction, section.eval_fraction, 0.1);
    let (train_set, eval_set) = split_dataset(&dataset, eval_fraction, seed.wrapping_add(1));
    save_dataset(&train_set, out.join("dataset.train.jsonl"))?;
    save_dataset(&eval_set, out.join("dataset.eval.jsonl"))?;
    write_json(&truth, &out.join("groundtruth.json"))?;
    println!(
        "simulated {} users, {} train / {} eval samples under {}",
        dataset.num_users,
        train_set.len(),
        eval_set.len(),
        out.display()
    );
    Ok(())
}

fn parse_objective(name: &str) -> Result<ObjectiveKind, CliError> {
    Ok(match name {
        "sft-mle" => ObjectiveKind::SftMle,
        "vanilla-rm" => ObjectiveKind::VanillaRm,
        "vanilla-dpo" => ObjectiveKind::VanillaDpo,
        "p-dpo" => ObjectiveKind::PDpo,
        "p-ipo" | "p-ipo-as-written" => ObjectiveKind::PIpoAsWritten,
        "p-ipo-diff" | "p-ipo-difference" => ObjectiveKind::PIpoDifference,
        "p-rm" => ObjectiveKind::PRm,
        other => {
            return Err(CliError::Usage(format!(
                "unknown --objective `{other}`"
            )))
        }
    })
}

/// The ablation-grid presets: (user model variant, T_u, alpha, K).
fn train_preset(name: &str) -> Result<(&'static str, usize, f64, usize), CliError> {
    Ok(match name {
        "ind-tu1" => ("individualized", 1, 0.5, 2),
        "ind-tu10" => ("individualized", 10, 0.5, 2),
        "ind-alpha1" => ("individualized", 10, 1.0, 2),
        "ind-no-generic" => ("individualized-no-generic", 10, 0.5, 2),
        "cluster-k2" => ("cluster", 10, 0.5, 2),
        "cluster-k5" => ("cluster", 10, 0.5, 5),
        other => {
            return Err(CliError::Usage(format!(
                "unknown --preset `{other}`"
            )))
        }
    })
}

fn cmd_train(args: &TrainArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let section = &file.train;
    let objective_name = pick_required(args.objective.clone(), section.objective.clone(), "objective")?;
    let kind = parse_objective(&objective_name)?;

    let preset = match args.preset.clone().or(section.preset.clone()) {
        Some(name) => Some(train_preset(&name)?),
        None => None,
    };
    let variant = pick(
        args.user_model.clone(),
        section.user_model.clone(),
        preset.map(|p| p.0.to_string()).unwrap_or_else(|| "individualized".into()),
    );
    let t_u = pick(args.t_u, section.t_u, preset.map(|p| p.1).unwrap_or(10));
    let alpha = pick(args.alpha, section.alpha, preset.map(|p| p.2).unwrap_or(0.5));
    let k = pick(args.k, section.k, preset.map(|p| p.3).unwrap_or(5));
    let beta = pick(args.beta, section.beta, 0.5);
    let d = pick(args.d, section.d, 8);

    let rm_aggregation = match pick(
        args.rm_aggregation.clone(),
        section.rm_aggregation.clone(),
        "soft-prompt".into(),
    )
    .as_str()
    {
        "soft-prompt" => RmAggregation::SoftPromptHead,
        "linear" => RmAggregation::LinearHead,
        other => {
            return Err(CliError::Usage(format!(
                "unknown --rm-aggregation `{other}`"
            )))
        }
    };

    let data_path = pick(
        args.data.clone(),
        section.data.clone(),
        out.join("dataset.train.jsonl"),
    );
    let dataset = load_dataset(&data_path)?;

    let sft_path = args.sft.clone().or(section.sft.clone());
    let sft = match &sft_path {
        Some(p) => Some(load_policy(p)?),
        None => None,
    };
    if kind.uses_reference() && sft.is_none() {
        return Err(CliError::Usage(
            "this objective needs --sft pointing at a reference checkpoint".into(),
        ));
    }

    let init_policy_path = args.init_policy.clone().or(section.init_policy.clone());
    let policy = match (&init_policy_path, &sft) {
        (Some(p), _) => load_policy(p)?,
        (None, Some(reference)) => reference.clone(),
        (None, None) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            PolicyParams::seeded(dataset.vocab_size as usize, d, 0.1, &mut rng)
        }
    };
    let d = policy.dim();

    let user_model = if kind.uses_user_model() {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
        let m = dataset.num_users;
        Some(match variant.as_str() {
            "uniform" => ImplicitUserModel::uniform(t_u, d, &mut rng),
            "individualized" => ImplicitUserModel::individualized(m, t_u, d, &mut rng),
            "individualized-no-generic" => {
                ImplicitUserModel::individualized_without_generic(m, t_u, d, &mut rng)
            }
            "cluster" => ImplicitUserModel::cluster(m, k, t_u, d, &mut rng),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --user-model `{other}`"
                )))
            }
        })
    } else {
        None
    };

    let head = if kind.uses_head() {
        Some(match rm_aggregation {
            RmAggregation::SoftPromptHead => RewardHead::soft_prompt_zeros(d),
            RmAggregation::LinearHead => RewardHead::Linear,
        })
    } else {
        None
    };

    let objective = ObjectiveConfig {
        beta,
        alpha,
        kind,
        rm_aggregation,
    };
    let cfg = TrainConfig {
        steps: pick(args.steps, section.steps, 3000),
        batch_size: pick(args.batch_size, section.batch_size, 64),
        step_size: pick(args.step_size, section.step_size, 0.03),
        seed: seed.wrapping_add(2),
        objective,
        log_every: pick(args.log_every, section.log_every, 100),
    };

    let bundle = ParamBundle {
        policy,
        sft,
        user_model,
        head,
    };
    let report = train(&dataset, bundle, &cfg)?;

    save_policy(&report.bundle.policy, out.join("policy.ckpt"))?;
    if let Some(um) = &report.bundle.user_model {
        save_user_model(um, out.join("usermodel.ckpt"))?;
    }
    if let Some(h) = &report.bundle.head {
        save_head(h, out.join("head.ckpt"))?;
    }
    write_trace_csv(&report.loss_trace, out.join("trace.csv"))?;
    let (last_step, last_loss) = report.loss_trace.last().copied().unwrap_or((0, f64::NAN));
    println!(
        "trained {objective_name} for {} steps on {} samples; loss {last_loss:.6} at step {last_step} (wall {:?})",
        cfg.steps,
        dataset.len(),
        report.wall_time
    );
    Ok(())
}

fn unique_prompts(dataset: &preflab_core::corpus::PreferenceDataset, limit: usize) -> Vec<Vec<Token>> {
    let mut prompts: Vec<Vec<Token>> = Vec::new();
    for s in &dataset.samples {
        if !prompts.contains(&s.prompt) {
            prompts.push(s.prompt.clone());
            if prompts.len() == limit {
                break;
            }
        }
    }
    prompts
}

fn cmd_evaluate(
    args: &EvaluateArgs,
    file: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let section = &file.evaluate;
    let data_path = pick(
        args.data.clone(),
        section.data.clone(),
        out.join("dataset.eval.jsonl"),
    );
    let dataset = load_dataset(&data_path)?;
    let policy = load_policy(pick(
        args.policy.clone(),
        section.policy.clone(),
        out.join("policy.ckpt"),
    ))?;
    let sft_path = pick_required(args.sft.clone(), section.sft.clone(), "sft")?;
    let sft = load_policy(sft_path)?;
    let user_model = match args.user_model.clone().or(section.user_model.clone()) {
        Some(p) => load_user_model(p)?,
        None => ImplicitUserModel::Uniform {
            shared: Matrix::zeros(0, policy.dim()),
        },
    };
    let gt_path = pick(
        args.ground_truth.clone(),
        section.ground_truth.clone(),
        out.join("groundtruth.json"),
    );
    let gt_text = std::fs::read_to_string(&gt_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", gt_path.display())))?;
    let truth: UserGroundTruth = serde_json::from_str(&gt_text)
        .map_err(|e| CliError::Usage(format!("bad ground truth {}: {e}", gt_path.display())))?;
    let beta = pick(args.beta, section.beta, 0.5);

    let groups = truth.groups();
    let mut report = eval_accuracy(&policy, &sft, &user_model, beta, &dataset, &groups)?;
    println!(
        "accuracy: top {:.4}, generic {:.4}",
        report.accuracy_top, report.accuracy_generic
    );
    for g in &report.accuracy_average {
        println!("  {}: {:.4} +- {:.4}", g.name, g.mean, g.stderr);
    }

    let draws = pick(args.draws, section.draws, 50);
    let max_len = pick(args.max_len, section.max_len, 12);
    let num_prompts = pick(args.num_prompts, section.num_prompts, 20);
    let prompts = unique_prompts(&dataset, num_prompts);

    if args.lengths || section.lengths == Some(true) {
        let users: Vec<UserInfo> = truth.prefs.keys().copied().map(UserInfo::with_id).collect();
        let stats = eval_lengths(
            &policy,
            Some(&user_model),
            &users,
            &prompts,
            draws,
            max_len,
            seed,
        )?;
        let mut csv = String::from("user_id,mean,stderr\n");
        for s in &stats {
            csv.push_str(&format!("{},{},{}\n", s.user_id, s.mean, s.stderr));
        }
        let path = out.join("lengths.csv");
        std::fs::write(&path, csv)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        report.lengths = stats;
    }

    write_json(&report, &out.join("report.json"))?;

    if let Some(pair) = &args.winrate {
        let policy_a = load_policy(&pair[0])?;
        let policy_b = load_policy(&pair[1])?;
        let um_a = match &args.winrate_user_model_a {
            Some(p) => Some(load_user_model(p)?),
            None => None,
        };
        let um_b = match &args.winrate_user_model_b {
            Some(p) => Some(load_user_model(p)?),
            None => None,
        };
        let mut csv = String::from("user_id,winrate_a,winrate_b\n");
        for (&uid, kind) in &truth.prefs {
            let user = UserInfo::with_id(uid);
            let responses_a = sample_policy_responses(
                &policy_a,
                um_a.as_ref(),
                &user,
                &prompts,
                max_len,
                seed.wrapping_add(uid as u64),
            )?;
            let responses_b = sample_policy_responses(
                &policy_b,
                um_b.as_ref(),
                &user,
                &prompts,
                max_len,
                seed.wrapping_add(uid as u64) ^ 0x5555,
            )?;
            let wa = oracle_winrate(&responses_a, &responses_b, kind)?;
            let wb = oracle_winrate(&responses_b, &responses_a, kind)?;
            csv.push_str(&format!("{uid},{wa},{wb}\n"));
        }
        let path = out.join("winrate.csv");
        std::fs::write(&path, csv)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        println!("win-rates written to {}", path.display());
    }
    Ok(())
}

fn cmd_verify(only: Option<&str>) -> Result<(), CliError> {
    let checks = verify::run(only, false).map_err(CliError::Usage)?;
    let mut failed = 0usize;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", check.name, check.detail);
        failed += (!check.passed) as usize;
    }
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} of {} checks failed",
            checks.len()
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn cmd_gradcheck(epsilon: f64, seeds: u64) -> Result<(), CliError> {
    let checks = verify::gradient_checks(seeds, epsilon);
    let mut failed = 0usize;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} {} — {}", check.name, check.detail);
        failed += (!check.passed) as usize;
    }
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} of {} gradient checks failed",
            checks.len()
        )));
    }
    Ok(())
}
