use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use llrft_core::codec;
use llrft_core::config::ExperimentConfig;
use llrft_core::continual::Trainer;
use llrft_core::dataio;
use llrft_core::experiment::{self, AblationEntry, ContinualReport};
use llrft_core::reward::GroundTruth;
use llrft_core::train::{self, derive_seed, RftTrainer, SftTrainer};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "llrft", version, about = "Reinforcement fine-tuning of action-token policies on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON experiment config; defaults to the named preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => dataio::read_json::<ExperimentConfig>(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TrainerArg {
    Sft,
    Rft,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a preset config as JSON
    Preset {
        #[arg(default_value = "desk")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic task suite and its demonstration pools
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Demonstrations, one JSON object per line
        #[arg(long)]
        out: PathBuf,
        /// Also write the task suite as JSON
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Encode demonstrations to token streams, or decode streams to chunks
    Tokenize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Demonstration file to encode
        #[arg(long, conflicts_with = "decode", required_unless_present = "decode")]
        demos: Option<PathBuf>,
        /// Token file to decode
        #[arg(long)]
        decode: Option<PathBuf>,
        /// Output file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Composite reward of predicted against ground-truth token streams
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Supervised training on a demonstration file
    TrainSft {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Starting checkpoint; fresh parameters otherwise
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// RFT on a demonstration file; the starting policy is the KL reference
    TrainRft {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Base + lifelong protocol; writes the success matrix and metrics
    Continual {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the config trainer
        #[arg(long, value_enum)]
        trainer: Option<TrainerArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metrics of a continual report
    Report {
        report: PathBuf,
    },
    /// Single-task RFT with each reward term switched off in turn
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the config's RFT step budget
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => dataio::write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preset { name, out } => {
            let cfg = ExperimentConfig::preset(&name)?;
            emit(&(cfg.to_json() + "\n"), out.as_deref())
        }
        Command::Gen { cfg, out, suite } => {
            let cfg = cfg.load()?;
            let data = experiment::build_dataset(&cfg)?;
            let demos: Vec<_> = data.pool.into_iter().flatten().collect();
            dataio::write_demos(&demos, &out)?;
            if let Some(p) = suite {
                dataio::write_json(&data.suite, &p)?;
            }
            eprintln!("wrote {} demonstrations for {} tasks", demos.len(), data.suite.len());
            Ok(())
        }
        Command::Tokenize { cfg, demos, decode, out } => {
            let cfg = cfg.load()?;
            let spec = &cfg.codec;
            let text = if let Some(p) = demos {
                let streams = dataio::read_demos(&p)?
                    .iter()
                    .map(|d| codec::encode(&d.chunk, spec).map(|t| t.0))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                dataio::tokens_to_string(&streams)
            } else {
                let p = decode.expect("clap requires one input");
                let mut text = String::new();
                for (i, tokens) in dataio::read_token_lines(&p)?.iter().enumerate() {
                    let chunk = codec::decode(tokens, spec).map_err(|e| format!("{}: stream {}: {e}", p.display(), i + 1))?;
                    text.push_str(&serde_json::to_string(&chunk.to_rows())?);
                    text.push('\n');
                }
                text
            };
            emit(&text, out.as_deref())
        }
        Command::Score { cfg, pred, gt } => {
            let cfg = cfg.load()?;
            let preds = dataio::read_token_lines(&pred)?;
            let gts = dataio::read_token_lines(&gt)?;
            if preds.len() != gts.len() {
                return Err(format!("{} predictions for {} ground truths", preds.len(), gts.len()).into());
            }
            let mut text = String::new();
            for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
                let truth = GroundTruth::new(g.clone(), &cfg.codec).map_err(|e| format!("{}: line {}: {e}", gt.display(), i + 1))?;
                text.push_str(&serde_json::to_string(&truth.score(p, &cfg.codec, &cfg.reward))?);
                text.push('\n');
            }
            emit(&text, None)
        }
        Command::TrainSft {
            cfg,
            demos,
            epochs,
            init,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let encoded = train::encode_demos(&dataio::read_demos(&demos)?, &cfg.codec)?;
            let mut params = start_params(&cfg, init.as_deref())?;
            let mut curve = Vec::new();
            SftTrainer {
                spec: &cfg.codec,
                reward: &cfg.reward,
                cfg: &cfg.train,
            }
            .run(&mut params, &encoded, epochs, derive_seed(cfg.seed, &[11]), &mut curve)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.join("sft"));
            finish_training(&dir, &params, &curve)
        }
        Command::TrainRft {
            cfg,
            demos,
            steps,
            init,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let encoded = train::encode_demos(&dataio::read_demos(&demos)?, &cfg.codec)?;
            let mut params = start_params(&cfg, init.as_deref())?;
            let reference = params.clone();
            let mut curve = Vec::new();
            RftTrainer {
                spec: &cfg.codec,
                reward: &cfg.reward,
                grpo: &cfg.grpo,
                cfg: &cfg.train,
            }
            .run_steps(&mut params, &reference, &encoded, steps, derive_seed(cfg.seed, &[12]), &mut curve)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.join("rft"));
            finish_training(&dir, &params, &curve)
        }
        Command::Continual { cfg, trainer, out } => {
            let mut cfg = cfg.load()?;
            if let Some(t) = trainer {
                cfg.plan.trainer = match t {
                    TrainerArg::Sft => Trainer::Sft,
                    TrainerArg::Rft => Trainer::Rft,
                };
            }
            let (report, _) = experiment::run_continual(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("continual.json"));
            dataio::write_json(&report, &out)?;
            print!("{}", render_report(&report));
            Ok(())
        }
        Command::Report { report } => {
            let report: ContinualReport = dataio::read_json(&report)?;
            print!("{}", render_report(&report));
            Ok(())
        }
        Command::Ablate { cfg, steps, out_dir } => {
            let mut cfg = cfg.load()?;
            if let Some(n) = steps {
                cfg.single.rft_steps = n;
            }
            let entries = experiment::run_ablation(&cfg)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.join("ablate"));
            for entry in &entries {
                dataio::write_json(entry, &dir.join(format!("{}.json", entry.variant)))?;
            }
            print!("{}", render_ablation(&entries));
            Ok(())
        }
    }
}

fn start_params(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<llrft_core::policy::PolicyParams> {
    let params = match init {
        Some(p) => dataio::read_checkpoint(p)?,
        None => experiment::initial_params(cfg)?,
    };
    if *params.dims() != cfg.policy_dims() {
        return Err(format!("checkpoint dims {:?} do not match config {:?}", params.dims(), cfg.policy_dims()).into());
    }
    Ok(params)
}

fn finish_training(dir: &Path, params: &llrft_core::policy::PolicyParams, curve: &[train::CurvePoint]) -> Result<()> {
    dataio::write_checkpoint(params, &dir.join("policy.ckpt"))?;
    dataio::write_curve(curve, &dir.join("curve.csv"))?;
    if let Some(last) = curve.last() {
        println!(
            "{} steps, final batch mdpr {:.4} (qacr {:.4}, ctar {:.4}, fcr {:.4})",
            curve.len(),
            last.mean_mdpr,
            last.mean_qacr,
            last.mean_ctar,
            last.mean_fcr
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn render_report(r: &ContinualReport) -> String {
    let mut out = format!("K = {}  config {}\n", r.k, &r.config_hash[..r.config_hash.len().min(12)]);
    out.push_str("success matrix (row: after step, column: step learned)\n");
    for row in &r.s.rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
        out.push_str(&format!("  {}\n", cells.join(" ")));
    }
    out.push_str(&format!("FWT {:.4}  NBT {:.4}  AUC {:.4}\n", r.fwt, r.nbt, r.auc));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    out.push_str(&format!("NBT_k {}\nAUC_k {}\n", fmt(&r.nbt_k), fmt(&r.auc_k)));
    out
}

fn render_ablation(entries: &[AblationEntry]) -> String {
    let mut out = String::from("variant         omega  lambda  mdpr0   mdpr    success\n");
    for e in entries {
        let r = &e.report;
        out.push_str(&format!(
            "{:<15} {:<6} {:<7} {:<7.4} {:<7.4} {:.3}\n",
            e.variant, r.reward.omega, r.reward.lambda, r.initial.mean_mdpr, r.final_point.mean_mdpr, r.success_after
        ));
    }
    out
}
