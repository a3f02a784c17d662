use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hoi_core::checks::{run_scope, Scope};
use hoi_core::logic::{parse_rules, Vocabulary};
use hoi_core::model::Checkpoint;
use hoi_core::train::{
    ablate, build_model, evaluate, run, table_cells, Ablation, CellResult, Data, MetricsRow, RunConfig, RunOutput,
    SplitKind, SplitSpec, World, DESK_RULES,
};
use hoi_core::Error;

mod plot;

#[derive(Parser)]
#[command(name = "hoi", version, about = "Desk-scale HOI detection with triplet reasoning and logic-induced losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory; the config's `output_dir` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG loss and violation curves.
    #[arg(long)]
    plots: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CellSet {
    /// neither, TRA, LRL, both
    Table,
    /// TRA only, TRA + verb rules, TRA + object rules
    Families,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write metrics, summary and checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the config's evaluation scenes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation cell under every seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "table")]
        cells: CellSet,
        /// Worker threads; all available cores when omitted.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// tensor-ops, attention, logic, full-model or all
        scope: String,
    },
    /// Rule-file utilities.
    Rules {
        #[command(subcommand)]
        command: RulesCommand,
    },
}

#[derive(Subcommand)]
enum RulesCommand {
    /// Parse a rules file against the config's vocabulary.
    Check {
        path: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad config, rules or arguments: exit 2.
    Config(String),
    /// Anything that goes wrong while running: exit 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Vocabulary(_) | Error::Syntax { .. } | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn read_input(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Outcome<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(e.to_string()))
}

struct Setup {
    cfg: RunConfig,
    world: World,
    out: PathBuf,
}

fn setup(args: &RunArgs) -> Outcome<Setup> {
    let (mut cfg, base) = match &args.config {
        Some(path) => {
            let cfg: RunConfig = serde_json::from_str(&read_input(path)?)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            (cfg, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    let rules = match &cfg.rules_path {
        Some(p) => read_input(&base.join(p))?,
        None => DESK_RULES.to_string(),
    };
    let world = World::new(cfg.world.clone(), &rules)?;
    if cfg.split.kind != SplitKind::Regular && cfg.split.held_out.is_empty() {
        cfg.split = SplitSpec::desk(cfg.split.kind, &world.vocab)?;
    }
    cfg.split.validate(&world.vocab, &world.afforded)?;
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok(Setup { cfg, world, out })
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn write_run(dir: &Path, out: &RunOutput, plots: bool) -> Outcome<()> {
    write(&dir.join("summary.json"), to_json(&out.summary)?)?;
    if out.summary.steps == 0 {
        return Ok(());
    }
    write(&dir.join("metrics.csv"), metrics_csv(&out.rows))?;
    write(&dir.join("checkpoint.json"), to_json(&out.checkpoint)?)?;
    if plots {
        write(&dir.join("loss.svg"), plot::curve("loss", &out.rows, |r| r.l_total))?;
        write(&dir.join("violations.svg"), plot::curve("rule violation rate", &out.rows, |r| r.rule_violation_rate))?;
    }
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Outcome<()> {
    let Setup { cfg, world, out } = setup(args)?;
    let data = Data::generate(&cfg, &world)?;
    write(&out.join("config.json"), to_json(&cfg)?)?;
    write(&out.join("manifest.json"), to_json(&data.manifest)?)?;
    for &seed in &cfg.seeds {
        let output = run(&cfg, &world, &data, seed, |r| {
            eprintln!(
                "seed {seed} step {:>5}  loss {:.4}  accuracy {:.3}  violations {:.3}",
                r.step, r.l_total, r.interaction_accuracy, r.rule_violation_rate
            )
        })?;
        write_run(&out.join(format!("seed-{seed}")), &output, args.plots)?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(args: &RunArgs, checkpoint: &Path) -> Outcome<()> {
    let Setup { cfg, world, out } = setup(args)?;
    let ckpt: Checkpoint = serde_json::from_str(&read_input(checkpoint)?)
        .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
    let mut model_cfg = cfg.clone();
    model_cfg.model = ckpt.config.clone();
    model_cfg.ablation.tra = ckpt.reasoner == hoi_core::model::ReasonerKind::Triplet;
    let mut model = build_model(&model_cfg, &world, 0)?;
    model.load(&ckpt)?;
    let data = Data::generate(&cfg, &world)?;
    let scenes = if data.eval.is_empty() { &data.train } else { &data.eval };
    let metrics = evaluate(&model, &world, scenes, &cfg.split, cfg.top_k, &cfg.loss)?;
    let json = to_json(&metrics)?;
    write(&out.join("eval.json"), &json)?;
    print!("{json}");
    Ok(())
}

fn slug(a: &Ablation) -> String {
    a.label().replace(' ', "_").replace('=', "-")
}

fn cmd_ablate(args: &RunArgs, cells: CellSet, workers: Option<usize>) -> Outcome<()> {
    let Setup { cfg, world, out } = setup(args)?;
    let cells: Vec<Ablation> = match cells {
        CellSet::Table => table_cells().to_vec(),
        CellSet::Families => vec![
            Ablation::new(true, false),
            Ablation::families(true, true, false),
            Ablation::families(true, false, true),
        ],
    };
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let data = Data::generate(&cfg, &world)?;
    write(&out.join("config.json"), to_json(&cfg)?)?;
    write(&out.join("manifest.json"), to_json(&data.manifest)?)?;
    eprintln!("{} cells × {} seeds on {workers} worker(s)", cells.len(), cfg.seeds.len());
    let results: Vec<CellResult> = ablate(&cfg, &world, &data, &cells, workers)?;
    let mut table = String::from(CellResult::HEADER);
    table.push('\n');
    for cell in &results {
        let dir = out.join(slug(&cell.ablation));
        for r in &cell.runs {
            write_run(&dir.join(format!("seed-{}", r.summary.seed)), r, args.plots)?;
        }
        write(&dir.join("stats.json"), to_json(&cell.stats())?)?;
        table.push_str(&cell.csv());
        table.push('\n');
    }
    write(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(scope: &str) -> Outcome<()> {
    let scopes = if scope == "all" { Scope::ALL.to_vec() } else { vec![scope.parse::<Scope>()?] };
    let mut ok = true;
    for s in scopes {
        let report = run_scope(s)?;
        println!("{report}");
        ok &= report.passes();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn cmd_rules_check(path: &Path, config: Option<&Path>) -> Outcome<()> {
    let world_cfg = match config {
        Some(p) => {
            let cfg: RunConfig =
                serde_json::from_str(&read_input(p)?).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            cfg.world
        }
        None => RunConfig::default().world,
    };
    let text = read_input(path)?;
    let vocab = Vocabulary::complete(world_cfg.verbs, world_cfg.objects)?;
    let rules = parse_rules(&text, &vocab).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let forbidden: usize = rules.rules.iter().map(|r| r.forbid.len()).sum();
    println!("{}: {} rules, {} forbidden triplets", path.display(), rules.rules.len(), forbidden);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { run, checkpoint } => cmd_eval(run, checkpoint),
        Command::Ablate { run, cells, workers } => cmd_ablate(run, *cells, *workers),
        Command::Gradcheck { scope } => cmd_gradcheck(scope),
        Command::Rules { command: RulesCommand::Check { path, config } } => cmd_rules_check(path, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
