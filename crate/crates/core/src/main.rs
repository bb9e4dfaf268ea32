use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use twostage_cltr::dataset::synth;
use twostage_cltr::experiment::{self, CellKey, Experiment, ExperimentConfig};
use twostage_cltr::trainer::write_history_csv;
use twostage_cltr::validate::{self, Suite};

#[derive(Parser)]
#[command(name = "twostage", version, about = "Two-stage counterfactual learning-to-rank experiments")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid, or selected cells of it.
    Run(RunArgs),
    /// Render table.txt from a results directory's grid.csv.
    Table {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run an enumeration-backed self-check suite.
    Validate {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write a synthetic ratings file in `user::item::rating::timestamp` format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file whose keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Only this cell, as `regime,K2,N`; repeatable.
    #[arg(long)]
    cell: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of runs per cell.
    #[arg(long)]
    runs: Option<usize>,
    /// Any config field as `key=value`, dotted for nested fields
    /// (`train.n_mc=100`); repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Recompute cells even when a checkpoint exists.
    #[arg(long)]
    fresh: bool,
    /// Also write per-cell training histories.
    #[arg(long)]
    history: bool,
}

fn build_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(&args.preset)?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = cfg.overlay_json(&text)?;
    }
    let mut sets = args.set.clone();
    if let Some(out) = &args.out {
        sets.push(format!("output_dir={}", serde_json::to_string(out)?));
    }
    if let Some(seed) = args.seed {
        sets.push(format!("master_seed={seed}"));
    }
    if let Some(runs) = args.runs {
        sets.push(format!("n_runs={runs}"));
    }
    Ok(cfg.apply_overrides(&sets)?)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let cfg = build_config(&args)?;
    let cells = if args.cell.is_empty() {
        cfg.cells()
    } else {
        args.cell.iter().map(|c| CellKey::parse(c)).collect::<Result<Vec<_>, _>>()?
    };
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut exp = Experiment::new(cfg)?;
    exp.keep_history = args.history;
    let started = Instant::now();
    let (grid, failures) = exp.run_cells(&cells, !args.fresh, |r| {
        eprintln!(
            "[{:>8.1}s] {} run {}: ndcg@10 = {:.4}",
            started.elapsed().as_secs_f64(),
            r.cell,
            r.run,
            r.ndcg10
        );
    })?;
    if args.history {
        let dir = out.join("history");
        fs::create_dir_all(&dir)?;
        for (cell, run, outcome) in &exp.histories {
            let name = format!("{}_{}_{}_{}.csv", cell.regime, cell.k2, cell.n, run);
            write_history_csv(&outcome.history, fs::File::create(dir.join(name))?)?;
        }
    }
    experiment::write_outputs(&grid, &out)?;
    print!("{}", experiment::render_table(&grid).0);
    if !failures.is_empty() {
        let text: String = failures
            .iter()
            .map(|f| format!("{} run {}: {}\n", f.cell, f.run, f.message))
            .collect();
        fs::write(out.join("failures.txt"), &text)?;
        eprint!("{text}");
        bail!("{} cell run(s) failed", failures.len());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Run(args) => run(args),
        Command::Table { input } => {
            let path = input.join("grid.csv");
            let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let grid = experiment::read_grid_csv(BufReader::new(file))?;
            let (text, _) = experiment::render_table(&grid);
            fs::write(input.join("table.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Validate { suite, seed } => {
            let suite: Suite = suite.parse()?;
            let checks = validate::run(suite, seed)?;
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().any(|c| !c.passed) {
                bail!("validation failed");
            }
            Ok(())
        }
        Command::GenData {
            out,
            users,
            items,
            seed,
        } => {
            let mut cfg = synth::SyntheticConfig::default();
            cfg.n_users = users.unwrap_or(cfg.n_users);
            cfg.n_items = items.unwrap_or(cfg.n_items);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let table = synth::generate(&cfg)?;
            fs::write(&out, table.to_dat()).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "{} ratings, {} users, {} items -> {}",
                table.len(),
                table.n_users(),
                table.n_items(),
                out.display()
            );
            Ok(())
        }
    }
}
