use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drama::config::ExperimentConfig;
use drama::corpus::describe;
use drama::efficiency::{energy_report, reference_rows, EnergyModel, EnergyRow};
use drama::evaluation::{evaluate_run, paired_ttest_bonferroni, Qrels, Run, SignificanceReport, BASE_ALPHA};
use drama::pipeline::{pool_cells, run_all, write_summary, Artifacts, Workspace};
use drama::retrieval::mean_ndcg;
use drama::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "drama", about = "Multi-domain reranking with routed adapters over a frozen shared encoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for stage commands; restricts `run-all` to this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for reranking.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset (or validate the configured one).
    GenData,
    /// Build the BM25 index.
    Index,
    /// Grid-search BM25 parameters on validation NDCG@10.
    TuneBm25,
    /// Train the per-domain teachers.
    TrainTeacher,
    /// Train the specialized per-domain models and the multi-domain model.
    TrainBaseline,
    /// Score triplets with the teachers and distill one adapter per domain.
    DistillAdapter,
    /// Train the gating classifier.
    TrainGate,
    /// Rerank the test split under every variant.
    Rerank,
    /// Evaluate run files; with --run and --qrels, evaluate one pair.
    Evaluate {
        #[arg(long, requires = "qrels")]
        run: Option<PathBuf>,
        #[arg(long, requires = "run")]
        qrels: Option<PathBuf>,
    },
    /// Pool evaluated runs over seeds and test against the baselines; with
    /// --a, --b and --qrels, compare two runs.
    Significance {
        #[arg(long, requires_all = ["b", "qrels"])]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Number of comparisons for the Bonferroni correction.
        #[arg(long, default_value_t = 1)]
        m: usize,
    },
    /// Energy and CO2 per query from GFLOP/query figures.
    EnergyReport {
        /// Custom `name:params_millions:gflops` rows instead of the reference table.
        #[arg(long = "row", value_name = "NAME:PARAMS:GFLOPS")]
        rows: Vec<String>,
    },
    /// Every stage for every seed, then the summary tables.
    RunAll,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let cwd = Path::new(".");
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(format!("override {kv} is not key=value")))?;
        cfg.set(k.trim(), v.trim(), cwd)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn artifacts(ws: &Workspace, data: &drama::corpus::TokenizedDataset) -> Result<Artifacts> {
    let all = ws.load_backbone()?;
    let registry = ws.load_registry(data, &all)?;
    Ok(Artifacts {
        specialized: ws.load_specialized(data)?,
        teachers: if ws.cfg.teacher_is_student() { Vec::new() } else { ws.load_teachers(data)? },
        registry,
        gate: ws.load_gate()?,
        all,
    })
}

fn stage(cfg: &ExperimentConfig, command: &Command) -> Result<()> {
    let ws = Workspace::new(cfg.clone(), cfg.seeds[0]);
    fs::create_dir_all(&ws.dir)?;
    match command {
        Command::GenData => {
            let ds = ws.gen_data()?;
            print!("{}", describe(&ds));
        }
        Command::Index => {
            let data = ws.load_data()?;
            let index = ws.build_index(&data)?;
            println!("indexed {} documents in {} domains", index.whole().num_docs(), index.domains().len());
        }
        Command::TuneBm25 => {
            let data = ws.load_data()?;
            let index = ws.load_index()?;
            let params = ws.tune(&data, &index)?;
            let ndcg = mean_ndcg(&index, params, &data.data.val, &data.data.qrels_val)?;
            println!("k1={} b={} val_ndcg@10={ndcg:.4}", params.k1, params.b);
        }
        Command::TrainTeacher => {
            let data = ws.load_data()?;
            let triplets = ws.triplets(&data, &ws.load_index()?, ws.load_bm25()?)?;
            let teachers = ws.train_teachers(&data, &triplets)?;
            println!("trained {} teachers on {} triplets", teachers.len(), triplets.len());
        }
        Command::TrainBaseline => {
            let data = ws.load_data()?;
            let triplets = ws.triplets(&data, &ws.load_index()?, ws.load_bm25()?)?;
            let teachers = if cfg.teacher_is_student() {
                match ws.load_teachers(&data) {
                    Ok(t) => Some(t),
                    Err(Error::MissingArtifact(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let (s, _) = ws.train_baselines(&data, &triplets, teachers.as_deref())?;
            println!("trained {} specialized models and ALL", s.len());
        }
        Command::DistillAdapter => {
            let data = ws.load_data()?;
            let backbone = ws.load_backbone()?;
            let teachers = ws.load_teachers(&data)?;
            let triplets = ws.triplets(&data, &ws.load_index()?, ws.load_bm25()?)?;
            let registry = ws.distill(&data, &backbone, &teachers, &triplets)?;
            println!("distilled {} adapters ({} parameters each)", registry.len(), registry.param_count() / registry.len().max(1));
        }
        Command::TrainGate => {
            let data = ws.load_data()?;
            let backbone = ws.load_backbone()?;
            let (_, report) = ws.gate(&data, &backbone)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("gate test accuracy {:.4}", report.metrics.accuracy);
        }
        Command::Rerank => {
            let data = ws.load_data()?;
            let art = artifacts(&ws, &data)?;
            let runs = ws.rerank_all(&data, &art, &ws.load_index()?, ws.load_bm25()?)?;
            println!("wrote runs for {} variants", runs.len());
        }
        Command::Evaluate { .. } => {
            let data = ws.load_data()?;
            let cells = ws.evaluate_runs(&data)?;
            println!("variant\tdomain\tMAP@100\tMRR@10\tNDCG@10");
            for ((v, d), per_query) in &cells {
                let m = drama::evaluation::MetricTriple::mean(per_query.values());
                println!("{v}\t{d}\t{:.4}\t{:.4}\t{:.4}", m.map, m.mrr, m.ndcg);
            }
        }
        Command::Significance { .. } | Command::EnergyReport { .. } | Command::RunAll => unreachable!(),
    }
    Ok(())
}

fn pooled_significance(cfg: &ExperimentConfig) -> Result<()> {
    let mut per_seed = Vec::new();
    let mut domains = Vec::new();
    for &seed in &cfg.seeds {
        let ws = Workspace::new(cfg.clone(), seed);
        let data = ws.load_data()?;
        domains = data.data.domains.clone();
        per_seed.push((seed, ws.evaluate_runs(&data)?));
    }
    let variants: Vec<String> = Workspace::new(cfg.clone(), cfg.seeds[0]).variants().into_iter().map(|v| v.name).collect();
    let cells = pool_cells(per_seed.iter().map(|(s, c)| (*s, c)));
    let (summary, _) = write_summary(&cfg.out_dir, &cells, &variants, &domains)?;
    print!("{}", summary.to_tsv());
    Ok(())
}

fn parse_row(s: &str) -> Result<EnergyRow> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::input(format!("energy row {s} is not name:params:gflops"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok(EnergyRow {
        variant: parts[0].to_string(),
        params_millions: parts[1].parse().map_err(|_| bad())?,
        gflops: parts[2].parse().map_err(|_| bad())?,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::EnergyReport { rows } = &cli.command {
        let rows = if rows.is_empty() { reference_rows() } else { rows.iter().map(|r| parse_row(r)).collect::<Result<_>>()? };
        let report = energy_report(&EnergyModel::default(), &rows)?;
        if let Some(out) = &cli.common.out {
            fs::create_dir_all(out)?;
            fs::write(out.join("energy_report.tsv"), &report)?;
        }
        print!("{report}");
        return Ok(());
    }
    if let Command::Evaluate { run: Some(run), qrels: Some(qrels) } = &cli.command {
        let run = Run::parse_trec(&read_text(run)?)?;
        let qrels = Qrels::parse_trec(&read_text(qrels)?)?;
        print!("{}", evaluate_run(&run, &qrels)?.to_tsv());
        return Ok(());
    }
    if let Command::Significance { a: Some(a), b: Some(b), qrels: Some(qrels), m } = &cli.command {
        let qrels = Qrels::parse_trec(&read_text(qrels)?)?;
        let ea = evaluate_run(&Run::parse_trec(&read_text(a)?)?, &qrels)?;
        let eb = evaluate_run(&Run::parse_trec(&read_text(b)?)?, &qrels)?;
        if ea.per_query.keys().ne(eb.per_query.keys()) {
            return Err(Error::input("runs cover different queries"));
        }
        let metric = drama::evaluation::Metric::Ndcg;
        let mut c = paired_ttest_bonferroni(&ea.values(metric), &eb.values(metric), *m)?;
        c.label = format!("{} vs {} (NDCG@10)", a.display(), b.display());
        print!("{}", SignificanceReport { base_alpha: BASE_ALPHA, comparisons: vec![c] }.to_tsv());
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    fs::create_dir_all(&cfg.out_dir)?;
    match &cli.command {
        Command::RunAll => {
            let outcome = run_all(&cfg, &mut |msg| eprintln!("{msg}"))?;
            print!("{}", outcome.summary.to_tsv());
            Ok(())
        }
        Command::Significance { .. } => pooled_significance(&cfg),
        other => stage(&cfg, other),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
