//! `lagphylo`: simulate data, run coupled or plain chains, and summarise
//! meeting times into convergence diagnostics.
//!
//! Exit status is 0 on success, 1 for user errors (bad config, missing
//! inputs) and 2 for internal failures, including pairs that aborted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;

use lagphylo::chains::{run_experiment, run_marginal, MeetingRecord, PairOutput};
use lagphylo::config::ExperimentConfig;
use lagphylo::diagnostics::{
    asdsf, bootstrap_band, convergence_report, ecdf_survival, split_sets, tv_curve, Thresholds, WindowRule,
    DEFAULT_MIN_FREQ,
};
use lagphylo::io::{read_config_hash, read_records, read_samples, write_asdsf, write_records, write_samples, write_survival, write_tv_curves};
use lagphylo::kernel::Posterior;
use lagphylo::model::PatternData;

#[derive(Parser)]
#[command(name = "lagphylo", version, about = "Lag-coupled MCMC for Stochastic Dollo phylogenies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a data set from the config's [simulation] table.
    Simulate {
        config: PathBuf,
    },
    /// Run coupled pairs (or plain chains) and write records and samples.
    Run {
        config: PathBuf,
        /// Run independent marginal chains instead of coupled pairs.
        #[arg(long)]
        marginal_only: bool,
        /// Cap on worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Turn a run directory into TV curves, survival tables, ASDSF and a report.
    Diagnose {
        dir: PathBuf,
        /// Percentile bootstrap bands with this many resamples.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// ASDSF checkpoint spacing, in samples.
        #[arg(long, default_value_t = 1)]
        asdsf_every: usize,
        /// Use disjoint ASDSF windows of this many samples instead of the trailing 75%.
        #[arg(long)]
        disjoint: Option<usize>,
    },
}

enum Failure {
    User(String),
    Internal(String),
}

type Res<T> = Result<T, Failure>;

fn user(e: impl ToString) -> Failure {
    Failure::User(e.to_string())
}

fn internal(e: impl ToString) -> Failure {
    Failure::Internal(e.to_string())
}

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Writes through a temporary file so an interrupted run never leaves a torn file.
fn write(path: &Path, text: &str) -> Res<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| internal(format!("{}: {e}", dir.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| internal(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| internal(format!("{}: {e}", path.display())))
}

struct Loaded {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
}

fn load(path: &Path) -> Res<Loaded> {
    let text = read(path)?;
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = base.join(&cfg.output_dir);
    Ok(Loaded { cfg, base, out })
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn simulate(config: &Path) -> Res<()> {
    let Loaded { cfg, out, .. } = load(config)?;
    let sim_cfg = cfg.simulation.as_ref().ok_or_else(|| user("config has no [simulation] table"))?;
    let sim = sim_cfg.run().map_err(user)?;
    write(&out.join("data.tsv"), &sim.data.to_tsv())?;
    write(&out.join("truth.nwk"), &format!("{}\n", sim.tree.to_newick()))?;
    let prov = json!({
        "command": "simulate",
        "config_hash": cfg.hash(),
        "config": cfg.source(),
        "seed": sim_cfg.seed,
        "parameters": sim_cfg,
        "catastrophe_leaves": sim.catastrophe_leaves,
        "xi": sim.xi,
        "n_traits": sim.data.total(),
        "n_patterns": sim.data.len(),
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": unix_time(),
    });
    write(&out.join("simulate_provenance.json"), &format!("{prov:#}\n"))?;
    eprintln!("simulated {} traits on {} leaves into {}", sim.data.total(), sim_cfg.n_leaves, out.display());
    Ok(())
}

fn load_data(l: &Loaded) -> Res<PatternData> {
    let path = match &l.cfg.data {
        Some(d) => l.base.join(&d.patterns),
        None if l.cfg.simulation.is_some() => l.out.join("data.tsv"),
        None => return Err(user("config needs a [data] table or a [simulation] table")),
    };
    if !path.exists() && l.cfg.data.is_none() {
        return Err(user(format!("{} not found; run `lagphylo simulate` first", path.display())));
    }
    PatternData::from_tsv(&read(&path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn pair_stem(lag: u64, pair: u32) -> String {
    format!("lag{lag}_pair{pair}")
}

fn run(config: &Path, marginal_only: bool, threads: Option<usize>) -> Res<()> {
    let l = load(config)?;
    let data = load_data(&l)?;
    let cfg = &l.cfg;
    let hash = cfg.hash();
    let model = cfg.model(data.taxa()).map_err(user)?;
    let n = data.taxa().len();
    let init = cfg.init(n).map_err(user)?;
    let kernel = cfg.kernel(&model, !marginal_only).map_err(user)?;
    let post = Posterior::new(model, data);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(internal)?;
    let started = unix_time();

    if marginal_only {
        let r = &cfg.run;
        let chains =
            pool.install(|| run_marginal(&post, &kernel, &init, r.marginal_chains, r.marginal_iterations, r.thinning, r.master_seed));
        let mut errors = vec![];
        for (c, rows) in chains.into_iter().enumerate() {
            match rows {
                Ok(rows) => write(&l.out.join(format!("marginal/chain{c}.csv")), &write_samples(&hash, &rows, n))?,
                Err(e) => errors.push(format!("chain {c}: {e}")),
            }
        }
        write_provenance(&l, "run --marginal-only", started, threads, &errors)?;
        return if errors.is_empty() { Ok(()) } else { Err(internal(errors.join("; "))) };
    }

    let spec = cfg.experiment_spec();
    let pair_dir = l.out.join("pairs");
    // Pairs finished by an earlier run of the same config are kept.
    let mut done: BTreeMap<(u64, u32), MeetingRecord> = BTreeMap::new();
    for &lag in &spec.lags {
        for k in 0..spec.n_pairs {
            let p = pair_dir.join(format!("{}.csv", pair_stem(lag, k)));
            let Ok(text) = fs::read_to_string(&p) else { continue };
            if read_config_hash(&text) != Some(hash.as_str()) {
                continue;
            }
            if let Ok(mut recs) = read_records(&text) {
                if let Some(r) = recs.pop().filter(|r| r.error.is_none()) {
                    done.insert((lag, k), r);
                }
            }
        }
    }
    if !done.is_empty() {
        eprintln!("resuming: {} of {} pairs already finished", done.len(), spec.lags.len() * spec.n_pairs as usize);
    }
    let write_errors = Mutex::new(vec![]);
    let save = |o: &PairOutput| {
        let stem = pair_stem(o.record.lag, o.record.pair);
        let mut res = vec![];
        if spec.settings.keep_samples {
            res.push(write(&l.out.join(format!("samples/{stem}_x.csv")), &write_samples(&hash, &o.x_samples, n)));
            res.push(write(&l.out.join(format!("samples/{stem}_y.csv")), &write_samples(&hash, &o.y_samples, n)));
        }
        res.push(write(&pair_dir.join(format!("{stem}.csv")), &write_records(&hash, std::slice::from_ref(&o.record))));
        for r in res {
            if let Err(Failure::Internal(m) | Failure::User(m)) = r {
                write_errors.lock().unwrap().push(m);
            }
        }
    };
    let outputs = pool.install(|| run_experiment(&post, &kernel, &init, &spec, &|lag, k| done.contains_key(&(lag, k)), &save));
    for o in outputs {
        done.insert((o.record.lag, o.record.pair), o.record);
    }
    let records: Vec<MeetingRecord> = done.into_values().collect();
    write(&l.out.join("records.csv"), &write_records(&hash, &records))?;
    let mut errors: Vec<String> = write_errors.into_inner().unwrap();
    errors.extend(
        records.iter().filter_map(|r| r.error.as_ref().map(|e| format!("lag {} pair {}: {e}", r.lag, r.pair))),
    );
    write_provenance(&l, "run", started, threads, &errors)?;
    let censored = records.iter().filter(|r| r.censored && r.error.is_none()).count();
    eprintln!("{} pairs, {} censored, {} failed; records in {}", records.len(), censored, errors.len(), l.out.display());
    if errors.is_empty() { Ok(()) } else { Err(internal(errors.join("; "))) }
}

fn write_provenance(l: &Loaded, command: &str, started: u64, threads: Option<usize>, errors: &[String]) -> Res<()> {
    let prov = json!({
        "command": command,
        "config_hash": l.cfg.hash(),
        "config": l.cfg.source(),
        "master_seed": l.cfg.run.master_seed,
        "thinning": l.cfg.run.thinning,
        "threads": threads,
        "errors": errors,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix_time": started,
        "finished_unix_time": unix_time(),
    });
    let name = if command == "run" { "run_provenance.json" } else { "marginal_provenance.json" };
    write(&l.out.join(name), &format!("{prov:#}\n"))
}

fn diagnose(dir: &Path, bootstrap: Option<usize>, every: usize, disjoint: Option<usize>) -> Res<()> {
    if !dir.is_dir() {
        return Err(user(format!("{} is not a directory", dir.display())));
    }
    let rec_path = dir.join("records.csv");
    let marg_dir = dir.join("marginal");
    let has_marginal = marg_dir.is_dir();
    if !rec_path.exists() && !has_marginal {
        return Err(user(format!("{} holds neither records.csv nor marginal/", dir.display())));
    }
    let mut records = vec![];
    let mut hash = String::new();
    if rec_path.exists() {
        let text = read(&rec_path)?;
        hash = read_config_hash(&text).unwrap_or_default().to_string();
        records = read_records(&text).map_err(|e| user(format!("{}: {e}", rec_path.display())))?;
    }
    let stride = fs::read_to_string(dir.join("run_provenance.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["thinning"].as_u64())
        .unwrap_or(1);
    let mut lags: Vec<u64> = records.iter().map(|r| r.lag).collect();
    lags.sort_unstable();
    lags.dedup();
    let mut curves = vec![];
    let mut survival = vec![];
    for &lag in &lags {
        let mut c = tv_curve(&records, lag, stride).map_err(user)?;
        let taus: Vec<u64> = records.iter().filter(|r| r.lag == lag).map(|r| r.tau).collect();
        if let Some(b) = bootstrap {
            let mut rng = lagphylo::coupling::RandomStream::new(lag, 0);
            bootstrap_band(&mut c, &taus, b, &mut rng);
        }
        survival.push((lag, ecdf_survival(&taus, lag).map_err(user)?));
        curves.push(c);
    }
    let out = dir.join("diagnostics");
    let mut series = vec![];
    if has_marginal {
        let mut files: Vec<PathBuf> = fs::read_dir(&marg_dir)
            .map_err(user)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let mut chains = vec![];
        for f in &files {
            let text = read(f)?;
            if hash.is_empty() {
                hash = read_config_hash(&text).unwrap_or_default().to_string();
            }
            let rows = read_samples(&text).map_err(|e| user(format!("{}: {e}", f.display())))?;
            chains.push(split_sets(rows.iter().map(|r| r.newick.as_str())).map_err(user)?);
        }
        let shortest = chains.iter().map(Vec::len).min().unwrap_or(0);
        chains.iter_mut().for_each(|c| c.truncate(shortest));
        let rule = disjoint.map_or(WindowRule::default(), |size| WindowRule::Disjoint { size });
        series = asdsf(&chains, rule, every, DEFAULT_MIN_FREQ).map_err(user)?;
        write(&out.join("asdsf.csv"), &write_asdsf(&hash, &series))?;
    }
    if !curves.is_empty() {
        write(&out.join("tv.csv"), &write_tv_curves(&hash, &curves))?;
        write(&out.join("survival.csv"), &write_survival(&hash, &survival))?;
    }
    let report = convergence_report(&records, &curves, &series, Thresholds::default());
    for w in &report.warnings {
        eprintln!("{w}");
    }
    let mut value = serde_json::to_value(&report).map_err(internal)?;
    value["config_hash"] = json!(hash);
    write(&out.join("report.json"), &format!("{value:#}\n"))?;
    eprintln!("diagnostics written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Simulate { config } => simulate(&config),
        Command::Run { config, marginal_only, threads } => run(&config, marginal_only, threads),
        Command::Diagnose { dir, bootstrap, asdsf_every, disjoint } => diagnose(&dir, bootstrap, asdsf_every, disjoint),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
