//! The `oid` command line: simulate, train, project, search, evaluate and
//! diagnose. Every run leaves a `<subcommand>.manifest.json` in the output
//! directory; `oid replay --manifest FILE` repeats it.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use oid_core::config::RunConfig;
use oid_core::eval::{evaluate, render_table, run_grid, EvalReport, GridSpec, MetricKind, Metrics};
use oid_core::format;
use oid_core::loss::LossKind;
use oid_core::matcher::{self, build_index};
use oid_core::spectral::{
    alignment_residual_by_truth, left_inverse_check, singular_values_with_tol, sv_cosine,
};
use oid_core::train::train;
use oid_core::{embedding, Error};

use manifest::{Manifest, Timer};

#[derive(Parser, Debug, Clone)]
#[command(name = "oid", version, about = "Origin identification in VAE embedding space")]
struct Cli {
    /// key = value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "OID_THREADS")]
    threads: Option<usize>,
    /// Output directory (default: current directory)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Hits per query
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// Strength whose queries train W
    #[arg(long, global = true)]
    strength: Option<f64>,
    #[arg(long, global = true, default_value = "both")]
    metric: MetricKind,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate training and held-out datasets
    Simulate,
    /// Learn a projection W from origins and their translations
    Train {
        #[arg(long)]
        origins: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Project an embedding file through W and L2-normalize
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        w: PathBuf,
    },
    /// Index references and retrieve the top-k for every query
    Search {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Project both sides through W first
        #[arg(long)]
        w: Option<PathBuf>,
    },
    /// Score search results against ground truth
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Spectra, singular-value cosines and alignment residuals of W files
    Diagnose {
        #[arg(long = "w", required = true)]
        ws: Vec<PathBuf>,
        #[arg(long)]
        origins: Option<PathBuf>,
        #[arg(long = "generated")]
        generated: Vec<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Relative tolerance for effective rank and the left-inverse check
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Train every configured (loss, rank) and evaluate the full grid
    Grid,
    /// Rerun the command recorded in a manifest
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train { .. } => "train",
            Command::Project { .. } => "project",
            Command::Search { .. } => "search",
            Command::Eval { .. } => "eval",
            Command::Diagnose { .. } => "diagnose",
            Command::Grid => "grid",
            Command::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

/// Runs one invocation (arguments after the program name) and returns the
/// process exit code: 0 on success, 1 on a failed run, 2 on a usage error.
pub fn run(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(std::iter::once("oid".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            report_error(&CliError::Usage(e.to_string().trim().to_string()));
            return 2;
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            1
        }
    }
}

fn report_error(e: &CliError) {
    eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
}

/// `args` with any `--out` dropped and `--out DIR` appended.
fn with_out(args: &[String], dir: &Path) -> Vec<String> {
    let mut kept = Vec::with_capacity(args.len() + 2);
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            kept.push(a.clone());
        }
    }
    kept.push("--out".into());
    kept.push(dir.display().to_string());
    kept
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        let recorded = Manifest::load(manifest)?;
        let args = match &cli.out {
            Some(out) => with_out(&recorded.argv, out),
            None => recorded.argv.clone(),
        };
        let replayed = Cli::try_parse_from(std::iter::once("oid".to_string()).chain(args.iter().cloned()))
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", manifest.display())))?;
        if matches!(replayed.command, Command::Replay { .. }) {
            return Err(CliError::Usage("a replay manifest cannot name another replay".into()));
        }
        return dispatch(replayed, args);
    }

    if let Some(n) = cli.threads {
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(rank) = cli.rank {
        cfg.train.config.rank = rank;
        cfg.grid.ranks = vec![rank];
    }
    if let Some(loss) = cli.loss {
        let t = &mut cfg.train.config;
        if t.loss != loss {
            (t.scale, t.margin) = loss.default_hyper();
        }
        t.loss = loss;
        cfg.grid.losses = vec![loss];
    }
    if let Some(s) = cli.strength {
        cfg.train.strength = Some(s);
    }
    if let Some(k) = cli.k {
        cfg.grid.k = k;
    }

    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut m = Manifest::new(cli.command.name(), argv, &cfg);
    let run = Run {
        cli: &cli,
        cfg: &cfg,
        out: &out,
    };
    match &cli.command {
        Command::Simulate => run.simulate(&mut m)?,
        Command::Train {
            origins,
            generated,
            truth,
        } => run.train(&mut m, origins, generated, truth)?,
        Command::Project { input, w } => run.project(&mut m, input, w)?,
        Command::Search { refs, queries, w } => run.search(&mut m, refs, queries, w.as_deref())?,
        Command::Eval { results, truth } => run.eval(&mut m, results, truth)?,
        Command::Diagnose {
            ws,
            origins,
            generated,
            truth,
            tol,
        } => run.diagnose(&mut m, ws, origins.as_deref(), generated, truth.as_deref(), *tol)?,
        Command::Grid => run.grid(&mut m)?,
        Command::Replay { .. } => unreachable!(),
    }
    let path = out.join(format!("{}.manifest.json", cli.command.name()));
    write_json(&path, &m)
}

struct Run<'a> {
    cli: &'a Cli,
    cfg: &'a RunConfig,
    out: &'a Path,
}

fn strength_label(s: f64) -> String {
    format!("{s}")
}

fn metric_line(metric: MetricKind, m: &Metrics) -> String {
    match metric {
        MetricKind::MeanInverseRank => format!("mAP {:.4}  Acc {:.4}", m.map, m.top1_acc),
        MetricKind::MicroAp => format!("micro-AP {:.4}  Acc {:.4}", m.micro_ap, m.top1_acc),
        MetricKind::Both => format!(
            "mAP {:.4}  micro-AP {:.4}  Acc {:.4}",
            m.map, m.micro_ap, m.top1_acc
        ),
    }
}

impl Run<'_> {
    fn output(&self, m: &mut Manifest, name: &str) -> PathBuf {
        let p = self.out.join(name);
        m.outputs.push(p.display().to_string());
        p
    }

    fn simulate(&self, m: &mut Manifest) -> Result<()> {
        let splits = [("train", self.cfg.seed), ("test", self.cfg.sim.test_seed)];
        for (split, seed) in splits {
            let t = Timer::start();
            let data = if split == "train" {
                self.cfg.train_dataset()?
            } else {
                self.cfg.test_dataset()?
            };
            let pairs = data.ground_truth().len();
            m.timings.push(t.stop_per(&format!("generate {split}"), pairs, "s/pair"));

            let t = Timer::start();
            let dir = self.out.join(split);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let origins = self.output(m, &format!("{split}/origins.oide"));
            format::save_embeddings(data.origins(), &origins)?;
            let entries: Vec<(u64, String)> = data
                .origins()
                .ids()
                .iter()
                .map(|&id| (id, format!("sim:seed={seed}:origin={id}")))
                .collect();
            format::write_manifest(&self.output(m, &format!("{split}/manifest.tsv")), &entries)?;
            for q in data.query_sets() {
                let name = format!("{split}/queries_{}_{}.oide", q.profile, strength_label(q.strength));
                format::save_embeddings(&q.set, &self.output(m, &name))?;
            }
            data.ground_truth().save(&self.output(m, &format!("{split}/truth.tsv")))?;
            m.timings.push(t.stop(&format!("write {split}")));
            println!(
                "{split}: {} origins, {} queries in {} cells",
                data.origins().len(),
                pairs,
                data.query_sets().len()
            );
        }
        Ok(())
    }

    fn train(&self, m: &mut Manifest, origins: &Path, generated: &Path, truth: &Path) -> Result<()> {
        let t = Timer::start();
        let o = m.load_embeddings(origins)?;
        let g = m.load_embeddings(generated)?;
        let tr = m.load_truth(truth)?;
        m.timings.push(t.stop("load"));

        let t = Timer::start();
        let outcome = train(&o, &g, &tr, &self.cfg.train.config)?;
        m.timings.push(t.stop_per("train", self.cfg.train.config.total_steps, "s/step"));

        format::save_projection(&outcome.w, &self.output(m, "w.oide"))?;
        let mut log = String::new();
        for e in &outcome.log {
            log.push_str(&serde_json::to_string(e).expect("serializable"));
            log.push('\n');
        }
        write_text(&self.output(m, "train_log.jsonl"), &log)?;
        println!(
            "{}",
            json!({
                "final_loss": outcome.final_loss,
                "steps": outcome.log.len(),
                "rank": outcome.w.m(),
                "loss": self.cfg.train.config.loss,
            })
        );
        Ok(())
    }

    fn project(&self, m: &mut Manifest, input: &Path, w: &Path) -> Result<()> {
        let set = m.load_embeddings(input)?;
        let w = m.load_projection(w)?;
        let t = Timer::start();
        let projected = embedding::project(&set, &w, true)?;
        m.timings.push(t.stop_per("project", set.len(), "s/row"));
        format::save_embeddings(&projected, &self.output(m, "projected.oide"))?;
        Ok(())
    }

    fn search(&self, m: &mut Manifest, refs: &Path, queries: &Path, w: Option<&Path>) -> Result<()> {
        let mut r = m.load_embeddings(refs)?;
        let mut q = m.load_embeddings(queries)?;
        if let Some(w) = w {
            let w = m.load_projection(w)?;
            let t = Timer::start();
            r = embedding::project(&r, &w, true)?;
            q = embedding::project(&q, &w, true)?;
            m.timings.push(t.stop_per("project", r.len() + q.len(), "s/row"));
        }
        let t = Timer::start();
        let index = build_index(&r)?;
        m.timings.push(t.stop("index"));
        let k = self.cfg.grid.k.min(index.len());
        let threads = self.cli.threads.unwrap_or_else(rayon::current_num_threads);
        let (results, stats) = matcher::measure_scan(&index, &q, k, threads)?;
        m.timings.push(manifest::Timing {
            stage: "search".into(),
            seconds: stats.seconds,
            per_unit: Some(stats.seconds_per_pair),
            unit: Some("s/pair".into()),
        });
        matcher::write_results(&results, &self.output(m, "results.tsv"))?;
        println!("{}", serde_json::to_string(&stats).expect("serializable"));
        Ok(())
    }

    fn eval(&self, m: &mut Manifest, results: &Path, truth: &Path) -> Result<()> {
        m.inputs.push(results.display().to_string());
        let res = matcher::read_results(results)?;
        let tr = m.load_truth(truth)?;
        let k_eval = self.cli.k.unwrap_or(usize::MAX);
        let t = Timer::start();
        let metrics = evaluate(&res, &tr, k_eval)?;
        m.timings.push(t.stop_per("eval", metrics.n_queries, "s/query"));
        let report = json!({
            "metric": self.cli.metric,
            "k_eval": self.cli.k,
            "map": metrics.map,
            "micro_ap": metrics.micro_ap,
            "top1_acc": metrics.top1_acc,
            "n_queries": metrics.n_queries,
        });
        write_json(&self.output(m, "report.json"), &report)?;
        println!("{}", metric_line(self.cli.metric, &metrics));
        Ok(())
    }

    fn diagnose(
        &self,
        m: &mut Manifest,
        ws: &[PathBuf],
        origins: Option<&Path>,
        generated: &[PathBuf],
        truth: Option<&Path>,
        tol: f64,
    ) -> Result<()> {
        let t = Timer::start();
        let mats = ws
            .iter()
            .map(|p| m.load_projection(p))
            .collect::<Result<Vec<_>>>()?;
        let mut spectra = Vec::new();
        for (p, w) in ws.iter().zip(&mats) {
            let s = singular_values_with_tol(w, tol)?;
            let li = left_inverse_check(w, tol)?;
            spectra.push(json!({
                "w": p.display().to_string(),
                "singular_values": s.singular_values,
                "effective_rank": s.effective_rank,
                "condition_number": s.condition_number,
                "has_left_inverse": li.has_left_inverse,
                "left_inverse_residual": li.residual,
            }));
        }
        let mut cosines = Vec::new();
        for i in 0..mats.len() {
            for j in i + 1..mats.len() {
                cosines.push(json!({
                    "a": ws[i].display().to_string(),
                    "b": ws[j].display().to_string(),
                    "sv_cosine": sv_cosine(&mats[i], &mats[j])?,
                }));
            }
        }
        let mut residuals = Vec::new();
        if !generated.is_empty() {
            let (Some(origins), Some(truth)) = (origins, truth) else {
                return Err(CliError::Usage("--generated needs --origins and --truth".into()));
            };
            let o = m.load_embeddings(origins)?;
            let tr = m.load_truth(truth)?;
            for gp in generated {
                let g = m.load_embeddings(gp)?;
                let identity = embedding::ProjectionMatrix::identity(o.dim())?;
                let base = alignment_residual_by_truth(&o, &g, &tr, &identity)?;
                for (p, w) in ws.iter().zip(&mats) {
                    let r = alignment_residual_by_truth(&o, &g, &tr, w)?;
                    residuals.push(json!({
                        "w": p.display().to_string(),
                        "generated": gp.display().to_string(),
                        "residual": r.value,
                        "identity_residual": base.value,
                        "pairs": r.pairs,
                        "degenerate": r.is_degenerate(),
                    }));
                }
            }
        }
        m.timings.push(t.stop("diagnose"));
        let report = json!({
            "tol": tol,
            "spectra": spectra,
            "sv_cosines": cosines,
            "alignment_residuals": residuals,
        });
        write_json(&self.output(m, "diagnose.json"), &report)?;
        println!("{}", serde_json::to_string(&report).expect("serializable"));
        Ok(())
    }

    fn grid(&self, m: &mut Manifest) -> Result<()> {
        let t = Timer::start();
        let train_data = self.cfg.train_dataset()?;
        let test_data = self.cfg.test_dataset()?;
        m.timings.push(t.stop("generate"));

        let configs = self.cfg.grid_configs();
        let spec = GridSpec {
            train_data: &train_data,
            test_data: &test_data,
            train_profile: self.cfg.train_profile()?,
            train_strength: self.cfg.train_strength()?,
            configs: configs.clone(),
            include_raw: self.cfg.grid.include_raw,
            profiles: Vec::new(),
            strengths: self.cfg.grid.strengths.clone(),
            k_eval: self.cfg.grid.k,
        };
        let t = Timer::start();
        let out = run_grid(&spec)?;
        m.timings.push(t.stop_per("grid", out.reports.len(), "s/cell"));
        for (secs, c) in out.train_seconds.iter().zip(&configs) {
            m.timings.push(manifest::Timing {
                stage: format!("train {} rank {}", c.loss, c.rank),
                seconds: *secs,
                per_unit: Some(secs / c.total_steps.max(1) as f64),
                unit: Some("s/step".into()),
            });
        }
        for (w, c) in out.matrices.iter().zip(&configs) {
            format::save_projection(w, &self.output(m, &format!("w_{}_r{}.oide", c.loss, c.rank)))?;
        }
        let mut lines = String::new();
        for r in &out.reports {
            lines.push_str(&report_line(r, self.cli.metric));
            lines.push('\n');
        }
        write_text(&self.output(m, "grid.jsonl"), &lines)?;
        let table = render_table(&out.reports);
        write_text(&self.output(m, "grid.txt"), &table)?;
        print!("{table}");
        Ok(())
    }
}

fn report_line(r: &EvalReport, metric: MetricKind) -> String {
    let mut v = serde_json::to_value(r).expect("serializable");
    if metric == MetricKind::MeanInverseRank {
        v.as_object_mut().expect("object").remove("micro_ap");
    }
    if metric == MetricKind::MicroAp {
        v.as_object_mut().expect("object").remove("map_score");
    }
    v.to_string()
}
