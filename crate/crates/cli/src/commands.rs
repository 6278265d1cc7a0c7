use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use maxcovar::brt::{grow, Brt, GrowthMode, GrowthReport, TreeRng};
use maxcovar::config::ExperimentConfig;
use maxcovar::moments::check_maneuver;
use maxcovar::montecarlo::{rollout, worst_violation};
use maxcovar::planner::{self, QueryOptions, QueryResult};
use maxcovar::steering::SteeringSettings;
use maxcovar::{AffineFeedbackLaw, GaussianBelief};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Outcome;

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

pub fn load_tree(path: &Path, skip_audit: bool) -> Result<Brt> {
    Brt::load(path, skip_audit).with_context(|| format!("cannot load tree {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Serialize)]
struct BuildReport<'a> {
    mode: GrowthMode,
    seed: u64,
    n_iter: usize,
    max_nodes: Option<usize>,
    nodes: usize,
    accepted: usize,
    acceptance_rate: f64,
    seconds: f64,
    iterations: &'a GrowthReport,
}

pub fn build_tree(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<GrowthMode>,
    n_iter: Option<usize>,
    report: Option<&Path>,
) -> Result<Outcome> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.tree.seed = s;
    }
    if let Some(m) = mode {
        cfg.tree.mode = m;
    }
    if let Some(n) = n_iter {
        cfg.tree.n_iter = n;
    }
    let mut tree = cfg.root()?;
    let start = Instant::now();
    let growth = grow(&mut tree, cfg.tree.mode, &cfg.growth_options(), &mut TreeRng::new(cfg.tree.seed))?;
    let seconds = start.elapsed().as_secs_f64();
    tree.save(out).with_context(|| format!("cannot write {}", out.display()))?;

    let summary = BuildReport {
        mode: cfg.tree.mode,
        seed: cfg.tree.seed,
        n_iter: cfg.tree.n_iter,
        max_nodes: cfg.tree.max_nodes,
        nodes: tree.len(),
        accepted: growth.accepted(),
        acceptance_rate: growth.acceptance_rate(),
        seconds,
        iterations: &growth,
    };
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "report.json"));
    write(&report_path, &serde_json::to_string_pretty(&summary)?)?;
    eprintln!(
        "{} tree: {} nodes from {} iterations ({:.0}% accepted) in {seconds:.1} s",
        cfg.tree.mode,
        tree.len(),
        growth.iterations.len(),
        100.0 * growth.acceptance_rate()
    );
    Ok(Outcome::Ok)
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub struct CoverageArgs {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub intervals: Vec<[f64; 2]>,
    pub inner: Option<f64>,
    pub outer: Option<f64>,
    pub m: Option<usize>,
}

pub const COVERAGE_HEADER: [&str; 5] = ["interval_lo", "interval_hi", "tree", "success_rate", "trials"];

pub fn coverage(config: &Path, tree_a: &Path, tree_b: &Path, out: &Path, args: &CoverageArgs) -> Result<Outcome> {
    let mut cfg = load_config(config)?;
    let q = &mut cfg.query;
    if let Some(t) = args.trials {
        q.trials = t;
    }
    if let Some(s) = args.seed {
        q.seed = s;
    }
    if !args.intervals.is_empty() {
        q.intervals = args.intervals.clone();
    }
    if let Some(r) = args.inner {
        q.annulus_inner = r;
    }
    if let Some(r) = args.outer {
        q.annulus_outer = r;
    }
    if let Some(m) = args.m {
        q.m = m;
    }
    cfg.validate().context("invalid coverage settings")?;

    let trees = [tree_a, tree_b]
        .iter()
        .map(|p| {
            let t = load_tree(p, true)?;
            if t.system().n() != cfg.system.n() {
                bail!("tree {} has state dimension {}, config has {}", p.display(), t.system().n(), cfg.system.n());
            }
            let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((label, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = QueryOptions { m: cfg.query.m, ..Default::default() };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COVERAGE_HEADER)?;
    for (idx, &interval) in cfg.query.intervals.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.query.seed);
        rng.set_stream(idx as u64);
        let queries = (0..cfg.query.trials)
            .map(|_| cfg.sample_coverage_query(interval, &mut rng))
            .collect::<maxcovar::Result<Vec<_>>>()?;
        for (label, tree) in &trees {
            let found = queries
                .par_iter()
                .map(|q| planner::query(tree, q, &opts).map(|r| r.found as usize))
                .collect::<maxcovar::Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            let rate = if queries.is_empty() { 0.0 } else { found as f64 / queries.len() as f64 };
            eprintln!("[{}, {}] {label}: {:.1}%", interval[0], interval[1], 100.0 * rate);
            w.write_record([
                interval[0].to_string(),
                interval[1].to_string(),
                label.clone(),
                rate.to_string(),
                queries.len().to_string(),
            ])?;
        }
    }
    write(out, &String::from_utf8(w.into_inner()?)?)?;
    Ok(Outcome::Ok)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonolithicTiming {
    pub steps: usize,
    pub wall_time: f64,
    pub solved: bool,
    /// Monolithic over tree-query wall time.
    pub speedup: f64,
}

/// File written by `query`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryOutput {
    pub query: GaussianBelief,
    #[serde(flatten)]
    pub result: QueryResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monolithic: Option<MonolithicTiming>,
}

pub fn load_query_output(path: &Path) -> Result<QueryOutput> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid query result {}", path.display()))
}

pub fn query(tree_path: &Path, query_path: &Path, out: &Path, m: usize, monolithic: bool) -> Result<Outcome> {
    let tree = load_tree(tree_path, false)?;
    let text = std::fs::read_to_string(query_path).with_context(|| format!("cannot read {}", query_path.display()))?;
    let q: GaussianBelief =
        serde_json::from_str(&text).with_context(|| format!("invalid query belief {}", query_path.display()))?;
    if q.dim() != tree.system().n() {
        bail!("query has dimension {} but the tree state has {}", q.dim(), tree.system().n());
    }
    let result = planner::query(&tree, &q, &QueryOptions { m, ..Default::default() })?;
    let timing = (monolithic && result.found).then(|| {
        let steps = result.hops * tree.horizon();
        let (sol, wall_time) = planner::monolithic_steer(&tree, &q, steps, &SteeringSettings::default());
        MonolithicTiming { steps, wall_time, solved: sol.is_ok(), speedup: wall_time / result.wall_time }
    });
    if result.found {
        eprintln!(
            "found: {} hops via {:?} in {:.3} s ({} attempts)",
            result.hops, result.node_path, result.wall_time, result.attempts
        );
    } else {
        eprintln!("no path after {} attempts", result.attempts);
    }
    if let Some(t) = &timing {
        eprintln!("monolithic {}-step solve: {:.3} s ({:.1}x)", t.steps, t.wall_time, t.speedup);
    }
    let found = result.found;
    write(out, &serde_json::to_string_pretty(&QueryOutput { query: q, result, monolithic: timing })?)?;
    Ok(if found { Outcome::Ok } else { Outcome::Failed })
}

/// Analytic replay plus sampled chance-constraint rates for one maneuver.
fn verify_maneuver(
    tree: &Brt,
    from: &GaussianBelief,
    law: &AffineFeedbackLaw,
    to: &GaussianBelief,
    trials: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let report = check_maneuver(tree.system(), from, law, tree.scene(), to, true)?;
    if !report.pass {
        let mut parts = vec![format!("mean error {:.3e}", report.mean_error)];
        let excess = [
            ("terminal", report.terminal_margin),
            ("state", report.worst_state_margin),
            ("control", report.worst_control_margin),
        ];
        parts.extend(excess.iter().filter(|(_, e)| *e > 0.0).map(|(what, e)| format!("{what} excess {e:.3e}")));
        problems.push(format!("replay fails ({})", parts.join(", ")));
    }
    if trials > 0 {
        let samples = rollout(tree.system(), from, law, trials, seed)?;
        if let Some((rate, bound)) = worst_violation(&samples, tree.scene())? {
            if rate > bound {
                problems.push(format!("sampled violation rate {rate:.4} exceeds {bound:.4}"));
            }
        }
    }
    Ok(problems)
}

pub fn verify(tree_path: &Path, result: Option<&Path>, trials: usize, seed: u64) -> Result<Outcome> {
    let tree = load_tree(tree_path, true)?;
    let mut failures = 0;
    match result {
        Some(path) => {
            let out = load_query_output(path)?;
            let Some(law) = out.result.full_law.as_ref().filter(|_| out.result.found) else {
                eprintln!("query result holds no path");
                return Ok(Outcome::Failed);
            };
            for p in verify_maneuver(&tree, &out.query, law, &tree.goal(), trials, seed)? {
                eprintln!("path: {p}");
                failures += 1;
            }
            if failures == 0 {
                eprintln!("path of {} hops verified ({trials} trials)", out.result.hops);
            }
        }
        None => {
            let edges: Vec<_> = tree.edges().map(|(c, p, law)| (c, p, law.clone())).collect();
            for (child, parent, law) in &edges {
                let from = tree.nodes()[*child].belief()?;
                let to = tree.nodes()[*parent].belief()?;
                for p in verify_maneuver(&tree, &from, law, &to, trials, seed.wrapping_add(*child as u64))? {
                    eprintln!("edge {child} -> {parent}: {p}");
                    failures += 1;
                }
            }
            if failures == 0 {
                eprintln!("{} edges verified ({trials} trials each)", edges.len());
            }
        }
    }
    Ok(if failures == 0 { Outcome::Ok } else { Outcome::Failed })
}
