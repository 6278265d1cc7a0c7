use std::path::Path;

use anyhow::{bail, Context, Result};
use maxcovar::montecarlo::rollout;
use nalgebra::{Matrix2, SymmetricEigen};

use crate::commands::{load_query_output, load_tree, COVERAGE_HEADER};
use crate::Outcome;

fn finish(w: csv::Writer<Vec<u8>>, out: &Path) -> Result<Outcome> {
    std::fs::write(out, w.into_inner()?).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(Outcome::Ok)
}

/// Semi-axes `3√λ` (major first) and major-axis angle of a 2×2 covariance.
pub fn three_sigma_ellipse(c: &Matrix2<f64>) -> (f64, f64, f64) {
    let eig = SymmetricEigen::new(*c);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let v = eig.eigenvectors.column(major);
    let axis = |l: f64| 3.0 * l.max(0.0).sqrt();
    (axis(eig.eigenvalues[major]), axis(eig.eigenvalues[minor]), v[1].atan2(v[0]))
}

/// One row per node: mean in the plotted plane and its 3σ ellipse.
pub fn tree(input: &Path, out: &Path, dims: &[usize]) -> Result<Outcome> {
    let tree = load_tree(input, true)?;
    let &[a, b] = dims else { bail!("--dims needs exactly two indices") };
    let n = tree.system().n();
    if a >= n || b >= n || a == b {
        bail!("--dims {a},{b} invalid for state dimension {n}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "parent", "depth", "mean_a", "mean_b", "axis_major", "axis_minor", "angle"])?;
    for node in tree.nodes() {
        let c = &node.covariance;
        let block = Matrix2::new(c[(a, a)], c[(a, b)], c[(b, a)], c[(b, b)]);
        let (major, minor, angle) = three_sigma_ellipse(&block);
        w.write_record([
            node.id.to_string(),
            node.parent.map_or_else(String::new, |p| p.to_string()),
            node.depth.to_string(),
            node.mean[a].to_string(),
            node.mean[b].to_string(),
            major.to_string(),
            minor.to_string(),
            angle.to_string(),
        ])?;
    }
    finish(w, out)
}

/// Validates a coverage CSV and re-emits it with the same columns.
pub fn coverage(input: &Path, out: &Path) -> Result<Outcome> {
    let mut r = csv::Reader::from_path(input).with_context(|| format!("cannot read {}", input.display()))?;
    if r.headers()?.iter().ne(COVERAGE_HEADER) {
        bail!("{} is not a coverage CSV (expected columns {})", input.display(), COVERAGE_HEADER.join(","));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COVERAGE_HEADER)?;
    for row in r.records() {
        let row = row?;
        for i in [0, 1, 3] {
            row[i]
                .parse::<f64>()
                .with_context(|| format!("bad number `{}` in column {}", &row[i], COVERAGE_HEADER[i]))?;
        }
        row[4].parse::<usize>().with_context(|| format!("bad trial count `{}`", &row[4]))?;
        w.write_record(&row)?;
    }
    finish(w, out)
}

/// Sampled state trajectories along a query result's full law.
pub fn trajectories(input: &Path, tree: Option<&Path>, out: &Path, trials: usize, seed: u64) -> Result<Outcome> {
    let Some(tree) = tree else { bail!("--tree is required for trajectories") };
    let tree = load_tree(tree, true)?;
    let result = load_query_output(input)?;
    let Some(law) = result.result.full_law.as_ref() else { bail!("query result holds no path") };
    let samples = rollout(tree.system(), &result.query, law, trials, seed)?;
    let n = tree.system().n();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial".to_string(), "step".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for t in 0..trials {
        for (k, states) in samples.states.iter().enumerate() {
            let mut row = vec![t.to_string(), k.to_string()];
            row.extend(states.column(t).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    finish(w, out)
}
