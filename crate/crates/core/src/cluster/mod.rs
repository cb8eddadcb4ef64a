//! 2D reduction and density clustering of particle representations, with a
//! silhouette-driven parameter sweep.

pub mod dbscan;
pub mod tsne;

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dbscan::{dbscan, ClusterAssignment, DbscanParams};
pub use tsne::{conditional_affinities, kl_divergence, kl_gradient, pairwise_affinities, tsne_embed, TsneConfig, TsneOutput};

use crate::encoder::tensor::Matrix;
use crate::error::{Error, Result};

/// Mean silhouette over non-noise points. Points in singleton clusters score 0.
pub fn silhouette(points: &Matrix, assignment: &ClusterAssignment) -> Result<f64> {
    let k = assignment.cluster_count();
    if k < 2 {
        return Err(Error::Degenerate(format!(
            "silhouette needs at least 2 clusters, got {k}"
        )));
    }
    let sizes = assignment.cluster_sizes();
    let members: Vec<usize> = (0..points.rows).filter(|&i| assignment.labels[i].is_some()).collect();
    let scores: Vec<f64> = members
        .par_iter()
        .map(|&i| {
            let own = assignment.labels[i].expect("non-noise");
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for &j in &members {
                if j != i {
                    sums[assignment.labels[j].expect("non-noise")] += dbscan::euclidean(points.row(i), points.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub min_pts: usize,
    pub clusters: usize,
    pub noise: usize,
    pub score: Option<f64>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub params: DbscanParams,
    pub assignment: ClusterAssignment,
    pub score: f64,
    pub min_clusters: usize,
    pub cells: Vec<SweepCell>,
}

/// Runs DBSCAN on every `(eps, min_pts)` cell and keeps the best silhouette
/// among cells with at least `min_clusters` clusters. Ties go to the smaller
/// eps, then the smaller min_pts.
pub fn sweep_dbscan(points: &Matrix, eps_grid: &[f64], min_pts_grid: &[usize], min_clusters: usize) -> Result<SweepResult> {
    sweep_dbscan_capped(points, eps_grid, min_pts_grid, min_clusters, 1.0)
}

/// [`sweep_dbscan`] that also rejects cells leaving more than
/// `max_noise_fraction` of the points as noise.
pub fn sweep_dbscan_capped(
    points: &Matrix,
    eps_grid: &[f64],
    min_pts_grid: &[usize],
    min_clusters: usize,
    max_noise_fraction: f64,
) -> Result<SweepResult> {
    if eps_grid.is_empty() || min_pts_grid.is_empty() {
        return Err(Error::InvalidArgument("empty DBSCAN parameter grid".into()));
    }
    if !(0.0..=1.0).contains(&max_noise_fraction) {
        return Err(Error::InvalidArgument(format!(
            "max noise fraction must lie in [0, 1], got {max_noise_fraction}"
        )));
    }
    let max_noise = (max_noise_fraction * points.rows as f64).floor() as usize;
    let params: Vec<DbscanParams> = eps_grid
        .iter()
        .flat_map(|&e| min_pts_grid.iter().map(move |&m| DbscanParams::new(e, m)))
        .collect::<Result<_>>()?;
    let runs: Vec<(SweepCell, ClusterAssignment)> = params
        .par_iter()
        .map(|&p| {
            let a = dbscan(points, p);
            let score = silhouette(points, &a).ok();
            let clusters = a.cluster_count();
            let cell = SweepCell {
                eps: p.eps,
                min_pts: p.min_pts,
                clusters,
                noise: a.noise_count(),
                score,
                feasible: score.is_some() && clusters >= min_clusters && a.noise_count() <= max_noise,
            };
            (cell, a)
        })
        .collect();

    let better = |a: &SweepCell, b: &SweepCell| -> Ordering {
        // Greater is better.
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(Ordering::Equal)
            .then(b.eps.partial_cmp(&a.eps).unwrap_or(Ordering::Equal))
            .then(b.min_pts.cmp(&a.min_pts))
    };
    let best = runs
        .iter()
        .filter(|(c, _)| c.feasible)
        .max_by(|(a, _), (b, _)| better(a, b));
    let cells: Vec<SweepCell> = runs.iter().map(|(c, _)| c.clone()).collect();
    match best {
        Some((cell, assignment)) => Ok(SweepResult {
            params: DbscanParams {
                eps: cell.eps,
                min_pts: cell.min_pts,
            },
            assignment: assignment.clone(),
            score: cell.score.expect("feasible cells have scores"),
            min_clusters,
            cells,
        }),
        None => {
            let mut diag = cells.clone();
            diag.sort_by(|a, b| b.clusters.cmp(&a.clusters).then(better(b, a)));
            let listing: Vec<String> = diag
                .iter()
                .take(3)
                .map(|c| {
                    format!(
                        "eps={} min_pts={} clusters={} noise={} score={}",
                        c.eps,
                        c.min_pts,
                        c.clusters,
                        c.noise,
                        c.score.map_or("undefined".into(), |s| format!("{s:.4}"))
                    )
                })
                .collect();
            Err(Error::NoFeasibleCell(format!(
                "no cell reaches {min_clusters} clusters with a defined silhouette and at most {max_noise} noise points; closest: {}",
                listing.join("; ")
            )))
        }
    }
}

/// `steps` eps values spread over the 2nd to 25th percentile of pairwise distances.
pub fn default_eps_grid(points: &Matrix, steps: usize) -> Vec<f64> {
    let n = points.rows;
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dbscan::euclidean(points.row(i), points.row(j)))
        .filter(|d| *d > 0.0)
        .collect();
    if d.is_empty() || steps == 0 {
        return Vec::new();
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let q = |f: f64| d[((d.len() - 1) as f64 * f).round() as usize];
    let (lo, hi) = (q(0.002), q(0.25));
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|s| lo * (hi / lo).powf(s as f64 / (steps - 1) as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub particle: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub id: String,
    pub cluster: i64,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn write_points<W: Write>(w: W, rows: &[PointRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<points>", e))
}

pub fn read_points<R: Read>(r: R) -> Result<Vec<PointRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub fn write_assignment<W: Write>(w: W, ids: &[String], assignment: &ClusterAssignment) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (id, c) in ids.iter().zip(assignment.as_ints()) {
        out.serialize(AssignmentRow { id: id.clone(), cluster: c }).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io("<assignment>", e))
}

pub fn read_assignment<R: Read>(r: R) -> Result<(Vec<String>, ClusterAssignment)> {
    let rows: Vec<AssignmentRow> = csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect::<Result<_>>()?;
    let ids = rows.iter().map(|r| r.id.clone()).collect();
    let labels = rows
        .iter()
        .map(|r| if r.cluster < 0 { None } else { Some(r.cluster as usize) })
        .collect();
    Ok((ids, ClusterAssignment { labels }))
}
