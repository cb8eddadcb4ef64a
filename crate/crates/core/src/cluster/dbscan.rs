use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::InvalidArgument("min_pts must be at least 1".into()));
        }
        Ok(Self { eps, min_pts })
    }
}

/// Per-point cluster ids, dense from 0; `None` is noise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
}

impl ClusterAssignment {
    pub const NOISE: i64 = -1;

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count()];
        for l in self.labels.iter().flatten() {
            sizes[*l] += 1;
        }
        sizes
    }

    /// Labels with noise as `-1`.
    pub fn as_ints(&self) -> Vec<i64> {
        self.labels
            .iter()
            .map(|l| l.map_or(Self::NOISE, |c| c as i64))
            .collect()
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices within `eps` of each point, the point itself included.
fn neighborhoods(points: &Matrix, eps: f64) -> Vec<Vec<usize>> {
    (0..points.rows)
        .into_par_iter()
        .map(|i| {
            (0..points.rows)
                .filter(|&j| euclidean(points.row(i), points.row(j)) <= eps)
                .collect()
        })
        .collect()
}

/// Classic DBSCAN. Points are visited in ascending index order, so a border
/// point reachable from several clusters joins the one created first.
pub fn dbscan(points: &Matrix, params: DbscanParams) -> ClusterAssignment {
    let n = points.rows;
    let nbrs = neighborhoods(points, params.eps);
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if nbrs[i].len() < params.min_pts {
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = Some(c);
        let mut queue: VecDeque<usize> = nbrs[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if nbrs[j].len() >= params.min_pts {
                queue.extend(nbrs[j].iter().copied());
            }
        }
    }
    ClusterAssignment { labels }
}
