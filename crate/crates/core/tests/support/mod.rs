//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use discourse_core::cluster::ClusterAssignment;
use discourse_core::encoder::tensor::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ARI from the four pair counts, enumerating every pair of points.
pub fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut ss, mut sd, mut ds, mut dd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let denom = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (ss * dd - sd * ds) / denom
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean of `(b - a) / max(a, b)` over clustered points; singletons score 0.
pub fn direct_silhouette(points: &Matrix, labels: &[Option<usize>]) -> f64 {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            groups.entry(*c).or_default().push(i);
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&c, members) in &groups {
        for &i in members {
            count += 1;
            if members.len() == 1 {
                continue;
            }
            let a = members.iter().filter(|&&j| j != i).map(|&j| dist(points.row(i), points.row(j))).sum::<f64>()
                / (members.len() - 1) as f64;
            let b = groups
                .iter()
                .filter(|(&k, _)| k != c)
                .map(|(_, other)| other.iter().map(|&j| dist(points.row(i), points.row(j))).sum::<f64>() / other.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / count as f64
}

/// DBSCAN via connected components of core points. Clusters are numbered by
/// their smallest core index; a border point joins the reachable cluster
/// with the smallest number.
pub fn reference_dbscan(points: &Matrix, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.rows;
    let near = |i: usize, j: usize| dist(points.row(i), points.row(j)) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if core[i] && core[j] && near(i, j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut root_number: HashMap<usize, usize> = HashMap::new();
    let mut labels = vec![None; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = root_number.len();
            labels[i] = Some(*root_number.entry(r).or_insert(next));
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| labels[j]).min();
        }
    }
    labels
}

/// Relabels clusters by first appearance so partitions compare directly.
pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

pub fn same_partition(a: &ClusterAssignment, b: &[Option<usize>]) -> bool {
    canonical(&a.labels) == canonical(b)
}

/// KL(P || Q) with Q built directly from Student-t kernels of `y`.
pub fn direct_kl(p: &Matrix, y: &Matrix) -> f64 {
    let n = y.rows;
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = 1.0 / (1.0 + dist(y.row(i), y.row(j)).powi(2));
                w[i * n + j] = v;
                z += v;
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.at(i, j);
            if i != j && pij > 0.0 {
                kl += pij * (pij / (w[i * n + j] / z)).ln();
            }
        }
    }
    kl
}

/// Central finite-difference gradient of [`direct_kl`] with respect to `y`.
pub fn numeric_kl_gradient(p: &Matrix, y: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(y.rows, y.cols);
    let mut y = y.clone();
    for k in 0..y.data.len() {
        let orig = y.data[k];
        y.data[k] = orig + h;
        let plus = direct_kl(p, &y);
        y.data[k] = orig - h;
        let minus = direct_kl(p, &y);
        y.data[k] = orig;
        g.data[k] = (plus - minus) / (2.0 * h);
    }
    g
}

/// IBM Model 1 without NULL, uniform start over the target vocabulary:
/// `t[source][target]` and the log-likelihood trace.
pub fn reference_ibm1(
    pairs: &[(Vec<String>, Vec<String>)],
    iterations: usize,
) -> (HashMap<String, HashMap<String, f64>>, Vec<f64>) {
    let targets: std::collections::HashSet<&String> = pairs.iter().flat_map(|(_, t)| t).collect();
    let uniform = 1.0 / targets.len() as f64;
    let mut t: HashMap<String, HashMap<String, f64>> = HashMap::new();
    for (s, tg) in pairs {
        for e in s {
            for f in tg {
                t.entry(e.clone()).or_default().insert(f.clone(), uniform);
            }
        }
    }
    let ll = |t: &HashMap<String, HashMap<String, f64>>| -> f64 {
        pairs
            .iter()
            .map(|(s, tg)| {
                tg.iter()
                    .map(|f| (s.iter().map(|e| t[e][f]).sum::<f64>() / s.len() as f64).ln())
                    .sum::<f64>()
            })
            .sum()
    };
    let mut trace = vec![ll(&t)];
    for _ in 0..iterations {
        let mut counts: HashMap<String, HashMap<String, f64>> = HashMap::new();
        for (s, tg) in pairs {
            for f in tg {
                let z: f64 = s.iter().map(|e| t[e][f]).sum();
                for e in s {
                    *counts.entry(e.clone()).or_default().entry(f.clone()).or_insert(0.0) += t[e][f] / z;
                }
            }
        }
        for (e, row) in counts {
            let total: f64 = row.values().sum();
            let entry = t.get_mut(&e).expect("seen source word");
            for (f, c) in row {
                entry.insert(f, c / total);
            }
        }
        trace.push(ll(&t));
    }
    (t, trace)
}

/// Uniform labels in `0..k`.
pub fn random_labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..k)).collect()
}

/// Gaussian blobs centred on `centers`, `per` points each, in input order.
pub fn blobs(r: &mut ChaCha8Rng, centers: &[(f64, f64)], per: usize, spread: f64) -> Matrix {
    let mut data = Vec::new();
    for &(cx, cy) in centers {
        for _ in 0..per {
            let (u, v): (f64, f64) = (r.gen(), r.gen());
            // Box-Muller keeps the oracle free of the crate's own samplers.
            let rad = (-2.0 * (1.0 - u).ln()).sqrt();
            data.push(cx + spread * rad * (std::f64::consts::TAU * v).cos());
            data.push(cy + spread * rad * (std::f64::consts::TAU * v).sin());
        }
    }
    Matrix::from_vec(centers.len() * per, 2, data)
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1].
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
