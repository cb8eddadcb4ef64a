//! Representative utterances per cluster.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub text: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterExemplars {
    pub cluster: usize,
    pub size: usize,
    pub exemplars: Vec<Exemplar>,
}

/// Up to `n` members per cluster, nearest first to the cluster centroid in
/// the plane; ties go to the earlier point. Noise points are never chosen.
pub fn cluster_exemplars(
    ids: &[String],
    points: &[(f64, f64)],
    labels: &[Option<usize>],
    texts: &BTreeMap<String, String>,
    n: usize,
) -> Result<Vec<ClusterExemplars>> {
    if ids.len() != points.len() || ids.len() != labels.len() {
        bail!(
            "exemplar inputs disagree: {} ids, {} points, {} labels",
            ids.len(),
            points.len(),
            labels.len()
        );
    }
    let missing: Vec<&str> = ids.iter().filter(|id| !texts.contains_key(*id)).map(String::as_str).collect();
    if !missing.is_empty() {
        bail!(
            "no utterance text for {} clustered id(s), e.g. `{}`",
            missing.len(),
            missing[0]
        );
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            members.entry(*c).or_default().push(i);
        }
    }
    Ok(members
        .into_iter()
        .map(|(cluster, idx)| {
            let m = idx.len() as f64;
            let cx = idx.iter().map(|&i| points[i].0).sum::<f64>() / m;
            let cy = idx.iter().map(|&i| points[i].1).sum::<f64>() / m;
            let mut ranked: Vec<(f64, usize)> = idx
                .iter()
                .map(|&i| ((points[i].0 - cx).hypot(points[i].1 - cy), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ClusterExemplars {
                cluster,
                size: idx.len(),
                exemplars: ranked
                    .into_iter()
                    .take(n)
                    .map(|(d, i)| Exemplar {
                        id: ids[i].clone(),
                        text: texts[&ids[i]].clone(),
                        distance: d,
                    })
                    .collect(),
            }
        })
        .collect())
}
