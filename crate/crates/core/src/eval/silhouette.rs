use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters score 0, as does any point with `a = b = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("points of differing dimension".into()));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::Contract(format!(
            "silhouette needs at least 2 clusters, got {}",
            clusters.len()
        )));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |members: &[usize]| members.iter().map(|&j| distance(p, &points[j])).sum::<f64>();
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| mean_to(m) / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
