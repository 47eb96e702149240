use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::HotspotModel;
use crate::tensor::{Real, Tensor};

/// One agglomeration step. Leaves are numbered `0..n`; the cluster created
/// by merge `i` is numbered `n + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average-linkage agglomerative clustering under Euclidean distance.
/// Ties go to the pair with the smallest cluster ids.
pub fn average_linkage(labels: Vec<String>, points: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = points.len();
    if n < 2 || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "clustering needs at least two labelled points, got {n} points and {} labels",
            labels.len()
        )));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(Error::shape("average_linkage", "points differ in dimension"));
    }
    let base: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| l2(&points[i], &points[j])).collect()).collect();
    // active clusters: (id, member leaves)
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let (a, b) = (&active[i].1, &active[j].1);
                let total: f64 = a.iter().flat_map(|&p| b.iter().map(move |&q| (p, q))).map(|(p, q)| base[p][q]).sum();
                let d = total / (a.len() * b.len()) as f64;
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (height, i, j) = best.expect("two active clusters");
        let (right_id, right) = active.remove(j);
        let (left_id, mut left) = active.remove(i);
        left.extend(right);
        merges.push(Merge { left: left_id, right: right_id, height, size: left.len() });
        active.push((n + merges.len() - 1, left));
        active.sort_by_key(|(id, _)| *id);
    }
    Ok(Dendrogram { labels, merges })
}

impl Dendrogram {
    /// Indented tree, root first; leaves show their label.
    pub fn render(&self) -> String {
        let n = self.labels.len();
        let mut out = String::new();
        let mut stack = vec![(n + self.merges.len() - 1, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let pad = "  ".repeat(depth);
            if id < n {
                let _ = writeln!(out, "{pad}{}", self.labels[id]);
            } else {
                let m = &self.merges[id - n];
                let _ = writeln!(out, "{pad}+ {:.6} ({} objects)", m.height, m.size);
                stack.push((m.right, depth + 1));
                stack.push((m.left, depth + 1));
            }
        }
        out
    }
}

/// Clusters object classes by the mean anticipated embedding of their
/// inactive images.
pub fn cluster_objects<T: Real>(model: &HotspotModel<T>, groups: &[(String, Vec<Tensor<T>>)]) -> Result<Dendrogram> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "clustering needs at least two object classes, got {}",
            groups.len()
        )));
    }
    let mut labels = Vec::new();
    let mut means = Vec::new();
    for (label, images) in groups {
        if images.is_empty() {
            return Err(Error::InvalidArgument(format!("object class {label} has no images")));
        }
        let mut mean = vec![0.0; model.config.d()];
        for img in images {
            let e = model.inactive_embedding(img)?;
            for (m, v) in mean.iter_mut().zip(e.data()) {
                *m += v.to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|m| *m /= images.len() as f64);
        labels.push(label.clone());
        means.push(mean);
    }
    average_linkage(labels, &means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn identical_points_merge_at_zero() {
        let d = average_linkage(names(2), &[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(d.merges.len(), 1);
        assert_eq!(d.merges[0].height, 0.0);
    }

    #[test]
    fn close_pair_merges_first() {
        // a and b are close, c is far from both
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 10.0]];
        let d = average_linkage(names(3), &pts).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert_eq!(d.merges[0].height, 1.0);
        let expected = (l2(&pts[0], &pts[2]) + l2(&pts[1], &pts[2])) / 2.0;
        assert!((d.merges[1].height - expected).abs() < 1e-12);
        assert_eq!(d.merges[1].size, 3);
        assert!(d.render().starts_with("+ "));
    }

    /// Brute-force average linkage over explicit leaf sets.
    fn oracle_heights(pts: &[Vec<f64>]) -> Vec<f64> {
        let mut clusters: Vec<Vec<usize>> = (0..pts.len()).map(|i| vec![i]).collect();
        let mut heights = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut s = 0.0;
                    for &p in &clusters[i] {
                        for &q in &clusters[j] {
                            s += l2(&pts[p], &pts[q]);
                        }
                    }
                    let d = s / (clusters[i].len() * clusters[j].len()) as f64;
                    if d < best.0 {
                        best = (d, i, j);
                    }
                }
            }
            let b = clusters.remove(best.2);
            clusters[best.1].extend(b);
            heights.push(best.0);
        }
        heights
    }

    #[test]
    fn heights_are_monotone_and_match_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..8);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let d = average_linkage(names(n), &pts).unwrap();
            assert_eq!(d.merges.len(), n - 1);
            let heights: Vec<f64> = d.merges.iter().map(|m| m.height).collect();
            assert!(heights.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{heights:?}");
            for (a, b) in heights.iter().zip(oracle_heights(&pts)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(average_linkage(names(1), &[vec![0.0]]).is_err());
    }
}
