use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Windows;
use crate::model::AqNet;
use crate::nn::Scalar;
use crate::{Error, Result};

/// Above this dimension the principal axes come from the `n × n` Gram
/// matrix instead of the `d × d` covariance.
const GRAM_ROUTE_DIM: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Unit principal axes, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each axis.
    pub variances: Vec<f64>,
    /// Centered input rows projected on the axes.
    pub coords: Vec<Vec<f64>>,
}

/// Top `n_components` principal axes of `rows` (one observation per row).
pub fn pca(rows: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("pca needs at least 2 rows of equal, nonzero length"));
    }
    let k = n_components.min(d).min(n);
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let denom = (n - 1) as f64;
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    if d <= GRAM_ROUTE_DIM {
        let cov = x.tr_mul(&x) / denom;
        let eig = SymmetricEigen::new(cov);
        for i in ranked(eig.eigenvalues.as_slice()).into_iter().take(k) {
            variances.push(eig.eigenvalues[i].max(0.0));
            components.push(eig.eigenvectors.column(i).iter().copied().collect());
        }
    } else {
        let gram = &x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        for i in ranked(eig.eigenvalues.as_slice()).into_iter().take(k) {
            let lambda = eig.eigenvalues[i].max(0.0);
            let axis = x.tr_mul(&eig.eigenvectors.column(i).into_owned());
            let norm = axis.norm();
            variances.push(lambda);
            components.push(if norm > 0.0 {
                axis.iter().map(|v| v / norm).collect()
            } else {
                let mut e = vec![0.0; d];
                e[components.len()] = 1.0;
                e
            });
        }
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| x.row(i).iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        components,
        variances,
        coords,
    })
}

fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Lloyd's 2-means. The first centre is a seeded random point, the second
/// the point farthest from it. Coincident points all land in cluster 0.
pub fn two_means(points: &[Vec<f64>], seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let (far, far_d) = (0..n)
        .map(|i| (i, dist(&points[i], &points[first])))
        .fold((first, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut assign = vec![0; n];
    if far_d == 0.0 {
        return assign;
    }
    let mut centres = [points[first].clone(), points[far].clone()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| usize::from(dist(p, &centres[1]) < dist(p, &centres[0])))
            .collect();
        let changed = next != assign;
        assign = next;
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in centre.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    // label clusters by first appearance
    if assign[0] == 1 {
        for a in &mut assign {
            *a = 1 - *a;
        }
    }
    assign
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub t: usize,
    /// Per head, row-major `[T × T]` attention averaged over every window
    /// and station.
    pub mean: Vec<Vec<f64>>,
    /// Per head, its first two principal coordinates.
    pub coords: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    pub clusters: Vec<usize>,
    /// Number of averaged attention maps per head.
    pub samples: usize,
}

/// Averages `[T × T]` maps per head. `maps` is `[S × heads × T × T]`.
pub fn average_maps(maps: &[f64], heads: usize, t: usize) -> Result<Vec<Vec<f64>>> {
    let per = heads * t * t;
    if per == 0 || maps.len() % per != 0 || maps.is_empty() {
        return Err(Error::shape(format!("{} values is not a multiple of {heads}×{t}×{t}", maps.len())));
    }
    let s = maps.len() / per;
    let mut mean = vec![vec![0.0; t * t]; heads];
    for chunk in maps.chunks_exact(per) {
        for (h, m) in mean.iter_mut().enumerate() {
            for (acc, v) in m.iter_mut().zip(&chunk[h * t * t..(h + 1) * t * t]) {
                *acc += v;
            }
        }
    }
    for m in &mut mean {
        for v in m.iter_mut() {
            *v /= s as f64;
        }
    }
    Ok(mean)
}

/// Builds the report from per-head mean maps.
pub fn summarize_heads(mean: Vec<Vec<f64>>, t: usize, samples: usize, seed: u64) -> Result<AttentionReport> {
    if t < 3 {
        return Err(Error::InsufficientData(format!(
            "attention maps of length {t} are too small for PCA (need T >= 3)"
        )));
    }
    if mean.len() < 2 {
        return Err(Error::invalid("attention analysis needs at least 2 heads"));
    }
    let p = pca(&mean, 2)?;
    let coords = p
        .coords
        .iter()
        .map(|c| [c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0)])
        .collect::<Vec<_>>();
    let total: f64 = {
        let n = mean.len() as f64;
        let d = mean[0].len();
        (0..d)
            .map(|j| {
                let mu = mean.iter().map(|r| r[j]).sum::<f64>() / n;
                mean.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum()
    };
    let ratio = |i: usize| {
        if total > 0.0 {
            p.variances.get(i).copied().unwrap_or(0.0) / total
        } else {
            0.0
        }
    };
    let pts: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
    Ok(AttentionReport {
        t,
        mean,
        coords,
        explained_variance: [ratio(0), ratio(1)],
        clusters: two_means(&pts, seed),
        samples,
    })
}

/// Averages every head's attention over all windows and stations of
/// `windows`, then projects and clusters the heads.
pub fn attention_report<T: Scalar>(model: &AqNet<T>, windows: &Windows, seed: u64) -> Result<AttentionReport> {
    if !model.config.use_attention {
        return Err(Error::invalid("model has no attention layer"));
    }
    let (heads, t) = (model.config.n_heads, model.config.t_in);
    if t < 3 {
        return Err(Error::InsufficientData(format!(
            "attention maps of length {t} are too small for PCA (need T >= 3)"
        )));
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData("no evaluation windows".into()));
    }
    let mut sum = vec![vec![0.0; t * t]; heads];
    let mut samples = 0;
    for batch in windows.iter_batches(16) {
        let batch = batch?;
        let maps = model
            .predict(&batch)?
            .attention
            .ok_or_else(|| Error::invalid("model returned no attention maps"))?;
        let s = maps.len() / (heads * t * t);
        let m = average_maps(&maps, heads, t)?;
        for (acc, head) in sum.iter_mut().zip(m) {
            for (a, v) in acc.iter_mut().zip(head) {
                *a += v * s as f64;
            }
        }
        samples += s;
    }
    for m in &mut sum {
        for v in m.iter_mut() {
            *v /= samples as f64;
        }
    }
    summarize_heads(sum, t, samples, seed)
}

impl AttentionReport {
    /// `head,query,key,weight`
    pub fn write_maps_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "head,query,key,weight")?;
        for (h, m) in self.mean.iter().enumerate() {
            for q in 0..self.t {
                for k in 0..self.t {
                    writeln!(w, "{h},{q},{k},{}", m[q * self.t + k])?;
                }
            }
        }
        Ok(())
    }

    /// `head,pc1,pc2,cluster`
    pub fn write_heads_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "head,pc1,pc2,cluster")?;
        for (h, (c, k)) in self.coords.iter().zip(&self.clusters).enumerate() {
            writeln!(w, "{h},{},{},{k}", c[0], c[1])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cyclic Jacobi rotations, kept separate from the library solver.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let vals = (0..n).map(|i| a[i][i]).collect();
        let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
        (vals, vecs)
    }

    fn stochastic(t: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = vec![0.0; t * t];
        for q in 0..t {
            let row: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for k in 0..t {
                m[q * t + k] = row[k] / s;
            }
        }
        m
    }

    #[test]
    fn pca_matches_jacobi_oracle() {
        let t = 3;
        let rows: Vec<Vec<f64>> = (0..4).map(|s| stochastic(t, s)).collect();
        let p = pca(&rows, 2).unwrap();

        let n = rows.len() as f64;
        let d = t * t;
        let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| rows.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1.0)).collect())
            .collect();
        let (vals, vecs) = jacobi_eigen(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for c in 0..2 {
            let o = &vecs[order[c]];
            assert!((p.variances[c] - vals[order[c]]).abs() < 1e-10);
            let dot: f64 = o.iter().zip(&p.components[c]).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            for (a, b) in o.iter().zip(&p.components[c]) {
                assert!((a - sign * b).abs() < 1e-8, "component {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gram_route_agrees_with_covariance_route() {
        let rows: Vec<Vec<f64>> = (0..5).map(|s| stochastic(4, 10 + s)).collect();
        let direct = pca(&rows, 2).unwrap();
        // pad with zero columns past the threshold to force the Gram route
        let wide: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().copied().chain(std::iter::repeat_n(0.0, GRAM_ROUTE_DIM)).collect())
            .collect();
        let gram = pca(&wide, 2).unwrap();
        for c in 0..2 {
            assert!((direct.variances[c] - gram.variances[c]).abs() < 1e-12);
            let sign = direct.coords[0][c].signum() * gram.coords[0][c].signum();
            for i in 0..rows.len() {
                assert!((direct.coords[i][c] - sign * gram.coords[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_heads_collapse() {
        let m = stochastic(5, 1);
        let r = summarize_heads(vec![m.clone(); 4], 5, 1, 0).unwrap();
        assert!(r.coords.iter().all(|c| c[0].abs() < 1e-12 && c[1].abs() < 1e-12));
        assert_eq!(r.clusters, vec![0; 4]);
    }

    #[test]
    fn two_means_separates_groups() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 0.1], vec![0.1, 0.2], vec![9.8, -0.1]];
        assert_eq!(two_means(&pts, 3), vec![0, 1, 0, 1]);
        assert_eq!(two_means(&pts, 4), two_means(&pts, 3));
    }

    #[test]
    fn averaging_keeps_rows_stochastic() {
        let (heads, t) = (2, 4);
        let maps: Vec<f64> = (0..6).flat_map(|s| stochastic(t, s)).collect();
        let mean = average_maps(&maps, heads, t).unwrap();
        for m in mean {
            for q in 0..t {
                assert!((m[q * t..(q + 1) * t].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_sequences_are_rejected() {
        let m = stochastic(2, 0);
        assert!(matches!(summarize_heads(vec![m.clone(), m], 2, 1, 0), Err(Error::InsufficientData(_))));
    }
}
