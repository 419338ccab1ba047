use serde::{Deserialize, Serialize};

use super::geo::{knn_query, Neighbors};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Distance offset in meters that keeps inverse-distance weights finite at
/// co-located points.
pub const IDW_EPSILON_M: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeightMode {
    InverseDistance,
    LearnedFeature,
}

impl std::str::FromStr for KnnWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_distance" => Ok(Self::InverseDistance),
            "learned_feature" => Ok(Self::LearnedFeature),
            _ => Err(Error::invalid(format!(
                "unknown knn weight mode `{s}` (inverse_distance | learned_feature)"
            ))),
        }
    }
}

/// Pooled per-station latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StationFeatures {
    /// `[N × hidden_dim]`
    pub features: Tensor<f64>,
    pub coords: Vec<[f64; 2]>,
}

/// Normalized weights `∝ 1/(d + ε)^power`. Equal distances give equal
/// weights.
pub fn idw_weights(distances: &[f64], power: f64) -> Vec<f64> {
    let raw: Vec<f64> = distances
        .iter()
        .map(|&d| (d + IDW_EPSILON_M).powf(-power))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Softmax of `−‖f_q − f_i‖² / τ` over the neighbors, with `f_q` the
/// inverse-distance blend of the neighbor features.
pub fn feature_weights(neighbor_features: &[&[f64]], idw: &[f64], tau: f64) -> Vec<f64> {
    let dim = neighbor_features.first().map_or(0, |f| f.len());
    let mut fq = vec![0.0; dim];
    for (f, &w) in neighbor_features.iter().zip(idw) {
        for (q, &x) in fq.iter_mut().zip(f.iter()) {
            *q += w * x;
        }
    }
    let logits: Vec<f64> = neighbor_features
        .iter()
        .map(|f| -f.iter().zip(&fq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Interpolation weights for one query row of `nb`.
pub fn neighbor_weights(
    nb: &Neighbors,
    q: usize,
    features: &StationFeatures,
    mode: KnnWeightMode,
    power: f64,
    tau: f64,
) -> Vec<f64> {
    let (idx, dist) = nb.row(q);
    let idw = idw_weights(dist, power);
    match mode {
        KnnWeightMode::InverseDistance => idw,
        KnnWeightMode::LearnedFeature => {
            let dim = features.features.cols();
            let data = features.features.data();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| &data[i * dim..(i + 1) * dim]).collect();
            feature_weights(&rows, &idw, tau)
        }
    }
}

/// Interpolates `station_preds` (`[H × N]`) at the `query` coordinates and
/// returns `[H × M]`. Each output is a convex combination of the `k`
/// geographically nearest stations.
pub fn knn_interpolate(
    features: &StationFeatures,
    station_preds: &Tensor<f64>,
    query: &[[f64; 2]],
    k: usize,
    mode: KnnWeightMode,
    power: f64,
    tau: f64,
) -> Result<Tensor<f64>> {
    let n = features.coords.len();
    if station_preds.shape().len() != 2 || station_preds.cols() != n {
        return Err(Error::shape(format!(
            "station predictions {:?} do not match {n} stations",
            station_preds.shape()
        )));
    }
    if features.features.rows() != n {
        return Err(Error::shape("feature rows do not match station count"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let h = station_preds.rows();
    let m = query.len();
    let nb = knn_query(&features.coords, query, k)?;
    let p = station_preds.data();
    let mut out = vec![0.0; h * m];
    for q in 0..m {
        let w = neighbor_weights(&nb, q, features, mode, power, tau);
        let (idx, _) = nb.row(q);
        for hh in 0..h {
            out[hh * m + q] = idx.iter().zip(&w).map(|(&i, &wi)| wi * p[hh * n + i]).sum();
        }
    }
    Tensor::new(vec![h, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stations(coords: Vec<[f64; 2]>, dim: usize, rng: &mut ChaCha8Rng) -> StationFeatures {
        let n = coords.len();
        StationFeatures {
            features: Tensor::uniform(&[n, dim], 1.0, rng),
            coords,
        }
    }

    #[test]
    fn query_at_station_copies_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = vec![[40.0, 116.0], [40.3, 116.5], [39.6, 116.9], [40.6, 117.3]];
        let f = stations(coords.clone(), 4, &mut rng);
        let preds = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let out =
            knn_interpolate(&f, &preds, &[coords[2]], 4, KnnWeightMode::InverseDistance, 2.0, 1.0)
                .unwrap();
        for h in 0..3 {
            let diff = (out.data()[h] - preds.data()[h * 4 + 2]).abs();
            assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn equidistant_pair_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = stations(vec![[0.0, -1.0], [0.0, 1.0], [5.0, 5.0]], 3, &mut rng);
        let preds = Tensor::new(vec![1, 3], vec![2.0, 6.0, 100.0]).unwrap();
        let out =
            knn_interpolate(&f, &preds, &[[0.0, 0.0]], 2, KnnWeightMode::InverseDistance, 2.0, 1.0)
                .unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn colocated_stations_get_uniform_weights() {
        let w = idw_weights(&[10.0, 10.0, 10.0], 2.0);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn all_stations_against_direct_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<[f64; 2]> = (0..6)
            .map(|_| [rng.random_range(39.0..41.0), rng.random_range(115.5..118.0)])
            .collect();
        let f = stations(coords.clone(), 5, &mut rng);
        let preds = Tensor::uniform(&[4, 6], 1.0, &mut rng);
        let q = [40.1, 116.7];
        let out =
            knn_interpolate(&f, &preds, &[q], 6, KnnWeightMode::InverseDistance, 1.0, 1.0).unwrap();
        // inverse-distance average written out longhand
        let mut num = [0.0; 4];
        let mut den = 0.0;
        for (i, &c) in coords.iter().enumerate() {
            let w = 1.0 / (super::super::geo::haversine(q, c) + 1.0);
            den += w;
            for h in 0..4 {
                num[h] += w * preds.data()[h * 6 + i];
            }
        }
        for h in 0..4 {
            assert!((out.data()[h] - num[h] / den).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_weights_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = feature_weights(&[&a, &b], &[0.7, 0.3], 0.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        // the query blend sits nearer to `a`, so `a` gets more weight
        assert!(w[0] > w[1]);
    }
}
