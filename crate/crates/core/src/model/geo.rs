use crate::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance in meters between two `[lat, lon]` points in
/// degrees.
pub fn haversine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (p1, p2) = (a[0].to_radians(), b[0].to_radians());
    let dp = p2 - p1;
    let dl = (b[1] - a[1]).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn check_coord(c: [f64; 2], what: &str) -> Result<()> {
    if !(c[0].is_finite() && c[1].is_finite()) || c[0].abs() > 90.0 || c[1].abs() > 180.0 {
        return Err(Error::invalid(format!("{what} coordinate {c:?} is not a valid lat/lon")));
    }
    Ok(())
}

/// Neighbor lists from [`knn_query`], `[M × k]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn row(&self, q: usize) -> (&[usize], &[f64]) {
        (
            &self.indices[q * self.k..(q + 1) * self.k],
            &self.distances[q * self.k..(q + 1) * self.k],
        )
    }

    pub fn queries(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }
}

/// Exact `k` nearest stations to each query by haversine distance,
/// ascending, ties broken by lower station index.
pub fn knn_query(coords: &[[f64; 2]], query: &[[f64; 2]], k: usize) -> Result<Neighbors> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > coords.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} available stations",
            coords.len()
        )));
    }
    for &c in coords {
        check_coord(c, "station")?;
    }
    for &q in query {
        check_coord(q, "query")?;
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut distances = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(coords.len());
    for &q in query {
        scratch.clear();
        scratch.extend(coords.iter().enumerate().map(|(i, &c)| (haversine(q, c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(cmp);
        for &(d, i) in &scratch {
            indices.push(i);
            distances.push(d);
        }
    }
    Ok(Neighbors {
        k,
        indices,
        distances,
    })
}
