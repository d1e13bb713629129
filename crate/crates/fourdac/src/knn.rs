//! Exact k-nearest-neighbor search over 3D point sets.
//!
//! A uniform hash grid buckets points by cell. Queries expand outward in
//! Chebyshev rings and stop once the ring's distance lower bound exceeds the
//! current k-th best cost, so results are exact, not approximate. Ordering is
//! deterministic: candidates compare by `(cost, index)`, so ties go to the
//! lower point index.

use std::collections::HashMap;

/// Spatial index over a fixed set of points, optionally carrying a color per
/// point for combined position+color queries.
pub struct GridIndex {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
    cell_min: [i64; 3],
    cell_max: [i64; 3],
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
}

impl GridIndex {
    /// Builds an index for position-only queries.
    pub fn new(positions: &[[f64; 3]]) -> GridIndex {
        Self::build(positions, None)
    }

    /// Builds an index whose queries add `color_weight`-scaled squared color
    /// distance on top of squared Euclidean distance.
    pub fn with_colors(positions: &[[f64; 3]], colors: &[[f64; 3]]) -> GridIndex {
        assert_eq!(positions.len(), colors.len());
        Self::build(positions, Some(colors.to_vec()))
    }

    fn build(positions: &[[f64; 3]], colors: Option<Vec<[f64; 3]>>) -> GridIndex {
        let n = positions.len().max(1);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut max_ext = 1e-9f64;
        let mut volume = 1.0;
        for a in 0..3 {
            let ext = if positions.is_empty() { 1.0 } else { (hi[a] - lo[a]).max(1e-9) };
            max_ext = max_ext.max(ext);
            volume *= ext;
        }
        // Average inter-point spacing, clamped so degenerate (flat or
        // collinear) clouds still get at most ~64 cells per axis.
        let cell = (volume / n as f64).cbrt().max(max_ext / 64.0).max(1e-9);

        let mut index = GridIndex {
            cell,
            buckets: HashMap::new(),
            cell_min: [i64::MAX; 3],
            cell_max: [i64::MIN; 3],
            positions: positions.to_vec(),
            colors,
        };
        for (i, p) in positions.iter().enumerate() {
            let c = index.cell_of(*p);
            for a in 0..3 {
                index.cell_min[a] = index.cell_min[a].min(c[a]);
                index.cell_max[a] = index.cell_max[a].max(c[a]);
            }
            index.buckets.entry(c).or_default().push(i as u32);
        }
        index
    }

    fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = (p[a] / self.cell).floor() as i64;
        }
        c
    }

    /// Returns the `k` nearest points to `query` as `(index, squared_cost)`,
    /// ascending by `(cost, index)`. Fewer than `k` entries come back when
    /// the index holds fewer points.
    pub fn nearest(&self, query: [f64; 3], k: usize) -> Vec<(u32, f64)> {
        self.search(query, None, 0.0, k)
    }

    /// Position+color query: cost = ‖Δposition‖² + `color_weight`·‖Δcolor‖².
    /// The index must have been built with colors.
    pub fn nearest_colored(
        &self,
        query: [f64; 3],
        query_color: [f64; 3],
        color_weight: f64,
        k: usize,
    ) -> Vec<(u32, f64)> {
        assert!(self.colors.is_some(), "index was built without colors");
        self.search(query, Some(query_color), color_weight, k)
    }

    fn search(
        &self,
        query: [f64; 3],
        query_color: Option<[f64; 3]>,
        color_weight: f64,
        k: usize,
    ) -> Vec<(u32, f64)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k == 0 || self.positions.is_empty() {
            return Vec::new();
        }
        let c0 = self.cell_of(query);
        // Chebyshev radius that covers every populated cell; rings past it
        // are empty, which bounds the search when fewer than k points exist.
        let mut cover = 0i64;
        // Rings closer than the bbox hold nothing, so start at the first one
        // that can intersect it. Skipping empty rings never skips a point and
        // only postpones (never loosens) the lower-bound cutoff.
        let mut to_bbox = 0i64;
        for a in 0..3 {
            cover = cover
                .max(c0[a] - self.cell_min[a])
                .max(self.cell_max[a] - c0[a]);
            to_bbox = to_bbox
                .max(self.cell_min[a] - c0[a])
                .max(c0[a] - self.cell_max[a]);
        }

        let mut r = to_bbox.max(0);
        loop {
            if best.len() == k {
                // Any point in ring r is at least (r-1)·cell away, because the
                // query sits somewhere inside its own cell.
                let lb = ((r - 1).max(0)) as f64 * self.cell;
                if lb * lb > best[k - 1].0 {
                    break;
                }
            }
            if r > cover {
                break;
            }
            self.for_each_ring_cell(c0, r, |cell| {
                let Some(bucket) = self.buckets.get(&cell) else {
                    return;
                };
                for &i in bucket {
                    let p = self.positions[i as usize];
                    let mut cost = 0.0;
                    for a in 0..3 {
                        let d = p[a] - query[a];
                        cost += d * d;
                    }
                    if let Some(qc) = query_color {
                        let pc = self.colors.as_ref().unwrap()[i as usize];
                        let mut dc = 0.0;
                        for a in 0..3 {
                            let d = pc[a] - qc[a];
                            dc += d * d;
                        }
                        cost += color_weight * dc;
                    }
                    let key = (cost, i);
                    let pos = best.partition_point(|&e| e < key);
                    if pos < k {
                        best.insert(pos, key);
                        best.truncate(k);
                    }
                }
            });
            r += 1;
        }
        best.into_iter().map(|(cost, i)| (i, cost)).collect()
    }

    /// Visits every cell at Chebyshev distance exactly `r` from `center`
    /// once: full ±z faces, then ±y faces minus the z rims, then ±x faces
    /// minus both rims. All loops are clipped to the populated cell bounding
    /// box so rings far outside the data cost nothing.
    fn for_each_ring_cell(&self, center: [i64; 3], r: i64, mut f: impl FnMut([i64; 3])) {
        let lo = self.cell_min;
        let hi = self.cell_max;
        if r == 0 {
            if (0..3).all(|a| center[a] >= lo[a] && center[a] <= hi[a]) {
                f(center);
            }
            return;
        }
        let [cx, cy, cz] = center;
        let xf = ((cx - r).max(lo[0]), (cx + r).min(hi[0]));
        let yf = ((cy - r).max(lo[1]), (cy + r).min(hi[1]));
        let yi = ((cy - r + 1).max(lo[1]), (cy + r - 1).min(hi[1]));
        let zi = ((cz - r + 1).max(lo[2]), (cz + r - 1).min(hi[2]));
        for &z in &[cz - r, cz + r] {
            if z < lo[2] || z > hi[2] {
                continue;
            }
            for x in xf.0..=xf.1 {
                for y in yf.0..=yf.1 {
                    f([x, y, z]);
                }
            }
        }
        for &y in &[cy - r, cy + r] {
            if y < lo[1] || y > hi[1] {
                continue;
            }
            for x in xf.0..=xf.1 {
                for z in zi.0..=zi.1 {
                    f([x, y, z]);
                }
            }
        }
        for &x in &[cx - r, cx + r] {
            if x < lo[0] || x > hi[0] {
                continue;
            }
            for y in yi.0..=yi.1 {
                for z in zi.0..=zi.1 {
                    f([x, y, z]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(
        positions: &[[f64; 3]],
        colors: Option<(&[[f64; 3]], [f64; 3], f64)>,
        query: [f64; 3],
        k: usize,
    ) -> Vec<(u32, f64)> {
        let mut all: Vec<(f64, u32)> = positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut cost = 0.0;
                for a in 0..3 {
                    let d = p[a] - query[a];
                    cost += d * d;
                }
                if let Some((cols, qc, w)) = colors {
                    let mut dc = 0.0;
                    for a in 0..3 {
                        let d = cols[i][a] - qc[a];
                        dc += d * d;
                    }
                    cost += w * dc;
                }
                (cost, i as u32)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        all.into_iter().map(|(c, i)| (i, c)).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.gen::<f64>() * scale, rng.gen::<f64>() * scale, rng.gen::<f64>() * scale])
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &n in &[1usize, 2, 7, 300] {
            let positions = random_points(&mut rng, n, 512.0);
            let index = GridIndex::new(&positions);
            for _ in 0..50 {
                let q = [
                    rng.gen::<f64>() * 512.0,
                    rng.gen::<f64>() * 512.0,
                    rng.gen::<f64>() * 512.0,
                ];
                for &k in &[1usize, 3, 8] {
                    assert_eq!(index.nearest(q, k), brute_force(&positions, None, q, k));
                }
            }
        }
    }

    #[test]
    fn colored_metric_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let positions = random_points(&mut rng, 250, 100.0);
        let colors = random_points(&mut rng, 250, 255.0);
        let index = GridIndex::with_colors(&positions, &colors);
        for _ in 0..50 {
            let q = [
                rng.gen::<f64>() * 100.0,
                rng.gen::<f64>() * 100.0,
                rng.gen::<f64>() * 100.0,
            ];
            let qc = [
                rng.gen::<f64>() * 255.0,
                rng.gen::<f64>() * 255.0,
                rng.gen::<f64>() * 255.0,
            ];
            assert_eq!(
                index.nearest_colored(q, qc, 0.35, 5),
                brute_force(&positions, Some((&colors, qc, 0.35)), q, 5)
            );
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let positions = vec![[5.0, 5.0, 5.0]; 4];
        let index = GridIndex::new(&positions);
        let got: Vec<u32> = index.nearest([5.0, 5.0, 5.0], 3).iter().map(|e| e.0).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn fewer_points_than_k_returns_all() {
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let index = GridIndex::new(&positions);
        let got = index.nearest([0.9, 0.0, 0.0], 8);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, 1);
        assert_eq!(got[1].0, 0);
    }

    #[test]
    fn empty_cases_return_empty() {
        let index = GridIndex::new(&[]);
        assert!(index.nearest([0.0; 3], 3).is_empty());
        let index = GridIndex::new(&[[1.0, 2.0, 3.0]]);
        assert!(index.nearest([0.0; 3], 0).is_empty());
    }

    #[test]
    fn far_query_still_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let positions = random_points(&mut rng, 100, 10.0);
        let index = GridIndex::new(&positions);
        let q = [1e4, -1e4, 5.0];
        assert_eq!(index.nearest(q, 4), brute_force(&positions, None, q, 4));
    }

    #[test]
    fn collinear_cloud_is_handled() {
        let positions: Vec<[f64; 3]> = (0..200).map(|i| [i as f64, 0.0, 0.0]).collect();
        let index = GridIndex::new(&positions);
        let got = index.nearest([42.4, 0.0, 0.0], 3);
        let ids: Vec<u32> = got.iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![42, 43, 41]);
    }
}
