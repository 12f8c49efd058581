//! Uniform-grid nearest-neighbour index for 3D point sets.

use crate::geometry::{dist2, Vec3};

/// Exact nearest-neighbour queries over a borrowed point slice.
///
/// Ties in distance resolve to the lowest point index.
pub struct NearestIndex<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if points.is_empty() {
            min = [0.0; 3];
            max = [0.0; 3];
        }
        let span = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = if span > 0.0 { span / per_axis as f64 } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((max[a] - min[a]) / cell).floor() as usize + 1).min(per_axis));

        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(p, min, cell, dims);
                c[0] + dims[0] * (c[1] + dims[1] * c[2])
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            points,
            min,
            cell,
            dims,
            starts,
            order,
        }
    }

    fn cell_of(p: &Vec3, min: Vec3, cell: f64, dims: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - min[a]) / cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(dims[a] - 1)
            }
        })
    }

    /// Index and squared distance of the nearest point, or `None` if empty.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let qc = Self::cell_of(&q, self.min, self.cell, self.dims);
        let mut best: Option<(usize, f64)> = None;
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            self.scan_ring(q, qc, r, &mut best);
            let mut gap = f64::INFINITY;
            for a in 0..3 {
                if qc[a] > r {
                    let lo = self.min[a] + (qc[a] - r) as f64 * self.cell;
                    gap = gap.min(q[a] - lo);
                }
                if qc[a] + r + 1 < self.dims[a] {
                    let hi = self.min[a] + (qc[a] + r + 1) as f64 * self.cell;
                    gap = gap.min(hi - q[a]);
                }
            }
            if gap == f64::INFINITY {
                break;
            }
            if let Some((_, d2)) = best {
                if gap > 0.0 && d2 < gap * gap {
                    break;
                }
            }
        }
        best
    }

    fn scan_ring(&self, q: Vec3, qc: [usize; 3], r: usize, best: &mut Option<(usize, f64)>) {
        let range = |a: usize| {
            let lo = qc[a].saturating_sub(r);
            let hi = (qc[a] + r).min(self.dims[a] - 1);
            lo..=hi
        };
        let ri = r as isize;
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let cheb = [x, y, z]
                        .iter()
                        .zip(qc.iter())
                        .map(|(c, q)| (*c as isize - *q as isize).abs())
                        .max()
                        .unwrap();
                    if cheb != ri {
                        continue;
                    }
                    let c = x + self.dims[0] * (y + self.dims[1] * z);
                    for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                        let d2 = dist2(self.points[i], q);
                        let better = match *best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            *best = Some((i, d2));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], q: Vec3) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let idx = NearestIndex::new(&pts);
        assert_eq!(idx.nearest([0.0; 3]).unwrap().0, 0);
        assert_eq!(idx.nearest([2.0, 0.0, 0.0]).unwrap().0, 0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..200),
            qs in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..20),
        ) {
            let idx = NearestIndex::new(&pts);
            for q in qs {
                let (i, d) = idx.nearest(q).unwrap();
                let (bi, bd) = brute(&pts, q);
                prop_assert_eq!(d, bd);
                prop_assert_eq!(i, bi);
            }
        }
    }
}
