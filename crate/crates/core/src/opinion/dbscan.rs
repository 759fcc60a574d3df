use std::cmp::Ordering;

use nalgebra::Point3;
use rustc_hash::FxHashMap;

/// Density-based clustering of 3D points.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are the connected components of core points;
/// a non-core point within `eps` of a core point joins the lowest-numbered
/// such cluster, everything else is noise (`None`).
///
/// Clusters are numbered by their lexicographically smallest core point
/// (x, then y, then z), so labels do not depend on the input order.
pub fn dbscan(points: &[Point3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0 && min_pts >= 1, "dbscan needs eps > 0 and min_pts >= 1");
    let n = points.len();
    let eps2 = eps * eps;
    let inv = 1.0 / eps;
    let cell_of = |p: &Point3<f64>| {
        (
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        )
    };
    let mut grid: FxHashMap<(i64, i64, i64), Vec<usize>> = FxHashMap::default();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i);
    }

    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for p in points {
        let (cx, cy, cz) = cell_of(p);
        let mut list = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        list.extend(bucket.iter().copied().filter(|&j| within(p, &points[j], eps2)));
                    }
                }
            }
        }
        neighbors.push(list);
    }
    let core: Vec<bool> = neighbors.iter().map(|l| l.len() >= min_pts).collect();

    // Connected components over core points.
    let mut component = vec![usize::MAX; n];
    let mut roots: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || component[seed] != usize::MAX {
            continue;
        }
        let c = roots.len();
        let mut best = seed;
        component[seed] = c;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            if lex_cmp(points, i, best) == Ordering::Less {
                best = i;
            }
            for &j in &neighbors[i] {
                if core[j] && component[j] == usize::MAX {
                    component[j] = c;
                    stack.push(j);
                }
            }
        }
        roots.push(best);
    }

    let mut order: Vec<usize> = (0..roots.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(points, roots[a], roots[b]));
    let mut rank = vec![0usize; roots.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }

    (0..n)
        .map(|i| {
            if core[i] {
                Some(rank[component[i]])
            } else {
                neighbors[i]
                    .iter()
                    .filter(|&&j| core[j])
                    .map(|&j| rank[component[j]])
                    .min()
            }
        })
        .collect()
}

#[inline]
pub(crate) fn within(a: &Point3<f64>, b: &Point3<f64>, eps2: f64) -> bool {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z <= eps2
}

/// Total order on points by coordinates, then by index.
fn lex_cmp(points: &[Point3<f64>], a: usize, b: usize) -> Ordering {
    let (p, q) = (&points[a], &points[b]);
    p.x.total_cmp(&q.x)
        .then(p.y.total_cmp(&q.y))
        .then(p.z.total_cmp(&q.z))
        .then(a.cmp(&b))
}
