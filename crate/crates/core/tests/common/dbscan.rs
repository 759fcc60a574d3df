use std::collections::BTreeMap;

use nalgebra::Point3;
use rand::Rng;

/// Quadratic DBSCAN: all-pairs neighborhoods, union-find over core points,
/// clusters named by their lexicographically smallest core point, border
/// points joining the smallest-named adjacent cluster.
pub fn brute_force(points: &[Point3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |a: usize, b: usize| (points[a] - points[b]).norm_squared() <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let lex = |a: usize, b: usize| {
        let (p, q) = (points[a], points[b]);
        (p.x, p.y, p.z, a).partial_cmp(&(q.x, q.y, q.z, b)).unwrap()
    };
    let mut smallest: BTreeMap<usize, usize> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let r = root(&mut parent, i);
        let e = smallest.entry(r).or_insert(i);
        if lex(i, *e).is_lt() {
            *e = i;
        }
    }
    let mut reps: Vec<(usize, usize)> = smallest.into_iter().collect();
    reps.sort_by(|a, b| lex(a.1, b.1));
    let name: BTreeMap<usize, usize> = reps.iter().enumerate().map(|(k, (r, _))| (*r, k)).collect();
    (0..n)
        .map(|i| {
            if core[i] {
                Some(name[&root(&mut parent, i)])
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).map(|j| name[&root(&mut parent, j)]).min()
            }
        })
        .collect()
}

/// True when the two labelings agree up to a bijective renaming of clusters.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x,
        _ => false,
    })
}

pub fn random_set(rng: &mut impl Rng) -> (Vec<Point3<f64>>, f64, usize) {
    let n = rng.random_range(1..=300);
    let blobs = rng.random_range(1..=5);
    let centers: Vec<Point3<f64>> = (0..blobs)
        .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let spread = rng.random_range(0.02..0.3);
    let points = (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                Point3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))
            } else {
                let c = centers[rng.random_range(0..blobs)];
                c + nalgebra::Vector3::new(
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                )
            }
        })
        .collect();
    (points, rng.random_range(0.03..0.25), rng.random_range(1..=8))
}
