use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-7;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(x: &Tensor, r: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![x.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    while centroids.len() < r {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let mu = x.row(pick).to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), &mu));
        }
        centroids.push(mu);
    }
    centroids
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken only from clusters that keep at least one member.
fn repair_empty(x: &Tensor, assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let r = centroids.len();
    let mut sizes = vec![0usize; r];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    for c in 0..r {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assign.iter().enumerate() {
            if sizes[a] <= 1 {
                continue;
            }
            let d = sq_dist(x.row(i), &centroids[a]);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("r <= n leaves a donor cluster");
        sizes[assign[i]] -= 1;
        assign[i] = c;
        sizes[c] = 1;
        centroids[c] = x.row(i).to_vec();
    }
}

/// Lloyd's k-means with k-means++ seeding. Labels are renumbered by first
/// appearance, so the result is canonical up to the clustering itself.
pub fn kmeans(x: &Tensor, r: usize, seed: u64) -> Vec<usize> {
    let n = x.rows();
    assert!(r >= 1 && r <= n, "kmeans needs 1 <= r <= n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, r, &mut rng);
    let dim = x.cols();
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        for i in 0..n {
            assign[i] = nearest(x.row(i), &centroids).0;
        }
        repair_empty(x, &mut assign, &mut centroids);
        let mut sums = vec![vec![0.0; dim]; r];
        let mut sizes = vec![0usize; r];
        for i in 0..n {
            sizes[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..r {
            let mu: Vec<f64> = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            shift = shift.max(sq_dist(&mu, &centroids[c]).sqrt());
            centroids[c] = mu;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    relabel(&assign, r)
}

fn relabel(assign: &[usize], r: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; r];
    let mut next = 0;
    assign
        .iter()
        .map(|&a| {
            if map[a] == usize::MAX {
                map[a] = next;
                next += 1;
            }
            map[a]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clouds(seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let off = if c == 0 { 0.0 } else { 100.0 };
            rows.push(vec![off + rng.gen_range(-1.0..1.0), off + rng.gen_range(-1.0..1.0)]);
            truth.push(c);
        }
        (Tensor::from_rows(&rows), truth)
    }

    #[test]
    fn separated_clouds_recovered() {
        for seed in 0..5 {
            let (x, truth) = clouds(seed);
            let got = kmeans(&x, 2, seed);
            // Labels renumbered by first appearance, and point 0 belongs to cloud 0.
            assert_eq!(got, truth);
        }
    }

    #[test]
    fn r_equals_n_gives_singletons() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![9.0]]);
        let mut got = kmeans(&x, 4, 1);
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn identical_points_fill_every_cluster() {
        let x = Tensor::from_rows(&vec![vec![1.0, 1.0]; 5]);
        let got = kmeans(&x, 2, 7);
        assert!(got.contains(&0) && got.contains(&1));
    }

    #[test]
    fn deterministic_for_seed() {
        let (x, _) = clouds(11);
        assert_eq!(kmeans(&x, 3, 5), kmeans(&x, 3, 5));
    }
}
