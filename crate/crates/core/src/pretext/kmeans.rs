//! Lloyd k-means with k-means++ seeding, used to cluster teacher frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::frontend::FrameSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherCentroids {
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after seeding and after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl TeacherCentroids {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::invalid("need at least two centroids"));
        }
        let d = centroids[0].len();
        if centroids.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("centroids of unequal dimension".into()));
        }
        Ok(Self {
            centroids,
            objective_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid in Euclidean distance (lowest index on ties).
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }

    pub fn assign_all(&self, frames: &[Vec<f64>]) -> Vec<usize> {
        frames.iter().map(|f| self.assign(f)).collect()
    }

    pub fn objective(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| nearest(&self.centroids, p).1).sum()
    }

    pub fn to_array(&self) -> NamedArray {
        NamedArray {
            name: CENTROIDS_ARRAY.into(),
            dims: vec![self.k(), self.dim()],
            data: self.centroids.iter().flatten().copied().collect(),
        }
    }

    pub fn from_array(a: &NamedArray) -> Result<Self> {
        if a.dims.len() != 2 || a.dims[0] * a.dims[1] != a.data.len() {
            return Err(Error::Shape(format!("centroid array has dims {:?}", a.dims)));
        }
        Self::new(a.data.chunks(a.dims[1].max(1)).map(<[f64]>::to_vec).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut a = Archive::new(CENTROIDS_KIND, format!("k = {}\ndim = {}\n", self.k(), self.dim()));
        let arr = self.to_array();
        a.push(arr.name, arr.dims, arr.data)?;
        a.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        a.expect_kind(CENTROIDS_KIND, path)?;
        let arr = a.get(CENTROIDS_ARRAY).ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: "no centroid array".into(),
        })?;
        Self::from_array(arr)
    }
}

pub const CENTROIDS_KIND: &str = "teacher-centroids";
pub const CENTROIDS_ARRAY: &str = "teacher.centroids";

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub const DEFAULT_MAX_ITER: usize = 100;

/// Clusters every frame of every sequence into `k` groups.
pub fn fit_teacher_centroids(
    teacher_frames: &[FrameSequence],
    k: usize,
    rng_seed: u64,
) -> Result<TeacherCentroids> {
    let mut points = Vec::new();
    for s in teacher_frames {
        points.extend(s.rows()?);
    }
    kmeans(&points, k, DEFAULT_MAX_ITER, rng_seed)
}

pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, rng_seed: u64) -> Result<TeacherCentroids> {
    if k < 2 {
        return Err(Error::invalid("k-means needs k >= 2"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means with k = {k} needs at least {k} frames, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("frames of unequal dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut trace = vec![points.iter().map(|p| nearest(&centroids, p).1).sum::<f64>()];

    for _ in 0..max_iter {
        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters take the points currently farthest from their centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .zip(&assign)
                    .enumerate()
                    .map(|(i, (p, &a))| (i, sq_dist(p, &centroids[a])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centroids[j] = points[far.0].clone();
                assign[far.0] = j;
                counts[j] = 1;
            }
        }
        // Assignment step.
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        let changed = next != assign;
        assign = next;
        trace.push(points.iter().map(|p| nearest(&centroids, p).1).sum());
        if !changed {
            break;
        }
    }
    Ok(TeacherCentroids {
        centroids,
        objective_trace: trace,
    })
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clouds() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            let j = i as f64;
            pts.push(vec![0.1 * j.sin(), 0.1 * j.cos()]);
            pts.push(vec![10.0 + 0.1 * (2.0 * j).cos(), -5.0 + 0.1 * (3.0 * j).sin()]);
        }
        pts
    }

    /// Exhaustive 2-means: try all 2^n bipartitions and keep the best SSE.
    fn brute_two_means(pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = pts.len();
        let mean = |sel: &[&Vec<f64>]| -> Vec<f64> {
            let mut m = vec![0.0; 2];
            for p in sel {
                m[0] += p[0];
                m[1] += p[1];
            }
            m.iter().map(|x| x / sel.len() as f64).collect()
        };
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let a: Vec<&Vec<f64>> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &pts[i]).collect();
            let b: Vec<&Vec<f64>> = (0..n).filter(|i| mask >> i & 1 == 0).map(|i| &pts[i]).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            let sse: f64 = a.iter().map(|p| sq_dist(p, &ma)).sum::<f64>() + b.iter().map(|p| sq_dist(p, &mb)).sum::<f64>();
            if sse < best.0 {
                best = (sse, vec![ma, mb]);
            }
        }
        best.1
    }

    #[test]
    fn two_clouds_match_exhaustive_oracle() {
        let pts = clouds();
        let oracle = brute_two_means(&pts);
        let fit = kmeans(&pts, 2, 100, 3).unwrap();
        for want in &oracle {
            let got = &fit.centroids[fit.assign(want)];
            assert!(sq_dist(got, want).sqrt() < 1e-3);
        }
    }

    #[test]
    fn k_equal_to_distinct_points_has_zero_objective() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0], vec![1.0], vec![0.0]];
        let fit = kmeans(&pts, 3, 100, 1).unwrap();
        assert_eq!(fit.objective(&pts), 0.0);
    }

    #[test]
    fn objective_trace_non_increasing() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 3.0 + (i % 7) as f64;
                vec![x, (i as f64 * 1.3).cos() * (i % 3) as f64]
            })
            .collect();
        for seed in 0..5 {
            let fit = kmeans(&pts, 8, 100, seed).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn too_few_frames_rejected() {
        assert!(kmeans(&[vec![0.0], vec![1.0]], 3, 10, 0).is_err());
    }
}
