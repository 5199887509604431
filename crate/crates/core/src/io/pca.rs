//! 2D PCA embedding of latent samples via power iteration with deflation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TOL: f64 = 1e-8;
const MAX_ITERS: usize = 1000;

pub struct Embedding {
    /// `[N, 2]` projections onto the top two principal directions.
    pub points: Tensor,
    /// Variance captured by each component as a share of total variance.
    pub explained: [f64; 2],
    pub warning: Option<String>,
}

/// Leading right singular direction of the centered matrix, by power
/// iteration on X^T X. Returns (unit direction, eigenvalue).
fn leading_direction(x: &[f64], n: usize, l: usize) -> (Vec<f64>, f64) {
    // deterministic, dimension-spanning start vector
    let mut v: Vec<f64> = (0..l).map(|j| 1.0 / (j as f64 + 1.0)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        // w = X^T (X v)
        let mut xv = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * l..(i + 1) * l];
            xv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; l];
        for i in 0..n {
            let row = &x[i * l..(i + 1) * l];
            for j in 0..l {
                w[j] += row[j] * xv[i];
            }
        }
        let new_lambda = norm(&w);
        if new_lambda == 0.0 {
            return (v, 0.0);
        }
        for wj in w.iter_mut() {
            *wj /= new_lambda;
        }
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        lambda = new_lambda;
        if delta < TOL {
            break;
        }
    }
    (v, lambda)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for a in v.iter_mut() {
            *a /= n;
        }
    }
}

/// Mean-centered projection onto the top-2 principal directions. Rank-1 data
/// pads the second coordinate with zeros and warns rather than failing.
pub fn pca2d_embed(latents: &Tensor) -> Result<Embedding> {
    let shape = latents.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Dimension(format!(
            "pca2d needs [N >= 2, l], got {shape:?}"
        )));
    }
    let (n, l) = (shape[0], shape[1]);
    // center columns
    let mut x = latents.data().to_vec();
    for j in 0..l {
        let mean = (0..n).map(|i| x[i * l + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * l + j] -= mean;
        }
    }
    let total_var: f64 = x.iter().map(|a| a * a).sum();
    if total_var == 0.0 {
        return Ok(Embedding {
            points: Tensor::zeros(&[n, 2]),
            explained: [0.0, 0.0],
            warning: Some("pca2d: constant data, embedding is all zeros".into()),
        });
    }
    let mut points = vec![0.0; n * 2];
    let mut explained = [0.0; 2];
    let mut warning = None;
    let mut data = x;
    for c in 0..2 {
        let (v, lambda) = leading_direction(&data, n, l);
        if lambda <= TOL * total_var {
            warning = Some(format!(
                "pca2d: data rank < {}, padding component {} with zeros",
                c + 1,
                c + 1
            ));
            break;
        }
        explained[c] = lambda / total_var;
        for i in 0..n {
            let row = &data[i * l..(i + 1) * l];
            let score: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            points[i * 2 + c] = score;
        }
        // deflate: remove the found component
        for i in 0..n {
            let score = points[i * 2 + c];
            for j in 0..l {
                data[i * l + j] -= score * v[j];
            }
        }
    }
    Ok(Embedding {
        points: Tensor::new(vec![n, 2], points)?,
        explained,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Role};
    use rand::Rng;

    fn pairwise_dists(pts: &Tensor, dim: usize) -> Vec<f64> {
        let n = pts.shape()[0];
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let mut d = 0.0;
                for k in 0..dim {
                    let diff = pts.data()[i * dim + k] - pts.data()[j * dim + k];
                    d += diff * diff;
                }
                out.push(d.sqrt());
            }
        }
        out
    }

    #[test]
    fn planar_configuration_preserves_distances() {
        // plant 12 points on a 2D plane embedded in 6 dims via a random
        // orthogonal-ish rotation, then check PCA recovers pairwise distances
        let mut r = rng::stream(3, Role::Dataset);
        let basis_a = {
            let mut v: Vec<f64> = (0..6).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            normalize(&mut v);
            v
        };
        let mut basis_b: Vec<f64> = (0..6)
            .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let dot: f64 = basis_a.iter().zip(&basis_b).map(|(a, b)| a * b).sum();
        for (b, a) in basis_b.iter_mut().zip(&basis_a) {
            *b -= dot * a;
        }
        normalize(&mut basis_b);
        let n = 12;
        let mut plane = Vec::new();
        let mut data = Vec::new();
        for i in 0..n {
            let u = (i as f64 * 0.7).sin() * 3.0;
            let w = (i as f64 * 1.3).cos() * 2.0;
            plane.extend_from_slice(&[u, w]);
            for j in 0..6 {
                data.push(u * basis_a[j] + w * basis_b[j]);
            }
        }
        let latents = Tensor::new(vec![n, 6], data).unwrap();
        let emb = pca2d_embed(&latents).unwrap();
        assert!(emb.warning.is_none());
        let orig = pairwise_dists(&Tensor::new(vec![n, 2], plane).unwrap(), 2);
        let got = pairwise_dists(&emb.points, 2);
        for (a, b) in orig.iter().zip(&got) {
            assert!((a - b).abs() < 1e-5, "distance {a} vs {b}");
        }
    }

    #[test]
    fn isotropic_cloud_has_uniform_explained_shares() {
        let l = 5;
        let n = 4000;
        let latents = rng::standard_normal(&[n, l], &mut rng::stream(7, Role::Dataset));
        let emb = pca2d_embed(&latents).unwrap();
        for share in emb.explained {
            assert!(
                (share - 1.0 / l as f64).abs() < 0.05,
                "share {share} far from {}",
                1.0 / l as f64
            );
        }
    }

    #[test]
    fn duplicate_rows_embed_identically() {
        let mut r = rng::stream(9, Role::Dataset);
        let row = rng::standard_normal(&[4], &mut r);
        let other = rng::standard_normal(&[4], &mut r);
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(row.data());
        }
        data.extend_from_slice(other.data());
        let latents = Tensor::new(vec![4, 4], data).unwrap();
        let emb = pca2d_embed(&latents).unwrap();
        for i in 1..3 {
            for k in 0..2 {
                assert_eq!(emb.points.data()[k], emb.points.data()[i * 2 + k]);
            }
        }
    }

    #[test]
    fn rank_one_data_pads_and_warns() {
        // all rows along a single direction
        let dir = [1.0, 2.0, -1.0];
        let mut data = Vec::new();
        for i in 0..5 {
            for d in dir {
                data.push(d * i as f64);
            }
        }
        let latents = Tensor::new(vec![5, 3], data).unwrap();
        let emb = pca2d_embed(&latents).unwrap();
        assert!(emb.warning.is_some());
        for i in 0..5 {
            assert_eq!(emb.points.data()[i * 2 + 1], 0.0);
        }
    }
}
