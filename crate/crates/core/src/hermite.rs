//! Gauss–Hermite rules for expectations over standard normal variables.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and probability weights for `E[f(ξ)]`, `ξ ~ N(0, I_dim)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub dim: usize,
    /// Row-major: node `k` occupies `nodes[k*dim .. (k+1)*dim]`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// One-dimensional rule with `q` nodes (Golub–Welsch on the probabilists'
/// Hermite recurrence). Weights are normalized to sum to one.
pub fn rule_1d(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return Err(Error::invalid("noise_nodes", "at least one node is required"));
    }
    let mut jacobi = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver asymmetry.
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if q % 2 == 1 {
        pairs[q / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

impl GaussHermite {
    /// Tensor-product rule with `q` nodes per dimension.
    pub fn new(q: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("noise_nodes", "dimension must be positive"));
        }
        let (x, w) = rule_1d(q)?;
        let count = q.pow(dim as u32);
        let mut nodes = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for k in 0..count {
            let mut rem = k;
            let mut weight = 1.0;
            for _ in 0..dim {
                let i = rem % q;
                rem /= q;
                nodes.push(x[i]);
                weight *= w[i];
            }
            weights.push(weight);
        }
        Ok(GaussHermite { dim, nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }
}
