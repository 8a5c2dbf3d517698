//! Species block designs and the embedding of block quantities into the
//! full parameter space.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlnError, Result};
use crate::model::ParamLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesign {
    p: usize,
    block_size: usize,
    blocks: Vec<Vec<usize>>,
    weights: Vec<f64>,
    pair_cover: DMatrix<usize>,
    membership: Vec<Vec<usize>>,
}

/// `ceil(p (p - 1) / (k (k - 1)))`, the fewest blocks of size `k` that can
/// cover every pair.
pub fn min_blocks(p: usize, k: usize) -> usize {
    if k < 2 {
        return p;
    }
    (p * (p - 1)).div_ceil(k * (k - 1))
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl BlockDesign {
    pub fn from_blocks(p: usize, blocks: Vec<Vec<usize>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if p == 0 || blocks.is_empty() {
            return Err(PlnError::InvalidInput("a design needs at least one species and one block".into()));
        }
        let block_size = blocks[0].len();
        let weights = weights.unwrap_or_else(|| vec![1.0; blocks.len()]);
        if weights.len() != blocks.len() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(PlnError::InvalidInput("block weights must be positive, one per block".into()));
        }
        let mut pair_cover = DMatrix::zeros(p, p);
        let mut membership = vec![Vec::new(); p];
        for (b, block) in blocks.iter().enumerate() {
            if block.len() != block_size || block_size == 0 {
                return Err(PlnError::InvalidInput(format!("block {} has size {}, expected {block_size}", b + 1, block.len())));
            }
            for (a, &j) in block.iter().enumerate() {
                if j >= p {
                    return Err(PlnError::InvalidInput(format!("block {} names species {} > p = {p}", b + 1, j + 1)));
                }
                if block[..a].contains(&j) {
                    return Err(PlnError::InvalidInput(format!("block {} repeats species {}", b + 1, j + 1)));
                }
                membership[j].push(b);
                for &l in &block[..a] {
                    pair_cover[(j, l)] += 1;
                    pair_cover[(l, j)] += 1;
                }
            }
        }
        if let Some(j) = membership.iter().position(|m| m.is_empty()) {
            return Err(PlnError::InvalidInput(format!("species {} belongs to no block", j + 1)));
        }
        Ok(Self { p, block_size, blocks, weights, pair_cover, membership })
    }

    /// One block holding every species: the full likelihood.
    pub fn single(p: usize) -> Self {
        Self::from_blocks(p, vec![(0..p).collect()], None).expect("single block is valid")
    }

    /// One block per species. Covers no pairs, so only the diagonal of Sigma
    /// is identifiable.
    pub fn marginal(p: usize) -> Self {
        Self::from_blocks(p, (0..p).map(|j| vec![j]).collect(), None).expect("singletons are valid")
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.blocks[b]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn pair_cover(&self) -> &DMatrix<usize> {
        &self.pair_cover
    }

    /// Blocks containing species `j`.
    pub fn membership(&self, j: usize) -> &[usize] {
        &self.membership[j]
    }

    pub fn covers_all_pairs(&self) -> bool {
        (0..self.p).all(|j| (0..j).all(|l| self.pair_cover[(j, l)] > 0))
    }

    /// Whether `sigma_jk` enters the composite likelihood.
    pub fn covers(&self, j: usize, k: usize) -> bool {
        j == k || self.pair_cover[(j, k)] > 0
    }

    /// Mask over [`ParamLayout`] coordinates that the design identifies.
    pub fn active_parameters(&self, d: usize) -> Vec<bool> {
        let layout = ParamLayout::new(d, self.p);
        let mut active = vec![true; layout.dim()];
        for j in 0..self.p {
            for k in 0..j {
                active[layout.sigma_index(j, k)] = self.covers(j, k);
            }
        }
        active
    }

    pub fn uniform_weights(&self) -> bool {
        self.weights.iter().all(|w| *w == 1.0)
    }

    pub fn to_text(&self) -> String {
        let lambda = if self.uniform_weights() { "1".to_string() } else { "custom".to_string() };
        let mut out = format!("# k={} p={} lambda={lambda}\n", self.block_size, self.p);
        for block in &self.blocks {
            let line: Vec<String> = block.iter().map(|j| (j + 1).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse the text form. `p` is taken from the header when present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = None;
        let mut blocks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("p=") {
                        p = Some(v.parse::<usize>().map_err(|_| {
                            PlnError::InvalidInput(format!("line {}: bad p value {v:?}", lineno + 1))
                        })?);
                    }
                    if let Some(v) = field.strip_prefix("lambda=") {
                        if v != "1" {
                            return Err(PlnError::InvalidInput(format!(
                                "line {}: only lambda=1 designs can be read",
                                lineno + 1
                            )));
                        }
                    }
                }
                continue;
            }
            let block = line
                .split_whitespace()
                .map(|tok| match tok.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(PlnError::InvalidInput(format!("line {}: bad species index {tok:?}", lineno + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(block);
        }
        let p = match p {
            Some(p) => p,
            None => blocks.iter().flatten().max().map(|m| m + 1).unwrap_or(0),
        };
        Self::from_blocks(p, blocks, None)
    }
}

fn greedy_once<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut uncovered = vec![vec![false; p]; p];
    let mut remaining = 0usize;
    for j in 0..p {
        for l in 0..j {
            uncovered[j][l] = true;
            uncovered[l][j] = true;
            remaining += 1;
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut open_pairs: Vec<(usize, usize)> = Vec::with_capacity(remaining);
    while remaining > 0 {
        open_pairs.clear();
        for j in 0..p {
            for l in 0..j {
                if uncovered[j][l] {
                    open_pairs.push((j, l));
                }
            }
        }
        let &(a, b) = open_pairs.choose(rng).expect("uncovered pair exists");
        let mut block = vec![a, b];
        let mut best: Vec<usize> = Vec::with_capacity(p);
        while block.len() < k {
            best.clear();
            let mut best_score = 0usize;
            for s in 0..p {
                if block.contains(&s) {
                    continue;
                }
                let score = block.iter().filter(|&&m| uncovered[s][m]).count();
                if best.is_empty() || score > best_score {
                    best.clear();
                    best.push(s);
                    best_score = score;
                } else if score == best_score {
                    best.push(s);
                }
            }
            block.push(*best.choose(rng).expect("candidate exists when k <= p"));
        }
        for (x, &j) in block.iter().enumerate() {
            for &l in &block[..x] {
                if uncovered[j][l] {
                    uncovered[j][l] = false;
                    uncovered[l][j] = false;
                    remaining -= 1;
                }
            }
        }
        block.sort_unstable();
        blocks.push(block);
    }
    prune(p, blocks)
}

/// Drop blocks whose pairs are all covered by other blocks.
fn prune(p: usize, mut blocks: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut count = vec![vec![0usize; p]; p];
    for block in &blocks {
        for (x, &j) in block.iter().enumerate() {
            for &l in &block[..x] {
                count[j][l] += 1;
                count[l][j] += 1;
            }
        }
    }
    let mut b = 0;
    while b < blocks.len() {
        let block = &blocks[b];
        let redundant = block
            .iter()
            .enumerate()
            .all(|(x, &j)| block[..x].iter().all(|&l| count[j][l] >= 2));
        if redundant {
            for (x, &j) in block.iter().enumerate() {
                for &l in &block[..x] {
                    count[j][l] -= 1;
                    count[l][j] -= 1;
                }
            }
            blocks.remove(b);
        } else {
            b += 1;
        }
    }
    blocks
}

/// Greedy stochastic construction of a pair-covering design with blocks of
/// size `k`, keeping the smallest of `max_restarts` attempts. All weights 1.
pub fn build_block_design<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R, max_restarts: usize) -> Result<BlockDesign> {
    if k < 2 || k > p {
        return Err(PlnError::InvalidInput(format!("block size must satisfy 2 <= k <= p, got k={k}, p={p}")));
    }
    if k == p {
        return Ok(BlockDesign::single(p));
    }
    let mut best: Option<Vec<Vec<usize>>> = None;
    for _ in 0..max_restarts.max(1) {
        let blocks = greedy_once(p, k, rng);
        if best.as_ref().is_none_or(|b| blocks.len() < b.len()) {
            best = Some(blocks);
        }
    }
    BlockDesign::from_blocks(p, best.expect("at least one restart"), None)
}

/// Place a `k x k` block matrix into a `p x p` zero matrix.
pub fn embed_matrix(block: &[usize], small: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    let k = block.len();
    if small.shape() != (k, k) {
        return Err(PlnError::DimensionMismatch(format!("block of {k} species, matrix {:?}", small.shape())));
    }
    if let Some(j) = block.iter().find(|&&j| j >= p) {
        return Err(PlnError::InvalidInput(format!("species index {j} out of range for p = {p}")));
    }
    let mut out = DMatrix::zeros(p, p);
    for (a, &j) in block.iter().enumerate() {
        for (c, &l) in block.iter().enumerate() {
            out[(j, l)] = small[(a, c)];
        }
    }
    Ok(out)
}

pub fn extract_matrix(block: &[usize], full: &DMatrix<f64>) -> DMatrix<f64> {
    full.select_rows(block).select_columns(block)
}

/// Map a block parameter vector (ordered by `ParamLayout::new(d, k)`) into
/// the full `ParamLayout::new(d, p)` ordering, zeros elsewhere.
pub fn embed_param_vector(block: &[usize], small: &DVector<f64>, p: usize, d: usize) -> Result<DVector<f64>> {
    let k = block.len();
    let local = ParamLayout::new(d, k);
    if small.len() != local.dim() {
        return Err(PlnError::DimensionMismatch(format!(
            "block vector has length {}, expected {}",
            small.len(),
            local.dim()
        )));
    }
    if let Some(j) = block.iter().find(|&&j| j >= p) {
        return Err(PlnError::InvalidInput(format!("species index {j} out of range for p = {p}")));
    }
    let global = ParamLayout::new(d, p);
    let mut out = DVector::zeros(global.dim());
    for (a, &j) in block.iter().enumerate() {
        for l in 0..d {
            out[global.beta_index(l, j)] = small[local.beta_index(l, a)];
        }
        for (c, &m) in block.iter().enumerate().take(a + 1) {
            out[global.sigma_index(j, m)] = small[local.sigma_index(a, c)];
        }
    }
    Ok(out)
}

pub fn extract_param_vector(block: &[usize], full: &DVector<f64>, p: usize, d: usize) -> DVector<f64> {
    let local = ParamLayout::new(d, block.len());
    let global = ParamLayout::new(d, p);
    let mut out = DVector::zeros(local.dim());
    for (a, &j) in block.iter().enumerate() {
        for l in 0..d {
            out[local.beta_index(l, a)] = full[global.beta_index(l, j)];
        }
        for (c, &m) in block.iter().enumerate().take(a + 1) {
            out[local.sigma_index(a, c)] = full[global.sigma_index(j, m)];
        }
    }
    out
}
