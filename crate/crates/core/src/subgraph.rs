//! Subgraph generation: cross-scale patch extraction, similarity scoring,
//! per-query top-K graph construction, and normalized neighbor aggregation.
//!
//! Edges are selected by Euclidean distance with ties broken by lower
//! candidate index; a single-window structural-similarity score is stored
//! per edge as an analysis attribute but never drives selection.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::FeatureMap;

/// Standard stabilizers for the structural-similarity score on [0,1] data.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Flattened feature patches cut from one source map.
///
/// `vectors` is N × D with D = C·patch²; row order is row-major over the
/// patch corners; each row is a channel-major flattening. `scale` is the
/// scale factor of the source map relative to the query-level map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    vectors: Array2<f64>,
    coords: Vec<(usize, usize)>,
    scale: usize,
}

impl PatchSet {
    pub fn new(vectors: Array2<f64>, coords: Vec<(usize, usize)>, scale: usize) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Shape("patch set must contain at least one patch".into()));
        }
        if coords.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} coords for {} patch vectors",
                coords.len(),
                vectors.nrows()
            )));
        }
        if scale == 0 {
            return Err(Error::Parameter("patch-set scale must be positive".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("patch vectors contain non-finite values".into()));
        }
        Ok(PatchSet { vectors, coords, scale })
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    /// Number of patches N.
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    /// Flattened dimension D.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn scale(&self) -> usize {
        self.scale
    }
}

/// Per-query top-K neighbor structure over a candidate patch set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphEdges {
    neighbor_idx: Array2<usize>,
    distances: Array2<f64>,
    ssim: Array2<f64>,
}

impl SubgraphEdges {
    pub(crate) fn from_parts(
        neighbor_idx: Array2<usize>,
        distances: Array2<f64>,
        ssim: Array2<f64>,
    ) -> Self {
        SubgraphEdges { neighbor_idx, distances, ssim }
    }

    pub fn n_queries(&self) -> usize {
        self.neighbor_idx.nrows()
    }

    pub fn k(&self) -> usize {
        self.neighbor_idx.ncols()
    }

    pub fn neighbor_idx(&self) -> &Array2<usize> {
        &self.neighbor_idx
    }

    /// Euclidean distances, each row sorted non-decreasing.
    pub fn distances(&self) -> &Array2<f64> {
        &self.distances
    }

    /// Structural-similarity attribute per retained edge, in [-1, 1].
    pub fn ssim(&self) -> &Array2<f64> {
        &self.ssim
    }
}

/// Hyperparameters of the subgraph generation block. `stride` applies to the
/// candidate (half-scale) grid; queries are always extracted at stride 1.
/// `temperature: None` resolves to D, the flattened patch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SgbConfig {
    pub patch: usize,
    pub stride: usize,
    pub k: usize,
    pub temperature: Option<f64>,
}

impl Default for SgbConfig {
    fn default() -> Self {
        SgbConfig { patch: 3, stride: 2, k: 5, temperature: None }
    }
}

impl SgbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Parameter("patch size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Parameter("neighbor count K must be positive".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Temperature to use for a flattened patch dimension `d`.
    pub fn resolved_temperature(&self, d: usize) -> f64 {
        self.temperature.unwrap_or(d as f64)
    }
}

/// Learned channel embeddings of the block, each applied as a C×C pointwise
/// (1×1) linear map without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SgbParams {
    pub theta_f: Array2<f64>,
    pub theta_g: Array2<f64>,
    pub theta_out: Array2<f64>,
}

impl SgbParams {
    pub fn identity(c: usize) -> Self {
        SgbParams { theta_f: Array2::eye(c), theta_g: Array2::eye(c), theta_out: Array2::eye(c) }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        for (name, m) in [("theta_f", &self.theta_f), ("theta_g", &self.theta_g), ("theta_out", &self.theta_out)] {
            if m.nrows() != c || m.ncols() != c {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    name,
                    m.nrows(),
                    m.ncols(),
                    c,
                    c
                )));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Cuts `patch`×`patch` windows from `f` at corners stepping by `stride`,
/// row-major over corners, each flattened channel-major. The returned set is
/// tagged scale 1; retag with [`PatchSet::with_scale`] for coarser sources.
pub fn extract_patches(f: &FeatureMap, patch: usize, stride: usize) -> Result<PatchSet> {
    if patch == 0 || stride == 0 {
        return Err(Error::Parameter("patch and stride must be positive".into()));
    }
    let (c, h, w) = f.shape();
    if patch > h || patch > w {
        return Err(Error::Dimension(format!(
            "patch {} does not fit in a {}x{} map",
            patch, h, w
        )));
    }
    let corners_along = |extent: usize| (0..=extent - patch).step_by(stride);
    let rows: Vec<usize> = corners_along(h).collect();
    let cols: Vec<usize> = corners_along(w).collect();
    let n = rows.len() * cols.len();
    let d = c * patch * patch;
    let src = f.data();
    let mut vectors = Array2::zeros((n, d));
    let mut coords = Vec::with_capacity(n);
    let mut i = 0;
    for &r in &rows {
        for &col in &cols {
            let mut t = 0;
            for ci in 0..c {
                for pr in 0..patch {
                    for pc in 0..patch {
                        vectors[[i, t]] = src[[ci, r + pr, col + pc]];
                        t += 1;
                    }
                }
            }
            coords.push((r, col));
            i += 1;
        }
    }
    PatchSet::new(vectors, coords, 1)
}

/// 2×2 mean pooling; the half-scale candidate source.
pub fn downsample_half(f: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = f.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "2x2 pooling needs even dimensions, got {}x{}",
            h, w
        )));
    }
    let src = f.data();
    let out = Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, col)| {
        (src[[ci, 2 * r, 2 * col]]
            + src[[ci, 2 * r, 2 * col + 1]]
            + src[[ci, 2 * r + 1, 2 * col]]
            + src[[ci, 2 * r + 1, 2 * col + 1]])
            / 4.0
    });
    Ok(FeatureMap::from_array_unchecked(out))
}

/// Single-window structural similarity between two flattened patches, using
/// population statistics: (2μₚμ_q+C1)(2σ_pq+C2) / ((μₚ²+μ_q²+C1)(σₚ²+σ_q²+C2)).
pub fn patch_ssim(p: &[f64], q: &[f64], c1: f64, c2: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "patch lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.len() < 2 {
        return Err(Error::Dimension("patch similarity needs at least 2 elements".into()));
    }
    Ok(ssim_window(p, q, c1, c2))
}

// The population-statistics formula itself, total over any equal length ≥ 1;
// degenerate single-element windows just have zero variances.
fn ssim_window(p: &[f64], q: &[f64], c1: f64, c2: f64) -> f64 {
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<f64>() / n;
    let mu_q = q.iter().sum::<f64>() / n;
    let mut var_p = 0.0;
    let mut var_q = 0.0;
    let mut cov = 0.0;
    for (a, b) in p.iter().zip(q.iter()) {
        let dp = a - mu_p;
        let dq = b - mu_q;
        var_p += dp * dp;
        var_q += dq * dq;
        cov += dp * dq;
    }
    var_p /= n;
    var_q /= n;
    cov /= n;
    ((2.0 * mu_p * mu_q + c1) * (2.0 * cov + c2))
        / ((mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2))
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// For each query, the K candidates at smallest Euclidean distance; ties go
/// to the lower candidate index. Distances come back sorted non-decreasing;
/// each edge also carries its structural-similarity score.
pub fn build_knn_graph(queries: &PatchSet, candidates: &PatchSet, k: usize) -> Result<SubgraphEdges> {
    if k == 0 {
        return Err(Error::Parameter("K must be positive".into()));
    }
    if k > candidates.len() {
        return Err(Error::Parameter(format!(
            "K = {} exceeds candidate count {}",
            k,
            candidates.len()
        )));
    }
    if queries.dim() != candidates.dim() {
        return Err(Error::Shape(format!(
            "patch dimensions differ: queries {} vs candidates {}",
            queries.dim(),
            candidates.dim()
        )));
    }
    let nq = queries.len();
    let nc = candidates.len();
    let mut neighbor_idx = Array2::zeros((nq, k));
    let mut distances = Array2::zeros((nq, k));
    let mut ssim = Array2::zeros((nq, k));
    for i in 0..nq {
        let qi = queries.vectors().row(i);
        let mut order: Vec<(f64, usize)> = (0..nc)
            .map(|j| (sq_dist(qi, candidates.vectors().row(j)), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &(d2, j)) in order.iter().take(k).enumerate() {
            neighbor_idx[[i, slot]] = j;
            distances[[i, slot]] = d2.sqrt();
            let cj = candidates.vectors().row(j);
            ssim[[i, slot]] = ssim_window(
                qi.as_slice().expect("query row is contiguous"),
                cj.as_slice().expect("candidate row is contiguous"),
                SSIM_C1,
                SSIM_C2,
            );
        }
    }
    Ok(SubgraphEdges { neighbor_idx, distances, ssim })
}

/// Normalized Gaussian-kernel weights over each query's retained neighbors:
/// wⱼ = exp(−‖xᵢ−xⱼ‖²/T) / Σⱼ exp(−‖xᵢ−xⱼ‖²/T). Rows sum to 1. The exponent
/// is shifted by the row minimum before exponentiation, which leaves the
/// normalized weights unchanged but keeps them representable at small T.
pub fn aggregation_weights(
    queries: &PatchSet,
    candidates: &PatchSet,
    edges: &SubgraphEdges,
    temperature: f64,
) -> Result<Array2<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_edges(queries, candidates, edges)?;
    let (nq, k) = (edges.n_queries(), edges.k());
    let mut weights = Array2::zeros((nq, k));
    for i in 0..nq {
        let qi = queries.vectors().row(i);
        let d2: Vec<f64> = (0..k)
            .map(|s| sq_dist(qi, candidates.vectors().row(edges.neighbor_idx[[i, s]])))
            .collect();
        let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for s in 0..k {
            let wv = (-(d2[s] - m) / temperature).exp();
            weights[[i, s]] = wv;
            z += wv;
        }
        for s in 0..k {
            weights[[i, s]] /= z;
        }
    }
    Ok(weights)
}

/// Normalized non-local aggregation over the retained edges:
/// yᵢ = (1/C(x)) Σⱼ exp(−‖xᵢ−xⱼ‖²/T)·xⱼ with C(x) the weight sum. Values are
/// the raw candidate vectors; callers wanting a learned value embedding pair
/// [`aggregation_weights`] with their own embedded candidate set.
pub fn aggregate_neighbors(
    queries: &PatchSet,
    candidates: &PatchSet,
    edges: &SubgraphEdges,
    temperature: f64,
) -> Result<Array2<f64>> {
    let weights = aggregation_weights(queries, candidates, edges, temperature)?;
    Ok(weighted_neighbor_sum(&weights, candidates, edges))
}

/// y = Σₛ W[i,s] · values[edges[i,s]]; the linear half of the aggregation.
pub fn weighted_neighbor_sum(
    weights: &Array2<f64>,
    values: &PatchSet,
    edges: &SubgraphEdges,
) -> Array2<f64> {
    let (nq, k) = (edges.n_queries(), edges.k());
    let d = values.dim();
    let mut out = Array2::zeros((nq, d));
    for i in 0..nq {
        for s in 0..k {
            let w = weights[[i, s]];
            let vj = values.vectors().row(edges.neighbor_idx[[i, s]]);
            for t in 0..d {
                out[[i, t]] += w * vj[t];
            }
        }
    }
    out
}

fn check_edges(queries: &PatchSet, candidates: &PatchSet, edges: &SubgraphEdges) -> Result<()> {
    if edges.n_queries() != queries.len() {
        return Err(Error::Shape(format!(
            "edges cover {} queries but the set has {}",
            edges.n_queries(),
            queries.len()
        )));
    }
    if queries.dim() != candidates.dim() {
        return Err(Error::Shape(format!(
            "patch dimensions differ: queries {} vs candidates {}",
            queries.dim(),
            candidates.dim()
        )));
    }
    if let Some(&bad) = edges.neighbor_idx.iter().find(|&&j| j >= candidates.len()) {
        return Err(Error::Shape(format!(
            "edge refers to candidate {} but only {} exist",
            bad,
            candidates.len()
        )));
    }
    Ok(())
}

/// Pointwise linear map over channels: out[o,·,·] = Σᵢ w[o,i]·f[i,·,·].
fn embed_map(f: &FeatureMap, w: &Array2<f64>) -> FeatureMap {
    let (c, h, wd) = f.shape();
    let src = f.data();
    let out = Array3::from_shape_fn((w.nrows(), h, wd), |(o, r, col)| {
        let mut s = 0.0;
        for i in 0..c {
            s += w[[o, i]] * src[[i, r, col]];
        }
        s
    });
    FeatureMap::from_array_unchecked(out)
}

/// Scatters aggregated patch rows back onto the query grid, averaging where
/// windows overlap. Every pixel is covered because queries use stride 1.
fn fold_overlap_average(
    rows: &Array2<f64>,
    coords: &[(usize, usize)],
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> FeatureMap {
    let mut acc = Array3::<f64>::zeros((c, h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for (i, &(r, col)) in coords.iter().enumerate() {
        let mut t = 0;
        for ci in 0..c {
            for pr in 0..patch {
                for pc in 0..patch {
                    acc[[ci, r + pr, col + pc]] += rows[[i, t]];
                    t += 1;
                }
            }
        }
        for pr in 0..patch {
            for pc in 0..patch {
                count[[r + pr, col + pc]] += 1.0;
            }
        }
    }
    for ci in 0..c {
        for r in 0..h {
            for col in 0..w {
                acc[[ci, r, col]] /= count[[r, col]];
            }
        }
    }
    FeatureMap::from_array_unchecked(acc)
}

/// Full subgraph generation block: embed, match query patches against
/// half-scale candidates, aggregate the top-K neighbors, fold back to the
/// grid, project, and add the input residually. Shape-preserving.
///
/// K is clamped to the candidate count when the half-scale grid yields fewer
/// than `cfg.k` patches, so small maps degrade to a denser graph instead of
/// failing.
pub fn sgb_forward(f: &FeatureMap, params: &SgbParams, cfg: &SgbConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let (c, h, w) = f.shape();
    params.validate(c)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "subgraph block needs even dimensions, got {}x{}",
            h, w
        )));
    }

    let down = downsample_half(f)?;
    let fq_map = embed_map(f, &params.theta_f);
    let fc_map = embed_map(&down, &params.theta_f);
    let gc_map = embed_map(&down, &params.theta_g);

    let queries = extract_patches(&fq_map, cfg.patch, 1)?;
    let cand_f = extract_patches(&fc_map, cfg.patch, cfg.stride)?.with_scale(2);
    let cand_g = extract_patches(&gc_map, cfg.patch, cfg.stride)?.with_scale(2);

    let k_eff = cfg.k.min(cand_f.len());
    let edges = build_knn_graph(&queries, &cand_f, k_eff)?;
    let temperature = cfg.resolved_temperature(queries.dim());
    let weights = aggregation_weights(&queries, &cand_f, &edges, temperature)?;
    let aggregated = weighted_neighbor_sum(&weights, &cand_g, &edges);

    let folded = fold_overlap_average(&aggregated, queries.coords(), c, h, w, cfg.patch);
    let projected = embed_map(&folded, &params.theta_out);

    let out = f.data() + projected.data();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("subgraph block produced non-finite output".into()));
    }
    Ok(FeatureMap::from_array_unchecked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_shape_fn(c, h, w, |_, _, _| rng.random::<f64>() * 2.0 - 1.0).unwrap()
    }

    fn set_from_rows(rows: Array2<f64>) -> PatchSet {
        let coords = (0..rows.nrows()).map(|i| (i, 0)).collect();
        PatchSet::new(rows, coords, 1).unwrap()
    }

    #[test]
    fn whole_map_is_a_single_patch() {
        let f = FeatureMap::from_shape_fn(1, 2, 2, |_, r, c| (2 * r + c) as f64).unwrap();
        let p = extract_patches(&f, 2, 2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.vectors().row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.coords(), &[(0, 0)]);
    }

    #[test]
    fn stride_2_corners_and_channel_major_flatten() {
        let f = FeatureMap::from_shape_fn(1, 4, 4, |_, r, c| (4 * r + c) as f64).unwrap();
        let p = extract_patches(&f, 2, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.vectors().row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.coords(), &[(0, 0), (0, 2), (2, 0), (2, 2)]);
    }

    #[test]
    fn stride_1_corner_enumeration() {
        let f = FeatureMap::zeros(1, 4, 4);
        let p = extract_patches(&f, 3, 1).unwrap();
        assert_eq!(p.coords(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn oversized_patch_rejected() {
        let f = FeatureMap::zeros(1, 3, 3);
        assert!(matches!(extract_patches(&f, 4, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_keeps_constants() {
        let f = FeatureMap::from_shape_fn(2, 4, 6, |_, _, _| 0.75).unwrap();
        let d = downsample_half(&f).unwrap();
        assert_eq!(d.shape(), (2, 2, 3));
        assert!(d.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn pooling_2x2_mean() {
        let f = FeatureMap::new(ndarray::arr3(&[[[1.0, 3.0], [5.0, 7.0]]])).unwrap();
        let d = downsample_half(&f).unwrap();
        assert_eq!(d.data()[[0, 0, 0]], 4.0);
    }

    #[test]
    fn pooling_matches_block_mean_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_map(&mut rng, 2, 8, 8);
        let d = downsample_half(&f).unwrap();
        for ci in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            s += f.data()[[ci, 2 * r + dr, 2 * c + dc]];
                        }
                    }
                    assert!((d.data()[[ci, r, c]] - s / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pooling_rejects_odd_dims() {
        assert!(matches!(downsample_half(&FeatureMap::zeros(1, 3, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn self_similarity_is_one() {
        let p = [0.1, 0.7, 0.3, 0.9, 0.5];
        assert!((patch_ssim(&p, &p, SSIM_C1, SSIM_C2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_zero_mean_patch_scores_negative() {
        let p = [1.0, -1.0, 2.0, -2.0];
        let q: Vec<f64> = p.iter().map(|v| -v).collect();
        let s = patch_ssim(&p, &q, SSIM_C1, SSIM_C2).unwrap();
        assert!(s < 0.0, "got {s}");
    }

    #[test]
    fn equal_constant_patches_score_one() {
        let p = [0.4, 0.4, 0.4];
        assert!((patch_ssim(&p, &p, SSIM_C1, SSIM_C2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_patch_lengths_rejected() {
        assert!(matches!(patch_ssim(&[1.0, 2.0], &[1.0], SSIM_C1, SSIM_C2), Err(Error::Shape(_))));
    }

    #[test]
    fn complete_graph_lists_all_candidates_sorted() {
        let q = set_from_rows(arr2(&[[0.0, 0.0]]));
        let c = set_from_rows(arr2(&[[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]]));
        let e = build_knn_graph(&q, &c, 3).unwrap();
        assert_eq!(e.neighbor_idx().row(0).to_vec(), vec![1, 2, 0]);
        assert_eq!(e.distances().row(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn k2_takes_the_two_closest() {
        let q = set_from_rows(arr2(&[[0.0]]));
        let c = set_from_rows(arr2(&[[1.0], [2.0], [3.0]]));
        let e = build_knn_graph(&q, &c, 2).unwrap();
        assert_eq!(e.neighbor_idx().row(0).to_vec(), vec![0, 1]);
    }

    #[test]
    fn k_beyond_candidates_rejected() {
        let q = set_from_rows(arr2(&[[0.0]]));
        let c = set_from_rows(arr2(&[[1.0]]));
        assert!(matches!(build_knn_graph(&q, &c, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_neighbor_copies_its_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = set_from_rows(Array2::from_shape_fn((3, 4), |_| rng.random()));
        let c = set_from_rows(Array2::from_shape_fn((5, 4), |_| rng.random()));
        let e = build_knn_graph(&q, &c, 1).unwrap();
        let y = aggregate_neighbors(&q, &c, &e, 2.0).unwrap();
        for i in 0..3 {
            let j = e.neighbor_idx()[[i, 0]];
            assert_eq!(y.row(i), c.vectors().row(j));
        }
    }

    #[test]
    fn equidistant_pair_averages() {
        let q = set_from_rows(arr2(&[[0.0, 0.0]]));
        let c = set_from_rows(arr2(&[[1.0, 1.0], [-1.0, -1.0]]));
        let e = build_knn_graph(&q, &c, 2).unwrap();
        let y = aggregate_neighbors(&q, &c, &e, 1.0).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
        assert_eq!(y[[0, 1]], 0.0);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let q = set_from_rows(arr2(&[[0.0]]));
        let c = set_from_rows(arr2(&[[1.0]]));
        let e = build_knn_graph(&q, &c, 1).unwrap();
        assert!(matches!(aggregate_neighbors(&q, &c, &e, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(aggregate_neighbors(&q, &c, &e, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = set_from_rows(Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() * 3.0));
        let c = set_from_rows(Array2::from_shape_fn((11, 5), |_| rng.random::<f64>() * 3.0));
        let e = build_knn_graph(&q, &c, 4).unwrap();
        for t in [1e-3, 0.5, 7.0] {
            let w = aggregation_weights(&q, &c, &e, t).unwrap();
            for i in 0..6 {
                let s: f64 = w.row(i).sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s} at T={t}");
                assert!(w.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn aggregate_stays_in_neighbor_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = set_from_rows(Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() * 2.0 - 1.0));
        let c = set_from_rows(Array2::from_shape_fn((9, 3), |_| rng.random::<f64>() * 2.0 - 1.0));
        let e = build_knn_graph(&q, &c, 3).unwrap();
        let y = aggregate_neighbors(&q, &c, &e, 1.5).unwrap();
        for i in 0..4 {
            for t in 0..3 {
                let vals: Vec<f64> =
                    (0..3).map(|s| c.vectors()[[e.neighbor_idx()[[i, s]], t]]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(y[[i, t]] >= lo - 1e-12 && y[[i, t]] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_temperature_selects_nearest_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = set_from_rows(Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() * 2.0 - 1.0));
        let c = set_from_rows(Array2::from_shape_fn((12, 4), |_| rng.random::<f64>() * 2.0 - 1.0));
        let e = build_knn_graph(&q, &c, 6).unwrap();
        let y = aggregate_neighbors(&q, &c, &e, 1e-4).unwrap();
        for i in 0..5 {
            let nearest = e.neighbor_idx()[[i, 0]];
            for t in 0..4 {
                assert!((y[[i, t]] - c.vectors()[[nearest, t]]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn constant_input_identity_embeddings_double_the_map() {
        let f = FeatureMap::from_shape_fn(2, 8, 8, |_, _, _| 0.3).unwrap();
        let out = sgb_forward(&f, &SgbParams::identity(2), &SgbConfig::default()).unwrap();
        for v in out.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_out_projection_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_map(&mut rng, 3, 8, 10);
        let mut params = SgbParams::identity(3);
        params.theta_out = Array2::zeros((3, 3));
        let out = sgb_forward(&f, &params, &SgbConfig::default()).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn shape_and_finiteness_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_map(&mut rng, 4, 8, 8);
        let mut params = SgbParams::identity(4);
        params.theta_f = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        params.theta_g = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        params.theta_out = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let out = sgb_forward(&f, &params, &SgbConfig::default()).unwrap();
        assert_eq!(out.shape(), (4, 8, 8));
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_permutation_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = 3;
        let f = random_map(&mut rng, c, 8, 8);
        let mut params = SgbParams::identity(c);
        params.theta_f = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() - 0.5);
        params.theta_g = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() - 0.5);
        params.theta_out = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() - 0.5);
        let cfg = SgbConfig::default();

        let perm = [2usize, 0, 1];
        let f_p = FeatureMap::from_shape_fn(c, 8, 8, |ci, r, col| f.data()[[perm[ci], r, col]]).unwrap();
        let permute = |m: &Array2<f64>| Array2::from_shape_fn((c, c), |(i, j)| m[[perm[i], perm[j]]]);
        let params_p = SgbParams {
            theta_f: permute(&params.theta_f),
            theta_g: permute(&params.theta_g),
            theta_out: permute(&params.theta_out),
        };

        let out = sgb_forward(&f, &params, &cfg).unwrap();
        let out_p = sgb_forward(&f_p, &params_p, &cfg).unwrap();
        for ci in 0..c {
            for r in 0..8 {
                for col in 0..8 {
                    assert!((out_p.data()[[ci, r, col]] - out.data()[[perm[ci], r, col]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn odd_input_rejected() {
        let f = FeatureMap::zeros(2, 7, 8);
        assert!(matches!(
            sgb_forward(&f, &SgbParams::identity(2), &SgbConfig::default()),
            Err(Error::Dimension(_))
        ));
    }
}
