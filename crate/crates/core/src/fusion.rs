//! Subgraph fusion: scaled dot-product multi-head attention applied to each
//! subgraph's node features, then a learnable per-subgraph weighted sum.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};

/// Node features of one subgraph: an n × d matrix plus the subgraph's index.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphFeatures {
    s: Array2<f64>,
    subgraph_id: usize,
}

impl SubgraphFeatures {
    pub fn new(s: Array2<f64>, subgraph_id: usize) -> Result<Self> {
        if s.nrows() == 0 || s.ncols() == 0 {
            return Err(Error::Shape(format!(
                "subgraph {} features must be non-empty, got {}x{}",
                subgraph_id,
                s.nrows(),
                s.ncols()
            )));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "subgraph {subgraph_id} features contain non-finite values"
            )));
        }
        Ok(SubgraphFeatures { s, subgraph_id })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn subgraph_id(&self) -> usize {
        self.subgraph_id
    }

    /// Node count n.
    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    /// Channel count d.
    pub fn d(&self) -> usize {
        self.s.ncols()
    }
}

/// Multi-head attention weights for one subgraph: per-head query/key/value
/// maps (d × d_head each) and the merge projection (heads·d_head × d).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    pub w_o: Array2<f64>,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let heads = self.heads();
        if heads == 0 {
            return Err(Error::config("heads", "must have at least one attention head"));
        }
        if d % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("channel count {d} is not divisible by {heads} heads"),
            ));
        }
        let d_head = d / heads;
        if self.w_k.len() != heads || self.w_v.len() != heads {
            return Err(Error::Shape(format!(
                "head count mismatch: {} query, {} key, {} value maps",
                heads,
                self.w_k.len(),
                self.w_v.len()
            )));
        }
        for (name, group) in [("query", &self.w_q), ("key", &self.w_k), ("value", &self.w_v)] {
            for (h, m) in group.iter().enumerate() {
                if m.nrows() != d || m.ncols() != d_head {
                    return Err(Error::Shape(format!(
                        "{} map of head {} is {}x{}, expected {}x{}",
                        name,
                        h,
                        m.nrows(),
                        m.ncols(),
                        d,
                        d_head
                    )));
                }
                if !m.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("{name} map of head {h} is non-finite")));
                }
            }
        }
        if self.w_o.nrows() != heads * d_head || self.w_o.ncols() != d {
            return Err(Error::Shape(format!(
                "output projection is {}x{}, expected {}x{}",
                self.w_o.nrows(),
                self.w_o.ncols(),
                heads * d_head,
                d
            )));
        }
        if !self.w_o.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("output projection is non-finite".into()));
        }
        Ok(())
    }
}

/// Learnable combination coefficients, one per subgraph; unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub alpha: Vec<f64>,
}

impl FusionParams {
    /// Uniform initialization 1/J.
    pub fn uniform(j: usize) -> Self {
        FusionParams { alpha: vec![1.0 / j as f64; j] }
    }
}

/// Row-wise softmax with the usual max shift; each output row is
/// non-negative and sums to 1.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// The row-stochastic attention matrix A = softmax(S·W_Q·(S·W_K)ᵀ / √d_head).
pub fn attention_matrix(s: &SubgraphFeatures, w_q: &Array2<f64>, w_k: &Array2<f64>) -> Result<Array2<f64>> {
    let q = s.matrix().dot(w_q);
    let k = s.matrix().dot(w_k);
    let d_head = w_q.ncols();
    let logits = q.dot(&k.t()) / (d_head as f64).sqrt();
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("attention logits are non-finite".into()));
    }
    Ok(softmax_rows(&logits))
}

/// Single attention head: S' = A·(S·W_V) with A from [`attention_matrix`].
pub fn attention_head(
    s: &SubgraphFeatures,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> Result<Array2<f64>> {
    let a = attention_matrix(s, w_q, w_k)?;
    let v = s.matrix().dot(w_v);
    let out = a.dot(&v);
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("attention output is non-finite".into()));
    }
    Ok(out)
}

/// Multi-head attention over one subgraph: per-head outputs concatenated
/// along channels and merged by the output projection. Preserves node count
/// and order; output is n × d.
pub fn graph_aggregation(s: &SubgraphFeatures, p: &AttentionParams) -> Result<SubgraphFeatures> {
    p.validate(s.d())?;
    let mut head_outputs = Vec::with_capacity(p.heads());
    for h in 0..p.heads() {
        let out = attention_head(s, &p.w_q[h], &p.w_k[h], &p.w_v[h]).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("head {h}: {msg}")),
            other => other,
        })?;
        head_outputs.push(out);
    }
    let views: Vec<_> = head_outputs.iter().map(|m| m.view()).collect();
    let merged = concatenate(Axis(1), &views).expect("head outputs share row count");
    SubgraphFeatures::new(merged.dot(&p.w_o), s.subgraph_id())
}

/// Learnable weighted sum over subgraphs: HG = Σₖ αₖ·S'⁽ᵏ⁾, elementwise.
pub fn sab_combine(updated: &[SubgraphFeatures], f: &FusionParams) -> Result<SubgraphFeatures> {
    if updated.is_empty() {
        return Err(Error::Shape("no subgraphs to combine".into()));
    }
    if f.alpha.len() != updated.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} subgraphs",
            f.alpha.len(),
            updated.len()
        )));
    }
    let (n, d) = (updated[0].n(), updated[0].d());
    let offenders: Vec<String> = updated
        .iter()
        .filter(|s| (s.n(), s.d()) != (n, d))
        .map(|s| format!("subgraph {} is {}x{}", s.subgraph_id(), s.n(), s.d()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Shape(format!(
            "subgraph shapes disagree with {}x{}: {}",
            n,
            d,
            offenders.join(", ")
        )));
    }
    let mut hg = Array2::zeros((n, d));
    for (k, s) in updated.iter().enumerate() {
        hg.scaled_add(f.alpha[k], s.matrix());
    }
    SubgraphFeatures::new(hg, 0)
}
