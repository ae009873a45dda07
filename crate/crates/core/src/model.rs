//! Full network assembly: shallow feature extraction, a stack of
//! subgraph-attention blocks, and pixel-shuffle reconstruction, with ablation
//! switches that substitute identity or simpler merges for each component.
//!
//! Block pipeline (all switches on): stride-2 phase decomposition → subgraph
//! generation on each subset → per-subgraph multi-head attention → learnable
//! weighted combination → recomposition → 3×3 projection → residual add.
//! The model reflect-pads features so every block-level operation is
//! well-defined, and crops back before reconstruction.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subgraph::{build_knn_graph, PatchSet, SgbConfig};
use crate::tape::{NodeId, Tape};
use crate::types::FeatureMap;

/// How the per-subgraph features are merged into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaMode {
    /// Elementwise sum of the subgraph features; no attention, no weights.
    Add,
    /// Channel concatenation followed by a learned projection.
    Concat,
    /// Per-subgraph multi-head attention, then the learnable weighted sum.
    Aggregation,
}

/// Where the combined subgraph features flow during recomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SabDataflow {
    /// The combined features are broadcast to all four phases (equivalent to
    /// nearest-neighbor upsampling of the combined half-resolution map).
    Broadcast,
    /// Each phase is recomposed from its own attention-updated subgraph,
    /// scaled by J·αₖ so per-phase magnitudes stay comparable with
    /// `Broadcast` under the uniform initialization of α.
    PerSubgraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub stride: usize,
    pub k: usize,
    /// Gaussian-kernel temperature for neighbor weighting; `None` resolves
    /// to the flattened patch dimension.
    pub temperature: Option<f64>,
    pub use_cssb: bool,
    pub use_sab: bool,
    pub use_nss: bool,
    pub use_sgb: bool,
    pub ga_mode: GaMode,
    pub sab_dataflow: SabDataflow,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full_scale(4)
    }
}

impl ModelConfig {
    /// Full-size preset; parameter count lands near the sizing target of
    /// roughly 880K at scale 4.
    pub fn full_scale(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 64,
            n_blocks: 7,
            heads: 4,
            patch: 3,
            stride: 2,
            k: 5,
            temperature: None,
            use_cssb: true,
            use_sab: true,
            use_nss: true,
            use_sgb: true,
            ga_mode: GaMode::Aggregation,
            sab_dataflow: SabDataflow::Broadcast,
            seed: 0,
        }
    }

    /// Desk-scale preset small enough to train on a CPU in minutes.
    pub fn tiny(scale: usize) -> Self {
        ModelConfig {
            channels: 32,
            n_blocks: 2,
            heads: 2,
            stride: 1,
            k: 4,
            ..ModelConfig::full_scale(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 3 | 4) {
            return Err(Error::config("scale", format!("must be 2, 3, or 4, got {}", self.scale)));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} channels not divisible by {} heads", self.channels, self.heads),
            ));
        }
        if self.patch == 0 {
            return Err(Error::config("patch", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::config("temperature", format!("must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Phase decomposition is active only when the whole subgraph path is.
    pub fn nss_active(&self) -> bool {
        self.use_cssb && self.use_nss
    }

    /// Subgraph generation is active only when the whole subgraph path is.
    pub fn sgb_active(&self) -> bool {
        self.use_cssb && self.use_sgb
    }

    /// Number of subgraphs per block.
    pub fn n_subgraphs(&self) -> usize {
        if self.nss_active() {
            4
        } else {
            1
        }
    }

    fn sgb_config(&self) -> SgbConfig {
        SgbConfig { patch: self.patch, stride: self.stride, k: self.k, temperature: self.temperature }
    }

    /// Feature dimensions must be a multiple of this before the block stack.
    pub fn pad_multiple(&self) -> usize {
        let mut m = 1;
        if self.nss_active() {
            m *= 2;
        }
        if self.sgb_active() {
            m *= 2;
        }
        m
    }

    /// Padded extent of one spatial dimension: the next multiple of
    /// [`Self::pad_multiple`], and large enough that patches fit on the
    /// coarsest grid the block stack produces.
    pub fn padded_extent(&self, n: usize) -> usize {
        let m = self.pad_multiple();
        let rounded = n.div_ceil(m) * m;
        let floor = if self.sgb_active() { m * self.patch } else { m };
        rounded.max(floor)
    }
}

/// Ordered name → array parameter storage. Iteration order is insertion
/// order, which build code keeps deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    /// Total learnable scalar count.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

/// Deterministic initialization from `cfg.seed`. Each block's output
/// projection starts at zero, so every residual block is exactly the
/// identity in a fresh model and the stack trains stably from the skip
/// connections outward.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let c = cfg.channels;
    let j = cfg.n_subgraphs();

    let conv_bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    params.insert("shallow.weight", uniform(&mut rng, &[c, 3, 3, 3], conv_bound(3 * 9)));
    params.insert("shallow.bias", ArrayD::zeros(IxDyn(&[c])));

    for b in 0..cfg.n_blocks {
        let p = format!("block{b}");
        if cfg.sgb_active() {
            let bound = conv_bound(c);
            params.insert(format!("{p}.sgb.theta_f"), uniform(&mut rng, &[c, c], bound));
            params.insert(format!("{p}.sgb.theta_g"), uniform(&mut rng, &[c, c], bound));
            params.insert(format!("{p}.sgb.theta_out"), uniform(&mut rng, &[c, c], bound));
        }
        if cfg.use_sab {
            match cfg.ga_mode {
                GaMode::Aggregation => {
                    let d_head = c / cfg.heads;
                    let bound = conv_bound(c);
                    for q in 0..j {
                        for h in 0..cfg.heads {
                            params.insert(
                                format!("{p}.attn{q}.head{h}.w_q"),
                                uniform(&mut rng, &[c, d_head], bound),
                            );
                            params.insert(
                                format!("{p}.attn{q}.head{h}.w_k"),
                                uniform(&mut rng, &[c, d_head], bound),
                            );
                            params.insert(
                                format!("{p}.attn{q}.head{h}.w_v"),
                                uniform(&mut rng, &[c, d_head], bound),
                            );
                        }
                        params.insert(format!("{p}.attn{q}.w_o"), uniform(&mut rng, &[c, c], bound));
                    }
                    params.insert(
                        format!("{p}.alpha"),
                        ArrayD::from_elem(IxDyn(&[j]), 1.0 / j as f64),
                    );
                }
                GaMode::Concat => {
                    params.insert(
                        format!("{p}.cat_proj"),
                        uniform(&mut rng, &[j * c, c], conv_bound(j * c)),
                    );
                }
                GaMode::Add => {}
            }
        }
        params.insert(format!("{p}.out_proj.weight"), ArrayD::zeros(IxDyn(&[c, c, 3, 3])));
        params.insert(format!("{p}.out_proj.bias"), ArrayD::zeros(IxDyn(&[c])));
    }

    params.insert("body.weight", uniform(&mut rng, &[c, c, 3, 3], conv_bound(c * 9)));
    params.insert("body.bias", ArrayD::zeros(IxDyn(&[c])));

    let out_c = 3 * cfg.scale * cfg.scale;
    params.insert("recon.weight", uniform(&mut rng, &[out_c, c, 3, 3], conv_bound(c * 9)));
    params.insert("recon.bias", ArrayD::zeros(IxDyn(&[out_c])));

    Ok(Model { cfg: cfg.clone(), params })
}

/// Exact count of learnable scalars.
pub fn count_params(model: &Model) -> usize {
    model.params.total_scalars()
}

/// A recorded forward pass: the tape, the input node, the output node, and
/// every parameter's node in store order.
pub struct ForwardGraph {
    pub tape: Tape,
    pub input: NodeId,
    pub output: NodeId,
    pub param_ids: Vec<(String, NodeId)>,
}

struct BlockIds {
    prefix: String,
    ids: HashMap<String, NodeId>,
}

impl BlockIds {
    fn get(&self, suffix: &str) -> NodeId {
        self.ids[&format!("{}.{}", self.prefix, suffix)]
    }
}

fn sgb_on_tape(
    tape: &mut Tape,
    subset: NodeId,
    dims: (usize, usize, usize),
    block: &BlockIds,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let (c, h, w) = dims;
    let sgb = cfg.sgb_config();
    let theta_f = block.get("sgb.theta_f");
    let theta_g = block.get("sgb.theta_g");
    let theta_out = block.get("sgb.theta_out");

    let down = tape.mean_pool2(subset)?;
    let fq_map = tape.conv1x1(subset, theta_f)?;
    let fc_map = tape.conv1x1(down, theta_f)?;
    let gc_map = tape.conv1x1(down, theta_g)?;

    let queries = tape.extract_patches(fq_map, sgb.patch, 1)?;
    let cand_f = tape.extract_patches(fc_map, sgb.patch, sgb.stride)?;
    let cand_g = tape.extract_patches(gc_map, sgb.patch, sgb.stride)?;

    // Neighbor selection is discrete: read forward values, build the graph,
    // freeze the indices, and differentiate through the gathers only.
    let q_set = PatchSet::new(
        tape.value(queries).clone().into_dimensionality().expect("rank 2"),
        Tape::patch_coords(h, w, sgb.patch, 1),
        1,
    )?;
    let cf_set = PatchSet::new(
        tape.value(cand_f).clone().into_dimensionality().expect("rank 2"),
        Tape::patch_coords(h / 2, w / 2, sgb.patch, sgb.stride),
        1,
    )?
    .with_scale(2);
    let k_eff = sgb.k.min(cf_set.len());
    let edges = build_knn_graph(&q_set, &cf_set, k_eff)?;
    let flat_idx: Vec<usize> = edges.neighbor_idx().iter().cloned().collect();

    let gathered_f = tape.gather_rows(cand_f, flat_idx.clone())?;
    let repeated_q = tape.repeat_rows(queries, k_eff)?;
    let diff = tape.sub(repeated_q, gathered_f)?;
    let d2 = tape.sq_row_norm(diff)?;
    let d2_rows = tape.reshape(d2, &[q_set.len(), k_eff])?;
    let temperature = sgb.resolved_temperature(q_set.dim());
    let logits = tape.scale(d2_rows, -1.0 / temperature);
    let weights = tape.softmax_rows(logits)?;

    let gathered_g = tape.gather_rows(cand_g, flat_idx)?;
    let aggregated = tape.weighted_group_sum(weights, gathered_g)?;

    let coords = Tape::patch_coords(h, w, sgb.patch, 1);
    let folded = tape.fold_average(aggregated, coords, c, h, w, sgb.patch)?;
    let projected = tape.conv1x1(folded, theta_out)?;
    tape.add(subset, projected)
}

fn attention_on_tape(
    tape: &mut Tape,
    flat: NodeId,
    block: &BlockIds,
    q: usize,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let d_head = cfg.channels / cfg.heads;
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let w_q = block.get(&format!("attn{q}.head{h}.w_q"));
        let w_k = block.get(&format!("attn{q}.head{h}.w_k"));
        let w_v = block.get(&format!("attn{q}.head{h}.w_v"));
        let qm = tape.matmul(flat, w_q)?;
        let km = tape.matmul(flat, w_k)?;
        let vm = tape.matmul(flat, w_v)?;
        let logits_raw = tape.matmul_nt(qm, km)?;
        let logits = tape.scale(logits_raw, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax_rows(logits)?;
        head_outputs.push(tape.matmul(attn, vm)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, block.get(&format!("attn{q}.w_o")))
}

fn hsblock_on_tape(
    tape: &mut Tape,
    f: NodeId,
    dims: (usize, usize, usize),
    block: &BlockIds,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let (c, h, w) = dims;
    let nss_on = cfg.nss_active();
    let sgb_on = cfg.sgb_active();

    // With both the subgraph path and the combination path disabled there is
    // nothing left to compute: the block is exactly the identity.
    if !cfg.use_cssb && !cfg.use_sab {
        return Ok(f);
    }

    let (subsets, sub_dims): (Vec<NodeId>, (usize, usize, usize)) = if nss_on {
        let mut subs = Vec::with_capacity(4);
        for &(pr, pc) in crate::nss::PHASES.iter() {
            subs.push(tape.phase_extract(f, pr, pc)?);
        }
        (subs, (c, h / 2, w / 2))
    } else {
        (vec![f], (c, h, w))
    };

    let processed: Vec<NodeId> = if sgb_on {
        subsets
            .iter()
            .map(|&s| sgb_on_tape(tape, s, sub_dims, block, cfg))
            .collect::<Result<_>>()?
    } else {
        subsets
    };

    let flats: Vec<NodeId> = processed
        .iter()
        .map(|&s| tape.flatten_spatial(s))
        .collect::<Result<_>>()?;

    let (_, sh, sw) = sub_dims;
    let merged_map = if cfg.use_sab && cfg.ga_mode == GaMode::Aggregation {
        let updated: Vec<NodeId> = flats
            .iter()
            .enumerate()
            .map(|(q, &s)| attention_on_tape(tape, s, block, q, cfg))
            .collect::<Result<_>>()?;
        let alpha = block.get("alpha");
        if nss_on && cfg.sab_dataflow == SabDataflow::PerSubgraph {
            // Each phase keeps its own attention-updated subgraph, scaled by
            // J·αₖ so a uniform α leaves the per-phase magnitude unchanged.
            let jf = updated.len() as f64;
            let mut phase_maps = Vec::with_capacity(4);
            for (q, &s) in updated.iter().enumerate() {
                let scaled = tape.scale_by_element(s, alpha, q, jf)?;
                phase_maps.push(tape.unflatten_spatial(scaled, c, sh, sw)?);
            }
            tape.phase_recompose([phase_maps[0], phase_maps[1], phase_maps[2], phase_maps[3]])?
        } else {
            let combined = tape.alpha_combine(&updated, alpha)?;
            let hg_map = tape.unflatten_spatial(combined, c, sh, sw)?;
            if nss_on {
                tape.phase_recompose([hg_map; 4])?
            } else {
                hg_map
            }
        }
    } else if cfg.use_sab && cfg.ga_mode == GaMode::Concat {
        let cat = tape.concat_cols(&flats)?;
        let merged = tape.matmul(cat, block.get("cat_proj"))?;
        let hg_map = tape.unflatten_spatial(merged, c, sh, sw)?;
        if nss_on {
            tape.phase_recompose([hg_map; 4])?
        } else {
            hg_map
        }
    } else {
        // Unweighted elementwise sum: both the attention-free merge mode and
        // the combination-block-off ablation land here.
        let mut acc = flats[0];
        for &s in &flats[1..] {
            acc = tape.add(acc, s)?;
        }
        let hg_map = tape.unflatten_spatial(acc, c, sh, sw)?;
        if nss_on {
            tape.phase_recompose([hg_map; 4])?
        } else {
            hg_map
        }
    };

    let projected = tape.conv3x3(merged_map, block.get("out_proj.weight"), block.get("out_proj.bias"))?;
    tape.add(f, projected)
}

/// Records the whole network on a fresh tape. `input` must be a 3-channel
/// image; output is 3 × s·h × s·w.
pub fn forward_graph(model: &Model, input: &FeatureMap) -> Result<ForwardGraph> {
    let cfg = &model.cfg;
    cfg.validate()?;
    let (ci, h, w) = input.shape();
    if ci != 3 {
        return Err(Error::Shape(format!("expected a 3-channel input, got {ci}")));
    }

    let mut tape = Tape::new();
    let input_id = tape.leaf(input.data().clone().into_dyn());

    let mut ids = HashMap::new();
    let mut param_ids = Vec::with_capacity(model.params.len());
    for (name, value) in model.params.iter() {
        let id = tape.leaf(value.clone());
        ids.insert(name.to_string(), id);
        param_ids.push((name.to_string(), id));
    }

    let shallow = tape.conv3x3(input_id, ids["shallow.weight"], ids["shallow.bias"])?;

    let c = cfg.channels;
    let (ph, pw) = (cfg.padded_extent(h), cfg.padded_extent(w));
    let mut feat = tape.reflect_pad(shallow, ph - h, pw - w)?;
    for b in 0..cfg.n_blocks {
        let block = BlockIds { prefix: format!("block{b}"), ids: ids.clone() };
        feat = hsblock_on_tape(&mut tape, feat, (c, ph, pw), &block, cfg)?;
    }
    let cropped = tape.crop(feat, h, w)?;
    let body = tape.conv3x3(cropped, ids["body.weight"], ids["body.bias"])?;
    let fused = tape.add(body, shallow)?;
    let recon = tape.conv3x3(fused, ids["recon.weight"], ids["recon.bias"])?;
    let output = tape.pixel_shuffle(recon, cfg.scale)?;

    Ok(ForwardGraph { tape, input: input_id, output, param_ids })
}

impl Model {
    /// Runs the network and returns the super-resolved image.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let g = forward_graph(self, input)?;
        let out = g
            .tape
            .value(g.output)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("forward output is a 3-D map");
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("forward produced non-finite output".into()));
        }
        Ok(FeatureMap::from_array_unchecked(out))
    }
}

/// Runs one block in isolation; the feature map must already satisfy the
/// block's divisibility requirements (the full forward pass pads for this).
pub fn hsblock_forward(model: &Model, block_index: usize, f: &FeatureMap) -> Result<FeatureMap> {
    let cfg = &model.cfg;
    if block_index >= cfg.n_blocks {
        return Err(Error::Parameter(format!(
            "block {} of {} requested",
            block_index, cfg.n_blocks
        )));
    }
    let (c, h, w) = f.shape();
    if c != cfg.channels {
        return Err(Error::Shape(format!(
            "block expects {} channels, got {}",
            cfg.channels, c
        )));
    }
    let mut tape = Tape::new();
    let f_id = tape.leaf(f.data().clone().into_dyn());
    let mut ids = HashMap::new();
    for (name, value) in model.params.iter() {
        ids.insert(name.to_string(), tape.leaf(value.clone()));
    }
    let block = BlockIds { prefix: format!("block{block_index}"), ids };
    let out = hsblock_on_tape(&mut tape, f_id, (c, h, w), &block, cfg)?;
    let out_v = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("block output is a 3-D map");
    Ok(FeatureMap::from_array_unchecked(out_v))
}

/// One run of the component-ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    /// Which comparison family the run belongs to.
    pub family: &'static str,
    pub label: &'static str,
    pub config: ModelConfig,
}

/// The ten-run ablation grid: the subgraph-path/combination family, the node
/// sampling family, the subgraph generation family, and the merge-mode
/// family. The full model appears in every family as its reference row.
pub fn ablation_grid(base: &ModelConfig) -> Vec<AblationRun> {
    let full = ModelConfig {
        use_cssb: true,
        use_sab: true,
        use_nss: true,
        use_sgb: true,
        ga_mode: GaMode::Aggregation,
        ..base.clone()
    };
    let mut runs = Vec::new();
    let mut push = |family, label, config| runs.push(AblationRun { family, label, config });

    push("cssb_sab", "full", full.clone());
    push("cssb_sab", "no_sab", ModelConfig { use_sab: false, ..full.clone() });
    push("cssb_sab", "no_cssb", ModelConfig { use_cssb: false, ..full.clone() });

    push("nss", "full", full.clone());
    push("nss", "no_nss", ModelConfig { use_nss: false, ..full.clone() });

    push("sgb", "full", full.clone());
    push("sgb", "no_sgb", ModelConfig { use_sgb: false, ..full.clone() });

    push("ga_mode", "aggregation", full.clone());
    push("ga_mode", "concat", ModelConfig { ga_mode: GaMode::Concat, ..full.clone() });
    push("ga_mode", "add", ModelConfig { ga_mode: GaMode::Add, ..full });

    runs
}
