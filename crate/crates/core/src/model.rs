//! Full model assembly: per-layer structure-VAE and decoder parameters, the
//! gating projection, initialization, and the tape-level forward pass that
//! training differentiates through.
//!
//! The forward pass mirrors the value-level pipeline in [`crate::decoder`]
//! and [`crate::cgt`] operation for operation; equivalence between the two
//! paths is covered by the oracle tests.

use crate::cgt::{FusionConfig, FusionStrategy, GatingProjection, Mode};
use crate::decoder::{
    DecoderLayerParams, DecoderLayerVars, KeypointSet, QueryFeatureMap, SupportEmbedding,
};
use crate::episodes::{aggregate_supports, proposal_init, Episode};
use crate::error::Error;
use crate::latent::{self, AdjacencyMatrix, AdjacencyStage, IsvaeParams, IsvaeVars, ROW_NORM_EPS};
use crate::matrix::Matrix;
use crate::objective::{self, LossWeights};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::Result;

/// Width of ground-truth heatmap Gaussians, in pixels.
pub const HEATMAP_SIGMA_PX: f64 = 2.0;

/// How the GCN adjacency is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Full structure-VAE + fusion pipeline.
    Learned,
    /// A seeded random normalized adjacency, frozen at init.
    RandomFrozen,
    /// The episode's true topology, row-normalized.
    StaticGiven,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<GraphMode> {
        match s {
            "learned" => Ok(GraphMode::Learned),
            "random-frozen" => Ok(GraphMode::RandomFrozen),
            "static-given" => Ok(GraphMode::StaticGiven),
            other => Err(Error::usage(format!("unknown graph mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphMode::Learned => write!(f, "learned"),
            GraphMode::RandomFrozen => write!(f, "random-frozen"),
            GraphMode::StaticGiven => write!(f, "static-given"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub m: usize,
    pub d: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub l_d: usize,
    pub fusion: FusionConfig,
    pub graph_mode: GraphMode,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            m: 8,
            d: 32,
            d_z: latent::DEFAULT_D_Z,
            hidden: latent::DEFAULT_HIDDEN,
            l_d: 3,
            fusion: FusionConfig::default(),
            graph_mode: GraphMode::Learned,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_d == 0 {
            return Err(Error::config("l_d must be >= 1"));
        }
        if self.m == 0 || self.d == 0 || self.d_z == 0 || self.hidden == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        self.fusion.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub isvae: Vec<IsvaeParams>,
    pub dec: Vec<DecoderLayerParams>,
    pub gating: GatingProjection,
    /// Present only in random-frozen mode.
    pub frozen_adj: Option<Matrix>,
}

fn xavier(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.next_range(-bound, bound))
}

// Biases start small but nonzero. Exact zeros park ReLU pre-activations and
// posterior means on non-smooth points, which finite-difference checks then
// straddle.
fn bias_init(cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(1, cols, |_, _| rng.next_range(-0.05, 0.05))
}

impl Model {
    /// Xavier-uniform weights, zero biases. Draw order: per layer the
    /// structure-VAE weights, then per layer the decoder weights, then the
    /// gating projection, then (random-frozen mode only) the frozen graph.
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Result<Model> {
        cfg.validate()?;
        let (m, d, d_z, hidden) = (cfg.m, cfg.d, cfg.d_z, cfg.hidden);
        let isvae: Vec<IsvaeParams> = (0..cfg.l_d)
            .map(|_| {
                // The log-variance head starts low so early adjacency samples
                // are not dominated by reparameterization noise.
                let mut enc_b2 = bias_init(2 * d_z, rng);
                for i in d_z..2 * d_z {
                    enc_b2.set(0, i, enc_b2.get(0, i) - 4.0);
                }
                // The adjacency bias starts with a wide spread: near-uniform
                // initial graphs put every row at the same aggregate and
                // stall the joint discovery of structure and readout.
                let dec_b = Matrix::from_fn(1, m * m, |_, _| rng.next_range(-1.0, 1.0));
                IsvaeParams {
                    enc_w1: xavier(m * d, hidden, rng),
                    enc_b1: bias_init(hidden, rng),
                    enc_w2: xavier(hidden, 2 * d_z, rng),
                    enc_b2,
                    dec_w: xavier(d_z, m * m, rng),
                    dec_b,
                }
            })
            .collect();
        let dec: Vec<DecoderLayerParams> = (0..cfg.l_d)
            .map(|_| DecoderLayerParams {
                w_adj: xavier(d, d, rng),
                w_self: xavier(d, d, rng),
                mlp: crate::decoder::RefineMlp {
                    w1: xavier(d, d, rng),
                    b1: bias_init(d, rng),
                    w2: xavier(d, 2, rng),
                    b2: bias_init(2, rng),
                },
            })
            .collect();
        let gating = GatingProjection {
            proj_w: xavier(d, d_z, rng),
        };
        let frozen_adj = match cfg.graph_mode {
            GraphMode::RandomFrozen => Some(random_normalized_adjacency(m, rng)?),
            _ => None,
        };
        Ok(Model {
            cfg,
            isvae,
            dec,
            gating,
            frozen_adj,
        })
    }

    /// Named parameter tensors in a fixed order (optimizer and checkpoint
    /// iterate this).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.cfg.l_d {
            for f in ["enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w", "dec_b"] {
                names.push(format!("isvae.{l}.{f}"));
            }
        }
        for l in 0..self.cfg.l_d {
            for f in ["w_adj", "w_self", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"] {
                names.push(format!("dec.{l}.{f}"));
            }
        }
        names.push("gating.proj_w".into());
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for p in &self.isvae {
            out.extend([&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2, &p.dec_w, &p.dec_b]);
        }
        for p in &self.dec {
            out.extend([&p.w_adj, &p.w_self, &p.mlp.w1, &p.mlp.b1, &p.mlp.w2, &p.mlp.b2]);
        }
        out.push(&self.gating.proj_w);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for p in &mut self.isvae {
            out.push(&mut p.enc_w1);
            out.push(&mut p.enc_b1);
            out.push(&mut p.enc_w2);
            out.push(&mut p.enc_b2);
            out.push(&mut p.dec_w);
            out.push(&mut p.dec_b);
        }
        for p in &mut self.dec {
            out.push(&mut p.w_adj);
            out.push(&mut p.w_self);
            out.push(&mut p.mlp.w1);
            out.push(&mut p.mlp.b1);
            out.push(&mut p.mlp.w2);
            out.push(&mut p.mlp.b2);
        }
        out.push(&mut self.gating.proj_w);
        out
    }

    pub fn insert_params(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            isvae: self.isvae.iter().map(|p| p.insert(tape)).collect(),
            dec: self.dec.iter().map(|p| p.insert(tape)).collect(),
            proj_w: tape.input(self.gating.proj_w.clone()),
        }
    }
}

/// Seeded random symmetric row-normalized adjacency for the frozen baseline.
pub fn random_normalized_adjacency(m: usize, rng: &mut RngStream) -> Result<Matrix> {
    let raw = AdjacencyMatrix::new(
        AdjacencyStage::Raw,
        Matrix::from_fn(m, m, |_, _| rng.next_f64()),
    );
    let sym = latent::symmetrize(&raw)?;
    Ok(latent::row_normalize(&sym, ROW_NORM_EPS)?.into_values())
}

/// Row-normalized version of a known binary topology (static-given mode).
pub fn normalized_static_adjacency(truth: &Matrix) -> Result<Matrix> {
    let sym = AdjacencyMatrix::new(AdjacencyStage::Symmetric, truth.clone());
    Ok(latent::row_normalize(&sym, ROW_NORM_EPS)?.into_values())
}

/// Tape handles for every trainable tensor, in registry order.
pub struct ParamVars {
    pub isvae: Vec<IsvaeVars>,
    pub dec: Vec<DecoderLayerVars>,
    pub proj_w: Var,
}

impl ParamVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.isvae {
            out.extend([p.enc_w1, p.enc_b1, p.enc_w2, p.enc_b2, p.dec_w, p.dec_b]);
        }
        for p in &self.dec {
            out.extend([p.w_adj, p.w_self, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2]);
        }
        out.push(self.proj_w);
        out
    }

    /// Inverse of [`ParamVars::flat`] for `l_d` layers.
    pub fn from_flat(flat: &[Var], l_d: usize) -> ParamVars {
        assert_eq!(flat.len(), 12 * l_d + 1, "flat var count mismatch");
        let isvae = (0..l_d)
            .map(|l| {
                let b = 6 * l;
                IsvaeVars {
                    enc_w1: flat[b],
                    enc_b1: flat[b + 1],
                    enc_w2: flat[b + 2],
                    enc_b2: flat[b + 3],
                    dec_w: flat[b + 4],
                    dec_b: flat[b + 5],
                }
            })
            .collect();
        let dec = (0..l_d)
            .map(|l| {
                let b = 6 * l_d + 6 * l;
                DecoderLayerVars {
                    w_adj: flat[b],
                    w_self: flat[b + 1],
                    mlp_w1: flat[b + 2],
                    mlp_b1: flat[b + 3],
                    mlp_w2: flat[b + 4],
                    mlp_b2: flat[b + 5],
                }
            })
            .collect();
        ParamVars {
            isvae,
            dec,
            proj_w: flat[12 * l_d],
        }
    }
}

/// Inserts every parameter, substituting the tensor at registry index
/// `override_idx` with an existing tape node (used by gradient checks).
pub fn insert_params_with_override(
    model: &Model,
    tape: &mut Tape,
    override_idx: usize,
    var: Var,
) -> ParamVars {
    let flat: Vec<Var> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| if i == override_idx { var } else { tape.input((*p).clone()) })
        .collect();
    ParamVars::from_flat(&flat, model.cfg.l_d)
}

// ---------------------------------------------------------------------------
// Episode preparation
// ---------------------------------------------------------------------------

/// Model-ready view of an episode: aggregated supports, proposals, loss mask
/// and the (parameter-free) heatmap branch value.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub fs0: SupportEmbedding,
    pub fq: QueryFeatureMap,
    pub p0: KeypointSet,
    pub truth: KeypointSet,
    /// Keypoints counted by the losses and PCK: known in the supports and
    /// visible in the query.
    pub loss_mask: Vec<bool>,
    pub heatmap_value: f64,
    pub static_adj: Matrix,
}

/// Aggregates supports, builds proposals and the heatmap branch, pads to the
/// model's keypoint capacity when the category has fewer keypoints.
pub fn prepare_episode(ep: &Episode, m_model: usize) -> Result<PreparedEpisode> {
    let fs0 = aggregate_supports(&ep.supports);
    if fs0.m() > m_model {
        return Err(Error::config(format!(
            "episode has {} keypoints, model capacity is {m_model}",
            fs0.m()
        )));
    }
    let fs0 = pad_embedding(&fs0, m_model);
    let truth = pad_keypoints(&ep.query_truth, m_model);
    let (p0, pred_heat) = proposal_init(&fs0, &ep.query)?;

    let loss_mask: Vec<bool> = (0..m_model)
        .map(|k| fs0.mask()[k] && truth.mask()[k])
        .collect();
    if !loss_mask.iter().any(|&v| v) {
        return Err(Error::usage("episode has no keypoint visible in both views"));
    }

    let (h, w) = ep.query.grid();
    let truth_for_loss = truth.with_mask(loss_mask.clone());
    let truth_heat = objective::gaussian_heatmaps(&truth_for_loss, h, w, HEATMAP_SIGMA_PX);
    let heatmap_value = objective::heatmap_loss(&pred_heat, &truth_heat, &loss_mask)?;

    let static_adj = normalized_static_adjacency(&pad_adjacency(&ep.true_adjacency, m_model))?;

    Ok(PreparedEpisode {
        fs0,
        fq: ep.query.clone(),
        p0,
        truth: truth_for_loss,
        loss_mask,
        heatmap_value,
        static_adj,
    })
}

fn pad_embedding(fs: &SupportEmbedding, m: usize) -> SupportEmbedding {
    if fs.m() == m {
        return fs.clone();
    }
    let mut values = Matrix::zeros(m, fs.d());
    let mut mask = vec![false; m];
    for k in 0..fs.m() {
        mask[k] = fs.mask()[k];
        for c in 0..fs.d() {
            values.set(k, c, fs.values().get(k, c));
        }
    }
    SupportEmbedding::new(values, mask)
}

fn pad_keypoints(kps: &KeypointSet, m: usize) -> KeypointSet {
    if kps.m() == m {
        return kps.clone();
    }
    let mut coords = Matrix::from_fn(m, 2, |_, _| 0.5);
    let mut mask = vec![false; m];
    for k in 0..kps.m() {
        mask[k] = kps.mask()[k];
        coords.set(k, 0, kps.coords().get(k, 0));
        coords.set(k, 1, kps.coords().get(k, 1));
    }
    KeypointSet::new(coords, mask)
}

fn pad_adjacency(a: &Matrix, m: usize) -> Matrix {
    if a.rows() == m {
        return a.clone();
    }
    let mut out = Matrix::zeros(m, m);
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(r, c, a.get(r, c));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape-level forward pass
// ---------------------------------------------------------------------------

/// Per-episode forward results on the tape.
pub struct EpisodeForward {
    pub total: Var,
    pub offset: Var,
    pub kl_sum: f64,
    pub sparsity_sum: f64,
    pub vae_value: f64,
    pub heatmap_value: f64,
    /// Refined keypoints per layer (values).
    pub keypoints: Vec<Matrix>,
    /// Final fused adjacency per layer (values).
    pub adjacencies: Vec<Matrix>,
}

fn cosine_t(tape: &mut Tape, a: Var, b: Var) -> Var {
    let prod = tape.mul(a, b);
    let dot = tape.sum_all(prod);
    let a2 = tape.mul(a, a);
    let a2s = tape.sum_all(a2);
    let na = tape.sqrt(a2s);
    let b2 = tape.mul(b, b);
    let b2s = tape.sum_all(b2);
    let nb = tape.sqrt(b2s);
    let denom = tape.mul(na, nb);
    tape.div(dot, denom)
}

fn norm_value(m: &Matrix) -> f64 {
    m.sum_sq().sqrt()
}

/// Builds one episode's forward pass on the tape. Draw order matches the
/// value-level pipeline: per layer, per sample, D_z standard normals.
#[allow(clippy::too_many_arguments)]
pub fn forward_episode(
    tape: &mut Tape,
    model: &Model,
    params: &ParamVars,
    ep: &PreparedEpisode,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<EpisodeForward> {
    let cfg = &model.cfg;
    let m = cfg.m;
    let mask = ep.fs0.mask().to_vec();
    let loss_mask = ep.loss_mask.clone();

    let fq = tape.input(ep.fq.values().clone());
    let truth = tape.input(ep.truth.coords().clone());
    let mut fs = tape.input(ep.fs0.values().clone());
    let mut p = tape.input(ep.p0.coords().clone());

    // Query descriptor for gating, shared across layers.
    let pooled = tape.mean_rows(fq);
    let q_proj = tape.matmul(pooled, params.proj_w);
    let q_degenerate = norm_value(tape.value(q_proj)) < 1e-8;

    let n_samples = match mode {
        Mode::Training => cfg.fusion.n_samples,
        Mode::Inference => 1,
    };

    let mut fused_hist: Vec<Var> = Vec::new();
    let mut mu_hist: Vec<Var> = Vec::new();
    let mut sig_tot_hist: Vec<Var> = Vec::new();
    let mut kl_terms: Vec<Var> = Vec::new();
    let mut sp_terms: Vec<Var> = Vec::new();
    let mut offset_terms: Vec<Var> = Vec::new();
    let mut kl_sum = 0.0;
    let mut sparsity_sum = 0.0;
    let mut keypoints = Vec::new();
    let mut adjacencies = Vec::new();

    for l in 0..cfg.l_d {
        let a_final = match cfg.graph_mode {
            GraphMode::RandomFrozen => {
                let frozen = model
                    .frozen_adj
                    .as_ref()
                    .ok_or_else(|| Error::config("random-frozen mode without a frozen graph"))?;
                tape.input(frozen.clone())
            }
            GraphMode::StaticGiven => tape.input(ep.static_adj.clone()),
            GraphMode::Learned => {
                let vae = &params.isvae[l];
                let (mu, lv) = latent::encode_posterior_t(tape, fs, vae);
                let half = tape.scale(lv, 0.5);
                let sigma = tape.exp(half);
                let sig_tot = tape.sum_all(sigma);

                let mut samples = Vec::with_capacity(n_samples);
                for _ in 0..n_samples {
                    let z = match mode {
                        Mode::Training => {
                            let mut eps = vec![0.0; cfg.d_z];
                            rng.fill_normal(&mut eps);
                            let eps_v = tape.input(Matrix::row_vec(eps));
                            latent::sample_latent_t(tape, mu, lv, eps_v)
                        }
                        Mode::Inference => mu,
                    };
                    let raw = latent::decode_adjacency_t(tape, z, vae, m);
                    let sym = latent::symmetrize_t(tape, raw);
                    let norm = latent::row_normalize_t(tape, sym, ROW_NORM_EPS);
                    samples.push((z, norm));
                }

                let a_fused = if n_samples == 1 {
                    samples[0].1
                } else {
                    let weights: Vec<Var> = match cfg.fusion.sample_strategy {
                        FusionStrategy::Bayesian => {
                            let one = tape.input(Matrix::from_vec(1, 1, vec![1.0]));
                            let denom = tape.add_const(sig_tot, cfg.fusion.eps);
                            let w = tape.div(one, denom);
                            let row = tape.concat_cols(&vec![w; n_samples]);
                            normalize_row_t(tape, row, n_samples)
                        }
                        FusionStrategy::QueryWeighting => {
                            let degenerate = q_degenerate
                                || samples
                                    .iter()
                                    .any(|(z, _)| norm_value(tape.value(*z)) < 1e-8);
                            if degenerate {
                                log::warn!("sample gating degenerate, using uniform weights");
                                uniform_weights_t(tape, n_samples)
                            } else {
                                let cosines: Vec<Var> = samples
                                    .iter()
                                    .map(|(z, _)| cosine_t(tape, q_proj, *z))
                                    .collect();
                                softmax_weights_t(tape, &cosines)
                            }
                        }
                    };
                    weighted_sum_t(tape, samples.iter().map(|(_, a)| *a), &weights)
                };

                fused_hist.push(a_fused);
                mu_hist.push(mu);
                sig_tot_hist.push(sig_tot);

                let layers_so_far = fused_hist.len();
                let a_final = if layers_so_far == 1 {
                    fused_hist[0]
                } else {
                    let alphas: Vec<Var> = match cfg.fusion.layer_strategy {
                        FusionStrategy::QueryWeighting => {
                            let degenerate = q_degenerate
                                || mu_hist.iter().any(|mv| norm_value(tape.value(*mv)) < 1e-8);
                            if degenerate {
                                log::warn!("layer gating degenerate, using uniform weights");
                                uniform_weights_t(tape, layers_so_far)
                            } else {
                                let cosines: Vec<Var> = mu_hist
                                    .iter()
                                    .map(|mv| cosine_t(tape, q_proj, *mv))
                                    .collect();
                                softmax_weights_t(tape, &cosines)
                            }
                        }
                        FusionStrategy::Bayesian => {
                            let one = tape.input(Matrix::from_vec(1, 1, vec![1.0]));
                            let ws: Vec<Var> = sig_tot_hist
                                .iter()
                                .map(|&s| {
                                    let denom = tape.add_const(s, cfg.fusion.eps);
                                    tape.div(one, denom)
                                })
                                .collect();
                            let row = tape.concat_cols(&ws);
                            normalize_row_t(tape, row, layers_so_far)
                        }
                    };
                    weighted_sum_t(tape, fused_hist.iter().copied(), &alphas)
                };

                let kl = latent::kl_to_standard_normal_t(tape, mu, lv);
                let sp = latent::sparsity_penalty_t(tape, a_final, m);
                kl_sum += tape.scalar(kl);
                sparsity_sum += tape.scalar(sp);
                kl_terms.push(kl);
                sp_terms.push(sp);
                a_final
            }
        };

        adjacencies.push(tape.value(a_final).clone());

        let dec = &params.dec[l];
        fs = crate::decoder::gcn_forward_t(tape, fs, a_final, dec.w_adj, dec.w_self, &mask);
        let mlp = [dec.mlp_w1, dec.mlp_b1, dec.mlp_w2, dec.mlp_b2];
        p = crate::decoder::keypoint_refine_t(tape, p, fs, &mlp);
        keypoints.push(tape.value(p).clone());

        let diff = tape.sub(p, truth);
        let absd = tape.abs(diff);
        let masked = tape.zero_rows(absd, &loss_mask);
        offset_terms.push(tape.sum_all(masked));
    }

    // Deep supervision: mean over layers of the per-layer L1 sums.
    let mut offset = offset_terms[0];
    for t in &offset_terms[1..] {
        offset = tape.add(offset, *t);
    }
    let offset = tape.scale(offset, 1.0 / cfg.l_d as f64);

    // VAE loss: sum over layers of KL + beta * sparsity (zero for graph
    // modes that bypass the structure VAE).
    let vae = if kl_terms.is_empty() {
        None
    } else {
        let mut acc = None;
        for (kl, sp) in kl_terms.iter().zip(&sp_terms) {
            let weighted = tape.scale(*sp, cfg.loss.beta);
            let term = tape.add(*kl, weighted);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        acc
    };
    let vae_value = vae.map(|v| tape.scalar(v)).unwrap_or(0.0);

    let total = match vae {
        Some(v) => {
            let gv = tape.scale(v, cfg.loss.gamma);
            tape.add(offset, gv)
        }
        None => offset,
    };
    let total = tape.add_const(total, cfg.loss.lambda_heatmap * ep.heatmap_value);

    Ok(EpisodeForward {
        total,
        offset,
        kl_sum,
        sparsity_sum,
        vae_value,
        heatmap_value: ep.heatmap_value,
        keypoints,
        adjacencies,
    })
}

fn uniform_weights_t(tape: &mut Tape, n: usize) -> Vec<Var> {
    (0..n)
        .map(|_| tape.input(Matrix::from_vec(1, 1, vec![1.0 / n as f64])))
        .collect()
}

fn softmax_weights_t(tape: &mut Tape, scores: &[Var]) -> Vec<Var> {
    let row = tape.concat_cols(scores);
    let sm = tape.softmax_rows(row);
    (0..scores.len()).map(|i| tape.slice(sm, 0, i, 1, 1)).collect()
}

fn normalize_row_t(tape: &mut Tape, row: Var, n: usize) -> Vec<Var> {
    let total = tape.sum_all(row);
    let one = tape.input(Matrix::from_vec(1, 1, vec![1.0]));
    let inv = tape.div(one, total);
    let normalized = tape.mul_scalar(row, inv);
    (0..n).map(|i| tape.slice(normalized, 0, i, 1, 1)).collect()
}

fn weighted_sum_t(
    tape: &mut Tape,
    mats: impl Iterator<Item = Var>,
    weights: &[Var],
) -> Var {
    let mut acc: Option<Var> = None;
    for (mat, &w) in mats.zip(weights) {
        let term = tape.mul_scalar(mat, w);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    acc.expect("weighted_sum over empty iterator")
}

/// Value-level inference for one episode: deterministic, no gradients read.
pub fn infer_episode(model: &Model, ep: &PreparedEpisode) -> Result<EpisodeForward> {
    let mut tape = Tape::new();
    let params = model.insert_params(&mut tape);
    // Inference consumes no randomness; the stream is a placeholder.
    let mut rng = RngStream::new(0, u64::MAX);
    forward_episode(&mut tape, model, &params, ep, Mode::Inference, &mut rng)
}

/// Final-layer keypoints from an inference pass, carrying the loss mask.
pub fn predict_keypoints(model: &Model, ep: &PreparedEpisode) -> Result<KeypointSet> {
    let fwd = infer_episode(model, ep)?;
    let coords = fwd.keypoints.last().expect("l_d >= 1").clone();
    Ok(KeypointSet::new(coords, ep.loss_mask.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_episode, SynthConfig};

    fn tiny_config() -> (ModelConfig, SynthConfig) {
        let synth = SynthConfig {
            m: 4,
            d: 8,
            grid_h: 8,
            grid_w: 8,
            ..SynthConfig::default()
        };
        let cfg = ModelConfig {
            m: 4,
            d: 8,
            d_z: 4,
            hidden: 16,
            l_d: 2,
            ..ModelConfig::default()
        };
        (cfg, synth)
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let (cfg, _) = tiny_config();
        let a = Model::init(cfg.clone(), &mut RngStream::new(3, 40)).unwrap();
        let b = Model::init(cfg, &mut RngStream::new(3, 40)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_registry_is_consistent() {
        let (cfg, _) = tiny_config();
        let model = Model::init(cfg, &mut RngStream::new(4, 41)).unwrap();
        let names = model.param_names();
        let params = model.params();
        assert_eq!(names.len(), params.len());
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        assert_eq!(vars.flat().len(), params.len());
        for (v, p) in vars.flat().iter().zip(&params) {
            assert_eq!(tape.value(*v), *p);
        }
    }

    #[test]
    fn inference_is_bit_identical_across_runs() {
        let (cfg, synth) = tiny_config();
        let model = Model::init(cfg, &mut RngStream::new(5, 42)).unwrap();
        let ep = generate_episode(&synth, &mut RngStream::new(6, 43)).unwrap();
        let prepared = prepare_episode(&ep, model.cfg.m).unwrap();
        let a = infer_episode(&model, &prepared).unwrap();
        let b = infer_episode(&model, &prepared).unwrap();
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            assert_eq!(ka, kb);
        }
        for (aa, ab) in a.adjacencies.iter().zip(&b.adjacencies) {
            assert_eq!(aa, ab);
        }
        assert_eq!(a.kl_sum.to_bits(), b.kl_sum.to_bits());
    }

    #[test]
    fn forward_emits_one_output_set_per_layer() {
        let (cfg, synth) = tiny_config();
        let l_d = cfg.l_d;
        let model = Model::init(cfg, &mut RngStream::new(7, 44)).unwrap();
        let ep = generate_episode(&synth, &mut RngStream::new(8, 45)).unwrap();
        let prepared = prepare_episode(&ep, model.cfg.m).unwrap();
        let fwd = infer_episode(&model, &prepared).unwrap();
        assert_eq!(fwd.keypoints.len(), l_d);
        assert_eq!(fwd.adjacencies.len(), l_d);
    }

    #[test]
    fn padded_categories_run_and_mask_padding() {
        let (cfg, mut synth) = tiny_config();
        synth.m = 3; // one fewer keypoint than the model capacity
        let model = Model::init(cfg, &mut RngStream::new(9, 46)).unwrap();
        let ep = generate_episode(&synth, &mut RngStream::new(10, 47)).unwrap();
        let prepared = prepare_episode(&ep, model.cfg.m).unwrap();
        assert_eq!(prepared.fs0.m(), 4);
        assert!(!prepared.loss_mask[3]);
        let fwd = infer_episode(&model, &prepared).unwrap();
        assert!(tape_total_is_finite(&fwd));
    }

    fn tape_total_is_finite(fwd: &EpisodeForward) -> bool {
        fwd.keypoints.iter().all(|k| k.is_finite())
    }

    #[test]
    fn frozen_mode_ignores_structure_vae() {
        let (mut cfg, synth) = tiny_config();
        cfg.graph_mode = GraphMode::RandomFrozen;
        let model = Model::init(cfg, &mut RngStream::new(11, 48)).unwrap();
        let frozen = model.frozen_adj.clone().unwrap();
        let ep = generate_episode(&synth, &mut RngStream::new(12, 49)).unwrap();
        let prepared = prepare_episode(&ep, model.cfg.m).unwrap();
        let fwd = infer_episode(&model, &prepared).unwrap();
        assert_eq!(fwd.kl_sum, 0.0);
        assert_eq!(fwd.sparsity_sum, 0.0);
        for a in &fwd.adjacencies {
            assert_eq!(a, &frozen);
        }
    }

    #[test]
    fn static_mode_uses_normalized_truth() {
        let (mut cfg, synth) = tiny_config();
        cfg.graph_mode = GraphMode::StaticGiven;
        let model = Model::init(cfg, &mut RngStream::new(13, 50)).unwrap();
        let ep = generate_episode(&synth, &mut RngStream::new(14, 51)).unwrap();
        let prepared = prepare_episode(&ep, model.cfg.m).unwrap();
        let fwd = infer_episode(&model, &prepared).unwrap();
        for a in &fwd.adjacencies {
            assert_eq!(a, &prepared.static_adj);
        }
    }
}
