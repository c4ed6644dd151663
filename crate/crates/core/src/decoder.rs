//! Graph-structured refinement: GCN message passing under the fused
//! adjacency and sigmoid-space keypoint updates, stacked over decoder layers.

use crate::cgt::{cgt_step, FusionConfig, GatingProjection, LayerHistory, Mode};
use crate::error::Error;
use crate::latent::{AdjacencyMatrix, AdjacencyStage, IsvaeParams};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use crate::tape::{sigmoid_f, Tape, Var};
use crate::Result;

/// Coordinates are pulled inside [COORD_EPS, 1 - COORD_EPS] before the
/// inverse sigmoid, which is undefined at 0 and 1.
pub const COORD_EPS: f64 = 1e-4;

/// Pre-sigmoid logits are clamped to this magnitude so refined coordinates
/// stay strictly inside (0, 1) in f64 for any parameter values.
pub const LOGIT_CLAMP: f64 = 16.0;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// MxD keypoint-conditioned support features plus a validity mask.
/// Masked-out rows are zero and stay zero through every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEmbedding {
    values: Matrix,
    mask: Vec<bool>,
}

impl SupportEmbedding {
    /// Builds an embedding, zeroing any masked-out rows.
    pub fn new(values: Matrix, mask: Vec<bool>) -> SupportEmbedding {
        assert_eq!(values.rows(), mask.len(), "mask length mismatch");
        let values = zero_masked_rows(values, &mask);
        SupportEmbedding { values, mask }
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

fn zero_masked_rows(mut values: Matrix, mask: &[bool]) -> Matrix {
    for (r, &keep) in mask.iter().enumerate() {
        if !keep {
            for c in 0..values.cols() {
                values.set(r, c, 0.0);
            }
        }
    }
    values
}

/// (h*w)xD query feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatureMap {
    values: Matrix,
    h: usize,
    w: usize,
}

impl QueryFeatureMap {
    pub fn new(values: Matrix, h: usize, w: usize) -> QueryFeatureMap {
        assert_eq!(values.rows(), h * w, "grid size does not match row count");
        QueryFeatureMap { values, h, w }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    /// Global average pool over grid positions: 1xD.
    pub fn pooled(&self) -> Matrix {
        let n = self.values.rows() as f64;
        Matrix::from_fn(1, self.values.cols(), |_, c| {
            (0..self.values.rows()).map(|r| self.values.get(r, c)).sum::<f64>() / n
        })
    }
}

/// Mx2 normalized keypoint coordinates plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    coords: Matrix,
    mask: Vec<bool>,
}

impl KeypointSet {
    pub fn new(coords: Matrix, mask: Vec<bool>) -> KeypointSet {
        assert_eq!(coords.cols(), 2, "keypoints are Mx2");
        assert_eq!(coords.rows(), mask.len(), "mask length mismatch");
        debug_assert!(
            mask.iter().enumerate().all(|(r, &v)| {
                !v || ((0.0..=1.0).contains(&coords.get(r, 0)) && (0.0..=1.0).contains(&coords.get(r, 1)))
            }),
            "unmasked coordinates outside the unit square"
        );
        KeypointSet { coords, mask }
    }

    pub fn m(&self) -> usize {
        self.coords.rows()
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn point(&self, k: usize) -> (f64, f64) {
        (self.coords.get(k, 0), self.coords.get(k, 1))
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> KeypointSet {
        assert_eq!(mask.len(), self.m());
        KeypointSet {
            coords: self.coords.clone(),
            mask,
        }
    }
}

/// Two-layer refinement head: D -> D (ReLU) -> 2 logit offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineMlp {
    pub w1: Matrix, // D x D
    pub b1: Matrix, // 1 x D
    pub w2: Matrix, // D x 2
    pub b2: Matrix, // 1 x 2
}

impl RefineMlp {
    pub fn zeros(d: usize) -> RefineMlp {
        RefineMlp {
            w1: Matrix::zeros(d, d),
            b1: Matrix::zeros(1, d),
            w2: Matrix::zeros(d, 2),
            b2: Matrix::zeros(1, 2),
        }
    }
}

/// Per-layer decoder parameters: the two GCN maps plus the refinement head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams {
    pub w_adj: Matrix,  // D x D
    pub w_self: Matrix, // D x D
    pub mlp: RefineMlp,
}

impl DecoderLayerParams {
    pub fn zeros(d: usize) -> DecoderLayerParams {
        DecoderLayerParams {
            w_adj: Matrix::zeros(d, d),
            w_self: Matrix::zeros(d, d),
            mlp: RefineMlp::zeros(d),
        }
    }
}

pub struct DecoderLayerVars {
    pub w_adj: Var,
    pub w_self: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl DecoderLayerParams {
    pub fn insert(&self, tape: &mut Tape) -> DecoderLayerVars {
        DecoderLayerVars {
            w_adj: tape.input(self.w_adj.clone()),
            w_self: tape.input(self.w_self.clone()),
            mlp_w1: tape.input(self.mlp.w1.clone()),
            mlp_b1: tape.input(self.mlp.b1.clone()),
            mlp_w2: tape.input(self.mlp.w2.clone()),
            mlp_b2: tape.input(self.mlp.b2.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// F' = ReLU((A*F)*W_adj + F*W_self), with masked rows re-zeroed.
pub fn gcn_forward_t(
    tape: &mut Tape,
    fs: Var,
    adj: Var,
    w_adj: Var,
    w_self: Var,
    mask: &[bool],
) -> Var {
    let msg = tape.matmul(adj, fs);
    let agg = tape.matmul(msg, w_adj);
    let own = tape.matmul(fs, w_self);
    let pre = tape.add(agg, own);
    let act = tape.relu(pre);
    tape.zero_rows(act, mask)
}

/// P' = sigmoid(clamp(logit(clamp(P)) + MLP(F))).
pub fn keypoint_refine_t(tape: &mut Tape, p: Var, fs: Var, mlp: &[Var; 4]) -> Var {
    let [w1, b1, w2, b2] = *mlp;
    let h_lin = tape.matmul(fs, w1);
    let h_aff = tape.add_row(h_lin, b1);
    let h = tape.relu(h_aff);
    let o_lin = tape.matmul(h, w2);
    let offsets = tape.add_row(o_lin, b2);
    let p_in = tape.clamp(p, COORD_EPS, 1.0 - COORD_EPS);
    let logits = tape.logit(p_in);
    let moved = tape.add(logits, offsets);
    let bounded = tape.clamp(moved, -LOGIT_CLAMP, LOGIT_CLAMP);
    tape.sigmoid(bounded)
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

/// One GCN layer on plain values.
pub fn gcn_forward(
    fs: &SupportEmbedding,
    a: &AdjacencyMatrix,
    w_adj: &Matrix,
    w_self: &Matrix,
) -> Result<SupportEmbedding> {
    if a.stage() != AdjacencyStage::Normalized {
        return Err(Error::usage(format!(
            "gcn_forward expects a normalized-stage adjacency, got {:?}",
            a.stage()
        )));
    }
    if a.m() != fs.m() {
        return Err(Error::config(format!(
            "gcn_forward: adjacency is {}x{} but features have {} rows",
            a.m(),
            a.m(),
            fs.m()
        )));
    }
    let d = fs.d();
    if w_adj.rows() != d || w_self.rows() != d || w_adj.cols() != w_self.cols() {
        return Err(Error::config(format!(
            "gcn_forward: weight shapes {}x{} / {}x{} incompatible with D = {d}",
            w_adj.rows(),
            w_adj.cols(),
            w_self.rows(),
            w_self.cols()
        )));
    }
    let msg = a.values().matmul(fs.values())?;
    let pre = msg.matmul(w_adj)?.add(&fs.values().matmul(w_self)?);
    let act = pre.map(|x| x.max(0.0));
    Ok(SupportEmbedding::new(act, fs.mask().to_vec()))
}

/// Sigmoid-space coordinate update; a zero MLP leaves coordinates in place.
pub fn keypoint_refine(p: &KeypointSet, fs: &SupportEmbedding, mlp: &RefineMlp) -> Result<KeypointSet> {
    if p.m() != fs.m() {
        return Err(Error::config(format!(
            "keypoint_refine: {} keypoints vs {} feature rows",
            p.m(),
            fs.m()
        )));
    }
    let h = fs
        .values()
        .matmul(&mlp.w1)?
        .zip_map(&broadcast_row(&mlp.b1, fs.m()), |a, b| (a + b).max(0.0));
    let offsets = h.matmul(&mlp.w2)?.add(&broadcast_row(&mlp.b2, fs.m()));
    let coords = Matrix::from_fn(p.m(), 2, |r, c| {
        let x = p.coords().get(r, c).clamp(COORD_EPS, 1.0 - COORD_EPS);
        let logit = (x / (1.0 - x)).ln() + offsets.get(r, c);
        sigmoid_f(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    });
    Ok(KeypointSet::new(coords, p.mask().to_vec()))
}

fn broadcast_row(row: &Matrix, rows: usize) -> Matrix {
    Matrix::from_fn(rows, row.cols(), |_, c| row.get(0, c))
}

/// Everything the stacked decoder emits, layer by layer.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Refined keypoints after each layer; the last entry is the prediction.
    pub keypoints: Vec<KeypointSet>,
    /// Final fused adjacency used by each layer's GCN.
    pub adjacencies: Vec<AdjacencyMatrix>,
    pub kl: Vec<f64>,
    pub sparsity: Vec<f64>,
}

/// Runs the full per-layer pipeline: structure inference and fusion, GCN
/// message passing, then keypoint refinement, repeated for every layer.
#[allow(clippy::too_many_arguments)]
pub fn run_decoder(
    fs0: &SupportEmbedding,
    fq: &QueryFeatureMap,
    p0: &KeypointSet,
    layers: &[DecoderLayerParams],
    isvae: &[IsvaeParams],
    gating: &GatingProjection,
    cfg: &FusionConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<DecoderOutput> {
    if layers.is_empty() || layers.len() != isvae.len() {
        return Err(Error::config(format!(
            "run_decoder: {} decoder layers vs {} structure-VAE layers",
            layers.len(),
            isvae.len()
        )));
    }
    let mut out = DecoderOutput {
        keypoints: Vec::with_capacity(layers.len()),
        adjacencies: Vec::with_capacity(layers.len()),
        kl: Vec::with_capacity(layers.len()),
        sparsity: Vec::with_capacity(layers.len()),
    };
    let mut fs = fs0.clone();
    let mut p = p0.clone();
    let mut history = LayerHistory::new();
    for (layer, vae) in layers.iter().zip(isvae) {
        let step = cgt_step(&fs, fq, history, vae, gating, cfg, mode, rng)?;
        history = step.history;
        fs = gcn_forward(&fs, &step.a_final, &layer.w_adj, &layer.w_self)?;
        p = keypoint_refine(&p, &fs, &layer.mlp)?;
        out.keypoints.push(p.clone());
        out.adjacencies.push(step.a_final);
        out.kl.push(step.kl);
        out.sparsity.push(step.sparsity);
    }
    Ok(out)
}
