//! Structure VAE over latent graph codes.
//!
//! Encoder: flatten the MxD support embedding, Linear -> ReLU -> Linear,
//! split into (mean, log-variance). Decoder: Linear -> Sigmoid -> reshape to
//! an MxM soft adjacency, which then passes through the fixed stage order
//! raw -> symmetric -> row-normalized. Log-variances are clamped to
//! [-30, 30] before exponentiation so sigma is always finite.

use crate::decoder::SupportEmbedding;
use crate::error::Error;
use crate::matrix::Matrix;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::Result;

/// Clamp range for log-variances.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 30.0;

/// Denominator guard for row normalization. Small enough that non-degenerate
/// row sums stay within 1e-9 of 1 after normalization; an all-zero row maps
/// to an all-zero row instead of dividing by zero.
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Default latent dimensionality.
pub const DEFAULT_D_Z: usize = 32;
/// Encoder hidden width.
pub const DEFAULT_HIDDEN: usize = 256;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Diagonal Gaussian posterior over a latent graph code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    mu: Matrix,
    logvar: Matrix,
}

impl LatentDistribution {
    /// Builds a posterior from 1xD_z mean and log-variance rows; log-variance
    /// is clamped on construction.
    pub fn new(mu: Matrix, logvar: Matrix) -> LatentDistribution {
        assert_eq!(mu.rows(), 1, "mu must be a row vector");
        assert_eq!(
            (logvar.rows(), logvar.cols()),
            (1, mu.cols()),
            "mu/logvar length mismatch"
        );
        LatentDistribution {
            mu,
            logvar: logvar.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &Matrix {
        &self.mu
    }

    pub fn logvar(&self) -> &Matrix {
        &self.logvar
    }

    /// Per-dimension standard deviations, sigma = exp(logvar / 2).
    pub fn sigma(&self) -> Matrix {
        self.logvar.map(|v| (0.5 * v).exp())
    }

    /// Sum of per-dimension standard deviations ("total variance" used by the
    /// confidence weighting).
    pub fn total_sigma(&self) -> f64 {
        self.sigma().sum()
    }
}

/// Processing stage of a soft adjacency matrix. The only legal order is
/// raw -> symmetric -> normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyStage {
    Raw,
    Symmetric,
    Normalized,
}

/// MxM soft adjacency tagged with its processing stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    stage: AdjacencyStage,
    values: Matrix,
}

impl AdjacencyMatrix {
    pub fn new(stage: AdjacencyStage, values: Matrix) -> AdjacencyMatrix {
        assert_eq!(values.rows(), values.cols(), "adjacency must be square");
        AdjacencyMatrix { stage, values }
    }

    pub fn stage(&self) -> AdjacencyStage {
        self.stage
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    fn expect_stage(&self, want: AdjacencyStage, op: &str) -> Result<()> {
        if self.stage != want {
            return Err(Error::usage(format!(
                "{op} expects a {want:?}-stage adjacency, got {:?}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Parameters of one structure-VAE instance: two encoder layers producing
/// the posterior, one decoder layer producing the M*M adjacency logits.
/// Weights are stored input-dim x output-dim so the forward pass is `x * W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsvaeParams {
    pub enc_w1: Matrix, // (M*D) x hidden
    pub enc_b1: Matrix, // 1 x hidden
    pub enc_w2: Matrix, // hidden x (2*D_z)
    pub enc_b2: Matrix, // 1 x (2*D_z)
    pub dec_w: Matrix,  // D_z x (M*M)
    pub dec_b: Matrix,  // 1 x (M*M)
}

impl IsvaeParams {
    pub fn zeros(m: usize, d: usize, hidden: usize, d_z: usize) -> IsvaeParams {
        IsvaeParams {
            enc_w1: Matrix::zeros(m * d, hidden),
            enc_b1: Matrix::zeros(1, hidden),
            enc_w2: Matrix::zeros(hidden, 2 * d_z),
            enc_b2: Matrix::zeros(1, 2 * d_z),
            dec_w: Matrix::zeros(d_z, m * m),
            dec_b: Matrix::zeros(1, m * m),
        }
    }

    pub fn d_z(&self) -> usize {
        self.enc_w2.cols() / 2
    }

    pub fn m(&self) -> usize {
        (self.dec_w.cols() as f64).sqrt() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.enc_w1.cols();
        let d_z = self.d_z();
        let mm = self.dec_w.cols();
        let m = self.m();
        let ok = self.enc_b1.cols() == hidden
            && self.enc_b1.rows() == 1
            && self.enc_w2.rows() == hidden
            && self.enc_w2.cols() == 2 * d_z
            && self.enc_b2.cols() == 2 * d_z
            && self.enc_b2.rows() == 1
            && self.dec_w.rows() == d_z
            && m * m == mm
            && self.dec_b.cols() == mm
            && self.dec_b.rows() == 1;
        if !ok {
            return Err(Error::config("inconsistent structure-VAE parameter shapes"));
        }
        Ok(())
    }
}

/// Tape handles for one [`IsvaeParams`] instance.
pub struct IsvaeVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_w2: Var,
    pub enc_b2: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl IsvaeParams {
    pub fn insert(&self, tape: &mut Tape) -> IsvaeVars {
        IsvaeVars {
            enc_w1: tape.input(self.enc_w1.clone()),
            enc_b1: tape.input(self.enc_b1.clone()),
            enc_w2: tape.input(self.enc_w2.clone()),
            enc_b2: tape.input(self.enc_b2.clone()),
            dec_w: tape.input(self.dec_w.clone()),
            dec_b: tape.input(self.dec_b.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape builders (single source of truth for the differentiable path)
// ---------------------------------------------------------------------------

/// Posterior head on the tape: returns (mu, clamped logvar), both 1xD_z.
pub fn encode_posterior_t(tape: &mut Tape, fs: Var, p: &IsvaeVars) -> (Var, Var) {
    let (rows, cols) = {
        let v = tape.value(fs);
        (v.rows(), v.cols())
    };
    let x = tape.reshape(fs, 1, rows * cols);
    let h_lin = tape.matmul(x, p.enc_w1);
    let h_aff = tape.add_row(h_lin, p.enc_b1);
    let h = tape.relu(h_aff);
    let o_lin = tape.matmul(h, p.enc_w2);
    let o = tape.add_row(o_lin, p.enc_b2);
    let d_z = tape.value(o).cols() / 2;
    let mu = tape.slice(o, 0, 0, 1, d_z);
    let lv_raw = tape.slice(o, 0, d_z, 1, d_z);
    let lv = tape.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
    (mu, lv)
}

/// Reparameterized sample z = mu + sigma .* eps with eps a constant leaf.
pub fn sample_latent_t(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps);
    tape.add(mu, noise)
}

/// Adjacency decoder on the tape: MxM raw-stage values in (0, 1).
pub fn decode_adjacency_t(tape: &mut Tape, z: Var, p: &IsvaeVars, m: usize) -> Var {
    let lin = tape.matmul(z, p.dec_w);
    let aff = tape.add_row(lin, p.dec_b);
    let sig = tape.sigmoid(aff);
    tape.reshape(sig, m, m)
}

pub fn symmetrize_t(tape: &mut Tape, a: Var) -> Var {
    let at = tape.transpose(a);
    let s = tape.add(a, at);
    tape.scale(s, 0.5)
}

pub fn row_normalize_t(tape: &mut Tape, a: Var, eps: f64) -> Var {
    let rs = tape.row_sums(a);
    let denom = tape.add_const(rs, eps);
    tape.div_col(a, denom)
}

/// KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - logvar).
pub fn kl_to_standard_normal_t(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let mu2 = tape.mul(mu, mu);
    let var = tape.exp(logvar);
    let sum = tape.add(mu2, var);
    let lv1 = tape.add_const(logvar, 1.0);
    let inner = tape.sub(sum, lv1);
    let total = tape.sum_all(inner);
    tape.scale(total, 0.5)
}

/// (1/M^2) * squared Frobenius norm.
pub fn sparsity_penalty_t(tape: &mut Tape, a: Var, m: usize) -> Var {
    let sq = tape.mul(a, a);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / (m * m) as f64)
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

/// Runs the posterior encoder on a support embedding.
pub fn encode_posterior(fs: &SupportEmbedding, p: &IsvaeParams) -> Result<LatentDistribution> {
    p.validate()?;
    let flat = fs.values().rows() * fs.values().cols();
    if flat != p.enc_w1.rows() {
        return Err(Error::config(format!(
            "encoder expects flattened input of length {}, support embedding is {}x{} = {}",
            p.enc_w1.rows(),
            fs.values().rows(),
            fs.values().cols(),
            flat
        )));
    }
    let mut tape = Tape::new();
    let fsv = tape.input(fs.values().clone());
    let pv = p.insert(&mut tape);
    let (mu, lv) = encode_posterior_t(&mut tape, fsv, &pv);
    Ok(LatentDistribution::new(
        tape.value(mu).clone(),
        tape.value(lv).clone(),
    ))
}

/// Draws z = mu + sigma .* eps with eps ~ N(0, I) from the stream.
pub fn sample_latent(dist: &LatentDistribution, rng: &mut RngStream) -> Matrix {
    let mut eps = vec![0.0; dist.dim()];
    rng.fill_normal(&mut eps);
    sample_latent_with_eps(dist, &Matrix::row_vec(eps))
}

/// Deterministic variant used by tests and the reference oracle.
pub fn sample_latent_with_eps(dist: &LatentDistribution, eps: &Matrix) -> Matrix {
    assert_eq!(eps.cols(), dist.dim(), "eps length mismatch");
    let sigma = dist.sigma();
    dist.mu().add(&sigma.hadamard(eps))
}

/// Inference-path latent: exactly the posterior mean.
pub fn deterministic_latent(dist: &LatentDistribution) -> Matrix {
    dist.mu().clone()
}

/// Decodes a latent code into a raw-stage soft adjacency.
pub fn decode_adjacency(z: &Matrix, p: &IsvaeParams, m: usize) -> Result<AdjacencyMatrix> {
    p.validate()?;
    if z.cols() != p.dec_w.rows() || z.rows() != 1 {
        return Err(Error::config(format!(
            "decoder expects a 1x{} latent code, got {}x{}",
            p.dec_w.rows(),
            z.rows(),
            z.cols()
        )));
    }
    if m * m != p.dec_w.cols() {
        return Err(Error::config(format!(
            "decoder emits {} logits, cannot reshape to {m}x{m}",
            p.dec_w.cols()
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.input(z.clone());
    let pv = p.insert(&mut tape);
    let a = decode_adjacency_t(&mut tape, zv, &pv, m);
    Ok(AdjacencyMatrix::new(AdjacencyStage::Raw, tape.value(a).clone()))
}

/// (A + A^T) / 2. Consumes a raw-stage adjacency.
pub fn symmetrize(a: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    a.expect_stage(AdjacencyStage::Raw, "symmetrize")?;
    let v = a.values();
    let sym = v.add(&v.transpose()).scale(0.5);
    Ok(AdjacencyMatrix::new(AdjacencyStage::Symmetric, sym))
}

/// Divides each row by (row sum + eps). Consumes a symmetric-stage adjacency.
pub fn row_normalize(a: &AdjacencyMatrix, eps: f64) -> Result<AdjacencyMatrix> {
    a.expect_stage(AdjacencyStage::Symmetric, "row_normalize")?;
    let v = a.values();
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for r in 0..v.rows() {
        let denom = v.row(r).iter().sum::<f64>() + eps;
        for c in 0..v.cols() {
            out.set(r, c, v.get(r, c) / denom);
        }
    }
    Ok(AdjacencyMatrix::new(AdjacencyStage::Normalized, out))
}

/// Closed-form KL divergence to the standard normal prior; always >= 0.
pub fn kl_to_standard_normal(dist: &LatentDistribution) -> f64 {
    let mut acc = 0.0;
    for i in 0..dist.dim() {
        let mu = dist.mu().get(0, i);
        let lv = dist.logvar().get(0, i);
        acc += mu * mu + lv.exp() - 1.0 - lv;
    }
    0.5 * acc
}

/// (1/M^2) * ||A||_F^2 on a normalized-stage adjacency. The beta weight and
/// the lambda factor are applied by the objective module.
pub fn sparsity_penalty(a: &AdjacencyMatrix, m: usize) -> Result<f64> {
    a.expect_stage(AdjacencyStage::Normalized, "sparsity_penalty")?;
    if a.m() != m {
        return Err(Error::usage(format!(
            "sparsity_penalty: adjacency is {}x{} but m = {m}",
            a.m(),
            a.m()
        )));
    }
    Ok(a.values().sum_sq() / (m * m) as f64)
}
