//! Compositional graph transfer: fuse the per-layer adjacency samples by
//! inverse-variance confidence, then gate the fused graphs across decoder
//! layers by query similarity.
//!
//! Both fusion levels are independently switchable between the Bayesian
//! (inverse total standard deviation) and query-weighting (softmax over
//! cosine similarities) strategies; the default pairing is Bayesian over
//! samples and query weighting over layers.

use crate::decoder::{QueryFeatureMap, SupportEmbedding};
use crate::error::Error;
use crate::latent::{
    self, AdjacencyMatrix, AdjacencyStage, IsvaeParams, LatentDistribution, ROW_NORM_EPS,
};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use crate::Result;

/// Stability constant in the confidence denominators.
pub const CONFIDENCE_EPS: f64 = 1e-6;

/// Below this norm a pooled query or posterior mean counts as degenerate and
/// gating falls back to uniform weights.
const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStrategy {
    Bayesian,
    QueryWeighting,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<FusionStrategy> {
        match s {
            "bayesian" => Ok(FusionStrategy::Bayesian),
            "query" | "query-weighting" => Ok(FusionStrategy::QueryWeighting),
            other => Err(Error::usage(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionStrategy::Bayesian => write!(f, "bayesian"),
            FusionStrategy::QueryWeighting => write!(f, "query"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub n_samples: usize,
    pub eps: f64,
    pub sample_strategy: FusionStrategy,
    pub layer_strategy: FusionStrategy,
}

impl Default for FusionConfig {
    fn default() -> FusionConfig {
        FusionConfig {
            n_samples: 3,
            eps: CONFIDENCE_EPS,
            sample_strategy: FusionStrategy::Bayesian,
            layer_strategy: FusionStrategy::QueryWeighting,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("fusion eps must be positive"));
        }
        Ok(())
    }
}

/// Learned D -> D_z map that places pooled query features in the latent
/// space so cosine gating against posterior means is well-defined.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingProjection {
    pub proj_w: Matrix, // D x D_z
}

impl GatingProjection {
    pub fn zeros(d: usize, d_z: usize) -> GatingProjection {
        GatingProjection {
            proj_w: Matrix::zeros(d, d_z),
        }
    }

    pub fn project(&self, pooled: &Matrix) -> Result<Matrix> {
        pooled.matmul(&self.proj_w)
    }
}

/// Training or inference execution. Inference collapses sampling to the
/// posterior mean with a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

// ---------------------------------------------------------------------------
// Fusion operations
// ---------------------------------------------------------------------------

/// Inverse-total-variance confidence weights, normalized to sum to 1.
pub fn confidence_weights(dists: &[LatentDistribution], eps: f64) -> Result<Vec<f64>> {
    if dists.is_empty() {
        return Err(Error::usage("confidence_weights: empty distribution list"));
    }
    let d_z = dists[0].dim();
    if dists.iter().any(|d| d.dim() != d_z) {
        return Err(Error::usage("confidence_weights: mixed latent dimensions"));
    }
    let raw: Vec<f64> = dists.iter().map(|d| 1.0 / (d.total_sigma() + eps)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Convex combination of normalized adjacencies.
pub fn fuse_samples(adjs: &[AdjacencyMatrix], weights: &[f64]) -> Result<AdjacencyMatrix> {
    if adjs.is_empty() || adjs.len() != weights.len() {
        return Err(Error::usage(format!(
            "fuse_samples: {} adjacencies vs {} weights",
            adjs.len(),
            weights.len()
        )));
    }
    let m = adjs[0].m();
    for a in adjs {
        if a.stage() != AdjacencyStage::Normalized {
            return Err(Error::usage("fuse_samples expects normalized-stage adjacencies"));
        }
        if a.m() != m {
            return Err(Error::usage("fuse_samples: mixed adjacency sizes"));
        }
    }
    let mut out = Matrix::zeros(m, m);
    for (a, &w) in adjs.iter().zip(weights) {
        out = out.add(&a.values().scale(w));
    }
    Ok(AdjacencyMatrix::new(AdjacencyStage::Normalized, out))
}

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .sum();
    let na = a.sum_sq().sqrt();
    let nb = b.sum_sq().sqrt();
    dot / (na * nb)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = xs.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax-normalized cosine similarities between the projected pooled query
/// and each layer's posterior mean. Degenerate inputs (all-zero pooled query
/// or an all-zero mean) fall back to uniform weights.
pub fn gating_scores(
    fq: &QueryFeatureMap,
    mus: &[Matrix],
    proj: &GatingProjection,
) -> Result<Vec<f64>> {
    if mus.is_empty() {
        return Err(Error::usage("gating_scores: no layer means"));
    }
    let n = mus.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let pooled = fq.pooled();
    let q = proj.project(&pooled)?;
    let qn = q.sum_sq().sqrt();
    if qn < DEGENERATE_NORM || mus.iter().any(|m| m.sum_sq().sqrt() < DEGENERATE_NORM) {
        log::warn!("gating_scores: degenerate query or mean, using uniform gating");
        return Ok(vec![1.0 / n as f64; n]);
    }
    let cosines: Vec<f64> = mus.iter().map(|mu| cosine(&q, mu)).collect();
    Ok(softmax(&cosines))
}

/// Convex combination of per-layer fused graphs. With a single layer this is
/// the identity.
pub fn fuse_layers(fused: &[AdjacencyMatrix], alphas: &[f64]) -> Result<AdjacencyMatrix> {
    if fused.len() != alphas.len() {
        return Err(Error::usage(format!(
            "fuse_layers: {} graphs vs {} weights",
            fused.len(),
            alphas.len()
        )));
    }
    fuse_samples(fused, alphas)
}

/// Layer-level Bayesian weights from each layer's total posterior sigma.
pub fn layer_confidence_weights(total_sigmas: &[f64], eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = total_sigmas.iter().map(|&s| 1.0 / (s + eps)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Query-weighting at the sample level: softmax over cosine similarities
/// between the projected pooled query and each sampled latent code.
pub fn sample_gating_weights(
    fq: &QueryFeatureMap,
    zs: &[Matrix],
    proj: &GatingProjection,
) -> Result<Vec<f64>> {
    if zs.is_empty() {
        return Err(Error::usage("sample_gating_weights: no samples"));
    }
    let n = zs.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let q = proj.project(&fq.pooled())?;
    let qn = q.sum_sq().sqrt();
    if qn < DEGENERATE_NORM || zs.iter().any(|z| z.sum_sq().sqrt() < DEGENERATE_NORM) {
        log::warn!("sample_gating_weights: degenerate query or sample, using uniform weights");
        return Ok(vec![1.0 / n as f64; n]);
    }
    let cosines: Vec<f64> = zs.iter().map(|z| cosine(&q, z)).collect();
    Ok(softmax(&cosines))
}

// ---------------------------------------------------------------------------
// Per-layer step
// ---------------------------------------------------------------------------

/// Fused graphs and posterior statistics of the layers processed so far.
/// Passed in and returned by value; never shared mutable state.
#[derive(Clone, Debug, Default)]
pub struct LayerHistory {
    pub fused: Vec<AdjacencyMatrix>,
    pub mus: Vec<Matrix>,
    pub total_sigmas: Vec<f64>,
}

impl LayerHistory {
    pub fn new() -> LayerHistory {
        LayerHistory::default()
    }

    pub fn layers(&self) -> usize {
        self.fused.len()
    }
}

#[derive(Clone, Debug)]
pub struct CgtStepOutput {
    pub a_final: AdjacencyMatrix,
    pub history: LayerHistory,
    pub kl: f64,
    pub sparsity: f64,
}

/// One layer of structure inference and fusion:
/// encode -> sample N_s codes -> decode/symmetrize/normalize each ->
/// confidence fusion -> gating over history plus the current layer ->
/// layer fusion. Inference mode substitutes the posterior mean and collapses
/// N_s to 1.
///
/// Draw order (training): for each sample n, D_z standard normals.
#[allow(clippy::too_many_arguments)]
pub fn cgt_step(
    fs: &SupportEmbedding,
    fq: &QueryFeatureMap,
    history: LayerHistory,
    isvae: &IsvaeParams,
    gating: &GatingProjection,
    cfg: &FusionConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<CgtStepOutput> {
    cfg.validate()?;
    let m = fs.m();
    let dist = latent::encode_posterior(fs, isvae)?;

    let n = match mode {
        Mode::Training => cfg.n_samples,
        Mode::Inference => 1,
    };
    let zs: Vec<Matrix> = (0..n)
        .map(|_| match mode {
            Mode::Training => latent::sample_latent(&dist, rng),
            Mode::Inference => latent::deterministic_latent(&dist),
        })
        .collect();

    let mut adjs = Vec::with_capacity(n);
    for z in &zs {
        let raw = latent::decode_adjacency(z, isvae, m)?;
        let sym = latent::symmetrize(&raw)?;
        adjs.push(latent::row_normalize(&sym, ROW_NORM_EPS)?);
    }

    let weights = if n == 1 {
        vec![1.0]
    } else {
        match cfg.sample_strategy {
            FusionStrategy::Bayesian => {
                confidence_weights(&vec![dist.clone(); n], cfg.eps)?
            }
            FusionStrategy::QueryWeighting => sample_gating_weights(fq, &zs, gating)?,
        }
    };
    let a_fused = fuse_samples(&adjs, &weights)?;

    let mut history = history;
    history.fused.push(a_fused);
    history.mus.push(dist.mu().clone());
    history.total_sigmas.push(dist.total_sigma());

    let alphas = match cfg.layer_strategy {
        FusionStrategy::QueryWeighting => gating_scores(fq, &history.mus, gating)?,
        FusionStrategy::Bayesian => layer_confidence_weights(&history.total_sigmas, cfg.eps),
    };
    let a_final = fuse_layers(&history.fused, &alphas)?;

    let kl = latent::kl_to_standard_normal(&dist);
    let sparsity = latent::sparsity_penalty(&a_final, m)?;

    Ok(CgtStepOutput {
        a_final,
        history,
        kl,
        sparsity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentDistribution;

    fn dist(mu: Vec<f64>, logvar: Vec<f64>) -> LatentDistribution {
        LatentDistribution::new(Matrix::row_vec(mu), Matrix::row_vec(logvar))
    }

    fn normalized(values: Matrix) -> AdjacencyMatrix {
        AdjacencyMatrix::new(AdjacencyStage::Normalized, values)
    }

    #[test]
    fn equal_sigmas_give_uniform_weights() {
        let d = dist(vec![0.0, 1.0], vec![0.3, -0.4]);
        let w = confidence_weights(&[d.clone(), d.clone(), d], 1e-6).unwrap();
        for &wi in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_sums_one_and_three_split_three_to_one() {
        // total sigma 1 -> weight 1, total sigma 3 -> weight 1/3; normalized 0.75 / 0.25.
        let a = dist(vec![0.0], vec![0.0]); // sigma = 1
        let lv = (3.0_f64).ln() * 2.0; // sigma = 3
        let b = dist(vec![0.0], vec![lv]);
        let w = confidence_weights(&[a, b], 1e-15).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-9, "w0 {}", w[0]);
        assert!((w[1] - 0.25).abs() < 1e-9, "w1 {}", w[1]);
    }

    #[test]
    fn weights_sum_to_one_over_random_trials() {
        let mut rng = RngStream::new(71, 14);
        for _ in 0..1000 {
            let k = 1 + rng.next_below(6);
            let dists: Vec<LatentDistribution> = (0..k)
                .map(|_| {
                    dist(
                        (0..4).map(|_| rng.next_range(-2.0, 2.0)).collect(),
                        (0..4).map(|_| rng.next_range(-3.0, 3.0)).collect(),
                    )
                })
                .collect();
            let w = confidence_weights(&dists, CONFIDENCE_EPS).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn weights_are_scale_monotone() {
        let base = dist(vec![0.0, 0.0], vec![0.0, 0.0]);
        let wider = dist(vec![0.0, 0.0], vec![1.0, 1.0]);
        let widest = dist(vec![0.0, 0.0], vec![2.0, 2.0]);
        let w1 = confidence_weights(&[base.clone(), wider], CONFIDENCE_EPS).unwrap();
        let w2 = confidence_weights(&[base, widest], CONFIDENCE_EPS).unwrap();
        assert!(w2[1] < w1[1]);
    }

    #[test]
    fn empty_distribution_list_is_usage_error() {
        assert!(matches!(
            confidence_weights(&[], 1e-6),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn fuse_identical_inputs_is_fixed_point() {
        let a = normalized(Matrix::from_vec(2, 2, vec![0.25, 0.75, 0.5, 0.5]));
        let out = fuse_samples(&[a.clone(), a.clone(), a.clone()], &[0.2, 0.5, 0.3]).unwrap();
        assert!(out.values().max_abs_diff(a.values()) < 1e-15);
    }

    #[test]
    fn fuse_degenerate_weights_select_first() {
        let a = normalized(Matrix::from_vec(2, 2, vec![0.25, 0.75, 0.5, 0.5]));
        let b = normalized(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let out = fuse_samples(&[a.clone(), b], &[1.0, 0.0]).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn fuse_matches_naive_loop_oracle_and_stays_in_hull() {
        let mut rng = RngStream::new(81, 15);
        let m = 4;
        let adjs: Vec<AdjacencyMatrix> = (0..3)
            .map(|_| normalized(Matrix::from_fn(m, m, |_, _| rng.next_f64())))
            .collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.next_f64() + 0.1).collect();
        let z: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
        let out = fuse_samples(&adjs, &weights).unwrap();

        for r in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (a, &w) in adjs.iter().zip(&weights) {
                    let v = a.values().get(r, c);
                    acc += w * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let got = out.values().get(r, c);
                assert!((got - acc).abs() < 1e-12);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fuse_length_mismatch_is_usage_error() {
        let a = normalized(Matrix::identity(2));
        assert!(matches!(
            fuse_samples(&[a], &[0.5, 0.5]),
            Err(Error::Usage(_))
        ));
    }

    fn query(values: Matrix, h: usize, w: usize) -> QueryFeatureMap {
        QueryFeatureMap::new(values, h, w)
    }

    #[test]
    fn gating_single_layer_is_one() {
        let fq = query(Matrix::from_fn(4, 3, |r, c| (r + c) as f64), 2, 2);
        let proj = GatingProjection {
            proj_w: Matrix::identity(3),
        };
        let alphas = gating_scores(&fq, &[Matrix::row_vec(vec![1.0, 0.0, 0.0])], &proj).unwrap();
        assert_eq!(alphas, vec![1.0]);
    }

    #[test]
    fn gating_identical_means_is_uniform() {
        let fq = query(Matrix::from_fn(4, 3, |r, c| 0.5 + (r * c) as f64), 2, 2);
        let proj = GatingProjection {
            proj_w: Matrix::identity(3),
        };
        let mu = Matrix::row_vec(vec![0.4, -0.2, 0.9]);
        let alphas = gating_scores(&fq, &[mu.clone(), mu.clone(), mu], &proj).unwrap();
        for &a in &alphas {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_matches_hand_softmax_cosine_oracle() {
        let mut rng = RngStream::new(91, 16);
        let d = 4;
        let d_z = 3;
        let fq = query(Matrix::from_fn(6, d, |_, _| rng.next_range(-1.0, 1.0)), 2, 3);
        let proj = GatingProjection {
            proj_w: Matrix::from_fn(d, d_z, |_, _| rng.next_range(-1.0, 1.0)),
        };
        let mus: Vec<Matrix> = (0..2)
            .map(|_| Matrix::from_fn(1, d_z, |_, _| rng.next_range(-1.0, 1.0)))
            .collect();
        let alphas = gating_scores(&fq, &mus, &proj).unwrap();

        // Hand oracle.
        let pooled: Vec<f64> = (0..d)
            .map(|c| (0..6).map(|r| fq.values().get(r, c)).sum::<f64>() / 6.0)
            .collect();
        let q: Vec<f64> = (0..d_z)
            .map(|j| (0..d).map(|i| pooled[i] * proj.proj_w.get(i, j)).sum())
            .collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: Vec<f64> = mus
            .iter()
            .map(|mu| {
                let dot: f64 = (0..d_z).map(|j| q[j] * mu.get(0, j)).sum();
                let mn = mu.sum_sq().sqrt();
                dot / (qn * mn)
            })
            .collect();
        let e: Vec<f64> = cos.iter().map(|c| c.exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..2 {
            assert!((alphas[i] - e[i] / z).abs() < 1e-12);
        }
        let sum: f64 = alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gating_zero_query_falls_back_to_uniform() {
        let fq = query(Matrix::zeros(4, 3), 2, 2);
        let proj = GatingProjection {
            proj_w: Matrix::identity(3),
        };
        let mus = vec![
            Matrix::row_vec(vec![1.0, 0.0, 0.0]),
            Matrix::row_vec(vec![0.0, 1.0, 0.0]),
        ];
        let alphas = gating_scores(&fq, &mus, &proj).unwrap();
        assert_eq!(alphas, vec![0.5, 0.5]);
    }

    #[test]
    fn gating_is_permutation_equivariant() {
        let mut rng = RngStream::new(101, 17);
        let fq = query(Matrix::from_fn(4, 3, |_, _| rng.next_range(-1.0, 1.0)), 2, 2);
        let proj = GatingProjection {
            proj_w: Matrix::from_fn(3, 2, |_, _| rng.next_range(-1.0, 1.0)),
        };
        let mus: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_fn(1, 2, |_, _| rng.next_range(-1.0, 1.0)))
            .collect();
        let a = gating_scores(&fq, &mus, &proj).unwrap();
        let permuted = vec![mus[2].clone(), mus[0].clone(), mus[1].clone()];
        let b = gating_scores(&fq, &permuted, &proj).unwrap();
        assert!((a[2] - b[0]).abs() < 1e-15);
        assert!((a[0] - b[1]).abs() < 1e-15);
        assert!((a[1] - b[2]).abs() < 1e-15);
    }

    #[test]
    fn fuse_layers_base_case_is_identity() {
        let a = normalized(Matrix::from_vec(2, 2, vec![0.1, 0.9, 0.4, 0.6]));
        let out = fuse_layers(&[a.clone()], &[1.0]).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn fuse_layers_matches_accumulation_oracle() {
        let mut rng = RngStream::new(111, 18);
        let graphs: Vec<AdjacencyMatrix> = (0..3)
            .map(|_| normalized(Matrix::from_fn(3, 3, |_, _| rng.next_f64())))
            .collect();
        let alphas = vec![0.2, 0.3, 0.5];
        let out = fuse_layers(&graphs, &alphas).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect: f64 = graphs
                    .iter()
                    .zip(&alphas)
                    .map(|(g, &a)| a * g.values().get(r, c))
                    .sum();
                assert!((out.values().get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cgt_step_degenerate_pipeline_matches_single_sample() {
        // N_s = 1, L = 1: the final graph is exactly the one normalized sample.
        let m = 3;
        let d = 4;
        let mut prng = RngStream::new(121, 19);
        let isvae = IsvaeParams {
            enc_w1: Matrix::from_fn(m * d, 8, |_, _| prng.next_range(-0.4, 0.4)),
            enc_b1: Matrix::from_fn(1, 8, |_, _| prng.next_range(-0.4, 0.4)),
            enc_w2: Matrix::from_fn(8, 6, |_, _| prng.next_range(-0.4, 0.4)),
            enc_b2: Matrix::from_fn(1, 6, |_, _| prng.next_range(-0.4, 0.4)),
            dec_w: Matrix::from_fn(3, m * m, |_, _| prng.next_range(-0.4, 0.4)),
            dec_b: Matrix::from_fn(1, m * m, |_, _| prng.next_range(-0.4, 0.4)),
        };
        let fs = SupportEmbedding::new(
            Matrix::from_fn(m, d, |_, _| prng.next_range(-1.0, 1.0)),
            vec![true; m],
        );
        let fq = query(Matrix::from_fn(4, d, |_, _| prng.next_range(-1.0, 1.0)), 2, 2);
        let gating = GatingProjection {
            proj_w: Matrix::from_fn(d, 3, |_, _| prng.next_range(-1.0, 1.0)),
        };
        let cfg = FusionConfig {
            n_samples: 1,
            ..FusionConfig::default()
        };

        let mut rng = RngStream::new(5, 20);
        let mut rng_clone = rng.clone();
        let out = cgt_step(
            &fs,
            &fq,
            LayerHistory::new(),
            &isvae,
            &gating,
            &cfg,
            Mode::Training,
            &mut rng,
        )
        .unwrap();

        let dist = latent::encode_posterior(&fs, &isvae).unwrap();
        let z = latent::sample_latent(&dist, &mut rng_clone);
        let raw = latent::decode_adjacency(&z, &isvae, m).unwrap();
        let norm = latent::row_normalize(&latent::symmetrize(&raw).unwrap(), ROW_NORM_EPS).unwrap();
        assert!(out.a_final.values().max_abs_diff(norm.values()) < 1e-15);
        assert_eq!(out.history.layers(), 1);

        // Inference mode is deterministic: two calls agree bit-for-bit.
        let inf1 = cgt_step(
            &fs,
            &fq,
            LayerHistory::new(),
            &isvae,
            &gating,
            &cfg,
            Mode::Inference,
            &mut rng,
        )
        .unwrap();
        let inf2 = cgt_step(
            &fs,
            &fq,
            LayerHistory::new(),
            &isvae,
            &gating,
            &cfg,
            Mode::Inference,
            &mut rng,
        )
        .unwrap();
        assert_eq!(inf1.a_final.values(), inf2.a_final.values());
    }
}
