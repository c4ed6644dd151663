//! Central-finite-difference verification suite.
//!
//! Every differentiable operation is checked at 10 seeds against tolerance
//! 1e-5; composite full-pipeline checks (per-layer step and the total loss
//! over every parameter tensor) use 1e-4. All checks run on small instances
//! so the whole suite stays well under the runtime budget.

use crate::cgt::Mode;
use crate::config::TrainConfig;
use crate::episodes::generate_episode;
use crate::latent::{self, IsvaeParams, ROW_NORM_EPS};
use crate::matrix::Matrix;
use crate::model::{
    forward_episode, insert_params_with_override, prepare_episode, Model, PreparedEpisode,
};
use crate::rng::RngStream;
use crate::tape::{grad_check, Tape, Var};
use crate::Result;

pub const OP_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const N_SEEDS: u64 = 10;
const GC_STREAM: u64 = 7;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err < self.tol
    }
}

fn rand_mat(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.next_range(-scale, scale))
}

fn tiny_isvae(rng: &mut RngStream, m: usize, d: usize, hidden: usize, d_z: usize) -> IsvaeParams {
    IsvaeParams {
        enc_w1: rand_mat(rng, m * d, hidden, 0.5),
        enc_b1: rand_mat(rng, 1, hidden, 0.2),
        enc_w2: rand_mat(rng, hidden, 2 * d_z, 0.5),
        enc_b2: rand_mat(rng, 1, 2 * d_z, 0.2),
        dec_w: rand_mat(rng, d_z, m * m, 0.5),
        dec_b: rand_mat(rng, 1, m * m, 0.2),
    }
}

/// Tiny episode/model pair used by the composite checks.
fn tiny_setup(seed: u64) -> Result<(Model, PreparedEpisode)> {
    let mut cfg = TrainConfig::default();
    cfg.m = 4;
    cfg.d = 6;
    cfg.d_z = 3;
    cfg.hidden = 8;
    cfg.l_d = 2;
    cfg.n_s = 2;
    cfg.grid_h = 6;
    cfg.grid_w = 6;
    cfg.seed = seed;
    let model = Model::init(cfg.model_config(), &mut RngStream::new(seed, 40))?;
    let ep = generate_episode(&cfg.synth_config(), &mut RngStream::new(seed, 41))?;
    let prepared = prepare_episode(&ep, cfg.m)?;
    Ok((model, prepared))
}

fn max_over_seeds(
    base_seed: u64,
    mut f: impl FnMut(u64) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for s in 0..N_SEEDS {
        worst = worst.max(f(base_seed + s)?);
    }
    Ok(worst)
}

/// Runs the full suite. Deterministic in `base_seed`.
pub fn run_suite(base_seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut push = |name: &str, max_err: f64, tol: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_err,
            tol,
        });
    };

    let (m, d, hidden, d_z) = (4, 6, 8, 3);

    // Posterior encoder, wrt input features and each encoder tensor.
    let err = max_over_seeds(base_seed, |s| {
        let mut rng = RngStream::new(s, GC_STREAM);
        let p = tiny_isvae(&mut rng, m, d, hidden, d_z);
        let fs = rand_mat(&mut rng, m, d, 1.0);
        grad_check(
            |t, v| {
                let pv = p.insert(t);
                let (mu, lv) = latent::encode_posterior_t(t, v, &pv);
                latent::kl_to_standard_normal_t(t, mu, lv)
            },
            &fs,
            FD_STEP,
        )
    })?;
    push("encoder/input", err, OP_TOL);

    for field in ["enc_w1", "enc_b1", "enc_w2", "enc_b2"] {
        let err = max_over_seeds(base_seed, |s| {
            let mut rng = RngStream::new(s, GC_STREAM);
            let p = tiny_isvae(&mut rng, m, d, hidden, d_z);
            let fs = rand_mat(&mut rng, m, d, 1.0);
            let at = match field {
                "enc_w1" => p.enc_w1.clone(),
                "enc_b1" => p.enc_b1.clone(),
                "enc_w2" => p.enc_w2.clone(),
                _ => p.enc_b2.clone(),
            };
            grad_check(
                |t, v| {
                    let mut pv = p.insert(t);
                    match field {
                        "enc_w1" => pv.enc_w1 = v,
                        "enc_b1" => pv.enc_b1 = v,
                        "enc_w2" => pv.enc_w2 = v,
                        _ => pv.enc_b2 = v,
                    }
                    let fsv = t.input(fs.clone());
                    let (mu, lv) = latent::encode_posterior_t(t, fsv, &pv);
                    latent::kl_to_standard_normal_t(t, mu, lv)
                },
                &at,
                FD_STEP,
            )
        })?;
        push(&format!("encoder/{field}"), err, OP_TOL);
    }

    // Reparameterized sampling wrt mu and logvar (fixed eps), through the
    // decode/symmetrize/normalize stages.
    for wrt_mu in [true, false] {
        let err = max_over_seeds(base_seed, |s| {
            let mut rng = RngStream::new(s, GC_STREAM);
            let p = tiny_isvae(&mut rng, m, d, hidden, d_z);
            let mu = rand_mat(&mut rng, 1, d_z, 1.0);
            let lv = rand_mat(&mut rng, 1, d_z, 1.0);
            let eps = rand_mat(&mut rng, 1, d_z, 1.5);
            let at = if wrt_mu { mu.clone() } else { lv.clone() };
            grad_check(
                |t, v| {
                    let (mu_v, lv_v) = if wrt_mu {
                        (v, t.input(lv.clone()))
                    } else {
                        (t.input(mu.clone()), v)
                    };
                    let eps_v = t.input(eps.clone());
                    let pv = p.insert(t);
                    let z = latent::sample_latent_t(t, mu_v, lv_v, eps_v);
                    let raw = latent::decode_adjacency_t(t, z, &pv, m);
                    let sym = latent::symmetrize_t(t, raw);
                    let norm = latent::row_normalize_t(t, sym, ROW_NORM_EPS);
                    latent::sparsity_penalty_t(t, norm, m)
                },
                &at,
                FD_STEP,
            )
        })?;
        push(
            if wrt_mu { "sample/mu" } else { "sample/logvar" },
            err,
            OP_TOL,
        );
    }

    // Adjacency decoder wrt code and decoder tensors.
    for wrt in ["z", "dec_w", "dec_b"] {
        let err = max_over_seeds(base_seed, |s| {
            let mut rng = RngStream::new(s, GC_STREAM);
            let p = tiny_isvae(&mut rng, m, d, hidden, d_z);
            let z = rand_mat(&mut rng, 1, d_z, 1.0);
            let at = match wrt {
                "z" => z.clone(),
                "dec_w" => p.dec_w.clone(),
                _ => p.dec_b.clone(),
            };
            grad_check(
                |t, v| {
                    let mut pv = p.insert(t);
                    let zv = match wrt {
                        "z" => v,
                        "dec_w" => {
                            pv.dec_w = v;
                            t.input(z.clone())
                        }
                        _ => {
                            pv.dec_b = v;
                            t.input(z.clone())
                        }
                    };
                    let raw = latent::decode_adjacency_t(t, zv, &pv, m);
                    let sq = t.mul(raw, raw);
                    t.sum_all(sq)
                },
                &at,
                FD_STEP,
            )
        })?;
        push(&format!("decode/{wrt}"), err, OP_TOL);
    }

    // Stage operators on raw logits.
    let err = max_over_seeds(base_seed, |s| {
        let mut rng = RngStream::new(s, GC_STREAM);
        let logits = rand_mat(&mut rng, m, m, 2.0);
        grad_check(
            |t, v| {
                let raw = t.sigmoid(v);
                let sym = latent::symmetrize_t(t, raw);
                let norm = latent::row_normalize_t(t, sym, ROW_NORM_EPS);
                latent::sparsity_penalty_t(t, norm, m)
            },
            &logits,
            FD_STEP,
        )
    })?;
    push("stages/symmetrize_normalize_sparsity", err, OP_TOL);

    // KL wrt (mu | logvar) packed in one row.
    let err = max_over_seeds(base_seed, |s| {
        let mut rng = RngStream::new(s, GC_STREAM);
        let packed = rand_mat(&mut rng, 1, 2 * d_z, 1.5);
        grad_check(
            |t, v| {
                let mu = t.slice(v, 0, 0, 1, d_z);
                let lv = t.slice(v, 0, d_z, 1, d_z);
                latent::kl_to_standard_normal_t(t, mu, lv)
            },
            &packed,
            FD_STEP,
        )
    })?;
    push("kl/mu_logvar", err, OP_TOL);

    // Inverse-variance sample fusion wrt the stacked logvars.
    let err = max_over_seeds(base_seed, |s| {
        let mut rng = RngStream::new(s, GC_STREAM);
        let n = 3;
        let logvars = rand_mat(&mut rng, n, d_z, 1.0);
        let adjs: Vec<Matrix> = (0..n).map(|_| rand_mat(&mut rng, m, m, 0.5)).collect();
        grad_check(
            |t, v| {
                let one = t.input(Matrix::from_vec(1, 1, vec![1.0]));
                let ws: Vec<Var> = (0..n)
                    .map(|i| {
                        let lv = t.slice(v, i, 0, 1, d_z);
                        let half = t.scale(lv, 0.5);
                        let sigma = t.exp(half);
                        let tot = t.sum_all(sigma);
                        let denom = t.add_const(tot, 1e-6);
                        t.div(one, denom)
                    })
                    .collect();
                let row = t.concat_cols(&ws);
                let total = t.sum_all(row);
                let inv = t.div(one, total);
                let normalized = t.mul_scalar(row, inv);
                let mut acc: Option<Var> = None;
                for (i, adj) in adjs.iter().enumerate() {
                    let a = t.input(adj.clone());
                    let w = t.slice(normalized, 0, i, 1, 1);
                    let term = t.mul_scalar(a, w);
                    acc = Some(match acc {
                        None => term,
                        Some(p) => t.add(p, term),
                    });
                }
                let fused = acc.unwrap();
                let sq = t.mul(fused, fused);
                t.sum_all(sq)
            },
            &logvars,
            FD_STEP,
        )
    })?;
    push("fusion/confidence_weights", err, OP_TOL);

    // Query gating wrt the projection, through softmax cosines and layer
    // fusion.
    let err = max_over_seeds(base_seed, |s| {
        let mut rng = RngStream::new(s, GC_STREAM);
        let n_layers = 3;
        let fq = rand_mat(&mut rng, 9, d, 1.0);
        let mus: Vec<Matrix> = (0..n_layers).map(|_| rand_mat(&mut rng, 1, d_z, 1.0)).collect();
        let graphs: Vec<Matrix> = (0..n_layers).map(|_| rand_mat(&mut rng, m, m, 0.5)).collect();
        let proj = rand_mat(&mut rng, d, d_z, 1.0);
        grad_check(
            |t, v| {
                let fqv = t.input(fq.clone());
                let pooled = t.mean_rows(fqv);
                let q = t.matmul(pooled, v);
                let cosines: Vec<Var> = mus
                    .iter()
                    .map(|mu| {
                        let muv = t.input(mu.clone());
                        cosine_for_check(t, q, muv)
                    })
                    .collect();
                let row = t.concat_cols(&cosines);
                let sm = t.softmax_rows(row);
                let mut acc: Option<Var> = None;
                for (i, g) in graphs.iter().enumerate() {
                    let gv = t.input(g.clone());
                    let alpha = t.slice(sm, 0, i, 1, 1);
                    let term = t.mul_scalar(gv, alpha);
                    acc = Some(match acc {
                        None => term,
                        Some(p) => t.add(p, term),
                    });
                }
                let fused = acc.unwrap();
                let sq = t.mul(fused, fused);
                t.sum_all(sq)
            },
            &proj,
            FD_STEP,
        )
    })?;
    push("fusion/query_gating", err, OP_TOL);

    // GCN wrt features, weights and the adjacency.
    for wrt in ["features", "w_adj", "w_self", "adjacency"] {
        let err = max_over_seeds(base_seed, |s| {
            let mut rng = RngStream::new(s, GC_STREAM);
            let fs = rand_mat(&mut rng, m, d, 1.0);
            let adj = rand_mat(&mut rng, m, m, 0.5);
            let w_adj = rand_mat(&mut rng, d, d, 0.7);
            let w_self = rand_mat(&mut rng, d, d, 0.7);
            let mask = vec![true, true, false, true];
            let at = match wrt {
                "features" => fs.clone(),
                "w_adj" => w_adj.clone(),
                "w_self" => w_self.clone(),
                _ => adj.clone(),
            };
            grad_check(
                |t, v| {
                    let fsv = if wrt == "features" { v } else { t.input(fs.clone()) };
                    let adjv = if wrt == "adjacency" { v } else { t.input(adj.clone()) };
                    let wa = if wrt == "w_adj" { v } else { t.input(w_adj.clone()) };
                    let ws = if wrt == "w_self" { v } else { t.input(w_self.clone()) };
                    let out = crate::decoder::gcn_forward_t(t, fsv, adjv, wa, ws, &mask);
                    let sq = t.mul(out, out);
                    t.sum_all(sq)
                },
                &at,
                FD_STEP,
            )
        })?;
        push(&format!("gcn/{wrt}"), err, OP_TOL);
    }

    // Refinement wrt features, head tensors and input coordinates.
    for wrt in ["features", "mlp_w1", "mlp_w2", "coords"] {
        let err = max_over_seeds(base_seed, |s| {
            let mut rng = RngStream::new(s, GC_STREAM);
            let fs = rand_mat(&mut rng, m, d, 1.0);
            let w1 = rand_mat(&mut rng, d, d, 0.7);
            let b1 = rand_mat(&mut rng, 1, d, 0.3);
            let w2 = rand_mat(&mut rng, d, 2, 0.7);
            let b2 = rand_mat(&mut rng, 1, 2, 0.3);
            let coords = Matrix::from_fn(m, 2, |_, _| rng.next_range(0.2, 0.8));
            let at = match wrt {
                "features" => fs.clone(),
                "mlp_w1" => w1.clone(),
                "mlp_w2" => w2.clone(),
                _ => coords.clone(),
            };
            grad_check(
                |t, v| {
                    let fsv = if wrt == "features" { v } else { t.input(fs.clone()) };
                    let w1v = if wrt == "mlp_w1" { v } else { t.input(w1.clone()) };
                    let w2v = if wrt == "mlp_w2" { v } else { t.input(w2.clone()) };
                    let b1v = t.input(b1.clone());
                    let b2v = t.input(b2.clone());
                    let pv = if wrt == "coords" { v } else { t.input(coords.clone()) };
                    let out = crate::decoder::keypoint_refine_t(t, pv, fsv, &[w1v, b1v, w2v, b2v]);
                    let sq = t.mul(out, out);
                    t.sum_all(sq)
                },
                &at,
                FD_STEP,
            )
        })?;
        push(&format!("refine/{wrt}"), err, OP_TOL);
    }

    // Cross-layer structure path: second-layer fused graph wrt first-layer
    // encoder weights, through history gating.
    let err = max_over_seeds(base_seed, |s| {
        let (model, ep) = tiny_setup(s)?;
        let idx = 2; // isvae.0.enc_w2
        let at = model.params()[idx].clone();
        grad_check(
            |t, v| {
                let params = insert_params_with_override(&model, t, idx, v);
                let mut rng = RngStream::new(s, GC_STREAM + 1);
                forward_episode(t, &model, &params, &ep, Mode::Training, &mut rng)
                    .expect("forward")
                    .total
            },
            &at,
            FD_STEP,
        )
    })?;
    push("cgt/cross_layer_params", err, COMPOSITE_TOL);

    // Full composite loss wrt every parameter tensor.
    let err = max_over_seeds(base_seed, |s| {
        let (model, ep) = tiny_setup(s)?;
        let mut worst = 0.0_f64;
        for idx in 0..model.params().len() {
            let at = model.params()[idx].clone();
            let e = grad_check(
                |t, v| {
                    let params = insert_params_with_override(&model, t, idx, v);
                    let mut rng = RngStream::new(s, GC_STREAM + 2);
                    forward_episode(t, &model, &params, &ep, Mode::Training, &mut rng)
                        .expect("forward")
                        .total
                },
                &at,
                FD_STEP,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })?;
    push("loss/total_all_params", err, COMPOSITE_TOL);

    Ok(results)
}

fn cosine_for_check(t: &mut Tape, a: Var, b: Var) -> Var {
    let prod = t.mul(a, b);
    let dot = t.sum_all(prod);
    let a2 = t.mul(a, a);
    let a2s = t.sum_all(a2);
    let na = t.sqrt(a2s);
    let b2 = t.mul(b, b);
    let b2s = t.sum_all(b2);
    let nb = t.sqrt(b2s);
    let denom = t.mul(na, nb);
    t.div(dot, denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_seed() {
        let results = run_suite(1).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed(), "{} failed: {} >= {}", r.name, r.max_err, r.tol);
        }
    }
}
