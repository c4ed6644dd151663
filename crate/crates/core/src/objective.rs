//! Training losses: heatmap MSE, deep-supervised L1 offsets, the per-layer
//! VAE regularizers, and their weighted aggregation.

use crate::decoder::KeypointSet;
use crate::error::Error;
use crate::matrix::Matrix;
use crate::Result;

/// MxHxW stack of non-negative maps, one channel per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    values: Matrix, // M x (H*W)
    h: usize,
    w: usize,
}

impl Heatmap {
    pub fn new(values: Matrix, h: usize, w: usize) -> Heatmap {
        assert_eq!(values.cols(), h * w, "heatmap grid mismatch");
        Heatmap { values, h, w }
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }
}

/// Ground-truth maps: isotropic Gaussians with `sigma_px` pixels of spread,
/// peak value 1 at each visible keypoint, zero channels for masked ones.
pub fn gaussian_heatmaps(truth: &KeypointSet, h: usize, w: usize, sigma_px: f64) -> Heatmap {
    let mut values = Matrix::zeros(truth.m(), h * w);
    let s2 = 2.0 * sigma_px * sigma_px;
    for k in 0..truth.m() {
        if !truth.mask()[k] {
            continue;
        }
        let (kx, ky) = truth.point(k);
        let px = kx * w as f64 - 0.5;
        let py = ky * h as f64 - 0.5;
        for i in 0..h {
            for j in 0..w {
                let dx = j as f64 - px;
                let dy = i as f64 - py;
                values.set(k, i * w + j, (-(dx * dx + dy * dy) / s2).exp());
            }
        }
    }
    Heatmap::new(values, h, w)
}

/// Weighting factors of the overall objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            beta: 0.1,
            gamma: 1e-3,
            lambda_heatmap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 || self.lambda_heatmap < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean squared error over unmasked channels and all pixels:
/// (1 / (M_c * H * W)) * sum of squared differences.
pub fn heatmap_loss(pred: &Heatmap, truth: &Heatmap, mask: &[bool]) -> Result<f64> {
    if pred.m() != truth.m() || pred.grid() != truth.grid() {
        return Err(Error::usage("heatmap_loss: shape mismatch"));
    }
    if mask.len() != pred.m() {
        return Err(Error::usage("heatmap_loss: mask length mismatch"));
    }
    let m_c = mask.iter().filter(|&&v| v).count();
    if m_c == 0 {
        return Err(Error::usage("heatmap_loss: zero unmasked keypoints"));
    }
    let (h, w) = pred.grid();
    let mut acc = 0.0;
    for k in 0..pred.m() {
        if !mask[k] {
            continue;
        }
        for (p, t) in pred.channel(k).iter().zip(truth.channel(k)) {
            let d = p - t;
            acc += d * d;
        }
    }
    Ok(acc / (m_c * h * w) as f64)
}

/// Deep-supervised L1 loss: per layer, sum |pred - truth| over unmasked
/// keypoints and both coordinates; averaged over layers.
pub fn offset_loss(preds: &[KeypointSet], truth: &KeypointSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::usage("offset_loss: no layer predictions"));
    }
    for p in preds {
        if p.mask() != truth.mask() {
            return Err(Error::usage("offset_loss: prediction/truth mask disagreement"));
        }
    }
    let mut acc = 0.0;
    for p in preds {
        for k in 0..truth.m() {
            if !truth.mask()[k] {
                continue;
            }
            acc += (p.coords().get(k, 0) - truth.coords().get(k, 0)).abs();
            acc += (p.coords().get(k, 1) - truth.coords().get(k, 1)).abs();
        }
    }
    Ok(acc / preds.len() as f64)
}

/// Sum over layers of KL + beta * sparsity.
pub fn vae_loss(kl_per_layer: &[f64], sparsity_per_layer: &[f64], beta: f64) -> Result<f64> {
    if kl_per_layer.len() != sparsity_per_layer.len() {
        return Err(Error::usage("vae_loss: per-layer list length mismatch"));
    }
    Ok(kl_per_layer
        .iter()
        .zip(sparsity_per_layer)
        .map(|(&kl, &sp)| kl + beta * sp)
        .sum())
}

/// lambda_heatmap * heatmap + offset + gamma * vae.
pub fn total_loss(heatmap: f64, offset: f64, vae: f64, w: &LossWeights) -> f64 {
    w.lambda_heatmap * heatmap + offset + w.gamma * vae
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tape::{grad_check, Tape};

    fn kps(coords: Vec<f64>, mask: Vec<bool>) -> KeypointSet {
        let m = mask.len();
        KeypointSet::new(Matrix::from_vec(m, 2, coords), mask)
    }

    #[test]
    fn heatmap_identity_is_zero() {
        let t = kps(vec![0.5, 0.5], vec![true]);
        let hm = gaussian_heatmaps(&t, 4, 4, 2.0);
        assert_eq!(heatmap_loss(&hm, &hm, &[true]).unwrap(), 0.0);
    }

    #[test]
    fn heatmap_constant_offset_is_one() {
        let truth = Heatmap::new(Matrix::zeros(1, 4), 2, 2);
        let pred = Heatmap::new(Matrix::from_fn(1, 4, |_, _| 1.0), 2, 2);
        assert!((heatmap_loss(&pred, &truth, &[true]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(130, 21);
        let (m, h, w) = (3, 4, 5);
        let pred = Heatmap::new(Matrix::from_fn(m, h * w, |_, _| rng.next_f64()), h, w);
        let truth = Heatmap::new(Matrix::from_fn(m, h * w, |_, _| rng.next_f64()), h, w);
        let mask = vec![true, false, true];
        let got = heatmap_loss(&pred, &truth, &mask).unwrap();

        let mut acc = 0.0;
        let mut m_c = 0;
        for k in 0..m {
            if !mask[k] {
                continue;
            }
            m_c += 1;
            for i in 0..h {
                for j in 0..w {
                    let d = pred.values().get(k, i * w + j) - truth.values().get(k, i * w + j);
                    acc += d * d;
                }
            }
        }
        let expect = acc / (m_c * h * w) as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn heatmap_zero_unmasked_is_usage_error() {
        let hm = Heatmap::new(Matrix::zeros(2, 4), 2, 2);
        assert!(matches!(
            heatmap_loss(&hm, &hm, &[false, false]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gaussian_heatmap_peaks_at_keypoint_cell() {
        let t = kps(vec![0.53, 0.28], vec![true]);
        let hm = gaussian_heatmaps(&t, 16, 16, 2.0);
        let ch = hm.channel(0);
        let argmax = ch
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // x = 0.53 -> column 8, y = 0.28 -> row 4.
        assert_eq!(argmax, 4 * 16 + 8);
        assert!(ch[argmax] > 0.9);
    }

    #[test]
    fn offset_identity_is_zero() {
        let t = kps(vec![0.1, 0.2, 0.7, 0.6], vec![true, true]);
        assert_eq!(offset_loss(&[t.clone(), t.clone()], &t).unwrap(), 0.0);
    }

    #[test]
    fn offset_hand_l1() {
        let truth = kps(vec![0.4, 0.4], vec![true]);
        let pred = kps(vec![0.5, 0.6], vec![true]);
        let got = offset_loss(&[pred], &truth).unwrap();
        assert!((got - 0.3).abs() < 1e-12);
    }

    #[test]
    fn offset_matches_loop_oracle_over_layers() {
        let mut rng = RngStream::new(140, 22);
        let mask = vec![true, false, true, true];
        let truth = kps((0..8).map(|_| rng.next_f64()).collect(), mask.clone());
        let preds: Vec<KeypointSet> = (0..3)
            .map(|_| kps((0..8).map(|_| rng.next_f64()).collect(), mask.clone()))
            .collect();
        let got = offset_loss(&preds, &truth).unwrap();

        let mut acc = 0.0;
        for p in &preds {
            for k in 0..4 {
                if !mask[k] {
                    continue;
                }
                for c in 0..2 {
                    acc += (p.coords().get(k, c) - truth.coords().get(k, c)).abs();
                }
            }
        }
        assert!((got - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn offset_mask_disagreement_is_usage_error() {
        let truth = kps(vec![0.1, 0.2], vec![true]);
        let pred = kps(vec![0.1, 0.2], vec![false]);
        assert!(matches!(offset_loss(&[pred], &truth), Err(Error::Usage(_))));
    }

    #[test]
    fn vae_loss_cases() {
        assert_eq!(vae_loss(&[0.0, 0.0], &[0.0, 0.0], 0.1).unwrap(), 0.0);
        assert!((vae_loss(&[1.0], &[2.0], 0.1).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(vae_loss(&[1.0], &[], 0.1), Err(Error::Usage(_))));

        let mut rng = RngStream::new(150, 23);
        let kl: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
        let sp: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
        let got = vae_loss(&kl, &sp, 0.37).unwrap();
        let expect: f64 = (0..5).map(|i| kl[i] + 0.37 * sp[i]).sum();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn total_loss_cases_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 2.001).abs() < 1e-12);

        // Linear in each component: slope checks at two points.
        let base = total_loss(0.3, 0.4, 0.5, &w);
        assert!((total_loss(1.3, 0.4, 0.5, &w) - base - w.lambda_heatmap).abs() < 1e-12);
        assert!((total_loss(0.3, 1.4, 0.5, &w) - base - 1.0).abs() < 1e-12);
        assert!((total_loss(0.3, 0.4, 1.5, &w) - base - w.gamma).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_wrt_weights() {
        // Treat (lambda, gamma) as the checked input: f = lambda*h + o + gamma*v.
        let (h, o, v) = (0.7, 0.4, 2.5);
        let err = grad_check(
            move |t: &mut Tape, x| {
                let lambda = t.slice(x, 0, 0, 1, 1);
                let gamma = t.slice(x, 0, 1, 1, 1);
                let hv = t.input(Matrix::from_vec(1, 1, vec![h]));
                let vv = t.input(Matrix::from_vec(1, 1, vec![v]));
                let th = t.mul(lambda, hv);
                let tv = t.mul(gamma, vv);
                let sum = t.add(th, tv);
                t.add_const(sum, o)
            },
            &Matrix::row_vec(vec![1.0, 1e-3]),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }
}
