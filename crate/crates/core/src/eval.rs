//! Evaluation: PCK at multiple thresholds, mPCK, and adjacency recovery
//! against the known synthetic topology.

use crate::config::TrainConfig;
use crate::decoder::KeypointSet;
use crate::episodes::{generate_episode, template_bbox_diag};
use crate::error::Error;
use crate::matrix::Matrix;
use crate::model::{infer_episode, prepare_episode, Model};
use crate::rng::RngStream;
use crate::train::STREAM_EVAL;
use crate::Result;

pub const PCK_THRESHOLDS: [f64; 4] = [0.05, 0.1, 0.15, 0.2];

/// Per-threshold fraction of unmasked keypoints whose Euclidean error is
/// within `tau * bbox_scale` (boundary inclusive). Returns `None` when no
/// keypoint is visible: the instance is skipped, not counted.
pub fn pck_eval(
    preds: &KeypointSet,
    truth: &KeypointSet,
    bbox_scale: f64,
    thresholds: &[f64],
) -> Result<Option<Vec<f64>>> {
    if preds.mask() != truth.mask() {
        return Err(Error::usage("pck_eval: prediction/truth mask disagreement"));
    }
    if bbox_scale <= 0.0 {
        return Err(Error::usage("pck_eval: bbox_scale must be positive"));
    }
    let visible = truth.visible_count();
    if visible == 0 {
        return Ok(None);
    }
    let mut fractions = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let limit = tau * bbox_scale;
        let correct = (0..truth.m())
            .filter(|&k| truth.mask()[k])
            .filter(|&k| {
                let (px, py) = preds.point(k);
                let (tx, ty) = truth.point(k);
                ((px - tx).powi(2) + (py - ty).powi(2)).sqrt() <= limit
            })
            .count();
        fractions.push(correct as f64 / visible as f64);
    }
    Ok(Some(fractions))
}

/// Micro-averaged PCK accumulator over many instances.
#[derive(Clone, Debug, Default)]
pub struct PckAccumulator {
    correct: Vec<u64>,
    total: u64,
}

impl PckAccumulator {
    pub fn new(n_thresholds: usize) -> PckAccumulator {
        PckAccumulator {
            correct: vec![0; n_thresholds],
            total: 0,
        }
    }

    pub fn add(
        &mut self,
        preds: &KeypointSet,
        truth: &KeypointSet,
        bbox_scale: f64,
        thresholds: &[f64],
    ) -> Result<()> {
        if preds.mask() != truth.mask() {
            return Err(Error::usage("pck accumulator: mask disagreement"));
        }
        for k in 0..truth.m() {
            if !truth.mask()[k] {
                continue;
            }
            let (px, py) = preds.point(k);
            let (tx, ty) = truth.point(k);
            let err = ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
            for (i, &tau) in thresholds.iter().enumerate() {
                if err <= tau * bbox_scale {
                    self.correct[i] += 1;
                }
            }
        }
        self.total += truth.visible_count() as u64;
        Ok(())
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.correct
            .iter()
            .map(|&c| {
                if self.total == 0 {
                    0.0
                } else {
                    c as f64 / self.total as f64
                }
            })
            .collect()
    }

    pub fn keypoints_counted(&self) -> u64 {
        self.total
    }
}

/// Fraction of the top-k learned symmetric pairs (k = true edge count) that
/// are true edges. When every off-diagonal score ties, no ordering carries
/// information and the chance-level precision k / (M(M-1)/2) is returned.
pub fn adjacency_recovery(learned: &Matrix, truth: &Matrix) -> f64 {
    assert_eq!(learned.rows(), learned.cols(), "learned must be square");
    assert_eq!(truth.rows(), learned.rows(), "size mismatch");
    let m = learned.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let score = 0.5 * (learned.get(i, j) + learned.get(j, i));
            pairs.push((score, i, j));
        }
    }
    let k = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|&(i, j)| truth.get(i, j) != 0.0)
        .count();
    if k == 0 || pairs.is_empty() {
        return 0.0;
    }
    let n_pairs = pairs.len();
    let all_equal = pairs
        .iter()
        .all(|p| (p.0 - pairs[0].0).abs() < 1e-12);
    if all_equal {
        return k as f64 / n_pairs as f64;
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let hits = pairs
        .iter()
        .take(k)
        .filter(|&&(_, i, j)| truth.get(i, j) != 0.0)
        .count();
    hits as f64 / k as f64
}

/// Evaluation summary over held-out episodes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub pck: Vec<f64>,
    pub mpck: f64,
    /// Mean final-layer adjacency recovery precision.
    pub recovery: f64,
    pub episodes: usize,
}

impl EvalReport {
    pub fn pck_at(&self, tau: f64) -> f64 {
        self.thresholds
            .iter()
            .position(|&t| (t - tau).abs() < 1e-12)
            .map(|i| self.pck[i])
            .expect("threshold not evaluated")
    }
}

/// Generates `n_episodes` held-out episodes from the eval stream and reports
/// micro-averaged PCK plus mean structure recovery.
pub fn evaluate_model(model: &Model, cfg: &TrainConfig, n_episodes: usize) -> Result<EvalReport> {
    let synth = cfg.synth_config();
    let mut rng = RngStream::new(cfg.seed, STREAM_EVAL);
    let mut acc = PckAccumulator::new(PCK_THRESHOLDS.len());
    let mut recovery_sum = 0.0;
    let mut recovery_count = 0usize;
    for _ in 0..n_episodes {
        let ep = generate_episode(&synth, &mut rng)?;
        let prepared = prepare_episode(&ep, model.cfg.m)?;
        let fwd = infer_episode(model, &prepared)?;
        let coords = fwd.keypoints.last().expect("l_d >= 1").clone();
        let preds = KeypointSet::new(coords, prepared.loss_mask.clone());
        let truth = prepared.truth.clone();
        let scale = template_bbox_diag(&synth, ep.category_id);
        acc.add(&preds, &truth, scale, &PCK_THRESHOLDS)?;

        let final_adj = fwd.adjacencies.last().expect("l_d >= 1");
        // Recovery is only meaningful for the unpadded block.
        let m = ep.true_adjacency.rows();
        if m == model.cfg.m {
            recovery_sum += adjacency_recovery(final_adj, &ep.true_adjacency);
            recovery_count += 1;
        }
    }
    let pck = acc.fractions();
    let mpck = pck.iter().sum::<f64>() / pck.len() as f64;
    Ok(EvalReport {
        thresholds: PCK_THRESHOLDS.to_vec(),
        pck,
        mpck,
        recovery: if recovery_count == 0 {
            0.0
        } else {
            recovery_sum / recovery_count as f64
        },
        episodes: n_episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{topology_adjacency, Topology};

    fn kps(coords: Vec<f64>, mask: Vec<bool>) -> KeypointSet {
        let m = mask.len();
        KeypointSet::new(Matrix::from_vec(m, 2, coords), mask)
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let t = kps(vec![0.2, 0.3, 0.6, 0.7], vec![true, true]);
        let fr = pck_eval(&t, &t, 0.8, &PCK_THRESHOLDS).unwrap().unwrap();
        assert_eq!(fr, vec![1.0; 4]);
    }

    #[test]
    fn boundary_is_inclusive() {
        // Error exactly 0.2 * scale counts as correct at tau = 0.2.
        let truth = kps(vec![0.5, 0.5], vec![true]);
        let preds = kps(vec![0.5 + 0.2 * 0.5, 0.5], vec![true]);
        let fr = pck_eval(&preds, &truth, 0.5, &[0.2]).unwrap().unwrap();
        assert_eq!(fr, vec![1.0]);
        // And just beyond it does not.
        let preds = kps(vec![0.5 + 0.2 * 0.5 + 1e-9, 0.5], vec![true]);
        let fr = pck_eval(&preds, &truth, 0.5, &[0.2]).unwrap().unwrap();
        assert_eq!(fr, vec![0.0]);
    }

    #[test]
    fn zero_visible_instance_is_skipped() {
        let truth = kps(vec![0.5, 0.5], vec![false]);
        let preds = kps(vec![0.1, 0.1], vec![false]);
        assert!(pck_eval(&preds, &truth, 1.0, &[0.2]).unwrap().is_none());
    }

    #[test]
    fn pck_is_monotone_in_threshold() {
        let mut rng = RngStream::new(160, 60);
        let mut acc = PckAccumulator::new(PCK_THRESHOLDS.len());
        for _ in 0..50 {
            let truth = kps((0..8).map(|_| rng.next_f64()).collect(), vec![true; 4]);
            let preds = kps((0..8).map(|_| rng.next_f64()).collect(), vec![true; 4]);
            acc.add(&preds, &truth, 0.9, &PCK_THRESHOLDS).unwrap();
        }
        let fr = acc.fractions();
        for w in fr.windows(2) {
            assert!(w[0] <= w[1] + 1e-15);
        }
    }

    #[test]
    fn random_predictions_match_quadrature_oracle() {
        // Uniform random predictions against ring-task truths: PCK@0.2 should
        // match the disk-overlap probability computed by quadrature.
        let synth = crate::episodes::SynthConfig::default();
        let template = crate::episodes::category_template(&synth, 0);
        let scale = template_bbox_diag(&synth, 0);
        let radius = 0.2 * scale;

        // Quadrature oracle: for each template keypoint, the probability that
        // a uniform point lands within `radius`, via a fine grid.
        let n_grid = 400;
        let mut expected = 0.0;
        for k in 0..template.m() {
            let (tx, ty) = template.point(k);
            let mut inside = 0usize;
            for i in 0..n_grid {
                for j in 0..n_grid {
                    let x = (j as f64 + 0.5) / n_grid as f64;
                    let y = (i as f64 + 0.5) / n_grid as f64;
                    if ((x - tx).powi(2) + (y - ty).powi(2)).sqrt() <= radius {
                        inside += 1;
                    }
                }
            }
            expected += inside as f64 / (n_grid * n_grid) as f64;
        }
        expected /= template.m() as f64;

        // Monte-Carlo through pck_eval.
        let mut rng = RngStream::new(170, 61);
        let mut acc = PckAccumulator::new(1);
        let trials = 10_000 / template.m();
        for _ in 0..trials {
            let preds = kps(
                (0..template.m() * 2).map(|_| rng.next_f64()).collect(),
                vec![true; template.m()],
            );
            acc.add(&preds, &template, scale, &[0.2]).unwrap();
        }
        let got = acc.fractions()[0];
        assert!(
            (got - expected).abs() < 0.03,
            "PCK {got} vs quadrature {expected}"
        );
    }

    #[test]
    fn recovery_exact_truth_is_one() {
        let truth = topology_adjacency(Topology::Ring, 8);
        assert_eq!(adjacency_recovery(&truth, &truth), 1.0);
    }

    #[test]
    fn recovery_uniform_is_chance_level() {
        let truth = topology_adjacency(Topology::Ring, 8);
        let uniform = Matrix::from_fn(8, 8, |_, _| 0.125);
        let expected = 8.0 / 28.0;
        assert!((adjacency_recovery(&uniform, &truth) - expected).abs() < 1e-12);
    }

    #[test]
    fn recovery_of_random_matrices_matches_combinatorial_expectation() {
        let truth = topology_adjacency(Topology::Ring, 8);
        let k = 8.0;
        let pairs = 28.0;
        let mut rng = RngStream::new(180, 62);
        let mut acc = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let learned = Matrix::from_fn(8, 8, |_, _| rng.next_f64());
            acc += adjacency_recovery(&learned, &truth);
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - k / pairs).abs() < 0.05,
            "mean precision {mean} vs expectation {}",
            k / pairs
        );
    }
}
