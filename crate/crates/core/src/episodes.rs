//! Synthetic few-shot episodes with known ground-truth topology.
//!
//! A category is a keypoint template (ring, star, or chain) plus one fixed
//! random unit signature vector per keypoint index. An episode depicts one
//! object instance: the template warped by a smooth random deformation,
//! shared by the support and query views. The deformation field is a
//! Gaussian process whose kernel decays with template distance, so nearby
//! keypoints move together while distant ones decorrelate. Each view then
//! applies its own similarity transform (rotation, scale, translation) and
//! small independent jitter.
//!
//! Grid cell features are signature bumps under a Gaussian spatial profile,
//! a positional component in the last two dimensions (backbone features
//! carry location information; here it is explicit), distractor bumps and
//! noise. Support embeddings sample the instance's own map at its keypoint
//! locations. A faded support row therefore loses both its identity content
//! and its position, and the only reliable way to recover the keypoint is to
//! interpolate its spatial neighbors' positions through the graph.
//!
//! Draw order: per episode, the deformation field (M normals for x, M for
//! y); then per view, transform angle, scale, translation (x, y),
//! per-keypoint jitter
//! (x then y), per-keypoint visibility, distractors (x, y, amplitude,
//! direction), per-cell noise (row-major, per feature dimension), then for
//! support instances the per-keypoint fade draws.

use crate::decoder::{KeypointSet, QueryFeatureMap, SupportEmbedding};
use crate::error::Error;
use crate::matrix::Matrix;
use crate::objective::Heatmap;
use crate::rng::RngStream;
use crate::Result;

/// Logit gain applied to raw similarities before the proposal soft-argmax.
pub const SIMILARITY_GAIN: f64 = 12.0;

/// Stream id used to derive per-category templates and signatures. Category
/// definitions are fixed data, independent of episode seeds.
const CATEGORY_STREAM: u64 = 0xCA7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Ring,
    Star,
    Chain,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Topology> {
        match s {
            "ring" => Ok(Topology::Ring),
            "star" => Ok(Topology::Star),
            "chain" => Ok(Topology::Chain),
            other => Err(Error::usage(format!("unknown topology '{other}'"))),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Topology::Ring => write!(f, "ring"),
            Topology::Star => write!(f, "star"),
            Topology::Chain => write!(f, "chain"),
        }
    }
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Keypoints per category.
    pub m: usize,
    pub topology: Topology,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Additive feature noise (per grid cell and dimension).
    pub noise_std: f64,
    /// Probability that a keypoint is occluded: zero feature contribution
    /// and a false mask bit.
    pub occlusion_prob: f64,
    /// Off-template feature bumps per instance.
    pub n_distractors: usize,
    /// Support shots per episode (1 or 5).
    pub shots: usize,
    /// Feature embedding width.
    pub d: usize,
    /// Number of distinct categories to draw from.
    pub n_categories: usize,
    /// Per-keypoint coordinate jitter (normalized units).
    pub jitter_std: f64,
    /// Similarity-transform ranges: rotation in degrees, relative scale,
    /// translation (normalized units, per axis).
    pub rot_range_deg: f64,
    pub scale_range: f64,
    pub trans_range: f64,
    /// Support-row fade: with probability `fade_prob` a visible support row
    /// is replaced by `fade_keep` of itself plus `fade_noise` Gaussian noise
    /// per dimension (both zero by default: the appearance evidence vanishes
    /// while the annotation stays valid). Localizing a faded keypoint then
    /// requires interpolating its spatial neighbors through the graph.
    pub fade_prob: f64,
    pub fade_keep: f64,
    pub fade_noise: f64,
    /// Spatial std of the feature bumps (normalized units).
    pub feature_sigma: f64,
    /// Scale of the positional component written into the last two feature
    /// dimensions of every grid cell.
    pub pos_scale: f64,
    /// Instance deformation: displacement std and correlation length of the
    /// Gaussian-process field over template keypoints, drawn once per
    /// episode and shared by every view.
    pub deform_std: f64,
    pub deform_len: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            m: 8,
            topology: Topology::Ring,
            grid_h: 16,
            grid_w: 16,
            noise_std: 0.02,
            occlusion_prob: 0.05,
            n_distractors: 2,
            shots: 1,
            d: 32,
            n_categories: 64,
            jitter_std: 0.005,
            rot_range_deg: 10.0,
            scale_range: 0.12,
            trans_range: 0.05,
            fade_prob: 0.15,
            fade_keep: 0.0,
            fade_noise: 0.0,
            feature_sigma: 0.10,
            pos_scale: 1.0,
            deform_std: 0.07,
            deform_len: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 3 {
            return Err(Error::config("m must be >= 3"));
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("occlusion_prob must be in [0, 1)"));
        }
        if self.shots != 1 && self.shots != 5 {
            return Err(Error::config("shots must be 1 or 5"));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.n_categories == 0 {
            return Err(Error::config("grid and n_categories must be positive"));
        }
        if self.d < 4 {
            return Err(Error::config("d must be >= 4 (two dimensions carry position)"));
        }
        Ok(())
    }

    /// A copy with every stochastic corruption disabled; transforms still
    /// apply unless the ranges are zeroed too.
    pub fn noiseless(&self) -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            occlusion_prob: 0.0,
            n_distractors: 0,
            jitter_std: 0.0,
            fade_prob: 0.0,
            deform_std: 0.0,
            ..self.clone()
        }
    }
}

/// One few-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<(SupportEmbedding, KeypointSet)>,
    pub query: QueryFeatureMap,
    pub query_truth: KeypointSet,
    pub true_adjacency: Matrix,
    pub category_id: u64,
}

// ---------------------------------------------------------------------------
// Category definitions
// ---------------------------------------------------------------------------

/// Canonical template for a category: deterministic in (cfg, category_id).
/// Templates are irregular: per-category phase, overall size, and
/// per-keypoint angular/radial jitter. Index neighbors remain spatial
/// neighbors, but long-range chord relations differ from category to
/// category, so only local structure generalizes across categories.
pub fn category_template(cfg: &SynthConfig, category_id: u64) -> KeypointSet {
    let mut rng = RngStream::new(CATEGORY_STREAM ^ category_id, 0);
    let phase = rng.next_range(0.0, std::f64::consts::TAU);
    let r = rng.next_range(0.24, 0.32);
    let m = cfg.m;
    let c = 0.5;
    let tau = std::f64::consts::TAU;
    let coords = match cfg.topology {
        Topology::Ring => {
            let mut pts = Matrix::zeros(m, 2);
            for k in 0..m {
                let theta = phase + tau * (k as f64 + rng.next_range(-0.3, 0.3)) / m as f64;
                let rk = r * (1.0 + rng.next_range(-0.1, 0.1));
                pts.set(k, 0, c + rk * theta.cos());
                pts.set(k, 1, c + rk * theta.sin());
            }
            pts
        }
        Topology::Star => {
            let mut pts = Matrix::zeros(m, 2);
            pts.set(0, 0, c + rng.next_range(-0.03, 0.03));
            pts.set(0, 1, c + rng.next_range(-0.03, 0.03));
            for k in 1..m {
                let theta =
                    phase + tau * ((k - 1) as f64 + rng.next_range(-0.3, 0.3)) / (m - 1) as f64;
                let rk = r * (1.0 + rng.next_range(-0.1, 0.1));
                pts.set(k, 0, c + rk * theta.cos());
                pts.set(k, 1, c + rk * theta.sin());
            }
            pts
        }
        Topology::Chain => {
            let mut pts = Matrix::zeros(m, 2);
            let (dx, dy) = (phase.cos(), phase.sin());
            for k in 0..m {
                let t = -r + 2.0 * r * (k as f64 + rng.next_range(-0.25, 0.25)) / (m - 1) as f64;
                let perp = r * rng.next_range(-0.15, 0.15);
                pts.set(k, 0, c + t * dx - perp * dy);
                pts.set(k, 1, c + t * dy + perp * dx);
            }
            pts
        }
    };
    KeypointSet::new(coords, vec![true; m])
}

/// Fixed random unit signature per (category, keypoint index). The last two
/// dimensions are reserved for position and stay zero.
pub fn category_signatures(cfg: &SynthConfig, category_id: u64) -> Vec<Vec<f64>> {
    (0..cfg.m)
        .map(|k| {
            let mut rng = RngStream::new(CATEGORY_STREAM ^ category_id, 1 + k as u64);
            let mut v = rng.next_unit_vector(cfg.d - 2);
            v.extend([0.0, 0.0]);
            v
        })
        .collect()
}

/// Binary symmetric adjacency with zero diagonal for the topology.
pub fn topology_adjacency(topology: Topology, m: usize) -> Matrix {
    let mut a = Matrix::zeros(m, m);
    let mut connect = |i: usize, j: usize| {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    };
    match topology {
        Topology::Ring => {
            for k in 0..m {
                connect(k, (k + 1) % m);
            }
        }
        Topology::Star => {
            for k in 1..m {
                connect(0, k);
            }
        }
        Topology::Chain => {
            for k in 0..m - 1 {
                connect(k, k + 1);
            }
        }
    }
    a
}

/// Diagonal of the template bounding box, used as the PCK object scale.
pub fn template_bbox_diag(cfg: &SynthConfig, category_id: u64) -> f64 {
    let t = category_template(cfg, category_id);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..t.m() {
        let (x, y) = t.point(k);
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt()
}

// ---------------------------------------------------------------------------
// Instance synthesis
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor of a small SPD matrix.
fn cholesky(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                l.set(i, j, acc.max(1e-12).sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    l
}

/// Smooth displacement field over the template keypoints: a Gaussian process
/// with squared-exponential kernel in template distance. Nearby keypoints
/// deform together; distant ones are nearly independent.
fn deformation_field(template: &KeypointSet, cfg: &SynthConfig, rng: &mut RngStream) -> Matrix {
    let m = template.m();
    if cfg.deform_std <= 0.0 {
        // Consume no draws when disabled.
        return Matrix::zeros(m, 2);
    }
    let len2 = 2.0 * cfg.deform_len * cfg.deform_len;
    let kernel = Matrix::from_fn(m, m, |i, j| {
        let (xi, yi) = template.point(i);
        let (xj, yj) = template.point(j);
        let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
        let v = cfg.deform_std * cfg.deform_std * (-d2 / len2).exp();
        if i == j {
            v + 1e-12
        } else {
            v
        }
    });
    let l = cholesky(&kernel);
    let mut eps_x = vec![0.0; m];
    let mut eps_y = vec![0.0; m];
    rng.fill_normal(&mut eps_x);
    rng.fill_normal(&mut eps_y);
    Matrix::from_fn(m, 2, |k, axis| {
        let eps = if axis == 0 { &eps_x } else { &eps_y };
        (0..=k).map(|j| l.get(k, j) * eps[j]).sum()
    })
}

fn transformed_instance(
    template: &KeypointSet,
    deform: &Matrix,
    cfg: &SynthConfig,
    rng: &mut RngStream,
) -> KeypointSet {
    let m = template.m();
    let theta = rng.next_range(
        -cfg.rot_range_deg.to_radians(),
        cfg.rot_range_deg.to_radians(),
    );
    let scale = rng.next_range(1.0 - cfg.scale_range, 1.0 + cfg.scale_range);
    let tx = rng.next_range(-cfg.trans_range, cfg.trans_range);
    let ty = rng.next_range(-cfg.trans_range, cfg.trans_range);
    let (cx, cy) = {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for k in 0..m {
            let (x, y) = template.point(k);
            sx += x;
            sy += y;
        }
        (sx / m as f64, sy / m as f64)
    };
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let mut coords = Matrix::zeros(m, 2);
    for k in 0..m {
        let (x, y) = template.point(k);
        let (dx, dy) = (x - cx, y - cy);
        let rx = scale * (cos_t * dx - sin_t * dy);
        let ry = scale * (sin_t * dx + cos_t * dy);
        let jx = rng.next_normal() * cfg.jitter_std;
        let jy = rng.next_normal() * cfg.jitter_std;
        // The shared deformation is part of the object, so it rotates and
        // scales with the view.
        let (ddx, ddy) = (deform.get(k, 0), deform.get(k, 1));
        let drx = scale * (cos_t * ddx - sin_t * ddy);
        let dry = scale * (sin_t * ddx + cos_t * ddy);
        coords.set(k, 0, (cx + rx + drx + tx + jx).clamp(0.02, 0.98));
        coords.set(k, 1, (cy + ry + dry + ty + jy).clamp(0.02, 0.98));
    }

    // Visibility, with a re-draw rule guaranteeing at least one visible
    // keypoint.
    let mut mask = vec![true; m];
    if cfg.occlusion_prob > 0.0 {
        for _ in 0..100 {
            for bit in mask.iter_mut() {
                *bit = !rng.next_bool(cfg.occlusion_prob);
            }
            if mask.iter().any(|&v| v) {
                break;
            }
        }
        if !mask.iter().any(|&v| v) {
            mask[rng.next_below(m)] = true;
        }
    }
    KeypointSet::new(coords, mask)
}

fn render_with_signatures(
    keypoints: &KeypointSet,
    signatures: &[Vec<f64>],
    cfg: &SynthConfig,
    rng: &mut RngStream,
) -> (QueryFeatureMap, SupportEmbedding) {
    let (h, w, d) = (cfg.grid_h, cfg.grid_w, cfg.d);
    let mut map = Matrix::zeros(h * w, d);
    let s2 = 2.0 * cfg.feature_sigma * cfg.feature_sigma;

    let splat = |map: &mut Matrix, x: f64, y: f64, vec: &[f64], amp: f64| {
        for i in 0..h {
            let cy = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                let dist2 = (cx - x) * (cx - x) + (cy - y) * (cy - y);
                let weight = amp * (-dist2 / s2).exp();
                if weight < 1e-12 {
                    continue;
                }
                let row = i * w + j;
                for (dim, &v) in vec.iter().enumerate() {
                    map.set(row, dim, map.get(row, dim) + weight * v);
                }
            }
        }
    };

    for k in 0..keypoints.m() {
        if !keypoints.mask()[k] {
            continue;
        }
        let (x, y) = keypoints.point(k);
        splat(&mut map, x, y, &signatures[k], 1.0);
    }

    // Positional component: the last two dimensions encode the cell center
    // relative to the image center.
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            let row = i * w + j;
            map.set(row, d - 2, cfg.pos_scale * (cx - 0.5));
            map.set(row, d - 1, cfg.pos_scale * (cy - 0.5));
        }
    }

    for _ in 0..cfg.n_distractors {
        let x = rng.next_range(0.1, 0.9);
        let y = rng.next_range(0.1, 0.9);
        let amp = rng.next_range(0.3, 0.8);
        let mut dir = rng.next_unit_vector(d - 2);
        dir.extend([0.0, 0.0]);
        splat(&mut map, x, y, &dir, amp);
    }

    if cfg.noise_std > 0.0 {
        for r in 0..h * w {
            for c in 0..d {
                map.set(r, c, map.get(r, c) + rng.next_normal() * cfg.noise_std);
            }
        }
    }

    // Support rows: bilinear sample of this instance's map at each visible
    // keypoint.
    let mut rows = Matrix::zeros(keypoints.m(), d);
    for k in 0..keypoints.m() {
        if !keypoints.mask()[k] {
            continue;
        }
        let (x, y) = keypoints.point(k);
        let sample = bilinear_sample(&map, h, w, x, y);
        for (c, v) in sample.into_iter().enumerate() {
            rows.set(k, c, v);
        }
    }

    (
        QueryFeatureMap::new(map, h, w),
        SupportEmbedding::new(rows, keypoints.mask().to_vec()),
    )
}

/// Renders an instance's feature map and support rows using category-0
/// signatures. The episode generator routes per-category signatures through
/// the same internal path.
pub fn render_features(
    keypoints: &KeypointSet,
    cfg: &SynthConfig,
    rng: &mut RngStream,
) -> (QueryFeatureMap, SupportEmbedding) {
    let signatures = category_signatures(cfg, 0);
    render_with_signatures(keypoints, &signatures, cfg, rng)
}

fn bilinear_sample(map: &Matrix, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let gx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let mut out = vec![0.0; map.cols()];
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = map.get(y0 * w + x0, c);
        let v01 = map.get(y0 * w + x1, c);
        let v10 = map.get(y1 * w + x0, c);
        let v11 = map.get(y1 * w + x1, c);
        *o = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy;
    }
    out
}

/// Generates one episode: support instances, query instance, ground truth
/// and the category's true topology.
pub fn generate_episode(cfg: &SynthConfig, rng: &mut RngStream) -> Result<Episode> {
    cfg.validate()?;
    let category_id = rng.next_below(cfg.n_categories) as u64;
    let template = category_template(cfg, category_id);
    let signatures = category_signatures(cfg, category_id);
    let deform = deformation_field(&template, cfg, rng);

    let mut supports = Vec::with_capacity(cfg.shots);
    for _ in 0..cfg.shots {
        let instance = transformed_instance(&template, &deform, cfg, rng);
        let (_, embedding) = render_with_signatures(&instance, &signatures, cfg, rng);
        let embedding = fade_support_rows(embedding, cfg, rng);
        supports.push((embedding, instance));
    }

    let query_instance = transformed_instance(&template, &deform, cfg, rng);
    let (query, _) = render_with_signatures(&query_instance, &signatures, cfg, rng);

    Ok(Episode {
        supports,
        query,
        query_truth: query_instance,
        true_adjacency: topology_adjacency(cfg.topology, cfg.m),
        category_id,
    })
}

/// Attenuate and noise a random subset of visible support rows. Faded rows
/// keep their mask bit: the annotation exists, the appearance evidence is
/// mostly gone.
fn fade_support_rows(
    embedding: SupportEmbedding,
    cfg: &SynthConfig,
    rng: &mut RngStream,
) -> SupportEmbedding {
    if cfg.fade_prob <= 0.0 {
        return embedding;
    }
    let mask = embedding.mask().to_vec();
    let mut values = embedding.values().clone();
    for k in 0..values.rows() {
        if !mask[k] {
            continue;
        }
        if rng.next_bool(cfg.fade_prob) {
            for c in 0..values.cols() {
                let v = values.get(k, c) * cfg.fade_keep + rng.next_normal() * cfg.fade_noise;
                values.set(k, c, v);
            }
        }
    }
    SupportEmbedding::new(values, mask)
}

/// Masked mean of the support embeddings over shots. A keypoint visible in
/// no shot stays a zero row with a false mask bit.
pub fn aggregate_supports(supports: &[(SupportEmbedding, KeypointSet)]) -> SupportEmbedding {
    assert!(!supports.is_empty());
    let m = supports[0].0.m();
    let d = supports[0].0.d();
    let mut acc = Matrix::zeros(m, d);
    let mut counts = vec![0usize; m];
    for (emb, _) in supports {
        for k in 0..m {
            if emb.mask()[k] {
                counts[k] += 1;
                for c in 0..d {
                    acc.set(k, c, acc.get(k, c) + emb.values().get(k, c));
                }
            }
        }
    }
    let mask: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    for k in 0..m {
        if counts[k] > 0 {
            for c in 0..d {
                acc.set(k, c, acc.get(k, c) / counts[k] as f64);
            }
        }
    }
    SupportEmbedding::new(acc, mask)
}

// ---------------------------------------------------------------------------
// Similarity proposals
// ---------------------------------------------------------------------------

/// Correlation-based keypoint proposals: the raw similarity map `fs * fq^T`
/// reshaped to MxHxW (returned for the heatmap loss) and the per-keypoint
/// soft-argmax of the gain-scaled map. A zero support row yields a uniform
/// soft-argmax, i.e. the grid centroid.
pub fn proposal_init(fs: &SupportEmbedding, fq: &QueryFeatureMap) -> Result<(KeypointSet, Heatmap)> {
    if fs.d() != fq.d() {
        return Err(Error::Shape {
            op: "proposal_init",
            left_rows: fs.m(),
            left_cols: fs.d(),
            right_rows: fq.values().rows(),
            right_cols: fq.d(),
        });
    }
    let (h, w) = fq.grid();
    let sim = fs.values().matmul(&fq.values().transpose())?;

    let mut coords = Matrix::zeros(fs.m(), 2);
    for k in 0..fs.m() {
        let row = sim.row(k);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        let mut ex = 0.0;
        let mut ey = 0.0;
        for i in 0..h {
            for j in 0..w {
                let e = (SIMILARITY_GAIN * (row[i * w + j] - mx)).exp();
                z += e;
                ex += e * (j as f64 + 0.5) / w as f64;
                ey += e * (i as f64 + 0.5) / h as f64;
            }
        }
        coords.set(k, 0, ex / z);
        coords.set(k, 1, ey / z);
    }
    let proposals = KeypointSet::new(coords, fs.mask().to_vec());
    Ok((proposals, Heatmap::new(sim, h, w)))
}

// ---------------------------------------------------------------------------
// Episode serialization (version byte + little-endian payload)
// ---------------------------------------------------------------------------

const EPISODE_VERSION: u8 = 1;

pub fn episode_to_bytes(ep: &Episode) -> Vec<u8> {
    let mut out = vec![EPISODE_VERSION];
    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let push_mat = |out: &mut Vec<u8>, m: &Matrix| {
        push_u32(out, m.rows());
        push_u32(out, m.cols());
        for &v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    let push_mask = |out: &mut Vec<u8>, mask: &[bool]| {
        push_u32(out, mask.len());
        out.extend(mask.iter().map(|&b| b as u8));
    };

    out.extend_from_slice(&ep.category_id.to_le_bytes());
    push_u32(&mut out, ep.supports.len());
    for (emb, kps) in &ep.supports {
        push_mat(&mut out, emb.values());
        push_mask(&mut out, emb.mask());
        push_mat(&mut out, kps.coords());
        push_mask(&mut out, kps.mask());
    }
    let (h, w) = ep.query.grid();
    push_u32(&mut out, h);
    push_u32(&mut out, w);
    push_mat(&mut out, ep.query.values());
    push_mat(&mut out, ep.query_truth.coords());
    push_mask(&mut out, ep.query_truth.mask());
    push_mat(&mut out, &ep.true_adjacency);
    out
}

pub fn episode_from_bytes(bytes: &[u8]) -> Result<Episode> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("episode payload truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = take(&mut pos, 1)?[0];
    if version != EPISODE_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported episode version {version}"
        )));
    }
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        let b = take(pos, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let read_mat = |pos: &mut usize| -> Result<Matrix> {
        let rows = read_u32(pos)?;
        let cols = read_u32(pos)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = take(pos, 8)?;
            data.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    };
    let read_mask = |pos: &mut usize| -> Result<Vec<bool>> {
        let n = read_u32(pos)?;
        Ok(take(pos, n)?.iter().map(|&b| b != 0).collect())
    };

    let category_id = read_u64(&mut pos)?;
    let n_shots = read_u32(&mut pos)?;
    let mut supports = Vec::with_capacity(n_shots);
    for _ in 0..n_shots {
        let values = read_mat(&mut pos)?;
        let emb_mask = read_mask(&mut pos)?;
        let coords = read_mat(&mut pos)?;
        let kp_mask = read_mask(&mut pos)?;
        supports.push((
            SupportEmbedding::new(values, emb_mask),
            KeypointSet::new(coords, kp_mask),
        ));
    }
    let h = read_u32(&mut pos)?;
    let w = read_u32(&mut pos)?;
    let query = QueryFeatureMap::new(read_mat(&mut pos)?, h, w);
    let coords = read_mat(&mut pos)?;
    let mask = read_mask(&mut pos)?;
    let true_adjacency = read_mat(&mut pos)?;
    Ok(Episode {
        supports,
        query,
        query_truth: KeypointSet::new(coords, mask),
        true_adjacency,
        category_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_static() -> SynthConfig {
        // No corruption and no transform: instances equal the template.
        let mut cfg = SynthConfig::default().noiseless();
        cfg.rot_range_deg = 0.0;
        cfg.scale_range = 0.0;
        cfg.trans_range = 0.0;
        cfg
    }

    #[test]
    fn noiseless_identity_transform_matches_template() {
        let cfg = noiseless_static();
        let mut rng = RngStream::new(7, 30);
        let ep = generate_episode(&cfg, &mut rng).unwrap();
        let template = category_template(&cfg, ep.category_id);
        assert!(ep.query_truth.coords().max_abs_diff(template.coords()) < 1e-12);
        assert!(ep.query_truth.mask().iter().all(|&v| v));
    }

    #[test]
    fn extreme_occlusion_keeps_at_least_one_keypoint() {
        let mut cfg = SynthConfig::default();
        cfg.occlusion_prob = 1.0 - 1e-9;
        let mut rng = RngStream::new(8, 31);
        for _ in 0..20 {
            let ep = generate_episode(&cfg, &mut rng).unwrap();
            assert!(ep.query_truth.visible_count() >= 1);
            for (emb, kps) in &ep.supports {
                assert!(kps.visible_count() >= 1);
                assert_eq!(emb.mask(), kps.mask());
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SynthConfig::default();
        let mut a = RngStream::new(99, 32);
        let mut b = RngStream::new(99, 32);
        let ea = generate_episode(&cfg, &mut a).unwrap();
        let eb = generate_episode(&cfg, &mut b).unwrap();
        assert_eq!(episode_to_bytes(&ea), episode_to_bytes(&eb));
    }

    #[test]
    fn episode_bytes_roundtrip() {
        let mut cfg = SynthConfig::default();
        cfg.shots = 5;
        let mut rng = RngStream::new(100, 33);
        let ep = generate_episode(&cfg, &mut rng).unwrap();
        let bytes = episode_to_bytes(&ep);
        let back = episode_from_bytes(&bytes).unwrap();
        assert_eq!(ep, back);
        assert_eq!(episode_to_bytes(&back), bytes);
    }

    #[test]
    fn ring_adjacency_has_2m_nonzeros() {
        let a = topology_adjacency(Topology::Ring, 8);
        let nonzeros = a.as_slice().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzeros, 16);
        assert!(a.max_abs_diff(&a.transpose()) == 0.0);
        for k in 0..8 {
            assert_eq!(a.get(k, k), 0.0);
        }
    }

    #[test]
    fn single_bump_maximizes_nearest_cell_norm() {
        let mut cfg = noiseless_static();
        cfg.m = 3;
        let coords = Matrix::from_vec(3, 2, vec![0.22, 0.72, 0.5, 0.5, 0.8, 0.3]);
        let kps = KeypointSet::new(coords, vec![true, false, false]);
        let mut rng = RngStream::new(1, 34);
        let (map, _) = render_features(&kps, &cfg, &mut rng);
        let (h, w) = map.grid();
        let mut best = (0, f64::NEG_INFINITY);
        for r in 0..h * w {
            let norm: f64 = (0..cfg.d).map(|c| map.values().get(r, c).powi(2)).sum();
            if norm > best.1 {
                best = (r, norm);
            }
        }
        // Keypoint (0.22, 0.72) -> column 3, row 11 on a 16x16 grid.
        assert_eq!(best.0, 11 * 16 + 3);
    }

    #[test]
    fn zero_visible_keypoints_give_zero_support_rows() {
        let cfg = noiseless_static();
        let kps = KeypointSet::new(
            Matrix::from_fn(cfg.m, 2, |_, _| 0.5),
            vec![false; cfg.m],
        );
        let mut rng = RngStream::new(2, 35);
        let (_, emb) = render_features(&kps, &cfg, &mut rng);
        assert_eq!(emb.values(), &Matrix::zeros(cfg.m, cfg.d));
    }

    #[test]
    fn support_row_correlates_with_nearest_query_cell() {
        let cfg = noiseless_static();
        let mut rng = RngStream::new(3, 36);
        let ep = generate_episode(&cfg, &mut rng).unwrap();
        let (emb, kps) = &ep.supports[0];
        let (h, w) = ep.query.grid();
        for k in 0..cfg.m {
            let (x, y) = kps.point(k);
            let col = ((x * w as f64 - 0.5).round() as usize).min(w - 1);
            let row = ((y * h as f64 - 0.5).round() as usize).min(h - 1);
            let cell = ep.query.values().row(row * w + col);
            let sup = emb.values().row(k);
            let dot: f64 = cell.iter().zip(sup).map(|(&a, &b)| a * b).sum();
            let ncell: f64 = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nsup: f64 = sup.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = dot / (ncell * nsup);
            assert!(cos > 0.9, "keypoint {k}: cosine {cos}");
        }
    }

    #[test]
    fn proposal_one_hot_support_hits_matching_cell() {
        let d = 4;
        let (h, w) = (4, 4);
        // Query has a single active cell (row 1, col 2) on feature dim 0.
        let mut q = Matrix::zeros(h * w, d);
        q.set(1 * w + 2, 0, 1.0);
        let fq = QueryFeatureMap::new(q, h, w);
        let fs = SupportEmbedding::new(
            Matrix::from_fn(1, d, |_, c| if c == 0 { 1.0 } else { 0.0 }),
            vec![true],
        );
        let (props, _) = proposal_init(&fs, &fq).unwrap();
        let (x, y) = props.point(0);
        assert!((x - (2.5 / w as f64)).abs() < 0.01, "x {x}");
        assert!((y - (1.5 / h as f64)).abs() < 0.01, "y {y}");
    }

    #[test]
    fn proposal_uniform_query_is_grid_centroid() {
        let d = 3;
        let (h, w) = (6, 6);
        let fq = QueryFeatureMap::new(Matrix::from_fn(h * w, d, |_, _| 0.25), h, w);
        let fs = SupportEmbedding::new(Matrix::from_fn(2, d, |_, _| 0.5), vec![true; 2]);
        let (props, heat) = proposal_init(&fs, &fq).unwrap();
        for k in 0..2 {
            let (x, y) = props.point(k);
            assert!((x - 0.5).abs() < 1e-12);
            assert!((y - 0.5).abs() < 1e-12);
        }
        assert_eq!(heat.grid(), (h, w));
    }

    #[test]
    fn proposals_stay_strictly_inside_unit_square() {
        let cfg = SynthConfig::default();
        let mut rng = RngStream::new(4, 37);
        for _ in 0..10 {
            let ep = generate_episode(&cfg, &mut rng).unwrap();
            let fs = aggregate_supports(&ep.supports);
            let (props, _) = proposal_init(&fs, &ep.query).unwrap();
            for &v in props.coords().as_slice() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn noiseless_proposals_land_within_one_and_a_half_cells() {
        let cfg = SynthConfig::default().noiseless();
        let mut rng = RngStream::new(5, 38);
        let cell = 1.0 / cfg.grid_w as f64;
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..100 {
            let ep = generate_episode(&cfg, &mut rng).unwrap();
            let fs = aggregate_supports(&ep.supports);
            let (props, _) = proposal_init(&fs, &ep.query).unwrap();
            for k in 0..cfg.m {
                let (px, py) = props.point(k);
                let (tx, ty) = ep.query_truth.point(k);
                total += ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean < 1.5 * cell, "mean proposal error {mean} vs cell {cell}");
    }

    #[test]
    fn five_shot_identical_shots_equal_one_shot() {
        let cfg = noiseless_static();
        let mut rng = RngStream::new(6, 39);
        let ep = generate_episode(&cfg, &mut rng).unwrap();
        let single = ep.supports[0].clone();
        let five = vec![single.clone(); 5];
        let agg = aggregate_supports(&five);
        assert!(agg.values().max_abs_diff(single.0.values()) < 1e-12);
        assert_eq!(agg.mask(), single.0.mask());
    }

    #[test]
    fn five_shot_masked_mean_skips_occluded_shots() {
        let d = 3;
        let a = SupportEmbedding::new(
            Matrix::from_vec(2, d, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]),
            vec![true, false],
        );
        let b = SupportEmbedding::new(
            Matrix::from_vec(2, d, vec![3.0, 4.0, 5.0, 7.0, 8.0, 9.0]),
            vec![true, true],
        );
        let kp = KeypointSet::new(Matrix::from_fn(2, 2, |_, _| 0.5), vec![true, true]);
        let agg = aggregate_supports(&[(a, kp.clone()), (b, kp)]);
        assert_eq!(agg.values().row(0), &[2.0, 3.0, 4.0]);
        assert_eq!(agg.values().row(1), &[7.0, 8.0, 9.0]);
        assert_eq!(agg.mask(), &[true, true]);
    }
}
