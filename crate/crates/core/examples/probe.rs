use graphpose::checkpoint;
use graphpose::episodes::{generate_episode, template_bbox_diag};
use graphpose::model::{infer_episode, prepare_episode};
use graphpose::rng::RngStream;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let (state, cfg) = checkpoint::load(std::path::Path::new(&path)).unwrap();
    let synth = cfg.synth_config();
    let mut rng = RngStream::new(cfg.seed, 3);
    let mut stats = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); 2]; // [clean, faded]: (pred_err, prop_err, support_err, n)
    let mut pck = [0usize, 0usize, 0usize, 0usize]; // clean hits, clean n, faded hits, faded n
    for _ in 0..200 {
        let ep = generate_episode(&synth, &mut rng).unwrap();
        let prepared = prepare_episode(&ep, cfg.m).unwrap();
        let fwd = infer_episode(&state.model, &prepared).unwrap();
        let pred = fwd.keypoints.last().unwrap();
        let scale = template_bbox_diag(&synth, ep.category_id);
        let thr = 0.2 * scale;
        let (emb, kset) = &ep.supports[0];
        for k in 0..cfg.m {
            if !prepared.loss_mask[k] { continue; }
            let row_norm: f64 = emb.values().row(k).iter().map(|v| v*v).sum::<f64>().sqrt();
            let faded = row_norm < 0.8;
            let idx = if faded { 1 } else { 0 };
            let (tx, ty) = prepared.truth.point(k);
            let (px, py) = (pred.get(k,0), pred.get(k,1));
            let (ox, oy) = prepared.p0.point(k);
            let (sx, sy) = kset.point(k);
            let pe = ((px-tx).powi(2)+(py-ty).powi(2)).sqrt();
            stats[idx].0 += pe;
            stats[idx].1 += ((ox-tx).powi(2)+(oy-ty).powi(2)).sqrt();
            stats[idx].2 += ((px-sx).powi(2)+(py-sy).powi(2)).sqrt();
            stats[idx].3 += 1;
            if faded { pck[3] += 1; if pe <= thr { pck[2] += 1; } }
            else { pck[1] += 1; if pe <= thr { pck[0] += 1; } }
        }
    }
    for (name, s) in [("clean", &stats[0]), ("faded", &stats[1])] {
        let n = s.3 as f64;
        println!("{name}: n={} pred_err {:.4}  proposal_err {:.4}  pred_vs_support_pos {:.4}",
            s.3, s.0/n, s.1/n, s.2/n);
    }
    println!("PCK@0.2 clean {:.4}  faded {:.4}",
        pck[0] as f64 / pck[1] as f64, pck[2] as f64 / pck[3] as f64);
}
