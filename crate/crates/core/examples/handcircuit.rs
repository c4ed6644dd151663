use graphpose::config::TrainConfig;
use graphpose::episodes::{generate_episode, template_bbox_diag};
use graphpose::matrix::Matrix;
use graphpose::model::{infer_episode, prepare_episode, GraphMode, Model};
use graphpose::rng::RngStream;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.l_d = 1;
    cfg.graph_mode = GraphMode::StaticGiven;
    let mut model = Model::init(cfg.model_config(), &mut RngStream::new(1, 40)).unwrap();
    let d = cfg.d;
    let (px, py) = (d - 2, d - 1); // position dims
    let (g, t_gate, s_out) = (1.0, 5.0, 4.7);

    // GCN: channels 0..3 carry signed aggregated position, channels 4..31
    // carry rectified self content (the presence gate).
    let mut w_adj = Matrix::zeros(d, d);
    w_adj.set(px, 0, g);
    w_adj.set(px, 1, -g);
    w_adj.set(py, 2, g);
    w_adj.set(py, 3, -g);
    let mut w_self = Matrix::zeros(d, d);
    for c in 0..14 {
        w_self.set(c, 4 + c, 1.0);
        w_self.set(c, 18 + c, -1.0);
    }
    // MLP layer 1: gated signed position differences.
    let mut w1 = Matrix::zeros(d, d);
    let mut b1 = Matrix::zeros(1, d);
    for (hid, (pos_ch, neg_ch)) in [(0, (0, 1)), (1, (1, 0)), (2, (2, 3)), (3, (3, 2))] {
        w1.set(pos_ch, hid, 1.0);
        w1.set(neg_ch, hid, -1.0);
        for c in 4..32 {
            w1.set(c, hid, -t_gate);
        }
    }
    let _ = &mut b1;
    let mut w2 = Matrix::zeros(d, 2);
    w2.set(0, 0, s_out);
    w2.set(1, 0, -s_out);
    w2.set(2, 1, s_out);
    w2.set(3, 1, -s_out);

    model.dec[0].w_adj = w_adj;
    model.dec[0].w_self = w_self;
    model.dec[0].mlp.w1 = w1;
    model.dec[0].mlp.b1 = b1;
    model.dec[0].mlp.w2 = w2;
    model.dec[0].mlp.b2 = Matrix::zeros(1, 2);

    let synth = cfg.synth_config();
    let mut rng = RngStream::new(cfg.seed, 3);
    let mut stats = vec![(0.0f64, 0.0f64, 0usize); 3]; // clean, faded(all nbrs clean), faded(nbr faded)
    for _ in 0..300 {
        let ep = generate_episode(&synth, &mut rng).unwrap();
        let prepared = prepare_episode(&ep, cfg.m).unwrap();
        let fwd = infer_episode(&model, &prepared).unwrap();
        let pred = fwd.keypoints.last().unwrap();
        let (emb, _) = &ep.supports[0];
        let scale = template_bbox_diag(&synth, ep.category_id);
        let thr = 0.2 * scale;
        let m = cfg.m;
        let row_dead = |k: usize| -> bool {
            emb.values().row(k).iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1
        };
        for k in 0..m {
            if !prepared.loss_mask[k] { continue; }
            let (tx, ty) = prepared.truth.point(k);
            let e = ((pred.get(k, 0) - tx).powi(2) + (pred.get(k, 1) - ty).powi(2)).sqrt();
            let idx = if !row_dead(k) {
                0
            } else if row_dead((k + 1) % m) || row_dead((k + m - 1) % m) {
                2
            } else {
                1
            };
            stats[idx].0 += e;
            if e <= thr { stats[idx].1 += 1.0; }
            stats[idx].2 += 1;
        }
    }
    for (name, s) in [("clean", &stats[0]), ("faded/cleannbrs", &stats[1]), ("faded/fadednbr", &stats[2])] {
        println!("{name}: n={} err {:.4} pck@0.2 {:.4}", s.2, s.0 / s.2 as f64, s.1 / s.2 as f64);
    }
}
