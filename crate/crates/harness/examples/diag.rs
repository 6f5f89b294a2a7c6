// Diagnostic: per-layer anchor error vs residual magnitude for image queries.
use fusionq::config::ExperimentConfig;
use fusionq::experiments::{build_train_dataset, load_model};
use fusionq_core::model::Modality;
use fusionq_core::numerics::graph::Graph;
use fusionq_core::scenesim::child_seed;
use fusionq_core::training::hungarian_match;
use fusionq_core::numerics::tensor::Tensor;

fn main() {
    let cfg = ExperimentConfig::from_path(std::path::Path::new(&std::env::args().nth(1).unwrap())).unwrap();
    let model = load_model(&cfg, std::path::Path::new(&std::env::args().nth(2).unwrap())).unwrap();
    let dataset = build_train_dataset(&cfg).unwrap();
    let mut per_layer_anchor = vec![0.0; cfg.model.layers + 1];
    let mut per_layer_resid = vec![0.0; cfg.model.layers];
    let mut per_layer_pred = vec![0.0; cfg.model.layers];
    let mut count = 0.0;
    for (fi, frame) in dataset.sequences[0].iter().chain(dataset.sequences[1].iter()).enumerate() {
        let mut g = Graph::new();
        let Some(pass) = model.forward(&mut g, frame, &cfg.oracle, Modality::Both, None, child_seed(cfg.seed, 4, fi as u64)).unwrap() else { continue };
        let out = &pass.output;
        if out.n_img == 0 || frame.gts.is_empty() { continue; }
        // match on INITIAL anchors for a consistent reference across layers
        let a0 = g.value(out.initial_anchors);
        let mut cost = Vec::new();
        for i in out.n_pc..out.n_pc + out.n_img {
            for gt in &frame.gts {
                let c = gt.bbox.center;
                cost.push((a0.at2(i,0)-c[0]).powi(2)+(a0.at2(i,1)-c[1]).powi(2)+(a0.at2(i,2)-c[2]).powi(2));
            }
        }
        let cost = Tensor::new(vec![out.n_img, frame.gts.len()], cost).unwrap();
        let m = hungarian_match(&cost).unwrap();
        for &(qi, gj) in &m.pairs {
            let q = out.n_pc + qi;
            let gt = frame.gts[gj].bbox.center;
            let d0 = (0..3).map(|c| (a0.at2(q, c) - gt[c]).powi(2)).sum::<f64>();
            per_layer_anchor[0] += d0;
            for (l, rec) in out.layers.iter().enumerate() {
                let a = g.value(rec.anchors);
                let d = (0..3).map(|c| (a.at2(q, c) - gt[c]).powi(2)).sum::<f64>();
                per_layer_anchor[l + 1] += d;
                let reg = g.value(rec.heads.reg_norm);
                let resid = (0..3).map(|c| (reg.at2(q, c) - a.at2(q, c)).abs()).sum::<f64>();
                per_layer_resid[l] += resid;
                let pe = (0..3).map(|c| (reg.at2(q, c) - gt[c]).powi(2)).sum::<f64>();
                per_layer_pred[l] += pe;
            }
            count += 1.0;
        }
    }
    println!("matched img queries: {}", count);
    for l in 0..=cfg.model.layers {
        print!("layer {l}: anchor MSE {:8.3}", per_layer_anchor[l] / count);
        if l > 0 {
            print!("  |residual(L1,3ch)| {:7.3}  pred MSE {:8.3}", per_layer_resid[l-1] / count, per_layer_pred[l-1] / count);
        }
        println!();
    }
}
