//! Evaluation metrics: center-distance AP, the per-layer image-query MSE
//! curve, and the pillar-vs-dense-grid sparsity accounting.

use serde::{Deserialize, Serialize};

use fusionq_core::decoder::DecoderOutput;
use fusionq_core::numerics::graph::Graph;
use fusionq_core::numerics::tensor::Tensor;
use fusionq_core::scenesim::GtObject;
use fusionq_core::training::hungarian_match;
use fusionq_core::Result;

/// One decoded prediction pooled over an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    /// BEV center, meters.
    pub center: [f64; 2],
}

/// One ground truth pooled over an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame: usize,
    pub class: usize,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: usize,
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApTable {
    pub entries: Vec<ApEntry>,
    pub mean_ap: f64,
}

/// Score-ranked greedy matching by BEV center distance with 11-point
/// interpolated AP, averaged over classes (with at least one GT) and
/// thresholds.
pub fn evaluate_center_ap(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> ApTable {
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let mut entries = Vec::new();
    for &class in &classes {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
        let mut class_preds: Vec<(usize, &Prediction)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == class)
            .collect();
        class_preds.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        for &threshold in thresholds {
            let mut matched = vec![false; class_gts.len()];
            let mut tp = 0usize;
            let mut precisions = Vec::with_capacity(class_preds.len());
            let mut recalls = Vec::with_capacity(class_preds.len());
            for (rank, (_, p)) in class_preds.iter().enumerate() {
                // nearest unmatched GT of this class in the same frame
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in class_gts.iter().enumerate() {
                    if matched[gi] || gt.frame != p.frame {
                        continue;
                    }
                    let d = ((gt.center[0] - p.center[0]).powi(2)
                        + (gt.center[1] - p.center[1]).powi(2))
                    .sqrt();
                    if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((gi, d));
                    }
                }
                if let Some((gi, _)) = best {
                    matched[gi] = true;
                    tp += 1;
                }
                precisions.push(tp as f64 / (rank + 1) as f64);
                recalls.push(tp as f64 / class_gts.len() as f64);
            }
            // 11-point interpolation
            let mut ap = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let p_max = precisions
                    .iter()
                    .zip(&recalls)
                    .filter(|(_, &rec)| rec >= r - 1e-12)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                ap += p_max / 11.0;
            }
            entries.push(ApEntry { class, threshold, ap });
        }
    }
    let mean_ap = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.ap).sum::<f64>() / entries.len() as f64
    };
    ApTable { entries, mean_ap }
}

/// Per-layer MSE between image-query anchors and Hungarian-matched GT
/// centers: length layers+1 (the initial anchors first). Point-cloud queries
/// are excluded. `None` when the pass carried no image queries or there are
/// no ground truths.
pub fn per_layer_image_query_mse(
    g: &Graph,
    out: &DecoderOutput,
    gts: &[GtObject],
) -> Result<Option<Vec<f64>>> {
    if out.n_img == 0 || gts.is_empty() {
        return Ok(None);
    }
    let img_rows = |anchors: &Tensor| -> Vec<[f64; 3]> {
        (out.n_pc..out.n_pc + out.n_img)
            .map(|i| [anchors.at2(i, 0), anchors.at2(i, 1), anchors.at2(i, 2)])
            .collect()
    };
    let mse_of = |anchors: &Tensor| -> Result<f64> {
        let rows = img_rows(anchors);
        let mut cost = Vec::with_capacity(rows.len() * gts.len());
        for r in &rows {
            for gt in gts {
                let c = gt.bbox.center;
                cost.push(
                    (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2) + (r[2] - c[2]).powi(2),
                );
            }
        }
        let cost = Tensor::new(vec![rows.len(), gts.len()], cost)?;
        let m = hungarian_match(&cost)?;
        let total: f64 = m.pairs.iter().map(|&(i, j)| cost.at2(i, j)).sum();
        Ok(total / m.pairs.len().max(1) as f64)
    };
    let mut curve = Vec::with_capacity(out.layers.len() + 1);
    curve.push(mse_of(g.value(out.initial_anchors))?);
    for rec in &out.layers {
        curve.push(mse_of(g.value(rec.anchors))?);
    }
    Ok(Some(curve))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub pillar_cell: f64,
    pub dense_cell: f64,
    pub dense_extent: f64,
    pub mean_pillars: f64,
    pub max_pillars: usize,
    pub dense_grid_count: usize,
    pub ratio: f64,
    pub frames: usize,
}

/// Cells along one axis of the dense grid; exact divisions stay exact in
/// spite of f64 rounding (408 / 0.6 must be 680, not 681).
pub fn dense_cells_per_axis(full_extent: f64, cell: f64) -> usize {
    let cells = full_extent / cell;
    if (cells - cells.round()).abs() < 1e-9 {
        cells.round() as usize
    } else {
        cells.ceil() as usize
    }
}

/// Count occupied pillar cells per frame at our cell size and compare with
/// the dense method's full BEV grid.
pub fn bench_sparsity(
    frames: &[fusionq_core::scenesim::SceneFrame],
    pillar_cell: f64,
    pillar_extent: f64,
    dense_cell: f64,
    dense_extent: f64,
) -> SparsityReport {
    let mut total = 0usize;
    let mut max_pillars = 0usize;
    for f in frames {
        let mut cells = std::collections::BTreeSet::new();
        for p in &f.lidar {
            if p[0].abs() > pillar_extent || p[1].abs() > pillar_extent {
                continue;
            }
            cells.insert(((p[0] / pillar_cell).floor() as i64, (p[1] / pillar_cell).floor() as i64));
        }
        total += cells.len();
        max_pillars = max_pillars.max(cells.len());
    }
    let per_axis = dense_cells_per_axis(2.0 * dense_extent, dense_cell);
    let dense_grid_count = per_axis * per_axis;
    let mean_pillars = if frames.is_empty() { 0.0 } else { total as f64 / frames.len() as f64 };
    SparsityReport {
        pillar_cell,
        dense_cell,
        dense_extent,
        mean_pillars,
        max_pillars,
        dense_grid_count,
        ratio: mean_pillars / dense_grid_count as f64,
        frames: frames.len(),
    }
}
