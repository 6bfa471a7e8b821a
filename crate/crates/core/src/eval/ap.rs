pub const RECALL_POSITIONS: usize = 40;

/// Precision/recall after each detection of a score-sorted sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    pub fn from_sequence(tp: &[bool], num_gt: usize) -> Self {
        let mut hits = 0usize;
        let points = tp
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                hits += t as usize;
                let recall = if num_gt == 0 { 0.0 } else { hits as f64 / num_gt as f64 };
                (recall, hits as f64 / (i + 1) as f64)
            })
            .collect();
        Self { points }
    }

    /// Recall at the operating point with the highest F1 score.
    pub fn knee_recall(&self) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &(r, p) in &self.points {
            let f1 = if r + p > 0.0 { 2.0 * r * p / (r + p) } else { 0.0 };
            if f1 > best.0 {
                best = (f1, r);
            }
        }
        best.1
    }

    /// Tab-separated `recall\tprecision` table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("recall\tprecision\n");
        for (r, p) in &self.points {
            s.push_str(&format!("{r:.6}\t{p:.6}\n"));
        }
        s
    }
}

/// Average precision in percent over recall positions `k/40`, `k = 1..=40`,
/// each taking the best precision among operating points that reach it.
/// `tp` holds the TP flags of the score-sorted detections (FPs as `false`).
/// `None` when there is no ground truth.
pub fn ap40(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    // Best precision among operating points with at least `h` hits.
    let mut best_from = vec![0.0f64; num_gt + 2];
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits = (hits + t as usize).min(num_gt);
        let p = hits as f64 / (i + 1) as f64;
        if p > best_from[hits] {
            best_from[hits] = p;
        }
    }
    for h in (0..=num_gt).rev() {
        best_from[h] = best_from[h].max(best_from[h + 1]);
    }
    let mut sum = 0.0;
    for k in 1..=RECALL_POSITIONS {
        // Smallest hit count with hits / num_gt >= k / 40.
        let need = (k * num_gt).div_ceil(RECALL_POSITIONS);
        sum += best_from[need];
    }
    Some(100.0 / RECALL_POSITIONS as f64 * sum)
}
