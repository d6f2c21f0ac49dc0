//! Average precision, per-weather breakdown and the routing confusion matrix.
//!
//! AP uses 40-point recall interpolation: the mean over `r = 1/40, ..., 40/40`
//! of the best precision achieved at recall `>= r`.

use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, iou_3d, Box3D};
use crate::moe::{infer, InferenceConfig, MoEModel, RoutingMode};
use crate::pointcloud::GridSpec;
use crate::weathersim::{Frame, WeatherClass, NUM_WEATHERS};
use crate::wse::Detection;
use crate::Result;

pub const RECALL_POINTS: usize = 40;
pub const IOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// Box overlap used for matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ApKind {
    Bev,
    ThreeD,
}

impl ApKind {
    pub const ALL: [ApKind; 2] = [ApKind::Bev, ApKind::ThreeD];

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            ApKind::Bev => bev_iou(a, b),
            ApKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ApKind::Bev => "AP_BEV",
            ApKind::ThreeD => "AP_3D",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-detection true/false-positive flags in descending score order (stable
/// in frame then detection order), plus the total GT count.
///
/// Each detection takes the unmatched GT of its frame with the highest IoU, if
/// that IoU reaches `threshold`.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    iou: impl Fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, d)| (0..d.len()).map(move |j| (f, j)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(order.len());
    for (f, j) in order {
        let d = &dets[f][j].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.get(f).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
            if taken[f][g] {
                continue;
            }
            let v = iou(d, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[f][g] = true;
        }
        flags.push(best.is_some());
    }
    (flags, gts.iter().map(Vec::len).sum())
}

/// 40-point interpolated AP from ranked TP flags; `None` without any GT.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(flags.len());
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // best precision at recall >= r: suffix maximum
    let mut best = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best[i] = best[i + 1].max(curve[i].1);
    }
    let mut sum = 0.0;
    let mut start = 0;
    for k in 1..=RECALL_POINTS {
        let r = k as f64 / RECALL_POINTS as f64;
        while start < curve.len() && curve[start].0 < r - 1e-12 {
            start += 1;
        }
        if start < curve.len() {
            sum += best[start];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Greedy matching followed by 40-point interpolation.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    iou: impl Fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> Option<f64> {
    let (flags, n) = match_detections(dets, gts, iou, threshold);
    ap_from_flags(&flags, n)
}

/// 7 x 7 routing counts, rows true weather, columns predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_WEATHERS]; NUM_WEATHERS],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_WEATHERS).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    pub fn class_accuracy(&self, truth: usize) -> Option<f64> {
        let n = self.row_sum(truth);
        (n > 0).then(|| self.counts[truth][truth] as f64 / n as f64)
    }
}

/// AP for one metric and IoU threshold, pooled and per weather.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub kind: ApKind,
    pub threshold: f64,
    pub total: Option<f64>,
    pub per_weather: [Option<f64>; NUM_WEATHERS],
}

impl ApRow {
    /// Mean AP over the adverse classes that are present.
    pub fn adverse_mean(&self) -> Option<f64> {
        let v: Vec<f64> = WeatherClass::ALL
            .iter()
            .filter(|w| w.is_adverse())
            .filter_map(|w| self.per_weather[w.index()])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rows: Vec<ApRow>,
    pub confusion: ConfusionMatrix,
    pub frames: [usize; NUM_WEATHERS],
    pub gt_boxes: [usize; NUM_WEATHERS],
}

impl EvalResult {
    pub fn row(&self, kind: ApKind, threshold: f64) -> Option<&ApRow> {
        self.rows.iter().find(|r| r.kind == kind && r.threshold == threshold)
    }
}

/// Scores a detector frame by frame; the detector may also report a routed class.
pub fn evaluate(
    frames: &[Frame],
    mut detector: impl FnMut(&Frame) -> Result<(Vec<Detection>, Option<usize>)>,
) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(frames.len());
    let mut confusion = ConfusionMatrix::default();
    let mut counts = [0usize; NUM_WEATHERS];
    let mut gt_boxes = [0usize; NUM_WEATHERS];
    for f in frames {
        let (d, routed) = detector(f)?;
        let w = f.weather.index();
        if let Some(p) = routed {
            confusion.record(w, p);
        }
        counts[w] += 1;
        gt_boxes[w] += f.gt_boxes.len();
        dets.push(d);
    }
    let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| f.gt_boxes.clone()).collect();
    let mut rows = Vec::new();
    for kind in ApKind::ALL {
        for &thr in &IOU_THRESHOLDS {
            let total = average_precision(&dets, &gts, |a, b| kind.iou(a, b), thr);
            let mut per_weather = [None; NUM_WEATHERS];
            for (w, slot) in per_weather.iter_mut().enumerate() {
                let idx: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].weather.index() == w).collect();
                if idx.is_empty() {
                    continue;
                }
                let bd: Vec<_> = idx.iter().map(|&i| dets[i].clone()).collect();
                let bg: Vec<_> = idx.iter().map(|&i| gts[i].clone()).collect();
                *slot = average_precision(&bd, &bg, |a, b| kind.iou(a, b), thr);
            }
            rows.push(ApRow {
                kind,
                threshold: thr,
                total,
                per_weather,
            });
        }
    }
    Ok(EvalResult {
        rows,
        confusion,
        frames: counts,
        gt_boxes,
    })
}

/// Runs [`infer`] on every frame and buckets by the true weather tag. Routing
/// decisions enter the confusion matrix unless the model is forced to one class.
/// Inference runs on worker threads; results are reduced in frame order.
pub fn per_weather_eval(model: &MoEModel, frames: &[Frame], grid: &GridSpec, cfg: &InferenceConfig) -> Result<EvalResult> {
    let forced = matches!(model.mode, RoutingMode::Forced(_));
    let outputs = par_map(frames, |f| {
        let (set, decision) = infer(model, f, grid, cfg)?;
        Ok((set.detections, (!forced).then(|| decision.top())))
    })?;
    let mut it = outputs.into_iter();
    evaluate(frames, |_| Ok(it.next().expect("one output per frame")))
}

/// Number of weathers on which their own expert scores at least as well as
/// every other expert. `matrix[e][w]` is expert `e` forced on weather `w`.
pub fn specialized_experts(matrix: &[[Option<f64>; NUM_WEATHERS]]) -> usize {
    (0..matrix.len().min(NUM_WEATHERS))
        .filter(|&w| match matrix[w][w] {
            Some(own) => matrix.iter().all(|row| row[w].is_none_or(|v| v <= own)),
            None => false,
        })
        .count()
}

/// Maps `f` over `items` on up to `available_parallelism` threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;
    use crate::weathersim::{generate_scene, SceneConfig};

    fn b(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 1.0], [4.0, 2.0, 1.5], 0.0).unwrap()
    }

    #[test]
    fn specialization_counts_diagonal_winners() {
        let mut m = [[Some(0.5); NUM_WEATHERS]; NUM_WEATHERS];
        for (w, row) in m.iter_mut().enumerate() {
            row[w] = Some(0.6);
        }
        assert_eq!(specialized_experts(&m), 7);
        m[0][1] = Some(0.7);
        m[2][2] = None;
        m[4][3] = None;
        assert_eq!(specialized_experts(&m), 5);
        assert_eq!(specialized_experts(&[]), 0);
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, |x| Ok(x * 2)).unwrap(), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&v, |&x| if x == 20 { Err(crate::Error::Empty("x".into())) } else { Ok(x) }).is_err());
    }

    fn d(x: f64, score: f64) -> Detection {
        Detection { bbox: b(x), score }
    }

    #[test]
    fn ap_examples() {
        let gts = vec![vec![b(0.0), b(10.0)]];
        let exact = vec![vec![d(0.0, 1.0), d(10.0, 1.0)]];
        assert_eq!(average_precision(&exact, &gts, iou_3d, 0.5), Some(1.0));
        assert_eq!(average_precision(&[vec![]], &gts, iou_3d, 0.5), Some(0.0));
        let one = vec![vec![b(0.0)]];
        let hit_then_miss = vec![vec![d(0.0, 0.9), d(20.0, 0.8)]];
        assert_eq!(average_precision(&hit_then_miss, &one, iou_3d, 0.5), Some(1.0));
        let miss_then_hit = vec![vec![d(20.0, 0.9), d(0.0, 0.8)]];
        assert_eq!(average_precision(&miss_then_hit, &one, iou_3d, 0.5), Some(0.5));
        assert_eq!(average_precision(&[vec![d(0.0, 1.0)]], &[vec![]], iou_3d, 0.5), None);
    }

    #[test]
    fn duplicate_detections_match_once() {
        let gts = vec![vec![b(0.0)]];
        let (flags, n) = match_detections(&[vec![d(0.0, 0.9), d(0.1, 0.8)]], &gts, iou_3d, 0.5);
        assert_eq!((flags, n), (vec![true, false], 1));
    }

    #[test]
    fn top_scored_hit_on_missed_gt_never_lowers_ap() {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let mut gts: Vec<Vec<Box3D>> = (0..3).map(|i| (0..2).map(|j| b((i * 30 + j * 10) as f64)).collect()).collect();
            // out of reach of every random detection
            gts[1].push(b(200.0));
            let mut dets: Vec<Vec<Detection>> = (0..3)
                .map(|i| {
                    (0..3)
                        .map(|_| d((i * 30) as f64 + rng.uniform(-2.0, 14.0), rng.uniform(0.0, 0.9)))
                        .collect()
                })
                .collect();
            let before = average_precision(&dets, &gts, iou_3d, 0.3).unwrap();
            dets[1].push(d(200.0, 1.0));
            let after = average_precision(&dets, &gts, iou_3d, 0.3).unwrap();
            assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }

    #[test]
    fn oracle_and_null_detectors() {
        let cfg = SceneConfig::default();
        let frames: Vec<Frame> = (0..7)
            .map(|i| {
                let f = generate_scene(i, &cfg, &mut Rng::new(i)).unwrap();
                crate::weathersim::apply_weather(&f, WeatherClass::ALL[i as usize], &mut Rng::new(100 + i)).unwrap()
            })
            .collect();
        let oracle = evaluate(&frames, |f| {
            let dets = f.gt_boxes.iter().map(|&bbox| Detection { bbox, score: 1.0 }).collect();
            Ok((dets, Some(f.weather.index())))
        })
        .unwrap();
        for r in &oracle.rows {
            assert_eq!(r.total, Some(1.0));
            assert!(r.per_weather.iter().all(|v| *v == Some(1.0)));
        }
        assert_eq!(oracle.confusion.accuracy(), Some(1.0));
        let total: usize = frames.iter().map(|f| f.gt_boxes.len()).sum();
        assert_eq!(oracle.gt_boxes.iter().sum::<usize>(), total);
        let null = evaluate(&frames, |_| Ok((vec![], None))).unwrap();
        for r in &null.rows {
            assert_eq!(r.total, Some(0.0));
        }
        assert_eq!(null.confusion.accuracy(), None);
    }

    #[test]
    fn confusion_accuracy_matches_recount() {
        let mut rng = Rng::new(9);
        let mut m = ConfusionMatrix::default();
        let mut correct = 0;
        for _ in 0..500 {
            let t = rng.below(7) as usize;
            let p = if rng.bernoulli(0.7) { t } else { rng.below(7) as usize };
            correct += (t == p) as usize;
            m.record(t, p);
        }
        assert_eq!(m.accuracy(), Some(correct as f64 / 500.0));
        assert_eq!((0..7).map(|i| m.row_sum(i)).sum::<u64>(), 500);
    }
}
