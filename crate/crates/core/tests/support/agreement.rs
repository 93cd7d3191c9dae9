//! Implementation-versus-oracle agreement loops. Each panics on the first
//! disagreement.

use rand::Rng;

use super::*;
use wtal_core::autodiff::Graph;
use wtal_core::data::{FuseMode, NmsDecay, Proposal};
use wtal_core::distill::make_pseudo_labels;
use wtal_core::eval::{average_precision, miou, segment_iou, soft_nms, Detection, FramePrediction, GroundTruth};
use wtal_core::fuse::fuse_cas;


pub fn check_pseudo_labels(instances: usize, seed: u64) {
    let mut r = rng(seed);
    // values on the thresholds themselves must come out uncertain
    let levels = [0.0, 0.05, 0.1, 0.2, 0.3, 0.31, 0.9, 1.0];
    for i in 0..instances {
        let (t, c) = (r.random_range(1..7), r.random_range(1..5));
        let cas = random_cas(&mut r, t, c, if i % 2 == 0 { Some(&levels) } else { None });
        let y: Vec<bool> = (0..c).map(|_| r.random_bool(0.5)).collect();
        let yv: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();
        let h = make_pseudo_labels(&cas, &yv, 0.3, 0.1).unwrap();
        assert_eq!(h.values(), oracle_pseudo_labels(&rows_of(&cas.values), &y, 0.3, 0.1).as_slice());
    }
}

pub fn check_topk_mean(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let (t, c) = (r.random_range(1..9), r.random_range(1..4));
        let k = r.random_range(1..=t);
        let x = normal_tensor(&mut r, t, c, 1.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = g.topk_mean(v, k).unwrap();
        let want = oracle_topk_mean(&rows_of(&x), k);
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

pub fn check_segment_iou(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let a = random_span(&mut r, 20);
        let b = random_span(&mut r, 20);
        assert_eq!(segment_iou(a, b), oracle_segment_iou(a, b));
    }
}

pub fn check_soft_nms(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let n = r.random_range(0..8);
        let props: Vec<Proposal> = (0..n)
            .map(|_| {
                let (start, end) = random_span(&mut r, 15);
                Proposal {
                    start,
                    end,
                    category: 0,
                    score: tie_prone_score(&mut r),
                }
            })
            .collect();
        let floor = [1e-3, 0.15][r.random_range(0..2)];
        let got = soft_nms(&props, NmsDecay::Linear, 0.3, floor);
        let want = oracle_soft_nms(&props, 0.3, floor);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_eq!((a.start, a.end), (b.start, b.end));
            assert!((a.score - b.score).abs() <= 1e-10);
        }
    }
}

pub fn check_average_precision(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let videos = r.random_range(1..3);
        let gts: Vec<OracleGt> = (0..r.random_range(1..4))
            .map(|_| {
                let (s, e) = random_span(&mut r, 12);
                (r.random_range(0..videos), s, e)
            })
            .collect();
        let dets: Vec<OracleDet> = (0..r.random_range(0..6))
            .map(|_| {
                let (s, e) = random_span(&mut r, 12);
                (r.random_range(0..videos), s, e, tie_prone_score(&mut r))
            })
            .collect();
        let thr = [0.1, 0.3, 0.5, 0.7][r.random_range(0..4)];
        let d: Vec<Detection> = dets
            .iter()
            .map(|&(video, start, end, score)| Detection {
                video,
                proposal: Proposal {
                    start,
                    end,
                    category: 0,
                    score,
                },
            })
            .collect();
        let g: Vec<GroundTruth> = gts
            .iter()
            .map(|&(video, start, end)| GroundTruth {
                video,
                start,
                end,
                category: 0,
            })
            .collect();
        let got = average_precision(&d, &g, thr);
        let want = oracle_average_precision(&dets, &gts, thr);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

pub fn check_miou(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let c = r.random_range(1..4);
        let records: Vec<_> = (0..r.random_range(1..4))
            .map(|i| {
                let t = r.random_range(1..10);
                random_record(&mut r, i, t, c)
            })
            .collect();
        let preds: Vec<Vec<Vec<bool>>> = records
            .iter()
            .map(|rec| (0..rec.num_frames).map(|_| (0..c).map(|_| r.random_bool(0.3)).collect()).collect())
            .collect();
        let flat: Vec<Vec<bool>> = preds.iter().map(|g| g.iter().flatten().copied().collect()).collect();
        let items: Vec<_> = records
            .iter()
            .zip(&flat)
            .map(|(record, fg)| FramePrediction { record, foreground: fg })
            .collect();
        let got = miou(&items, c).unwrap();
        let truths: Vec<_> = records.iter().map(|rec| truth_grid(rec, c)).collect();
        let (fore, back) = oracle_miou(&preds, &truths, c);
        assert!((got.fore - fore).abs() <= 1e-10 && (got.back - back).abs() <= 1e-10);
    }
}

pub fn check_fuse_cas(instances: usize, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..instances {
        let (t, c) = (r.random_range(1..6), r.random_range(1..4));
        let a = random_cas(&mut r, t, c, None);
        let b = random_cas(&mut r, t, c, None);
        let (mode, w) = if r.random_bool(0.5) {
            (FuseMode::Avg, 0.5)
        } else {
            (FuseMode::Weight, r.random_range(0.0..=1.0))
        };
        let got = fuse_cas(&a, &b, mode, w).unwrap();
        let want = oracle_fuse(a.values.data(), b.values.data(), w);
        for (x, y) in got.values.data().iter().zip(&want) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}
