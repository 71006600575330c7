//! Greedy matching against exhaustive search over every partial injection of
//! detections into ground truths.

use audit_core::eval::{iou, match_detections, ScoredBox};
use audit_core::protocol::BoundingBox;
use proptest::prelude::*;

const THR: f64 = 0.5;

/// Per detection in confidence order: (matched, iou, -gt index). Comparing
/// these sequences lexicographically ranks assignments.
type Key = Vec<(bool, f64, i64)>;

fn key(order: &[usize], assign: &[Option<usize>], dets: &[ScoredBox], gts: &[BoundingBox]) -> Key {
    order
        .iter()
        .map(|&d| match assign[d] {
            Some(g) => (true, iou(&dets[d].bbox, &gts[g]), -(g as i64)),
            None => (false, 0.0, 0),
        })
        .collect()
}

fn better(a: &Key, b: &Key) -> bool {
    for (x, y) in a.iter().zip(b) {
        let c = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2));
        if c.is_ne() {
            return c.is_gt();
        }
    }
    false
}

fn search(
    d: usize,
    assign: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    ctx: (&[usize], &[ScoredBox], &[BoundingBox]),
    best: &mut Option<(Key, Vec<Option<usize>>)>,
) {
    let (order, dets, gts) = ctx;
    if d == dets.len() {
        let k = key(order, assign, dets, gts);
        if best.as_ref().is_none_or(|(bk, _)| better(&k, bk)) {
            *best = Some((k, assign.clone()));
        }
        return;
    }
    assign[d] = None;
    search(d + 1, assign, used, ctx, best);
    for g in 0..gts.len() {
        if !used[g] && iou(&dets[d].bbox, &gts[g]) >= THR {
            used[g] = true;
            assign[d] = Some(g);
            search(d + 1, assign, used, ctx, best);
            used[g] = false;
        }
    }
    assign[d] = None;
}

fn grid_box() -> impl Strategy<Value = BoundingBox> {
    (0..5u8, 0..5u8, 1..4u8, 1..4u8)
        .prop_map(|(x, y, w, h)| BoundingBox::new(f64::from(x) * 4.0, f64::from(y) * 4.0, f64::from(w) * 4.0, f64::from(h) * 4.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn greedy_is_the_lexicographic_maximum(
        dets in prop::collection::vec((grid_box(), 1..4u8), 0..=5),
        gts in prop::collection::vec(grid_box(), 0..=5),
    ) {
        let dets: Vec<ScoredBox> = dets
            .into_iter()
            .map(|(b, c)| ScoredBox::new(b.x, b.y, b.w, b.h, f64::from(c) / 4.0))
            .collect();
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

        let mut best = None;
        search(0, &mut vec![None; dets.len()], &mut vec![false; gts.len()], (&order, &dets, &gts), &mut best);
        let (_, want) = best.unwrap();

        let got = match_detections(&dets, &gts, THR);
        for d in 0..dets.len() {
            prop_assert_eq!(got.gt_for(d), want[d], "detection {}", d);
        }
    }
}
