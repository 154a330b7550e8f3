//! End-to-end metrics over box-text pairs: mean CER over IoU-matched pairs,
//! and CER between whole-page layout-sensitive linearizations.

use crate::detmatch::{match_boxes, Matching};
use crate::geometry::ImageDims;
use crate::span::{boxes_of, GroundedSpan};
use crate::text2d::render_text2d;
use crate::textmetrics::{cer, cer_with, TextMode};

/// Box matching between the two span sets at `threshold`.
pub fn match_spans(preds: &[GroundedSpan], gts: &[GroundedSpan], threshold: f64) -> Matching {
    match_boxes(&boxes_of(preds), &boxes_of(gts), threshold)
}

/// Mean CER over a given matching, with the zero-match conventions.
pub fn mcer_from_matching(preds: &[GroundedSpan], gts: &[GroundedSpan], matching: &Matching) -> f64 {
    if matching.is_empty() {
        return if preds.is_empty() && gts.is_empty() { 0.0 } else { 1.0 };
    }
    let total: f64 = matching
        .pairs
        .iter()
        .map(|&(i, j)| cer(&preds[i].text, &gts[j].text))
        .sum();
    total / matching.len() as f64
}

pub fn mcer_at(preds: &[GroundedSpan], gts: &[GroundedSpan], threshold: f64) -> f64 {
    mcer_from_matching(preds, gts, &match_spans(preds, gts, threshold))
}

/// Stable order by top edge, then left edge.
pub fn e2e_reading_order(spans: &[GroundedSpan]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..spans.len()).collect();
    idx.sort_by_key(|&i| (spans[i].bbox.y1(), spans[i].bbox.x1()));
    idx
}

pub fn reorder(spans: &[GroundedSpan], order: &[usize]) -> Vec<GroundedSpan> {
    order.iter().map(|&i| spans[i].clone()).collect()
}

/// Page-level linearization used for CER_e2e.
pub fn linearize_page(spans: &[GroundedSpan], dims: ImageDims) -> String {
    render_text2d(&reorder(spans, &e2e_reading_order(spans)), dims)
}

pub fn cer_e2e(preds: &[GroundedSpan], gts: &[GroundedSpan], dims: ImageDims) -> f64 {
    cer_with(
        &linearize_page(preds, dims),
        &linearize_page(gts, dims),
        TextMode::Layout,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::textmetrics::levenshtein;
    use crate::textnorm::normalize_2d;
    use proptest::prelude::*;

    fn span(text: &str, x1: i64, y1: i64, x2: i64, y2: i64) -> GroundedSpan {
        GroundedSpan::new(text, BBox::new(x1, y1, x2, y2).unwrap())
    }

    fn dims() -> ImageDims {
        ImageDims::new(500, 500).unwrap()
    }

    #[test]
    fn mcer_edge_cases() {
        assert_eq!(mcer_at(&[], &[], 0.5), 0.0);
        let g = [span("abc", 0, 0, 30, 10)];
        let far = [span("abc", 200, 200, 230, 210)];
        assert_eq!(mcer_at(&far, &g, 0.5), 1.0);
        assert_eq!(mcer_at(&far, &[], 0.5), 1.0);
        assert_eq!(mcer_at(&[], &g, 0.5), 1.0);
        assert_eq!(mcer_at(&g, &g, 0.5), 0.0);
        let empty_pair = [span("", 0, 0, 30, 10)];
        assert_eq!(mcer_at(&empty_pair, &empty_pair, 0.5), 0.0);
    }

    #[test]
    fn mcer_is_an_unweighted_mean() {
        let g = [span("abcd", 0, 0, 40, 10), span("ab", 0, 20, 40, 30)];
        let p = [span("abcx", 0, 0, 40, 10), span("ab", 0, 20, 40, 30)];
        assert_eq!(mcer_at(&p, &g, 0.5), (0.25 + 0.0) / 2.0);
    }

    #[test]
    fn reading_order_examples() {
        let s = [span("b", 0, 50, 10, 60), span("a", 0, 0, 10, 10)];
        assert_eq!(e2e_reading_order(&s), vec![1, 0]);
        let s = [span("r", 50, 0, 60, 10), span("l", 5, 0, 15, 10)];
        assert_eq!(e2e_reading_order(&s), vec![1, 0]);
        let s = [span("x", 5, 0, 15, 10), span("y", 5, 0, 25, 12)];
        assert_eq!(e2e_reading_order(&s), vec![0, 1]);
    }

    #[test]
    fn cer_e2e_examples() {
        let g = [span("first line", 0, 0, 100, 10), span("second", 0, 12, 60, 22)];
        assert_eq!(cer_e2e(&g, &g, dims()), 0.0);
        assert_eq!(cer_e2e(&[], &g, dims()), 1.0);
        assert_eq!(cer_e2e(&[], &[], dims()), 0.0);

        let swapped = [span("second", 0, 0, 100, 10), span("first line", 0, 12, 60, 22)];
        let pa = normalize_2d(&linearize_page(&swapped, dims()));
        let ga = normalize_2d(&linearize_page(&g, dims()));
        let oracle = levenshtein(&pa, &ga) as f64 / pa.chars().count().max(ga.chars().count()) as f64;
        let v = cer_e2e(&swapped, &g, dims());
        assert!(v > 0.0);
        assert_eq!(v, oracle);
    }

    fn arb_spans() -> impl Strategy<Value = Vec<GroundedSpan>> {
        prop::collection::vec(
            (0i64..400, 0i64..400, 5i64..80, 5i64..30, "[a-d]{0,6}")
                .prop_map(|(x, y, w, h, t)| span(&t, x, y, x + w, y + h)),
            0..6,
        )
    }

    proptest! {
        #[test]
        fn mcer_order_invariant(p in arb_spans(), g in arb_spans(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.shuffle(&mut rng);
            g2.shuffle(&mut rng);
            let distinct = |v: &[GroundedSpan]| {
                let set: std::collections::HashSet<_> = v.iter().map(|s| s.bbox).collect();
                set.len() == v.len()
            };
            prop_assume!(distinct(&p) && distinct(&g));
            let a = mcer_at(&p, &g, 0.5);
            let b = mcer_at(&p2, &g2, 0.5);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cer_e2e_self_is_zero(s in arb_spans()) {
            prop_assert_eq!(cer_e2e(&s, &s, dims()), 0.0);
        }

        #[test]
        fn unmatched_gt_text_does_not_matter(p in arb_spans(), g in arb_spans(), t in "[x-z]{0,5}") {
            let m = match_spans(&p, &g, 0.5);
            let matched: std::collections::HashSet<usize> = m.pairs.iter().map(|&(_, j)| j).collect();
            if let Some(j) = (0..g.len()).find(|j| !matched.contains(j)) {
                let mut g2 = g.clone();
                g2[j].text = t;
                prop_assert_eq!(mcer_at(&p, &g2, 0.5), mcer_at(&p, &g, 0.5));
            }
        }

        #[test]
        fn disjoint_alphabet_text_raises_cer_e2e(
            mut g in arb_spans(),
            extra in "[a-d]{1,6}",
            pick in any::<prop::sample::Index>(),
        ) {
            g.push(span(&extra, 420, 420, 480, 440));
            let candidates: Vec<usize> = (0..g.len()).filter(|&i| !g[i].text.is_empty()).collect();
            let k = candidates[pick.index(candidates.len())];
            let mut p = g.clone();
            p[k].text = "XYZW".to_string();
            prop_assert!(cer_e2e(&p, &g, dims()) > cer_e2e(&g, &g, dims()));
        }
    }
}
