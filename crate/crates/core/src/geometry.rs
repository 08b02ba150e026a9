//! Axis-aligned box arithmetic: IoU, the ltrb location parameterization,
//! centerness and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in pixel coordinates, origin top-left.
///
/// Serialized as a `[x0, y0, x1, y1]` array. Zero-area boxes are valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// True when `(x, y)` lies in the closed box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Clip to `[0, width] x [0, height]`, keeping the box valid.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x0.clamp(0.0, width);
        let y0 = self.y0.clamp(0.0, height);
        let x1 = self.x1.clamp(0.0, width).max(x0);
        let y1 = self.y1.clamp(0.0, height).max(y0);
        BBox { x0, y0, x1, y1 }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Distances from a location to the four sides of a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtrbTargets {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl LtrbTargets {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        LtrbTargets { l, t, r, b }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        LtrbTargets::new(v[0], v[1], v[2], v[3])
    }
}

/// Encode `bbox` relative to `loc`. The caller guarantees `loc` lies inside the box.
pub fn ltrb_encode(loc: (f64, f64), bbox: &BBox) -> LtrbTargets {
    let (x, y) = loc;
    LtrbTargets {
        l: x - bbox.x0,
        t: y - bbox.y0,
        r: bbox.x1 - x,
        b: bbox.y1 - y,
    }
}

pub fn ltrb_decode(loc: (f64, f64), t: &LtrbTargets) -> BBox {
    let (x, y) = loc;
    BBox::new(x - t.l, y - t.t, x + t.r, y + t.b)
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`, 0 on a degenerate side pair.
pub fn centerness_target(t: &LtrbTargets) -> f64 {
    let lr_max = t.l.max(t.r);
    let tb_max = t.t.max(t.b);
    if lr_max <= 0.0 || tb_max <= 0.0 {
        return 0.0;
    }
    let lr = t.l.min(t.r).max(0.0) / lr_max;
    let tb = t.t.min(t.b).max(0.0) / tb_max;
    (lr * tb).sqrt()
}

/// Greedy NMS. Returns kept indices ordered by descending score; equal
/// scores are visited in ascending index order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)), 0.0);
        // intersection 1, union 4 + 4 - 1
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_zero_area_is_zero() {
        let z = b(1., 1., 1., 1.);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &b(0., 0., 2., 2.)), 0.0);
    }

    #[test]
    fn ltrb_examples() {
        let t = ltrb_encode((5., 5.), &b(2., 3., 10., 9.));
        assert_eq!(t, LtrbTargets::new(3., 2., 5., 4.));
        assert_eq!(ltrb_encode((1., 1.), &b(0., 0., 2., 2.)), LtrbTargets::new(1., 1., 1., 1.));
        assert_eq!(ltrb_decode((5., 5.), &LtrbTargets::new(3., 2., 5., 4.)), b(2., 3., 10., 9.));
        let z = ltrb_decode((0., 0.), &LtrbTargets::new(0., 0., 0., 0.));
        assert_eq!(z.area(), 0.0);
        assert_eq!(z, b(0., 0., 0., 0.));
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(&LtrbTargets::new(1., 1., 1., 1.)), 1.0);
        let c = centerness_target(&LtrbTargets::new(3., 2., 5., 4.));
        assert!((c - (0.6f64 * 0.5).sqrt()).abs() < 1e-15);
        assert!((c - 0.5477).abs() < 1e-4);
        assert_eq!(centerness_target(&LtrbTargets::new(0., 5., 10., 5.)), 0.0);
        assert_eq!(centerness_target(&LtrbTargets::new(0., 0., 0., 0.)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[b(0., 0., 1., 1.)], &[0.3], 0.5), vec![0]);
        let same = [b(0., 0., 4., 4.), b(0., 0., 4., 4.)];
        assert_eq!(nms(&same, &[0.9, 0.8], 0.5), vec![0]);
        assert_eq!(nms(&same, &[0.8, 0.9], 0.5), vec![1]);
        // equal scores: lower index wins
        assert_eq!(nms(&same, &[0.5, 0.5], 0.5), vec![0]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    /// Plain transcription of greedy suppression: repeatedly take the best
    /// remaining box and drop everything overlapping it.
    fn brute_force_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut keep = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                    best = i;
                }
            }
            keep.push(best);
            alive.retain(|&i| i != best && iou(&boxes[best], &boxes[i]) <= thr);
        }
        keep
    }

    #[test]
    fn nms_chain_matches_brute_force() {
        // five boxes, each overlapping its neighbour
        let boxes: Vec<BBox> = (0..5).map(|i| b(i as f64 * 3., 0., i as f64 * 3. + 5., 5.)).collect();
        let scores = [0.5, 0.9, 0.4, 0.8, 0.7];
        for thr in [0.0, 0.1, 0.25, 0.5, 1.0] {
            assert_eq!(nms(&boxes, &scores, thr), brute_force_nms(&boxes, &scores, thr), "thr {thr}");
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn components(boxes: &[BBox]) -> usize {
        let n = boxes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for i in 0..n {
            for j in i + 1..n {
                if iou(&boxes[i], &boxes[j]) > 0.0 {
                    let (a, c) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = c;
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ltrb_round_trip(bx in arb_box(), fx in 0.01..0.99f64, fy in 0.01..0.99f64) {
            let loc = (bx.x0 + fx * bx.width(), bx.y0 + fy * bx.height());
            let back = ltrb_decode(loc, &ltrb_encode(loc, &bx));
            prop_assert!((back.x0 - bx.x0).abs() < 1e-9 && (back.y0 - bx.y0).abs() < 1e-9);
            prop_assert!((back.x1 - bx.x1).abs() < 1e-9 && (back.y1 - bx.y1).abs() < 1e-9);
        }

        #[test]
        fn centerness_in_unit_interval(l in 0.01..20.0f64, t in 0.01..20.0f64, r in 0.01..20.0f64, bb in 0.01..20.0f64) {
            let c = centerness_target(&LtrbTargets::new(l, t, r, bb));
            prop_assert!((0.0..=1.0).contains(&c));
            if (c - 1.0).abs() < 1e-15 {
                prop_assert!((l - r).abs() < 1e-9 && (t - bb).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_threshold_extremes(boxes in proptest::collection::vec(arb_box(), 1..8),
                                  seed in proptest::collection::vec(0.0..1.0f64, 8)) {
            let scores: Vec<f64> = seed[..boxes.len()].to_vec();
            prop_assert_eq!(nms(&boxes, &scores, 1.0).len(), boxes.len());
            prop_assert_eq!(nms(&boxes, &scores, 0.5), brute_force_nms(&boxes, &scores, 0.5));
            // thr 0 keeps at least one box per overlap component, and never two overlapping
            let kept = nms(&boxes, &scores, 0.0);
            for (i, &a) in kept.iter().enumerate() {
                for &c in &kept[i + 1..] {
                    prop_assert_eq!(iou(&boxes[a], &boxes[c]), 0.0);
                }
            }
            prop_assert!(kept.len() >= components(&boxes));
            prop_assert_eq!(kept, brute_force_nms(&boxes, &scores, 0.0));
        }
    }
}
