//! Axis-aligned box arithmetic and the center-focus (CF) match predicate.
//!
//! Boxes are `(x, y, w, h)` in continuous pixel coordinates with the origin at
//! the image's top-left corner. IoU is computed on geometric area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BBox::new(raw.x, raw.y, raw.w, raw.h)
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "box ({x}, {y}, {w}, {h}) has non-finite fields"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "box ({x}, {y}, {w}, {h}) must have positive width and height"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from its left/top/right/bottom edges.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        Self::new(left, top, right - left, bottom - top)
    }

    /// Builds a box of the given size centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area measured from the edge coordinates. Used by [`iou`] so that the
    /// intersection of a box with itself equals its area bit for bit.
    fn extent_area(&self) -> f64 {
        (self.right() - self.x) * (self.bottom() - self.y)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` when nothing
    /// of positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        if self.within(width, height) {
            return Some(*self);
        }
        let left = self.x.clamp(0.0, width);
        let top = self.y.clamp(0.0, height);
        let right = self.right().clamp(0.0, width);
        let bottom = self.bottom().clamp(0.0, height);
        BBox::from_edges(left, top, right, bottom).ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, and exactly 1 for
/// identical boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.extent_area() + b.extent_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfParams {
    /// Matches need IoU strictly above this value.
    pub iou_floor: f64,
    /// Whether a center lying exactly on the proposal edge counts as inside.
    pub boundary_inclusive: bool,
}

impl Default for CfParams {
    fn default() -> Self {
        Self {
            iou_floor: 0.1,
            boundary_inclusive: true,
        }
    }
}

impl CfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.iou_floor) {
            return Err(Error::Config(format!(
                "CF iou_floor must lie in [0, 1), got {}",
                self.iou_floor
            )));
        }
        Ok(())
    }
}

pub fn contains_center(proposal: &BBox, gt: &BBox, params: &CfParams) -> bool {
    let (cx, cy) = gt.center();
    if params.boundary_inclusive {
        cx >= proposal.x && cx <= proposal.right() && cy >= proposal.y && cy <= proposal.bottom()
    } else {
        cx > proposal.x && cx < proposal.right() && cy > proposal.y && cy < proposal.bottom()
    }
}

/// Center-focus match: IoU above the floor and the proposal covers the
/// ground-truth center.
pub fn cf_match(proposal: &BBox, gt: &BBox, params: &CfParams) -> bool {
    contains_center(proposal, gt, params) && iou(proposal, gt) > params.iou_floor
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Counts unit cells covered by each box on an integer grid.
    fn raster_iou(a: &BBox, bb: &BBox) -> f64 {
        let (x0, y0) = (a.x.min(bb.x) as i64, a.y.min(bb.y) as i64);
        let (x1, y1) = (a.right().max(bb.right()) as i64, a.bottom().max(bb.bottom()) as i64);
        let inside = |r: &BBox, px: i64, py: i64| {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            cx > r.x && cx < r.right() && cy > r.y && cy < r.bottom()
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for py in y0..y1 {
            for px in x0..x1 {
                let (ia, ib) = (inside(a, px, py), inside(bb, px, py));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn area_examples() {
        assert_eq!(b(0.0, 0.0, 10.0, 10.0).area(), 100.0);
        assert_eq!(b(5.0, 5.0, 1.0, 1.0).area(), 1.0);
        assert_eq!(b(0.0, 0.0, 3.0, 7.0).area(), 21.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(100.0, 100.0, 10.0, 10.0)), 0.0);
        // rasterized oracle first, then the analytic value
        let c = b(5.0, 5.0, 10.0, 10.0);
        let oracle = raster_iou(&a, &c);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&a, &c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(10.0, 0.0, 5.0, 10.0)), 0.0);
    }

    #[test]
    fn contains_center_examples() {
        let p = CfParams::default();
        let gt = b(0.0, 0.0, 10.0, 10.0);
        assert!(contains_center(&gt, &gt, &p));
        assert!(!contains_center(&b(6.0, 0.0, 10.0, 10.0), &gt, &p));
        assert!(contains_center(&b(5.0, 5.0, 10.0, 10.0), &gt, &p));
        let strict = CfParams {
            boundary_inclusive: false,
            ..p
        };
        assert!(!contains_center(&b(5.0, 5.0, 10.0, 10.0), &gt, &strict));
    }

    #[test]
    fn cf_match_examples() {
        let p = CfParams::default();
        let gt = b(0.0, 0.0, 10.0, 10.0);
        assert!(cf_match(&gt, &gt, &p));
        assert!(cf_match(&b(5.0, 5.0, 10.0, 10.0), &gt, &p));
        let shifted = b(6.0, 0.0, 10.0, 10.0);
        assert!((iou(&shifted, &gt) - 0.25).abs() < 1e-12);
        assert!(!cf_match(&shifted, &gt, &p));
    }

    #[test]
    fn cf_floor_is_strict() {
        // IoU of exactly 0.1 is not enough.
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let p = CfParams::default();
        let big = BBox::centered(5.0, 5.0, 10.0 * 10f64.sqrt(), 10.0 * 10f64.sqrt()).unwrap();
        let v = iou(&big, &gt);
        let at_floor = CfParams { iou_floor: v, ..p };
        assert!(!cf_match(&big, &gt, &at_floor));
    }

    #[test]
    fn clamp_to_image() {
        let c = b(-5.0, 2.0, 10.0, 10.0).clamp_to(8.0, 8.0).unwrap();
        assert_eq!((c.x(), c.y(), c.w(), c.h()), (0.0, 2.0, 5.0, 6.0));
        assert!(b(20.0, 20.0, 5.0, 5.0).clamp_to(8.0, 8.0).is_none());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-200.0..200.0f64, -200.0..200.0f64, 0.5..120.0f64, 0.5..120.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    fn arb_int_box() -> impl Strategy<Value = BBox> {
        (0u32..60, 0u32..60, 1u32..40, 1u32..40)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), bb in arb_box()) {
            let v = iou(&a, &bb);
            prop_assert_eq!(v, iou(&bb, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 0.0, a.intersection_area(&bb) == 0.0);
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert!(cf_match(&a, &a, &CfParams::default()));
        }

        #[test]
        fn iou_matches_raster(a in arb_int_box(), bb in arb_int_box()) {
            prop_assert!((iou(&a, &bb) - raster_iou(&a, &bb)).abs() < 1e-6);
        }

        #[test]
        fn cf_implies_floor(a in arb_box(), bb in arb_box()) {
            let p = CfParams::default();
            if cf_match(&a, &bb, &p) {
                prop_assert!(iou(&a, &bb) > p.iou_floor);
            }
        }

        #[test]
        fn translation_invariant(
            a in arb_int_box(), bb in arb_int_box(),
            dx in -100i32..100, dy in -100i32..100,
        ) {
            let p = CfParams::default();
            let (ta, tb) = (
                a.translate(dx as f64, dy as f64).unwrap(),
                bb.translate(dx as f64, dy as f64).unwrap(),
            );
            prop_assert!((iou(&a, &bb) - iou(&ta, &tb)).abs() < 1e-12);
            prop_assert_eq!(contains_center(&a, &bb, &p), contains_center(&ta, &tb, &p));
            prop_assert_eq!(cf_match(&a, &bb, &p), cf_match(&ta, &tb, &p));
        }
    }
}
