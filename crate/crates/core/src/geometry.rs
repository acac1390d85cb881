//! Box algebra: coordinate conversion, IoU, GIoU and the sinusoidal box
//! encoding used by the visual prompt encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A normalized box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)`.
pub type Xyxy = [f64; 4];

impl BBox {
    /// Validated constructor: center in `[0,1]`, extents in `(0,1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_c = |v: f64| (0.0..=1.0).contains(&v);
        let ok_e = |v: f64| v > 0.0 && v <= 1.0;
        if ok_c(self.cx) && ok_c(self.cy) && ok_e(self.w) && ok_e(self.h) {
            Ok(())
        } else {
            Err(Error::Validation(format!("box {self:?} outside the unit frame")))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }

    pub fn to_xyxy(&self) -> Xyxy {
        cxcywh_to_xyxy(self.to_array())
    }

    pub fn from_xyxy(c: Xyxy) -> Self {
        Self::from_array(xyxy_to_cxcywh(c))
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> Xyxy {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(c: Xyxy) -> [f64; 4] {
    [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1]]
}

fn area(c: &Xyxy) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

fn intersection(a: &Xyxy, b: &Xyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

fn enclosing(a: &Xyxy, b: &Xyxy) -> f64 {
    (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]))
}

pub fn iou_xyxy(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `IoU − (enclosing − union) / enclosing`.
pub fn giou_xyxy(a: &Xyxy, b: &Xyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let enc = enclosing(a, b);
    if enc <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    // enc ≥ union holds exactly; clamp the rounding of nested boxes
    inter / union - (enc - union).max(0.0) / enc
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_xyxy(&a.to_xyxy(), &b.to_xyxy())
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_xyxy(&a.to_xyxy(), &b.to_xyxy())
}

/// GIoU of center-form `p` against constant `t`, and its gradient with
/// respect to `p`. Ties in min/max take the branch of `p`, which gives the
/// one-sided subgradient at coincident edges.
pub fn giou_cxcywh_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let pc = cxcywh_to_xyxy(p);
    let tc = cxcywh_to_xyxy(t);
    // gradients w.r.t. (x1, y1, x2, y2) of p
    let mut d_inter = [0.0; 4];
    let mut d_enc = [0.0; 4];

    let (lo_x, lo_x_p) = if pc[0] >= tc[0] { (pc[0], true) } else { (tc[0], false) };
    let (hi_x, hi_x_p) = if pc[2] <= tc[2] { (pc[2], true) } else { (tc[2], false) };
    let (lo_y, lo_y_p) = if pc[1] >= tc[1] { (pc[1], true) } else { (tc[1], false) };
    let (hi_y, hi_y_p) = if pc[3] <= tc[3] { (pc[3], true) } else { (tc[3], false) };
    let iw = hi_x - lo_x;
    let ih = hi_y - lo_y;
    let inter = if iw > 0.0 && ih > 0.0 {
        if lo_x_p {
            d_inter[0] = -ih;
        }
        if hi_x_p {
            d_inter[2] = ih;
        }
        if lo_y_p {
            d_inter[1] = -iw;
        }
        if hi_y_p {
            d_inter[3] = iw;
        }
        iw * ih
    } else {
        0.0
    };

    let (ex_lo, ex_lo_p) = if pc[0] <= tc[0] { (pc[0], true) } else { (tc[0], false) };
    let (ex_hi, ex_hi_p) = if pc[2] >= tc[2] { (pc[2], true) } else { (tc[2], false) };
    let (ey_lo, ey_lo_p) = if pc[1] <= tc[1] { (pc[1], true) } else { (tc[1], false) };
    let (ey_hi, ey_hi_p) = if pc[3] >= tc[3] { (pc[3], true) } else { (tc[3], false) };
    let ew = ex_hi - ex_lo;
    let eh = ey_hi - ey_lo;
    let enc = ew * eh;
    if ex_lo_p {
        d_enc[0] = -eh;
    }
    if ex_hi_p {
        d_enc[2] = eh;
    }
    if ey_lo_p {
        d_enc[1] = -ew;
    }
    if ey_hi_p {
        d_enc[3] = ew;
    }

    let pw = pc[2] - pc[0];
    let ph = pc[3] - pc[1];
    let ap = pw * ph;
    let d_ap = [-ph, -pw, ph, pw];
    let at = area(&tc);
    let union = ap + at - inter;
    let g = inter / union - (enc - union).max(0.0) / enc;

    // g(I, U, C) with U = Ap + At − I
    let dg_di = 1.0 / union;
    let dg_du = -inter / (union * union) + 1.0 / enc;
    let dg_dc = -union / (enc * enc);
    let mut dx = [0.0; 4];
    for k in 0..4 {
        dx[k] = dg_di * d_inter[k] + dg_du * (d_ap[k] - d_inter[k]) + dg_dc * d_enc[k];
    }
    // x1 = cx − w/2, x2 = cx + w/2
    let grad = [
        dx[0] + dx[2],
        dx[1] + dx[3],
        (dx[2] - dx[0]) / 2.0,
        (dx[3] - dx[1]) / 2.0,
    ];
    (g, grad)
}

/// Sinusoidal encoding of `(cx, cy, w, h)`: each coordinate fills `d/4`
/// entries of interleaved `sin(2πx / 10000^(2j/m)), cos(...)` pairs.
pub fn box_pe(b: &BBox, d: usize) -> Result<Tensor> {
    if d == 0 || d % 8 != 0 {
        return Err(Error::Config(format!("box encoding width {d} is not a multiple of 8")));
    }
    let m = d / 4;
    let mut out = Vec::with_capacity(d);
    for x in b.to_array() {
        out.extend(sincos_block(x, m));
    }
    Ok(Tensor::vector(out))
}

/// One coordinate's `m`-wide sin/cos block.
pub fn sincos_block(x: f64, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m);
    for j in 0..m / 2 {
        let freq = 10000f64.powf(2.0 * j as f64 / m as f64);
        let a = 2.0 * std::f64::consts::PI * x / freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conversions() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(b.to_xyxy(), [0.0, 0.0, 1.0, 1.0]);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let c = b.to_xyxy();
        for (x, y) in c.iter().zip([0.4, 0.4, 0.6, 0.6]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn iou_fixtures() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 1.0, 3.0, 3.0];
        assert!((iou_xyxy(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(iou_xyxy(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou_xyxy(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_fixtures() {
        assert!((giou_xyxy(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((giou_xyxy(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 2.0, 2.0]) + 0.5).abs() < 1e-12);
        let want = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou_xyxy(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - want).abs() < 1e-12);
        assert!((want + 5.0 / 63.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(1.2, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn giou_gradient_matches_differences() {
        let cases = [
            ([0.4, 0.52, 0.3, 0.2], [0.5, 0.45, 0.2, 0.3]),
            ([0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]), // disjoint
            ([0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.1, 0.1]), // contains target
        ];
        for (p, t) in cases {
            let (_, g) = giou_cxcywh_with_grad(p, t);
            for k in 0..4 {
                let eps = 1e-6;
                let mut up = p;
                let mut dn = p;
                up[k] += eps;
                dn[k] -= eps;
                let num = (giou_cxcywh_with_grad(up, t).0 - giou_cxcywh_with_grad(dn, t).0) / (2.0 * eps);
                assert!((num - g[k]).abs() < 1e-6, "coord {k}: {num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn box_pe_blocks() {
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let pe = box_pe(&b, 64).unwrap();
        let m = 16;
        // independent evaluation
        for (blk, x) in [0.5f64, 0.5, 0.5, 0.5].iter().enumerate() {
            for j in 0..m / 2 {
                let a = 2.0 * std::f64::consts::PI * x / 10000f64.powf((2 * j) as f64 / m as f64);
                assert!((pe.values()[blk * m + 2 * j] - a.sin()).abs() < 1e-12);
                assert!((pe.values()[blk * m + 2 * j + 1] - a.cos()).abs() < 1e-12);
            }
            let norm: f64 = pe.values()[blk * m..(blk + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - (m as f64 / 2.0).sqrt()).abs() < 1e-12);
        }
        let zero = sincos_block(0.0, 8);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(box_pe(&b, 12).is_err());
    }

    #[test]
    fn box_pe_injective_on_grid() {
        // distinct boxes on a 0.01 grid give distinct encodings
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for i in 1..=10 {
            for j in 1..=10 {
                let b = BBox::new(i as f64 * 0.01, 0.5, j as f64 * 0.01, 0.3).unwrap();
                let pe = box_pe(&b, 32).unwrap().into_values();
                for other in &seen {
                    let dist: f64 = other.iter().zip(&pe).map(|(a, b)| (a - b).abs()).sum();
                    assert!(dist > 1e-9);
                }
                seen.push(pe);
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn giou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            let i = iou(&a, &b);
            prop_assert!(g <= i + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&i));
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
            prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn xyxy_round_trip(a in arb_box()) {
            let back = BBox::from_xyxy(a.to_xyxy());
            for (x, y) in back.to_array().iter().zip(a.to_array()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
