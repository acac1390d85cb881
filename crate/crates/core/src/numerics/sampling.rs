//! Bilinear sampling with the align-corners-false grid convention and border
//! clamping.

use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// The four taps of one bilinear sample, plus what is needed to differentiate
/// with respect to the sample location.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    width: usize,
    x_live: bool,
    y_live: bool,
}

/// Locates normalized point `(px, py)` on an `height × width` grid whose cell
/// centers sit at `((j + 0.5) / width, (i + 0.5) / height)`.
pub fn bilinear_weights(px: f64, py: f64, height: usize, width: usize) -> BilinearTap {
    let (x0, x1, fx, x_live) = axis(px, width);
    let (y0, y1, fy, y_live) = axis(py, height);
    BilinearTap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        width,
        x_live,
        y_live,
    }
}

fn axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
    let raw = p * n as f64 - 0.5;
    let hi = (n - 1) as f64;
    let (c, live) = if raw < 0.0 {
        (0.0, false)
    } else if raw > hi {
        (hi, false)
    } else {
        (raw, true)
    };
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, live)
}

impl BilinearTap {
    fn corners(&self) -> [(usize, f64); 4] {
        let w = self.width;
        [
            (self.y0 * w + self.x0, (1.0 - self.fy) * (1.0 - self.fx)),
            (self.y0 * w + self.x1, (1.0 - self.fy) * self.fx),
            (self.y1 * w + self.x0, self.fy * (1.0 - self.fx)),
            (self.y1 * w + self.x1, self.fy * self.fx),
        ]
    }

    /// `out[ch] += scale * sample[ch]` where rows of `values` have width `d`
    /// and the map starts at row `offset`.
    pub(crate) fn accumulate(
        &self,
        values: &[f64],
        d: usize,
        offset: usize,
        ch: Range<usize>,
        scale: f64,
        out: &mut [f64],
    ) {
        for (cell, w) in self.corners() {
            let f = w * scale;
            if f == 0.0 {
                continue;
            }
            let row = &values[(offset + cell) * d..(offset + cell + 1) * d];
            for c in ch.clone() {
                out[c] += f * row[c];
            }
        }
    }

    /// Adjoint of [`accumulate`](Self::accumulate) with respect to `values`.
    pub(crate) fn scatter(
        &self,
        g: &[f64],
        d: usize,
        offset: usize,
        ch: Range<usize>,
        scale: f64,
        gvalues: &mut [f64],
    ) {
        for (cell, w) in self.corners() {
            let f = w * scale;
            if f == 0.0 {
                continue;
            }
            let row = &mut gvalues[(offset + cell) * d..(offset + cell + 1) * d];
            for c in ch.clone() {
                row[c] += f * g[c];
            }
        }
    }

    /// `Σ_ch g[ch] * sample[ch]`.
    pub(crate) fn dot(&self, values: &[f64], d: usize, offset: usize, ch: Range<usize>, g: &[f64]) -> f64 {
        let mut s = 0.0;
        for (cell, w) in self.corners() {
            if w == 0.0 {
                continue;
            }
            let row = &values[(offset + cell) * d..(offset + cell + 1) * d];
            let part: f64 = ch.clone().map(|c| g[c] * row[c]).sum();
            s += w * part;
        }
        s
    }

    /// Gradient of `Σ_ch g[ch] * sample[ch]` with respect to the normalized point.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn grad_point(
        &self,
        values: &[f64],
        d: usize,
        offset: usize,
        ch: Range<usize>,
        g: &[f64],
        height: usize,
        width: usize,
    ) -> (f64, f64) {
        let w = self.width;
        let proj = |y: usize, x: usize| -> f64 {
            let row = &values[(offset + y * w + x) * d..(offset + y * w + x + 1) * d];
            ch.clone().map(|c| g[c] * row[c]).sum()
        };
        let v00 = proj(self.y0, self.x0);
        let v01 = proj(self.y0, self.x1);
        let v10 = proj(self.y1, self.x0);
        let v11 = proj(self.y1, self.x1);
        let dx = if self.x_live {
            ((1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)) * width as f64
        } else {
            0.0
        };
        let dy = if self.y_live {
            ((1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)) * height as f64
        } else {
            0.0
        };
        (dx, dy)
    }
}

/// Samples an `[h, w, d]` feature map at normalized point `(x, y)`.
pub fn bilinear_sample(feat: &Tensor, point: (f64, f64)) -> Result<Tensor> {
    if feat.rank() != 3 {
        return Err(dim_err!("bilinear_sample expects [h, w, d], got {:?}", feat.shape()));
    }
    let (h, w, d) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let tap = bilinear_weights(point.0, point.1, h, w);
    let mut out = vec![0.0; d];
    tap.accumulate(feat.values(), d, 0, 0..d, 1.0, &mut out);
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, d: usize) -> Tensor {
        let vals = (0..h * w * d).map(|i| ((i * 7 % 13) as f64) * 0.3 - 1.0).collect();
        Tensor::new(vec![h, w, d], vals).unwrap()
    }

    #[test]
    fn exact_on_cell_centers() {
        let f = map(4, 5, 3);
        for i in 0..4 {
            for j in 0..5 {
                let p = ((j as f64 + 0.5) / 5.0, (i as f64 + 0.5) / 4.0);
                let s = bilinear_sample(&f, p).unwrap();
                let want = &f.values()[(i * 5 + j) * 3..(i * 5 + j + 1) * 3];
                for (a, b) in s.values().iter().zip(want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn equidistant_point_is_mean_of_four_cells() {
        let f = map(4, 4, 2);
        // halfway between cell centers (1,1),(1,2),(2,1),(2,2)
        let s = bilinear_sample(&f, (0.5, 0.5)).unwrap();
        for c in 0..2 {
            let cells = [(1, 1), (1, 2), (2, 1), (2, 2)];
            let mean: f64 = cells.iter().map(|(i, j)| f.values()[(i * 4 + j) * 2 + c]).sum::<f64>() / 4.0;
            assert!((s.values()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn random_points_match_direct_formula() {
        let f = map(6, 7, 4);
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let (px, py) = (next(), next());
            // independent formula: continuous pixel coordinates, clamp, floor
            let x = (px * 7.0 - 0.5).clamp(0.0, 6.0);
            let y = (py * 6.0 - 0.5).clamp(0.0, 5.0);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(6), (y0 + 1).min(5));
            let (ax, ay) = (x - x0 as f64, y - y0 as f64);
            let s = bilinear_sample(&f, (px, py)).unwrap();
            for c in 0..4 {
                let v = |i: usize, j: usize| f.values()[(i * 7 + j) * 4 + c];
                let want = (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1))
                    + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1));
                assert!((s.values()[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_points_clamp_to_border() {
        let f = map(3, 3, 1);
        let s = bilinear_sample(&f, (-2.0, 5.0)).unwrap();
        assert!((s.values()[0] - f.values()[6]).abs() < 1e-15);
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let f = map(5, 5, 2);
        let p = (0.5, 0.3); // x at a cell center boundary crossing
        let a = bilinear_sample(&f, p).unwrap();
        let b = bilinear_sample(&f, (p.0 + 1e-9, p.1 + 1e-9)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
