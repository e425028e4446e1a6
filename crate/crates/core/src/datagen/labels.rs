use serde::{Deserialize, Serialize};

use super::BBox;
use crate::numerics::Tensor;
use crate::tca::Cell;

/// Mapping between search-crop pixels and the response grid. Cell `(r, c)`
/// is anchored at pixel `(c * stride, r * stride)`; a box center decodes as
/// `(cell + offset) * stride` with offsets in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub search_size: usize,
    pub grid: usize,
    /// Heatmap sigma in cells per cell of `sqrt(w h)`.
    pub sigma_factor: f64,
    pub min_sigma: f64,
}

impl Default for HeadGeometry {
    fn default() -> Self {
        Self {
            search_size: 64,
            grid: 8,
            sigma_factor: 0.5,
            min_sigma: 0.5,
        }
    }
}

impl HeadGeometry {
    pub fn stride(&self) -> f64 {
        self.search_size as f64 / self.grid as f64
    }

    pub fn sigma(&self, b: &BBox) -> f64 {
        (self.sigma_factor * b.area().sqrt() / self.stride()).max(self.min_sigma)
    }

    /// Cell containing the box center and the sub-cell residual.
    pub fn locate(&self, b: &BBox) -> (Cell, [f64; 2]) {
        let s = self.stride();
        let last = (self.grid - 1) as f64;
        let gx = (b.cx / s).clamp(0.0, last + 1.0 - 1e-9);
        let gy = (b.cy / s).clamp(0.0, last + 1.0 - 1e-9);
        let (col, row) = (gx.floor(), gy.floor());
        (
            Cell {
                row: row as usize,
                col: col as usize,
            },
            [gx - col, gy - row],
        )
    }

    /// `(cx, cy, w, h)` divided by the search size.
    pub fn normalize(&self, b: &BBox) -> [f64; 4] {
        let s = self.search_size as f64;
        [b.cx / s, b.cy / s, b.w / s, b.h / s]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps {
    /// `[H', W']` Gaussian heatmap, exactly 1 at the peak cell.
    pub cls_map: Tensor,
    /// `[2, H', W']` sub-cell residual `(x, y)` at the peak, zero elsewhere.
    pub offset_map: Tensor,
    /// `[2, H', W']` normalized `(w, h)` at the peak, zero elsewhere.
    pub size_map: Tensor,
    pub peak: Cell,
    /// Ground-truth box in normalized search coordinates.
    pub target: [f64; 4],
}

pub fn make_labels(label_box: &BBox, geom: &HeadGeometry) -> LabelMaps {
    let g = geom.grid;
    let (peak, offset) = geom.locate(label_box);
    let sigma = geom.sigma(label_box);
    let cls = Tensor::from_fn(&[g, g], |i| {
        let dr = (i / g) as f64 - peak.row as f64;
        let dc = (i % g) as f64 - peak.col as f64;
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
    });
    let target = geom.normalize(label_box);
    let mut offset_map = Tensor::zeros(&[2, g, g]);
    let mut size_map = Tensor::zeros(&[2, g, g]);
    for k in 0..2 {
        offset_map.set(&[k, peak.row, peak.col], offset[k]);
        size_map.set(&[k, peak.row, peak.col], target[2 + k]);
    }
    LabelMaps {
        cls_map: cls,
        offset_map,
        size_map,
        peak,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_on_cell_anchor_has_zero_offset() {
        let geom = HeadGeometry::default();
        let l = make_labels(&BBox::new(24.0, 40.0, 16.0, 16.0), &geom);
        assert_eq!(l.peak, Cell { row: 5, col: 3 });
        assert_eq!(l.offset_map.get(&[0, 5, 3]), 0.0);
        assert_eq!(l.offset_map.get(&[1, 5, 3]), 0.0);
        assert_eq!(l.cls_map.get(&[5, 3]), 1.0);
        assert_eq!(l.cls_map.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(l.size_map.get(&[0, 5, 3]), 0.25);
    }

    #[test]
    fn unit_sigma_neighbor_value() {
        let geom = HeadGeometry::default();
        // sqrt(wh) = 16 px = 2 cells, factor 0.5 -> sigma 1 cell
        let b = BBox::new(33.0, 30.0, 16.0, 16.0);
        assert_eq!(geom.sigma(&b), 1.0);
        let l = make_labels(&b, &geom);
        let (r, c) = (l.peak.row, l.peak.col);
        assert!((l.cls_map.get(&[r, c + 1]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((l.cls_map.get(&[r, c + 1]) - 0.6065).abs() < 1e-4);
        let off = l.offset_map.get(&[0, r, c]);
        assert!((0.0..1.0).contains(&off));
        assert!((((c as f64) + off) * 8.0 - 33.0).abs() < 1e-12);
    }
}
