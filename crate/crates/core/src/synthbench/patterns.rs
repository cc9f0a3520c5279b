//! Stamps for class patterns and confounder artifacts.

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Overlap test after growing `self` by `margin` pixels on every side.
    pub fn intersects(&self, other: &BBox, margin: usize) -> bool {
        self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
            && self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
    }
}

/// One shape per class index: disc, horizontal bar, ring, diagonal texture,
/// vertical bar, plus sign.
pub const MAX_CLASSES: usize = 6;

/// Binary template of the class-`k` pattern for images of side `size`.
/// Returned as `(width, height, row-major on/off mask)`.
pub fn class_template(k: usize, size: usize) -> (usize, usize, Vec<bool>) {
    let s = size as f64 / 64.0;
    let px = |v: f64| ((v * s).round() as usize).max(1);
    match k {
        0 => disc(px(6.5)),
        1 => bar(px(18.0), px(4.0)),
        2 => ring(px(7.5), px(4.5)),
        3 => {
            let side = px(12.0);
            let period = px(4.0).max(2);
            let mask = (0..side * side)
                .map(|i| ((i % side) + (i / side)) % period < period / 2)
                .collect();
            (side, side, mask)
        }
        4 => {
            let (w, h, m) = bar(px(18.0), px(4.0));
            transpose(w, h, &m)
        }
        5 => {
            let side = px(11.0) | 1;
            let t = px(3.0);
            let lo = (side - t) / 2;
            let mask = (0..side * side)
                .map(|i| {
                    let (x, y) = (i % side, i / side);
                    (lo..lo + t).contains(&x) || (lo..lo + t).contains(&y)
                })
                .collect();
            (side, side, mask)
        }
        _ => panic!("no pattern for class {k}"),
    }
}

fn disc(r: usize) -> (usize, usize, Vec<bool>) {
    let side = 2 * r + 1;
    let c = r as f64;
    let mask = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64 - c, (i / side) as f64 - c);
            x * x + y * y <= c * c + 0.5
        })
        .collect();
    (side, side, mask)
}

fn ring(outer: usize, inner: usize) -> (usize, usize, Vec<bool>) {
    let side = 2 * outer + 1;
    let c = outer as f64;
    let (ro, ri) = (outer as f64, inner as f64);
    let mask = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64 - c, (i / side) as f64 - c);
            let r2 = x * x + y * y;
            r2 <= ro * ro + 0.5 && r2 >= ri * ri
        })
        .collect();
    (side, side, mask)
}

fn bar(w: usize, h: usize) -> (usize, usize, Vec<bool>) {
    (w, h, vec![true; w * h])
}

fn transpose(w: usize, h: usize, m: &[bool]) -> (usize, usize, Vec<bool>) {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = m[y * w + x];
        }
    }
    (h, w, out)
}

/// 5×7 bitmap of the letter `R`, one row per entry, MSB = leftmost pixel.
const GLYPH_R: [u8; 7] = [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001];

/// Glyph mask `(5, 7, mask)`, scaled up by an integer factor for larger images.
pub fn glyph_template(size: usize) -> (usize, usize, Vec<bool>) {
    let f = (size / 64).max(1);
    let (w, h) = (5 * f, 7 * f);
    let mask = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) / f, (i / w) / f);
            GLYPH_R[y] & (1 << (4 - x)) != 0
        })
        .collect();
    (w, h, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_non_trivial_and_distinct() {
        let shapes: Vec<_> = (0..MAX_CLASSES).map(|k| class_template(k, 64)).collect();
        for (k, (w, h, m)) in shapes.iter().enumerate() {
            let on = m.iter().filter(|&&v| v).count();
            assert!(on > 10 && on < w * h || k == 1 || k == 4, "class {k}");
        }
        for i in 0..MAX_CLASSES {
            for j in i + 1..MAX_CLASSES {
                assert_ne!(shapes[i], shapes[j]);
            }
        }
    }

    #[test]
    fn glyph_has_expected_pixels() {
        let (w, h, m) = glyph_template(64);
        assert_eq!((w, h), (5, 7));
        assert!(m[0] && !m[4]);
        assert_eq!(m.iter().filter(|&&v| v).count(), 4 + 2 + 2 + 4 + 2 + 2 + 2);
    }

    #[test]
    fn bbox_intersection_with_margin() {
        let a = BBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        let b = BBox { x0: 5, y0: 0, x1: 8, y1: 4 };
        assert!(!a.intersects(&b, 0));
        assert!(!a.intersects(&b, 1));
        assert!(a.intersects(&b, 2));
    }
}
