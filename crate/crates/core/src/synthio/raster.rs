use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Full-width horizontal band; its vertical extent comes from the scene layout.
    Band,
    Square,
    /// Isosceles, apex up.
    Triangle,
    Cross,
    Ring,
    Diamond,
    Disk,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Band,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
        Shape::Disk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Band => "band",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Disk => "disk",
        }
    }

    /// Whether the offset `(dy, dx)` from the centre lies inside a shape of radius `s`.
    pub fn contains(self, dy: i64, dx: i64, s: i64) -> bool {
        let t = (s / 3).max(1);
        match self {
            Shape::Band => true,
            Shape::Square => dy.abs() <= s && dx.abs() <= s,
            Shape::Triangle => dy.abs() <= s && 2 * dx.abs() <= dy + s,
            Shape::Cross => (dx.abs() <= t && dy.abs() <= s) || (dy.abs() <= t && dx.abs() <= s),
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= s * s && d2 > (s - t) * (s - t)
            }
            Shape::Diamond => dy.abs() + dx.abs() <= s,
            Shape::Disk => dy * dy + dx * dx <= s * s,
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape `{s}`")))
    }
}

/// Named RGB colours available to recipes.
pub const COLORS: &[(&str, [f64; 3])] = &[
    ("skyblue", [0.55, 0.75, 0.95]),
    ("gray", [0.45, 0.45, 0.45]),
    ("red", [0.85, 0.15, 0.15]),
    ("yellow", [0.95, 0.85, 0.20]),
    ("magenta", [0.85, 0.20, 0.85]),
    ("cyan", [0.10, 0.85, 0.85]),
    ("green", [0.20, 0.75, 0.25]),
    ("orange", [0.95, 0.55, 0.10]),
    ("white", [0.97, 0.97, 0.97]),
    ("purple", [0.45, 0.20, 0.70]),
    ("black", [0.05, 0.05, 0.05]),
    ("brown", [0.55, 0.35, 0.20]),
];

pub fn color(name: &str) -> Result<[f64; 3]> {
    COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Config(format!("unknown colour `{name}`")))
}

/// Calls `f(row, col)` for every in-bounds pixel of the shape centred at `(cy, cx)`.
pub fn rasterize(shape: Shape, cy: i64, cx: i64, s: i64, height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    let (h, w) = (height as i64, width as i64);
    for r in (cy - s).max(0)..=(cy + s).min(h - 1) {
        for c in (cx - s).max(0)..=(cx + s).min(w - 1) {
            if shape.contains(r - cy, c - cx, s) {
                f(r as usize, c as usize);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(shape: Shape, s: i64) -> usize {
        let mut n = 0;
        rasterize(shape, 10, 10, s, 21, 21, |_, _| n += 1);
        n
    }

    #[test]
    fn shape_pixel_counts() {
        assert_eq!(count(Shape::Square, 2), 25);
        assert_eq!(count(Shape::Diamond, 2), 13);
        assert_eq!(count(Shape::Disk, 1), 5);
        // two 3x7 bars sharing a 3x3 centre
        assert_eq!(count(Shape::Cross, 3), 33);
        // triangle rows widen by one pixel every two rows: 1,1,3,3,5,5,7
        assert_eq!(count(Shape::Triangle, 3), 25);
    }

    #[test]
    fn ring_has_a_hole() {
        assert!(!Shape::Ring.contains(0, 0, 4));
        assert!(Shape::Ring.contains(0, 4, 4));
    }

    #[test]
    fn clipped_at_border() {
        let mut n = 0;
        rasterize(Shape::Square, 0, 0, 1, 5, 5, |_, _| n += 1);
        assert_eq!(n, 4);
    }

    #[test]
    fn names_round_trip() {
        for s in Shape::ALL {
            assert_eq!(s.name().parse::<Shape>().unwrap(), s);
        }
        assert!(color("mauve").is_err());
    }
}
