use serde::{Deserialize, Serialize};

/// Continuous `(row, col)` location, serialized as `[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }

    pub fn translate(self, dr: f64, dc: f64) -> Self {
        Self::new(self.row + dr, self.col + dc)
    }
}

impl From<[f64; 2]> for Point {
    fn from([row, col]: [f64; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.row, p.col]
    }
}
