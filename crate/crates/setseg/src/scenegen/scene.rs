//! Grid scenes: colored shapes placed on a `G x G` cell grid.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

impl Shape {
    pub fn index(self) -> usize {
        SHAPES.iter().position(|&s| s == self).unwrap()
    }
}

impl Color {
    pub fn index(self) -> usize {
        COLORS.iter().position(|&c| c == self).unwrap()
    }
}

/// Cell attribute id: 0 is empty, otherwise `1 + shape_index * 4 + color_index`.
pub fn attr_id(shape: Shape, color: Color) -> u8 {
    1 + (shape.index() * COLORS.len() + color.index()) as u8
}

/// Number of distinct cell attribute values (including empty).
pub fn attr_vocab() -> usize {
    1 + SHAPES.len() * COLORS.len()
}

/// Cell offsets (row, col) of a shape footprint at a given size.
pub fn footprint(shape: Shape, size: usize) -> Vec<(usize, usize)> {
    match (shape, size) {
        (Shape::Square, s) => {
            let mut cells = Vec::with_capacity(s * s);
            for r in 0..s {
                for c in 0..s {
                    cells.push((r, c));
                }
            }
            cells
        }
        (Shape::Circle, 1) => vec![(0, 0)],
        (Shape::Circle, 2) => vec![(0, 0), (0, 1), (1, 0), (1, 1)],
        (Shape::Circle, _) => {
            // 3x3 disc without corners.
            vec![(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)]
        }
        (Shape::Triangle, 1) => vec![(0, 0)],
        (Shape::Triangle, 2) => vec![(0, 0), (1, 0), (1, 1)],
        (Shape::Triangle, _) => vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)],
    }
}

/// One placed object and the cells it occupies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub shape: Shape,
    pub color: Color,
    pub size: usize,
    pub row: usize,
    pub col: usize,
    /// Row-major cell indices.
    pub cells: Vec<usize>,
}

impl PlacedObject {
    /// Leftmost occupied column, the primary spatial key.
    pub fn col_key(&self, side: usize) -> usize {
        self.cells.iter().map(|c| c % side).min().unwrap()
    }

    /// Topmost occupied row, the tie-break key.
    pub fn row_key(&self, side: usize) -> usize {
        self.cells.iter().map(|c| c / side).min().unwrap()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }
}

/// A synthesized scene: per-cell attribute ids plus the object list.
#[derive(Debug, Clone)]
pub struct Scene {
    pub side: usize,
    /// Row-major attribute ids, 0 for empty cells.
    pub cells: Vec<u8>,
    pub objects: Vec<PlacedObject>,
}

impl Scene {
    /// Sample a scene with `count` non-overlapping objects separated by at
    /// least one empty cell in every direction. Returns `None` when the
    /// grid cannot take another object after bounded retries.
    pub fn sample(rng: &mut Rng, side: usize, count: usize) -> Option<Scene> {
        let mut cells = vec![0u8; side * side];
        // Blocked marks occupied cells plus their 1-cell margin.
        let mut blocked = vec![false; side * side];
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _attempt in 0..64 {
                let shape = *rng.choose(&SHAPES);
                let color = *rng.choose(&COLORS);
                let size = rng.range(1, 3);
                let fp = footprint(shape, size);
                let max_r = fp.iter().map(|&(r, _)| r).max().unwrap();
                let max_c = fp.iter().map(|&(_, c)| c).max().unwrap();
                if max_r >= side || max_c >= side {
                    continue;
                }
                let row = rng.below(side - max_r);
                let col = rng.below(side - max_c);
                let idxs: Vec<usize> = fp.iter().map(|&(r, c)| (row + r) * side + (col + c)).collect();
                if idxs.iter().any(|&i| blocked[i]) {
                    continue;
                }
                for &i in &idxs {
                    cells[i] = attr_id(shape, color);
                }
                // Mark the footprint plus margin as blocked.
                for &i in &idxs {
                    let (r, c) = (i / side, i % side);
                    for dr in -1i32..=1 {
                        for dc in -1i32..=1 {
                            let nr = r as i32 + dr;
                            let nc = c as i32 + dc;
                            if nr >= 0 && nr < side as i32 && nc >= 0 && nc < side as i32 {
                                blocked[nr as usize * side + nc as usize] = true;
                            }
                        }
                    }
                }
                objects.push(PlacedObject { shape, color, size, row, col, cells: idxs });
                placed = true;
                break;
            }
            if !placed {
                return None;
            }
        }
        Some(Scene { side, cells, objects })
    }

    /// Grid rows for serialization.
    pub fn grid_rows(&self) -> Vec<Vec<u8>> {
        (0..self.side)
            .map(|r| self.cells[r * self.side..(r + 1) * self.side].to_vec())
            .collect()
    }
}
