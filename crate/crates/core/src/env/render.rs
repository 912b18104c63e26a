use super::track::{CellClass, TrackSpec};
use super::{EnvState, CAR_HALF_LENGTH, CAR_HALF_WIDTH};

pub const HEIGHT: usize = 48;
pub const WIDTH: usize = 48;
pub const CHANNELS: usize = 3;
/// Ego vehicle pixel anchor (row, col); heading points up the image.
pub const ANCHOR_ROW: usize = 36;
pub const ANCHOR_COL: usize = 24;

pub const PALETTE_ROAD: [u8; 3] = [96, 96, 96];
pub const PALETTE_DIVIDER: [u8; 3] = [220, 200, 0];
pub const PALETTE_SIDEWALK: [u8; 3] = [200, 200, 200];
pub const PALETTE_OFFROAD: [u8; 3] = [40, 140, 40];
pub const PALETTE_OBSTACLE: [u8; 3] = [200, 30, 30];
pub const PALETTE_GOAL: [u8; 3] = [30, 60, 220];
pub const PALETTE_EGO: [u8; 3] = [255, 255, 255];

/// 48×48 RGB frame, row-major HWC.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pixels: Vec<u8>,
}

impl Observation {
    pub const LEN: usize = HEIGHT * WIDTH * CHANNELS;

    pub fn from_pixels(pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == Self::LEN).then_some(Self { pixels })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * WIDTH + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Pixels scaled to [0, 1].
    pub fn to_unit<T: crate::Scalar>(&self) -> Vec<T> {
        self.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect()
    }

    pub fn write_unit<T: crate::Scalar>(&self, out: &mut [T]) {
        for (o, &p) in out.iter_mut().zip(&self.pixels) {
            *o = T::lit(p as f64 / 255.0);
        }
    }
}

fn class_color(c: CellClass) -> [u8; 3] {
    match c {
        CellClass::LaneRight | CellClass::LaneOpposite => PALETTE_ROAD,
        CellClass::Divider => PALETTE_DIVIDER,
        CellClass::Sidewalk => PALETTE_SIDEWALK,
        CellClass::Offroad => PALETTE_OFFROAD,
        CellClass::GoalMarker => PALETTE_GOAL,
    }
}

/// Egocentric top-down crop: one pixel per world unit, heading up, ego at the anchor.
pub fn render(track: &TrackSpec, state: &EnvState) -> Observation {
    let mut pixels = vec![0u8; Observation::LEN];
    let p = state.pose;
    let (c, s) = (p.heading.cos(), p.heading.sin());
    let active: Vec<_> = state
        .obstacles
        .iter()
        .filter(|o| o.active(state.step_index))
        .collect();
    for row in 0..HEIGHT {
        let forward = ANCHOR_ROW as f64 - (row as f64 + 0.5);
        for col in 0..WIDTH {
            let lateral = col as f64 + 0.5 - ANCHOR_COL as f64;
            let color = if forward.abs() <= CAR_HALF_LENGTH && lateral.abs() <= CAR_HALF_WIDTH {
                PALETTE_EGO
            } else {
                let x = p.x + forward * c + lateral * s;
                let y = p.y + forward * s - lateral * c;
                if active.iter().any(|o| o.contains(x, y)) {
                    PALETTE_OBSTACLE
                } else {
                    class_color(track.cell_class(x, y))
                }
            };
            let i = (row * WIDTH + col) * CHANNELS;
            pixels[i..i + 3].copy_from_slice(&color);
        }
    }
    Observation { pixels }
}
