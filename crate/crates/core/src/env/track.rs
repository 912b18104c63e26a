//! Procedural route generation and the cell map.
//!
//! A route is the centre line of the ego lane: straight runs joined by 90° arcs.
//! Every cell of the 64×64 grid is classified by its signed lateral offset from
//! that line (positive = right of travel): ego lane, divider, opposite lane,
//! sidewalk or offroad.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID: usize = 64;

/// World units per grid cell. One world unit is about one metre.
pub const CELL_SIZE: f64 = 2.0;
pub const WORLD_SIZE: f64 = GRID as f64 * CELL_SIZE;
pub const NUM_ROUTES: usize = 5;
/// Half-width of the arc-length window searched by [`TrackSpec::route_progress`].
pub const PROGRESS_WINDOW: f64 = 2.0 * super::V_MAX;

pub const LANE_HALF_WIDTH: f64 = 2.0;
const DIVIDER: (f64, f64) = (-4.0, -2.0);
const OPPOSITE: (f64, f64) = (-8.0, -4.0);
const SIDEWALK_RIGHT: (f64, f64) = (2.0, 4.0);
const SIDEWALK_LEFT: (f64, f64) = (-10.0, -8.0);
const TURN_RADIUS: f64 = 16.0;
const LEAD_IN: f64 = 8.0;
const RUN_OUT: f64 = 12.0;
const MARGIN: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellClass {
    LaneRight = 0,
    LaneOpposite = 1,
    Divider = 2,
    Sidewalk = 3,
    Offroad = 4,
    GoalMarker = 5,
}

impl CellClass {
    pub fn is_road(self) -> bool {
        matches!(
            self,
            CellClass::LaneRight | CellClass::LaneOpposite | CellClass::Divider | CellClass::GoalMarker
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    points: Vec<(f64, f64)>,
    arc: Vec<f64>,
}

/// Nearest-point projection of a position onto a [`Route`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point.
    pub s: f64,
    /// Signed lateral offset, positive to the right of travel.
    pub offset: f64,
    /// Unsigned distance to the polyline.
    pub distance: f64,
    /// Heading of the segment containing the foot point.
    pub heading: f64,
}

impl Route {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        let mut arc = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arc.push(0.0);
        for w in points.windows(2) {
            acc += ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            arc.push(acc);
        }
        Self { points, arc }
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn project(&self, x: f64, y: f64) -> Projection {
        self.project_within(x, y, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Nearest point among route points with arc length in `[s_lo, s_hi]`.
    pub fn project_within(&self, x: f64, y: f64, s_lo: f64, s_hi: f64) -> Projection {
        let mut best = Projection {
            s: 0.0,
            offset: 0.0,
            distance: f64::INFINITY,
            heading: 0.0,
        };
        for (i, w) in self.points.windows(2).enumerate() {
            let (ax, ay) = w[0];
            let (dx, dy) = (w[1].0 - ax, w[1].1 - ay);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 || self.arc[i + 1] < s_lo || self.arc[i] > s_hi {
                continue;
            }
            let len = len2.sqrt();
            let t_lo = ((s_lo - self.arc[i]) / len).max(0.0);
            let t_hi = ((s_hi - self.arc[i]) / len).min(1.0);
            let t = (((x - ax) * dx + (y - ay) * dy) / len2).clamp(t_lo, t_hi);
            let (fx, fy) = (ax + t * dx, ay + t * dy);
            let dist = ((x - fx).powi(2) + (y - fy).powi(2)).sqrt();
            if dist < best.distance {
                // right-hand normal of direction (dx, dy) is (dy, -dx)
                let offset = ((x - ax) * dy - (y - ay) * dx) / len;
                best = Projection {
                    s: self.arc[i] + t * len,
                    offset,
                    distance: dist,
                    heading: dy.atan2(dx),
                };
            }
        }
        best
    }

    /// Point and heading at arc length `s` (clamped to the route).
    pub fn point_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let i = match self.arc.iter().position(|&a| a >= s) {
            Some(0) => 1,
            Some(i) => i,
            None => self.points.len() - 1,
        };
        let (a, b) = (self.points[i - 1], self.points[i]);
        let seg = self.arc[i] - self.arc[i - 1];
        let t = if seg > 0.0 { (s - self.arc[i - 1]) / seg } else { 0.0 };
        Pose {
            x: a.0 + t * (b.0 - a.0),
            y: a.1 + t * (b.1 - a.1),
            heading: (b.1 - a.1).atan2(b.0 - a.0),
        }
    }
}

/// A fully determined driving route: cell map, start pose and goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub route_id: usize,
    pub split: Split,
    pub generation_seed: u64,
    pub world_grid: Vec<CellClass>,
    pub start_pose: Pose,
    pub goal_position: (f64, f64),
    /// Ego-lane centre line including lead-in before the start and run-out past the goal.
    pub route: Route,
    /// Arc length of the start and goal along `route`.
    pub start_s: f64,
    pub goal_s: f64,
}

/// Seed namespace per split; train and test never share a generation seed.
pub fn generation_seed(route_id: usize, split: Split) -> u64 {
    match split {
        Split::Train => 1_000 + route_id as u64,
        Split::Test => 2_000 + route_id as u64,
    }
}

pub fn make_track(route_id: usize, split: Split) -> Result<TrackSpec> {
    if route_id >= NUM_ROUTES {
        return Err(Error::InvalidArgument(format!(
            "route_id {route_id} out of range [0, {NUM_ROUTES})"
        )));
    }
    let seed = generation_seed(route_id, split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(track) = try_generate(route_id, split, seed, &mut rng) {
            return Ok(track);
        }
    }
}

fn cell_center(row: usize, col: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * CELL_SIZE, (row as f64 + 0.5) * CELL_SIZE)
}

/// Grid cell containing a world position, if inside the map.
pub fn cell_of(x: f64, y: f64) -> Option<(usize, usize)> {
    if x < 0.0 || y < 0.0 || x >= WORLD_SIZE || y >= WORLD_SIZE {
        return None;
    }
    Some(((y / CELL_SIZE) as usize, (x / CELL_SIZE) as usize))
}

fn push_straight(points: &mut Vec<(f64, f64)>, x: &mut f64, y: &mut f64, heading: f64, len: f64) {
    let steps = (len / 2.0).ceil().max(1.0) as usize;
    for _ in 0..steps {
        *x += len / steps as f64 * heading.cos();
        *y += len / steps as f64 * heading.sin();
        points.push((*x, *y));
    }
}

fn try_generate(route_id: usize, split: Split, seed: u64, rng: &mut ChaCha8Rng) -> Option<TrackSpec> {
    let headings = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI, -std::f64::consts::FRAC_PI_2];
    let mut heading: f64 = headings[rng.random_range(0..4)];
    let mut x = rng.random_range(MARGIN + 10.0..WORLD_SIZE - MARGIN - 10.0);
    let mut y = rng.random_range(MARGIN + 10.0..WORLD_SIZE - MARGIN - 10.0);
    // back off so the lead-in starts away from the chosen point
    x -= LEAD_IN * heading.cos();
    y -= LEAD_IN * heading.sin();
    let mut points = vec![(x, y)];
    let turns = rng.random_range(1..=2usize);
    let target: f64 = rng.random_range(140.0..200.0);
    let mut lengths: Vec<f64> = (0..=turns).map(|_| rng.random_range(0.5..1.5)).collect();
    let arc_len = TURN_RADIUS * std::f64::consts::FRAC_PI_2;
    let straight_total = (target - arc_len * turns as f64).max(40.0);
    let norm: f64 = lengths.iter().sum();
    lengths.iter_mut().for_each(|l| *l *= straight_total / norm);

    push_straight(&mut points, &mut x, &mut y, heading, LEAD_IN + lengths[0]);
    for len in lengths.iter().skip(1) {
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        // arc centre lies on the side we turn towards
        let (cx, cy) = (
            x - dir * TURN_RADIUS * heading.sin(),
            y + dir * TURN_RADIUS * heading.cos(),
        );
        let start_angle = (y - cy).atan2(x - cx);
        let n = 12;
        for k in 1..=n {
            let a = start_angle + dir * std::f64::consts::FRAC_PI_2 * k as f64 / n as f64;
            points.push((cx + TURN_RADIUS * a.cos(), cy + TURN_RADIUS * a.sin()));
        }
        heading += dir * std::f64::consts::FRAC_PI_2;
        x = points.last()?.0;
        y = points.last()?.1;
        push_straight(&mut points, &mut x, &mut y, heading, *len);
    }
    push_straight(&mut points, &mut x, &mut y, heading, RUN_OUT);

    let inside = |&(px, py): &(f64, f64)| {
        px > MARGIN && py > MARGIN && px < WORLD_SIZE - MARGIN && py < WORLD_SIZE - MARGIN
    };
    if !points.iter().all(inside) {
        return None;
    }
    let route = Route::new(points);
    // reject routes that fold back close to themselves
    for (i, &(px, py)) in route.points.iter().enumerate() {
        for (j, &(qx, qy)) in route.points.iter().enumerate() {
            if route.arc[j] - route.arc[i] > 60.0 && ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() < 26.0 {
                return None;
            }
        }
    }
    build_track(route_id, split, seed, route)
}

/// A single straight eastbound road whose goal lies `length` units past the
/// start. Not one of the benchmark routes; used for smoke tests.
pub fn straight_track(length: f64) -> Result<TrackSpec> {
    let max = WORLD_SIZE - 2.0 * MARGIN - LEAD_IN - RUN_OUT;
    if !(length > 0.0 && length <= max) {
        return Err(Error::InvalidArgument(format!("straight track length {length} outside (0, {max}]")));
    }
    let (mut x, mut y) = (MARGIN, WORLD_SIZE / 2.0);
    let mut points = vec![(x, y)];
    push_straight(&mut points, &mut x, &mut y, 0.0, LEAD_IN + length + RUN_OUT);
    build_track(0, Split::Train, 0, Route::new(points))
        .ok_or_else(|| Error::InvalidArgument("straight track failed validation".into()))
}

fn build_track(route_id: usize, split: Split, seed: u64, route: Route) -> Option<TrackSpec> {
    let start_s = LEAD_IN;
    let goal_s = route.length() - RUN_OUT;
    let start_pose = route.point_at(start_s);
    let goal = route.point_at(goal_s);
    let mut grid = vec![CellClass::Offroad; GRID * GRID];
    for row in 0..GRID {
        for col in 0..GRID {
            let (cx, cy) = cell_center(row, col);
            let p = route.project(cx, cy);
            let u = p.offset;
            let beyond_ends = p.s <= 0.0 + 1e-9 || p.s >= route.length() - 1e-9;
            let class = if beyond_ends && p.distance > p.offset.abs() + 1e-6 {
                CellClass::Offroad
            } else if (-LANE_HALF_WIDTH..LANE_HALF_WIDTH).contains(&u) {
                if p.s > goal_s + 1.0 && p.s <= goal_s + 4.0 {
                    CellClass::GoalMarker
                } else {
                    CellClass::LaneRight
                }
            } else if (DIVIDER.0..DIVIDER.1).contains(&u) {
                CellClass::Divider
            } else if (OPPOSITE.0..OPPOSITE.1).contains(&u) {
                CellClass::LaneOpposite
            } else if (SIDEWALK_RIGHT.0..SIDEWALK_RIGHT.1).contains(&u)
                || (SIDEWALK_LEFT.0..SIDEWALK_LEFT.1).contains(&u)
            {
                CellClass::Sidewalk
            } else {
                CellClass::Offroad
            };
            grid[row * GRID + col] = class;
        }
    }
    let track = TrackSpec {
        route_id,
        split,
        generation_seed: seed,
        world_grid: grid,
        start_pose,
        goal_position: (goal.x, goal.y),
        route,
        start_s,
        goal_s,
    };
    let ok = [track.cell_class(start_pose.x, start_pose.y), track.cell_class(goal.x, goal.y)]
        .iter()
        .all(|&c| c == CellClass::LaneRight)
        && road_connected(&track);
    ok.then_some(track)
}

impl TrackSpec {
    pub fn cell_class(&self, x: f64, y: f64) -> CellClass {
        match cell_of(x, y) {
            Some((r, c)) => self.world_grid[r * GRID + c],
            None => CellClass::Offroad,
        }
    }

    /// Remaining route distance to the goal from a position.
    pub fn distance_to_goal(&self, x: f64, y: f64) -> f64 {
        (self.goal_s - self.route.project(x, y).s).max(0.0)
    }

    /// Route arc length of a position, searched only within
    /// [`PROGRESS_WINDOW`] of the previous arc length. Keeps progress
    /// continuous when the vehicle leaves the road near another stretch of
    /// the route.
    pub fn route_progress(&self, x: f64, y: f64, prev_s: f64) -> f64 {
        self.route
            .project_within(x, y, prev_s - PROGRESS_WINDOW, prev_s + PROGRESS_WINDOW)
            .s
    }

    pub fn initial_distance(&self) -> f64 {
        self.goal_s - self.start_s
    }
}

/// Breadth-first search over road cells (4-neighbourhood) from start to goal cell.
pub fn road_connected(track: &TrackSpec) -> bool {
    let (Some(start), Some(goal)) = (
        cell_of(track.start_pose.x, track.start_pose.y),
        cell_of(track.goal_position.0, track.goal_position.1),
    ) else {
        return false;
    };
    let mut seen = vec![false; GRID * GRID];
    let mut queue = VecDeque::from([start]);
    seen[start.0 * GRID + start.1] = true;
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == goal {
            return true;
        }
        let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in neighbours {
            if nr < GRID && nc < GRID && !seen[nr * GRID + nc] && track.world_grid[nr * GRID + nc].is_road() {
                seen[nr * GRID + nc] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    false
}
