//! Agent geometry, the deterministic forward dynamics, and the state
//! distance metric used for recovery-target construction.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default weight on wrapped yaw error in [`state_distance`], in meters per radian.
pub const DEFAULT_W_YAW: f64 = 0.5;

/// Pose plus rigid footprint of one agent. Yaw is kept in `(-PI, PI]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, yaw: f64, length: f64, width: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            length,
            width,
        }
    }

    /// Planar distance between the two state centers.
    pub fn planar_distance(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Template action: a local-frame pose delta applied over one re-planning period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionToken {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl ActionToken {
    pub const ZERO: ActionToken = ActionToken {
        dx: 0.0,
        dy: 0.0,
        dyaw: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dyaw: f64) -> Self {
        Self { dx, dy, dyaw }
    }

    /// Euclidean distance in (dx, dy, dyaw) space, used for vocabulary dedup.
    pub fn component_distance(&self, other: &ActionToken) -> f64 {
        let dd = [
            self.dx - other.dx,
            self.dy - other.dy,
            self.dyaw - other.dyaw,
        ];
        (dd[0] * dd[0] + dd[1] * dd[1] + dd[2] * dd[2]).sqrt()
    }
}

/// Scene context: one simple drivable polygon plus lane centerlines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapContext {
    pub drivable_region: Vec<[f64; 2]>,
    #[serde(rename = "lanes")]
    pub lane_centerlines: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_hints: Option<Vec<[f64; 2]>>,
}

impl MapContext {
    /// Checks the structural invariants: polygon with >= 3 vertices and no
    /// self-intersection, centerlines with >= 2 points each.
    pub fn validate(&self) -> Result<(), String> {
        if self.drivable_region.len() < 3 {
            return Err("drivable_region needs at least 3 vertices".into());
        }
        if polygon_self_intersects(&self.drivable_region) {
            return Err("drivable_region is self-intersecting".into());
        }
        for (i, lane) in self.lane_centerlines.iter().enumerate() {
            if lane.len() < 2 {
                return Err(format!("lane centerline {i} has fewer than 2 points"));
            }
        }
        Ok(())
    }
}

/// Normalizes an angle into `(-PI, PI]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a % two_pi;
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Forward dynamics: rotates the token's local displacement into the world
/// frame by the current yaw, then increments and renormalizes the yaw.
/// Deterministic and total; the footprint is carried over unchanged.
pub fn apply_token(state: &AgentState, token: ActionToken) -> AgentState {
    let (s, c) = state.yaw.sin_cos();
    AgentState {
        x: state.x + c * token.dx - s * token.dy,
        y: state.y + s * token.dx + c * token.dy,
        yaw: wrap_angle(state.yaw + token.dyaw),
        length: state.length,
        width: state.width,
    }
}

/// Planar Euclidean distance plus `w_yaw`-weighted absolute wrapped yaw error.
/// Symmetric, and zero iff positions and yaw coincide.
pub fn state_distance(a: &AgentState, b: &AgentState, w_yaw: f64) -> f64 {
    a.planar_distance(b) + w_yaw * wrap_angle(a.yaw - b.yaw).abs()
}

/// Point-in-polygon by the even-odd rule, with boundary points counted inside.
pub fn in_drivable(map: &MapContext, x: f64, y: f64) -> bool {
    point_in_polygon(&map.drivable_region, x, y)
}

pub(crate) fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = poly.len();
    for i in 0..n {
        if point_on_segment(poly[i], poly[(i + 1) % n], [x, y]) {
            return true;
        }
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) {
            let x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi;
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn point_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let cross = ab[0] * ap[1] - ab[1] * ap[0];
    if cross != 0.0 {
        return false;
    }
    let dot = ab[0] * ap[0] + ab[1] * ap[1];
    dot >= 0.0 && dot <= ab[0] * ab[0] + ab[1] * ab[1]
}

/// Signed distance from a point to the drivable boundary: positive inside,
/// negative outside. Used as a policy feature and in map diagnostics.
pub fn boundary_distance(map: &MapContext, x: f64, y: f64) -> f64 {
    let poly = &map.drivable_region;
    let n = poly.len();
    let mut d = f64::INFINITY;
    for i in 0..n {
        d = d.min(point_segment_distance([x, y], poly[i], poly[(i + 1) % n]));
    }
    if in_drivable(map, x, y) {
        d
    } else {
        -d
    }
}

pub(crate) fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let cx = a[0] + t * ab[0];
    let cy = a[1] + t * ab[1];
    (p[0] - cx).hypot(p[1] - cy)
}

/// Corners of the oriented footprint rectangle, counterclockwise.
pub fn footprint_corners(s: &AgentState) -> [[f64; 2]; 4] {
    let (sy, cy) = s.yaw.sin_cos();
    let hl = 0.5 * s.length;
    let hw = 0.5 * s.width;
    let mut out = [[0.0; 2]; 4];
    for (k, (lx, ly)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .into_iter()
        .enumerate()
    {
        out[k] = [s.x + cy * lx - sy * ly, s.y + sy * lx + cy * ly];
    }
    out
}

/// Separating-axis test between the two oriented footprint rectangles over
/// the 4 candidate axes. Touching rectangles count as overlapping; degenerate
/// zero-area rectangles never overlap anything.
pub fn footprints_overlap(a: &AgentState, b: &AgentState) -> bool {
    if a.length <= 0.0 || a.width <= 0.0 || b.length <= 0.0 || b.width <= 0.0 {
        return false;
    }
    let ca = footprint_corners(a);
    let cb = footprint_corners(b);
    let (sa, caw) = a.yaw.sin_cos();
    let (sb, cbw) = b.yaw.sin_cos();
    let axes = [[caw, sa], [-sa, caw], [cbw, sb], [-sb, cbw]];
    for axis in axes {
        let (min_a, max_a) = project(&ca, axis);
        let (min_b, max_b) = project(&cb, axis);
        if max_a < min_b || max_b < min_a {
            return false;
        }
    }
    true
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let v = c[0] * axis[0] + c[1] * axis[1];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn polygon_self_intersects(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            // Skip edges sharing a vertex.
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            if segments_properly_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

fn segments_properly_intersect(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}
