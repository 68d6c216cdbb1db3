//! Ego-frame feature encoding: past poses, speed, nearest-centerline
//! alignment and lookahead geometry, neighbor poses, and boundary clearance.
//! All features are relative so the encoding is invariant under rigid scene
//! transforms.

use crate::world::{boundary_distance, wrap_angle, AgentState, MapContext};

/// Neighbor slots in the feature vector (zero-padded when fewer agents).
pub const NEIGHBOR_K: usize = 4;
/// Symmetric clamp applied to every feature component.
pub const FEATURE_CLAMP: f64 = 50.0;
/// Arc-length offsets of the centerline lookahead points, meters.
pub const LOOKAHEAD_ARCS: [f64; 3] = [5.0, 10.0, 15.0];
/// Distances of the forward boundary probes along the ego heading, meters.
pub const BOUNDARY_PROBES: [f64; 2] = [4.0, 8.0];

pub type FeatureVector = Vec<f64>;

/// Feature dimensionality for a history of `history_len` past steps:
/// 3 per past state, speed, 3 centerline-alignment values, 2 per lookahead
/// point, 3 per neighbor slot, and the signed boundary distances at the ego
/// and at the forward probes.
pub fn feature_dim(history_len: usize) -> usize {
    3 * history_len
        + 1
        + 3
        + 2 * LOOKAHEAD_ARCS.len()
        + 3 * NEIGHBOR_K
        + 1
        + BOUNDARY_PROBES.len()
}

fn to_ego_frame(ego: &AgentState, x: f64, y: f64) -> [f64; 2] {
    let (s, c) = ego.yaw.sin_cos();
    let wx = x - ego.x;
    let wy = y - ego.y;
    [c * wx + s * wy, -s * wx + c * wy]
}

fn clamp(v: f64) -> f64 {
    v.clamp(-FEATURE_CLAMP, FEATURE_CLAMP)
}

/// Encodes one agent's situation: `history` holds H+1 states ending at the
/// current one, `neighbors` the other agents' current states. Deterministic.
pub fn encode(
    history: &[AgentState],
    neighbors: &[AgentState],
    map: &MapContext,
    period: f64,
) -> FeatureVector {
    assert!(history.len() >= 2, "history must hold at least 2 states");
    let ego = history.last().unwrap();
    let h = history.len() - 1;
    let mut out = Vec::with_capacity(feature_dim(h));

    for past in &history[..h] {
        let rel = to_ego_frame(ego, past.x, past.y);
        out.push(clamp(rel[0]));
        out.push(clamp(rel[1]));
        out.push(clamp(wrap_angle(past.yaw - ego.yaw)));
    }

    let speed = history[h - 1].planar_distance(ego) / period;
    out.push(clamp(speed));

    match nearest_centerline(ego, map) {
        Some(hit) => {
            let rel = to_ego_frame(ego, hit.point[0], hit.point[1]);
            out.push(clamp(rel[0]));
            out.push(clamp(rel[1]));
            out.push(clamp(wrap_angle(hit.seg_yaw - ego.yaw)));
            // Upcoming lane geometry: ego-frame positions of points ahead
            // along the matched centerline.
            let lane = &map.lane_centerlines[hit.lane];
            for arc in LOOKAHEAD_ARCS {
                let p = walk_polyline(lane, hit.seg, hit.t, arc);
                let rel = to_ego_frame(ego, p[0], p[1]);
                out.push(clamp(rel[0]));
                out.push(clamp(rel[1]));
            }
        }
        None => out.extend(std::iter::repeat(0.0).take(3 + 2 * LOOKAHEAD_ARCS.len())),
    }

    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| {
        let da = neighbors[a].planar_distance(ego);
        let db = neighbors[b].planar_distance(ego);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    for slot in 0..NEIGHBOR_K {
        if let Some(&i) = order.get(slot) {
            let n = &neighbors[i];
            let rel = to_ego_frame(ego, n.x, n.y);
            out.push(clamp(rel[0]));
            out.push(clamp(rel[1]));
            out.push(clamp(wrap_angle(n.yaw - ego.yaw)));
        } else {
            out.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
    }

    out.push(clamp(boundary_distance(map, ego.x, ego.y)));
    // Clearance ahead: signed boundary distance at probe points along the
    // current heading.
    let (sy, cy) = ego.yaw.sin_cos();
    for d in BOUNDARY_PROBES {
        out.push(clamp(boundary_distance(
            map,
            ego.x + cy * d,
            ego.y + sy * d,
        )));
    }
    out
}

struct CenterlineHit {
    lane: usize,
    seg: usize,
    t: f64,
    point: [f64; 2],
    seg_yaw: f64,
}

/// Closest centerline point over all polylines (ties: first lane, then first
/// segment), with enough context to walk forward along the line.
fn nearest_centerline(ego: &AgentState, map: &MapContext) -> Option<CenterlineHit> {
    let mut best: Option<(f64, CenterlineHit)> = None;
    for (li, lane) in map.lane_centerlines.iter().enumerate() {
        for (si, w) in lane.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            if len2 == 0.0 {
                continue;
            }
            let t = (((ego.x - a[0]) * ab[0] + (ego.y - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
            let px = a[0] + t * ab[0];
            let py = a[1] + t * ab[1];
            let d = (ego.x - px).hypot(ego.y - py);
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((
                    d,
                    CenterlineHit {
                        lane: li,
                        seg: si,
                        t,
                        point: [px, py],
                        seg_yaw: ab[1].atan2(ab[0]),
                    },
                ));
            }
        }
    }
    best.map(|(_, hit)| hit)
}

/// Point `arc` meters further along the polyline from the position given by
/// (segment index, within-segment fraction). Clamps at the final vertex.
fn walk_polyline(lane: &[[f64; 2]], seg: usize, t: f64, arc: f64) -> [f64; 2] {
    let mut remaining = arc;
    let mut si = seg;
    let mut frac = t;
    loop {
        let a = lane[si];
        let b = lane[si + 1];
        let seg_len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let left_here = seg_len * (1.0 - frac);
        if remaining <= left_here || si + 2 >= lane.len() {
            let f = if seg_len > 0.0 {
                (frac + remaining / seg_len).min(1.0)
            } else {
                1.0
            };
            return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        }
        remaining -= left_here;
        si += 1;
        frac = 0.0;
    }
}
