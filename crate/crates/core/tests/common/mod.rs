//! Shared oracle helpers for integration tests: convex polygon clipping,
//! hulls, and point queries, independent of the library's geometry path.

#![allow(dead_code)]

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex subject polygon by a convex clip
/// polygon (both in CCW order). Returns the intersection polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            return output;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = output.clone();
        output.clear();
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let denom = dx * ey - dy * ex;
            let t = ((a[0] - p[0]) * ey - (a[1] - p[1]) * ex) / denom;
            [p[0] + t * dx, p[1] + t * dy]
        };
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            if inside(cur) {
                if !inside(prev) {
                    output.push(intersect(prev, cur));
                }
                output.push(cur);
            } else if inside(prev) {
                output.push(intersect(prev, cur));
            }
        }
    }
    output
}

/// Ensures counter-clockwise orientation.
pub fn ccw(poly: &mut Vec<[f64; 2]>) {
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    if acc < 0.0 {
        poly.reverse();
    }
}

/// Andrew monotone-chain convex hull, CCW.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed distance of a point to a convex CCW polygon boundary: positive
/// inside, negative outside.
pub fn signed_distance_convex(poly: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let mut inside = true;
    let mut min_edge_dist = f64::INFINITY;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross < 0.0 {
            inside = false;
        }
        min_edge_dist = min_edge_dist.min(segment_distance(a, b, p));
    }
    if inside {
        min_edge_dist
    } else {
        -min_edge_dist
    }
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    };
    let qx = a[0] + t * abx;
    let qy = a[1] + t * aby;
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Relative error with a small floor, for float comparisons in oracles.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}
