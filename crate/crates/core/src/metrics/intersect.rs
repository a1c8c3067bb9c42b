//! Triangle-triangle intersection on the line of plane intersection, with a
//! 2D fallback for coplanar pairs.

pub const EPS: f64 = 1e-9;

type V = [f64; 3];

fn sub(a: V, b: V) -> V {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V, b: V) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V, b: V) -> V {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V) -> f64 {
    dot(a, a).sqrt()
}

/// Unit normal, or `None` for a degenerate triangle.
pub fn unit_normal(t: &[V; 3]) -> Option<V> {
    let n = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let len = norm(n);
    let scale = norm(sub(t[1], t[0])).max(norm(sub(t[2], t[0]))).max(norm(sub(t[2], t[1])));
    if !(len > EPS * scale.max(1.0)) {
        return None;
    }
    Some([n[0] / len, n[1] / len, n[2] / len])
}

/// Signed distances of `t`'s vertices to the plane through `p` with unit normal `n`,
/// snapped to zero within `EPS`.
fn distances(t: &[V; 3], n: V, p: V) -> [f64; 3] {
    let d = -dot(n, p);
    t.map(|v| {
        let s = dot(n, v) + d;
        if s.abs() < EPS {
            0.0
        } else {
            s
        }
    })
}

fn same_side(d: &[f64; 3]) -> bool {
    (d[0] > 0.0 && d[1] > 0.0 && d[2] > 0.0) || (d[0] < 0.0 && d[1] < 0.0 && d[2] < 0.0)
}

/// Interval covered by a triangle on the intersection line, from projected
/// vertex coordinates `p` and plane distances `d`.
fn interval(p: [f64; 3], d: [f64; 3]) -> (f64, f64) {
    // pick the vertex alone on its side of the plane
    let lone = if d[0] * d[1] > 0.0 {
        2
    } else if d[0] * d[2] > 0.0 {
        1
    } else if d[1] * d[2] > 0.0 || d[0] != 0.0 {
        0
    } else if d[1] != 0.0 {
        1
    } else {
        2
    };
    let (a, b) = ((lone + 1) % 3, (lone + 2) % 3);
    let at = |o: usize| {
        if d[lone] == d[o] {
            p[o]
        } else {
            p[lone] + (p[o] - p[lone]) * d[lone] / (d[lone] - d[o])
        }
    };
    let (x, y) = (at(a), at(b));
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

pub fn triangles_intersect(t1: &[V; 3], t2: &[V; 3]) -> bool {
    let (Some(n1), Some(n2)) = (unit_normal(t1), unit_normal(t2)) else {
        return false;
    };
    let d1 = distances(t1, n2, t2[0]);
    if same_side(&d1) {
        return false;
    }
    let d2 = distances(t2, n1, t1[0]);
    if same_side(&d2) {
        return false;
    }
    if d1.iter().all(|&x| x == 0.0) {
        return coplanar_intersect(n1, t1, t2);
    }
    let dir = cross(n1, n2);
    let axis = (0..3).max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs())).unwrap_or(0);
    let i1 = interval(t1.map(|v| v[axis]), d1);
    let i2 = interval(t2.map(|v| v[axis]), d2);
    !(i1.1 < i2.0 || i2.1 < i1.0)
}

fn project(n: V, t: &[V; 3]) -> [[f64; 2]; 3] {
    let drop = (0..3).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap_or(2);
    let (i, j) = match drop {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    t.map(|v| [v[i], v[j]])
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    let straddles = |x: f64, y: f64| (x > EPS && y < -EPS) || (x < -EPS && y > EPS);
    if straddles(o1, o2) && straddles(o3, o4) {
        return true;
    }
    let on = |p: [f64; 2], q: [f64; 2], r: [f64; 2], o: f64| {
        o.abs() <= EPS
            && r[0] >= p[0].min(q[0]) - EPS
            && r[0] <= p[0].max(q[0]) + EPS
            && r[1] >= p[1].min(q[1]) - EPS
            && r[1] <= p[1].max(q[1]) + EPS
    };
    on(a, b, c, o1) || on(a, b, d, o2) || on(c, d, a, o3) || on(c, d, b, o4)
}

fn inside(p: [f64; 2], t: &[[f64; 2]; 3]) -> bool {
    let s = [orient(t[0], t[1], p), orient(t[1], t[2], p), orient(t[2], t[0], p)];
    s.iter().all(|&x| x >= -EPS) || s.iter().all(|&x| x <= EPS)
}

fn coplanar_intersect(n: V, t1: &[V; 3], t2: &[V; 3]) -> bool {
    let (a, b) = (project(n, t1), project(n, t2));
    for i in 0..3 {
        for j in 0..3 {
            if segments_cross(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]) {
                return true;
            }
        }
    }
    inside(a[0], &b) || inside(b[0], &a)
}
