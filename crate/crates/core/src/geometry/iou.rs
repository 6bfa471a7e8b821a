use super::OrientedBox;

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
fn clip_polygon(subject: &[Pt], clip: &[Pt; 4], tol: f64) -> Vec<Pt> {
    let mut output = subject.to_vec();
    for i in 0..4 {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % 4]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let (p, q) = (input[j], input[(j + 1) % n]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let (p_in, q_in) = (cp >= -tol, cq >= -tol);
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let denom = cp - cq;
                if denom.abs() > f64::MIN_POSITIVE {
                    let t = cp / denom;
                    output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
                }
            }
        }
    }
    output
}

fn ordering_key(b: &OrientedBox) -> [u64; 5] {
    [b.x, b.y, b.w, b.h, b.theta].map(f64::to_bits)
}

/// Intersection area of two rotated rectangles.
pub fn intersection_area(b1: &OrientedBox, b2: &OrientedBox) -> f64 {
    let dx = b1.x - b2.x;
    let dy = b1.y - b2.y;
    let reach = b1.radius() + b2.radius();
    if dx * dx + dy * dy >= reach * reach {
        return 0.0;
    }
    // A fixed operand order makes the result exactly symmetric.
    let (s, c) = if ordering_key(b1) <= ordering_key(b2) {
        (b1, b2)
    } else {
        (b2, b1)
    };
    let tol = 1e-12 * (c.w + c.h).max(1.0).powi(2);
    let poly = clip_polygon(&s.corners(), &c.corners(), tol);
    polygon_area(&poly).min(s.area()).min(c.area())
}

/// Intersection over union of two rotated rectangles, in `[0, 1]`.
pub fn rotated_iou(b1: &OrientedBox, b2: &OrientedBox) -> f64 {
    let inter = intersection_area(b1, b2);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = b1.area() + b2.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
