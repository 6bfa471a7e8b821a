use std::f64::consts::PI;

use super::{Anchor, GeometryError};

/// Rotated rectangle in the ego frame. `w` extends along the heading `theta`,
/// `h` across it. The heading is only defined modulo pi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Maps an angle to `[0, pi)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Smallest absolute difference of two angles modulo pi.
pub fn angle_diff_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

impl OrientedBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidBox { w, h });
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (ax, ay) = (c * self.w / 2.0, s * self.w / 2.0);
        let (bx, by) = (-s * self.h / 2.0, c * self.h / 2.0);
        [
            [self.x + ax - bx, self.y + ay - by],
            [self.x + ax + bx, self.y + ay + by],
            [self.x - ax + bx, self.y - ay + by],
            [self.x - ax - bx, self.y - ay - by],
        ]
    }

    /// Half the diagonal: radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * (self.w * self.w + self.h * self.h).sqrt()
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Mirror image under `x -> -x`.
    pub fn mirror_x(&self) -> Self {
        Self {
            x: -self.x,
            theta: canonical_angle(PI - self.theta),
            ..*self
        }
    }
}

/// Six-parameter regression target of a box relative to an anchor:
/// `(dx / w_a, dy / h_a, ln(w / w_a), ln(h / h_a), sin 2θ, cos 2θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxEncoding(pub [f64; 6]);

/// Bound on the log-size deltas before exponentiation in [`decode_box`].
pub const MAX_LOG_SCALE: f64 = 8.0;

pub fn encode_box(b: &OrientedBox, a: &Anchor) -> Result<BoxEncoding, GeometryError> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(GeometryError::InvalidBox { w: b.w, h: b.h });
    }
    if !(a.w > 0.0 && a.h > 0.0) {
        return Err(GeometryError::InvalidBox { w: a.w, h: a.h });
    }
    let (s, c) = (2.0 * b.theta).sin_cos();
    Ok(BoxEncoding([
        (b.x - a.x) / a.w,
        (b.y - a.y) / a.h,
        (b.w / a.w).ln(),
        (b.h / a.h).ln(),
        s,
        c,
    ]))
}

pub fn decode_box(t: &BoxEncoding, a: &Anchor) -> OrientedBox {
    let [tx, ty, tw, th, ts, tc] = t.0;
    let theta = if ts == 0.0 && tc == 0.0 {
        0.0
    } else {
        0.5 * ts.atan2(tc)
    };
    OrientedBox {
        x: tx * a.w + a.x,
        y: ty * a.h + a.y,
        w: a.w * tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        h: a.h * th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        theta: canonical_angle(theta),
    }
}
