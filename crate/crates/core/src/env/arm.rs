//! Planar three-link arm kinematics.

use std::f64::consts::PI;

pub const LINKS: [f64; 3] = [5.0, 5.0, 3.0];

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Endpoints of the three links for relative joint angles, base at the origin.
pub fn arm_fk(joints: [f64; 3]) -> [[f64; 2]; 3] {
    fk_with(joints, LINKS)
}

pub fn fk_with(joints: [f64; 3], links: [f64; 3]) -> [[f64; 2]; 3] {
    let mut out = [[0.0; 2]; 3];
    let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
    for i in 0..3 {
        theta += joints[i];
        x += links[i] * theta.cos();
        y += links[i] * theta.sin();
        out[i] = [x, y];
    }
    out
}

/// Joint angles placing the tip at `tip` with absolute end orientation `heading`.
///
/// Uses the negative-elbow branch; unreachable wrist targets are pulled onto
/// the workspace boundary.
pub fn arm_ik(tip: [f64; 2], heading: f64, links: [f64; 3]) -> [f64; 3] {
    let [l1, l2, l3] = links;
    let wx = tip[0] - l3 * heading.cos();
    let wy = tip[1] - l3 * heading.sin();
    let reach = wx.hypot(wy);
    let lo = (l1 - l2).abs() + 1e-9;
    let hi = l1 + l2 - 1e-9;
    let d = reach.clamp(lo, hi);
    let c2 = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = -c2.acos();
    let q1 = wy.atan2(wx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q3 = heading - q1 - q2;
    [wrap_angle(q1), wrap_angle(q2), wrap_angle(q3)]
}
