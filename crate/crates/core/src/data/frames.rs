use super::{ImuSequence, Quat, Vec3};
use crate::error::{Error, Result};

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.80665;

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotates `v` by the unit quaternion `q`.
pub fn rotate(q: Quat, v: Vec3) -> Vec3 {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let uv = cross(u, v);
    let uuv = cross(u, uv);
    [
        v[0] + 2.0 * (w * uv[0] + uuv[0]),
        v[1] + 2.0 * (w * uv[1] + uuv[1]),
        v[2] + 2.0 * (w * uv[2] + uuv[2]),
    ]
}

pub fn quat_conj(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rotation by `yaw` radians about the world z axis.
pub fn quat_from_yaw(yaw: f64) -> Quat {
    let h = 0.5 * yaw;
    [h.cos(), 0.0, 0.0, h.sin()]
}

/// World-frame gyro and accel streams.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldImu {
    pub gyro: Vec<Vec3>,
    pub accel: Vec<Vec3>,
}

/// `R(q)·v` per sample for both sensors.
pub fn rotate_to_world(seq: &ImuSequence) -> WorldImu {
    let rot = |vs: &[Vec3]| -> Vec<Vec3> {
        vs.iter()
            .zip(&seq.orientation)
            .map(|(&v, &q)| rotate(q, v))
            .collect()
    };
    WorldImu {
        gyro: rot(&seq.gyro),
        accel: rot(&seq.accel),
    }
}

/// Re-expresses the sequence in the world frame: sensor streams are rotated
/// and every orientation becomes the identity.
pub fn to_world_frame(seq: &ImuSequence) -> ImuSequence {
    let world = rotate_to_world(seq);
    ImuSequence {
        gyro: world.gyro,
        accel: world.accel,
        orientation: vec![[1.0, 0.0, 0.0, 0.0]; seq.len()],
        ..seq.clone()
    }
}

fn shift_world_z(seq: &ImuSequence, dz: f64) -> Vec<Vec3> {
    seq.accel
        .iter()
        .zip(&seq.orientation)
        .map(|(&a, &q)| {
            let mut w = rotate(q, a);
            w[2] += dz;
            rotate(quat_conj(q), w)
        })
        .collect()
}

/// Subtracts `(0, 0, g)` from the world-frame specific force. The result
/// stays expressed in the body frame and carries `gravity_removed = true`.
pub fn remove_gravity(seq: &ImuSequence, g: f64) -> Result<ImuSequence> {
    if seq.gravity_removed {
        return Err(Error::contract("gravity has already been removed from this sequence"));
    }
    Ok(ImuSequence {
        accel: shift_world_z(seq, -g),
        gravity_removed: true,
        ..seq.clone()
    })
}

/// Inverse of [`remove_gravity`].
pub fn restore_gravity(seq: &ImuSequence, g: f64) -> Result<ImuSequence> {
    if !seq.gravity_removed {
        return Err(Error::contract("sequence still contains gravity"));
    }
    Ok(ImuSequence {
        accel: shift_world_z(seq, g),
        gravity_removed: false,
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn single(accel: Vec3, q: Quat) -> ImuSequence {
        ImuSequence {
            sample_rate_hz: 100.0,
            t: vec![0.0],
            gyro: vec![[0.0; 3]],
            accel: vec![accel],
            orientation: vec![q],
            gt_pos: vec![[0.0; 3]],
            gravity_removed: false,
        }
    }

    #[test]
    fn identity_rotation() {
        let seq = single([0.3, -1.0, 2.0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(rotate_to_world(&seq).accel[0], [0.3, -1.0, 2.0]);
    }

    #[test]
    fn yaw_quarter_turn() {
        let v = rotate(quat_from_yaw(FRAC_PI_2), [1.0, 0.0, 0.0]);
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn stationary_gravity_removal() {
        let seq = single([0.0, 0.0, GRAVITY], [1.0, 0.0, 0.0, 0.0]);
        let out = remove_gravity(&seq, GRAVITY).unwrap();
        assert!(out.gravity_removed);
        assert!(out.accel[0].iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(remove_gravity(&out, GRAVITY), Err(Error::Contract(_))));
    }

    #[test]
    fn upside_down_gravity_removal() {
        // 180° roll about x: body z points down.
        let roll = [(PI / 2.0).cos(), (PI / 2.0).sin(), 0.0, 0.0];
        let seq = single([0.0, 0.0, -GRAVITY], roll);
        let world = rotate_to_world(&seq).accel[0];
        assert!((world[2] - GRAVITY).abs() < 1e-12);
        let out = remove_gravity(&seq, GRAVITY).unwrap();
        let world = rotate_to_world(&out).accel[0];
        assert!(world.iter().all(|v| v.abs() < 1e-12));
    }
}
