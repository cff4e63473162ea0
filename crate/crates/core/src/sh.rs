//! Real spherical-harmonic basis up to degree 3 (the 3DGS convention).

use crate::math::Scalar;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values for a unit direction `dir`, `coeff_count(degree)` entries.
pub fn basis<T: Scalar>(degree: usize, dir: &[T; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(coeff_count(degree));
    out.push(T::cst(SH_C0));
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    out.push(y * (-SH_C1));
    out.push(z * SH_C1);
    out.push(x * (-SH_C1));
    if degree == 1 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out.push(xy * SH_C2[0]);
    out.push(yz * SH_C2[1]);
    out.push((zz * 2.0 - xx - yy) * SH_C2[2]);
    out.push(xz * SH_C2[3]);
    out.push((xx - yy) * SH_C2[4]);
    if degree == 2 {
        return out;
    }
    out.push(y * (xx * 3.0 - yy) * SH_C3[0]);
    out.push(xy * z * SH_C3[1]);
    out.push(y * (zz * 4.0 - xx - yy) * SH_C3[2]);
    out.push(z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * SH_C3[3]);
    out.push(x * (zz * 4.0 - xx - yy) * SH_C3[4]);
    out.push(z * (xx - yy) * SH_C3[5]);
    out.push(x * (xx - yy * 3.0) * SH_C3[6]);
    out
}
