/// Integer line rasterization between two voxels.
///
/// The driving axis is the one with the largest absolute range (ties go
/// x, then y, then z). The line is sampled once per unit step along it; the
/// other two coordinates are the exact segment value rounded to nearest,
/// halves away from zero. The result is direction dependent: reversing the
/// endpoints can round halves differently.
pub fn bresenham3d(a: [i64; 3], b: [i64; 3]) -> Vec<[i64; 3]> {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut drive = 0;
    for axis in 1..3 {
        if d[axis].abs() > d[drive].abs() {
            drive = axis;
        }
    }
    let n = d[drive].abs();
    if n == 0 {
        return vec![a];
    }
    (0..=n)
        .map(|m| {
            let mut p = [0; 3];
            for axis in 0..3 {
                p[axis] = a[axis] + round_div(m * d[axis], n);
            }
            p
        })
        .collect()
}

/// `round(p / q)` with halves away from zero, for `q > 0`.
fn round_div(p: i64, q: i64) -> i64 {
    debug_assert!(q > 0);
    if p >= 0 {
        (2 * p + q) / (2 * q)
    } else {
        -((-2 * p + q) / (2 * q))
    }
}
