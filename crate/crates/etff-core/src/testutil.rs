//! Shared helpers for unit tests: seeded RNGs, random geometries and rigid
//! motions.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// n×3 coordinates uniform in [-scale, scale]^3.
pub fn random_positions(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, 3), |_| rng.gen_range(-scale..scale))
}

/// Uniformly distributed rotation matrix sampled via a random unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm2: f64 = q.iter().map(|v| v * v).sum();
        if norm2 > 1e-6 && norm2 <= 1.0 {
            let norm = norm2.sqrt();
            for v in q.iter_mut() {
                *v /= norm;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Applies `rot` to every row of `positions`.
pub fn rotate_positions(positions: &Array2<f64>, rot: &[[f64; 3]; 3]) -> Array2<f64> {
    let n = positions.nrows();
    let mut out = Array2::zeros((n, 3));
    for i in 0..n {
        for a in 0..3 {
            out[[i, a]] = (0..3).map(|b| rot[a][b] * positions[[i, b]]).sum();
        }
    }
    out
}

/// Random rotation plus random translation applied to `positions`.
pub fn random_rigid_motion(rng: &mut ChaCha8Rng, positions: &Array2<f64>) -> Array2<f64> {
    let rot = random_rotation(rng);
    let shift: [f64; 3] = [
        rng.gen_range(-10.0..10.0),
        rng.gen_range(-10.0..10.0),
        rng.gen_range(-10.0..10.0),
    ];
    let mut out = rotate_positions(positions, &rot);
    for mut row in out.outer_iter_mut() {
        for (a, s) in shift.iter().enumerate() {
            row[a] += s;
        }
    }
    out
}
