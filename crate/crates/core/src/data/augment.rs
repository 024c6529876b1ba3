//! Sequence-consistent augmentation: horizontal flip, roll rotation, and
//! colour jitter. Each transform is drawn once per sequence and applied to
//! all N frames, images, boxes and poses together.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{SequenceSample, LEFT_RIGHT_SWAP, POSE_JOINTS};

/// Maximum roll rotation magnitude, degrees.
pub const MAX_ROLL_DEGREES: f64 = 10.0;
/// Brightness / contrast jitter range.
pub const JITTER_RANGE: (f64, f64) = (0.8, 1.2);

const COORD_GRID: f64 = (1u32 << 24) as f64;

/// Round a normalized coordinate onto the 2^-24 grid. On this grid the
/// horizontal-flip map x -> 1 - x is exact in f32, which keeps double
/// flips bit-identical.
pub fn quantize_coord(x: f64) -> f32 {
    ((x.clamp(0.0, 1.0) * COORD_GRID).round() / COORD_GRID) as f32
}

fn flip_image(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape().to_vec();
    let (c, n, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let _ = (c, n, h);
    Tensor::new(s, data).expect("same shape")
}

/// Mirror every modality. Flow's u channel is negated, bbox and pose
/// x-coordinates map to 1 - x, and left/right joints are swapped. The
/// (0, 0) occluded-joint sentinel is preserved.
pub fn horizontal_flip(s: &SequenceSample) -> SequenceSample {
    let local = flip_image(&s.local);
    let semantic = flip_image(&s.semantic);
    let mut flow = flip_image(&s.flow);
    {
        let fs = flow.shape().to_vec();
        let plane = fs[1] * fs[2] * fs[3];
        for v in &mut flow.data_mut()[..plane] {
            *v = -*v;
        }
    }

    let mut bbox = s.bbox.clone();
    for row in bbox.data_mut().chunks_mut(3) {
        row[0] = 1.0 - row[0];
    }

    let mut pose = s.pose.clone();
    for frame in pose.data_mut().chunks_mut(POSE_JOINTS * 2) {
        for j in 0..POSE_JOINTS {
            let (x, y) = (frame[2 * j], frame[2 * j + 1]);
            if x != 0.0 || y != 0.0 {
                frame[2 * j] = 1.0 - x;
            }
        }
        for (a, b) in LEFT_RIGHT_SWAP {
            frame.swap(2 * a, 2 * b);
            frame.swap(2 * a + 1, 2 * b + 1);
        }
    }

    SequenceSample {
        local,
        semantic,
        flow,
        bbox,
        pose,
        label: s.label,
        tte: s.tte,
        source_id: s.source_id.clone(),
    }
}

enum Resample {
    Bilinear,
    Nearest,
}

/// Rotate the image content by `theta` about the frame center via inverse
/// mapping; out-of-frame samples read as zero.
fn rotate_image(t: &Tensor<f32>, theta: f64, resample: Resample) -> Tensor<f32> {
    let s = t.shape().to_vec();
    let (c, n, h, w) = (s[0], s[1], s[2], s[3]);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = t.data();
    let mut data = vec![0.0f32; src.len()];
    let plane = h * w;
    for ci in 0..c {
        for ni in 0..n {
            let base = (ci * n + ni) * plane;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    // inverse rotation R(-theta)
                    let sx = cx + cos_t * dx + sin_t * dy;
                    let sy = cy - sin_t * dx + cos_t * dy;
                    let v = match resample {
                        Resample::Nearest => {
                            let (ix, iy) = (sx.round() as i64, sy.round() as i64);
                            if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                                0.0
                            } else {
                                src[base + iy as usize * w + ix as usize]
                            }
                        }
                        Resample::Bilinear => {
                            let x0 = sx.floor();
                            let y0 = sy.floor();
                            let (fx, fy) = (sx - x0, sy - y0);
                            let mut acc = 0.0f64;
                            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                                    let (ix, iy) = (x0 as i64 + ox, y0 as i64 + oy);
                                    if ix >= 0 && iy >= 0 && ix < w as i64 && iy < h as i64 {
                                        acc += wy * wx
                                            * src[base + iy as usize * w + ix as usize] as f64;
                                    }
                                }
                            }
                            acc as f32
                        }
                    };
                    data[base + y * w + x] = v;
                }
            }
        }
    }
    Tensor::new(s, data).expect("same shape")
}

fn rotate_point(x: f64, y: f64, cos_t: f64, sin_t: f64) -> (f64, f64) {
    let (dx, dy) = (x - 0.5, y - 0.5);
    (
        0.5 + cos_t * dx - sin_t * dy,
        0.5 + sin_t * dx + cos_t * dy,
    )
}

/// Roll the whole sequence by `theta` radians: images resample about the
/// center (bilinear for RGB and flow, nearest for masks), flow vectors and
/// pose points rotate with the content, and h_b is recomputed from the
/// rotated vertical extent (width was dropped, so the box is treated as a
/// vertical segment). Coordinates are clamped back into [0, 1].
pub fn roll_rotate(s: &SequenceSample, theta: f64) -> SequenceSample {
    let (cos_t, sin_t) = (theta.cos(), theta.sin());

    let local = rotate_image(&s.local, theta, Resample::Bilinear);
    let semantic = rotate_image(&s.semantic, theta, Resample::Nearest);
    let mut flow = rotate_image(&s.flow, theta, Resample::Bilinear);
    {
        let fs = flow.shape().to_vec();
        let plane = fs[1] * fs[2] * fs[3];
        let data = flow.data_mut();
        for i in 0..plane {
            let (u, v) = (data[i] as f64, data[plane + i] as f64);
            data[i] = (cos_t * u - sin_t * v) as f32;
            data[plane + i] = (sin_t * u + cos_t * v) as f32;
        }
    }

    let mut bbox = s.bbox.clone();
    for row in bbox.data_mut().chunks_mut(3) {
        let (x, y) = rotate_point(row[0] as f64, row[1] as f64, cos_t, sin_t);
        row[0] = x.clamp(0.0, 1.0) as f32;
        row[1] = y.clamp(0.0, 1.0) as f32;
        row[2] = ((row[2] as f64) * cos_t.abs()).clamp(0.0, 1.0) as f32;
    }

    let mut pose = s.pose.clone();
    for frame in pose.data_mut().chunks_mut(POSE_JOINTS * 2) {
        for j in 0..POSE_JOINTS {
            let (x, y) = (frame[2 * j] as f64, frame[2 * j + 1] as f64);
            if x == 0.0 && y == 0.0 {
                continue;
            }
            let (rx, ry) = rotate_point(x, y, cos_t, sin_t);
            frame[2 * j] = rx.clamp(0.0, 1.0) as f32;
            frame[2 * j + 1] = ry.clamp(0.0, 1.0) as f32;
        }
    }

    SequenceSample {
        local,
        semantic,
        flow,
        bbox,
        pose,
        label: s.label,
        tte: s.tte,
        source_id: s.source_id.clone(),
    }
}

/// Scale brightness then contrast (about mid-gray) of the local RGB crop
/// only; the result is clamped back into [0, 1].
pub fn color_jitter(s: &SequenceSample, brightness: f64, contrast: f64) -> SequenceSample {
    let mut out = s.clone();
    for v in out.local.data_mut() {
        let j = ((*v as f64) * brightness - 0.5) * contrast + 0.5;
        *v = j.clamp(0.0, 1.0) as f32;
    }
    out
}

/// Apply each augmentation independently with probability `p`, drawing its
/// parameters once per sequence.
pub fn augment<R: Rng>(s: &SequenceSample, rng: &mut R, p: f64) -> Result<SequenceSample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "augmentation probability must be in [0, 1], got {p}"
        )));
    }
    let do_flip = rng.gen_bool(p);
    let do_rotate = rng.gen_bool(p);
    let do_jitter = rng.gen_bool(p);

    let mut out = if do_flip {
        horizontal_flip(s)
    } else {
        s.clone()
    };
    if do_rotate {
        let max = MAX_ROLL_DEGREES.to_radians();
        let theta = rng.gen_range(-max..=max);
        out = roll_rotate(&out, theta);
    }
    if do_jitter {
        let b = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        let c = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        out = color_jitter(&out, b, c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
        a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn samples_bit_equal(a: &SequenceSample, b: &SequenceSample) -> bool {
        bits_equal(&a.local, &b.local)
            && bits_equal(&a.semantic, &b.semantic)
            && bits_equal(&a.flow, &b.flow)
            && bits_equal(&a.bbox, &b.bbox)
            && bits_equal(&a.pose, &b.pose)
            && a.label == b.label
    }

    fn grid_sample(seed: u64, n: usize) -> SequenceSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = 6usize;
        let img = |c: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![c, n, g, g],
                (0..c * n * g * g).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        let local = img(3, &mut rng);
        let semantic = Tensor::new(
            vec![8, n, g, g],
            (0..8 * n * g * g)
                .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let flow = Tensor::new(
            vec![2, n, g, g],
            (0..2 * n * g * g).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let bbox = Tensor::new(
            vec![n, 3],
            (0..n * 3)
                .map(|_| quantize_coord(rng.gen_range(0.2..0.8)))
                .collect(),
        )
        .unwrap();
        let mut pose_data = Vec::new();
        for _ in 0..n {
            for j in 0..POSE_JOINTS {
                if j == 16 {
                    // one occluded joint per frame
                    pose_data.extend_from_slice(&[0.0, 0.0]);
                } else {
                    pose_data.push(quantize_coord(rng.gen_range(0.25..0.75)));
                    pose_data.push(quantize_coord(rng.gen_range(0.25..0.75)));
                }
            }
        }
        let pose = Tensor::new(vec![n, 36], pose_data).unwrap();
        SequenceSample {
            local,
            semantic,
            flow,
            bbox,
            pose,
            label: 1,
            tte: 80,
            source_id: format!("grid-{seed}"),
        }
    }

    #[test]
    fn no_op_draws_leave_sample_bit_unchanged() {
        let s = grid_sample(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &mut rng, 0.0).unwrap();
        assert!(samples_bit_equal(&s, &out));
    }

    #[test]
    fn augment_rejects_bad_probability() {
        let s = grid_sample(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&s, &mut rng, 1.5).is_err());
    }

    #[test]
    fn flip_maps_bbox_x() {
        let mut s = grid_sample(2, 1);
        s.bbox.data_mut()[0] = 0.3;
        let f = horizontal_flip(&s);
        assert!((f.bbox.data()[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn double_flip_is_bit_identity() {
        for seed in 0..5 {
            let s = grid_sample(seed, 3);
            let ff = horizontal_flip(&horizontal_flip(&s));
            assert!(samples_bit_equal(&s, &ff), "seed {seed}");
        }
    }

    #[test]
    fn flip_preserves_occluded_joint_sentinel() {
        let s = grid_sample(3, 1);
        let f = horizontal_flip(&s);
        // joint 16 (r-ear) was the sentinel; after the swap it sits at 17
        assert_eq!(f.pose.data()[2 * 17], 0.0);
        assert_eq!(f.pose.data()[2 * 17 + 1], 0.0);
    }

    #[test]
    fn flipped_flow_u_is_negated_mirror() {
        let s = grid_sample(4, 2);
        let f = horizontal_flip(&s);
        let sh = s.flow.shape().to_vec();
        let (n, h, w) = (sh[1], sh[2], sh[3]);
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let orig = s.flow.data()[(ni * h + y) * w + x];
                    let flip = f.flow.data()[(ni * h + y) * w + (w - 1 - x)];
                    assert_eq!(flip.to_bits(), (-orig).to_bits());
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_recovers_pose() {
        let s = grid_sample(5, 2);
        let theta = 8.0f64.to_radians();
        let back = roll_rotate(&roll_rotate(&s, theta), -theta);
        for (a, b) in back.pose.data().iter().zip(s.pose.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in back.bbox.data().iter().zip(s.bbox.data()) {
            // h_b shrinks by cos^2; only centers are recovered
            if (a - b).abs() > 1e-6 {
                assert!(*a <= *b, "h_b may only shrink: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rotation_keeps_semantic_binary_and_ranges_valid() {
        let s = grid_sample(6, 2);
        let r = roll_rotate(&s, -9.0f64.to_radians());
        assert!(r.semantic.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(r.bbox.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.pose.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.local.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jitter_touches_only_local() {
        let s = grid_sample(7, 2);
        let j = color_jitter(&s, 1.15, 0.9);
        assert!(bits_equal(&j.semantic, &s.semantic));
        assert!(bits_equal(&j.flow, &s.flow));
        assert!(bits_equal(&j.bbox, &s.bbox));
        assert!(bits_equal(&j.pose, &s.pose));
        assert!(!bits_equal(&j.local, &s.local));
        assert!(j.local.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmented_samples_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let s = grid_sample(seed + 100, 2);
            let a = augment(&s, &mut rng, 0.5).unwrap();
            a.validate().unwrap();
        }
    }
}
