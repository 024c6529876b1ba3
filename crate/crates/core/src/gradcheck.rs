//! Central finite-difference gradient checking.
//!
//! Every differentiable primitive is verified against a 64-bit central
//! difference with step h = 1e-6. The checker treats the function under
//! test as a black box from flat parameter vectors to a scalar loss, so a
//! deliberately wrong backward rule is caught the same way a real one
//! would be.

use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-6;
/// Per-primitive elementwise tolerance.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Whole-model composed tolerance.
pub const MODEL_TOL: f64 = 1e-4;
/// Differences below this are treated as zero regardless of scale.
const ABS_FLOOR: f64 = 1e-9;

/// Outcome of checking one op or model.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// (input index, element index) of the worst element
    pub worst: (usize, usize),
    pub checked_elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-6)
}

/// A function under check: maps a set of flat input buffers to a scalar
/// loss, and reports the analytic gradient of each buffer.
pub trait LossFn {
    fn loss(&self, inputs: &[Vec<f64>]) -> f64;
    /// Analytic gradients, one buffer per input, same lengths.
    fn grads(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>>;
}

/// Check `f` at `inputs`, comparing the analytic gradient of every listed
/// element against a central difference. `elements[i]` lists which entries
/// of input `i` to probe; `None` probes all of them.
pub fn check<F: LossFn>(
    name: &str,
    f: &F,
    inputs: &[Vec<f64>],
    elements: Option<&[Vec<usize>]>,
    tolerance: f64,
) -> CheckReport {
    let analytic = f.grads(inputs);
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0usize);
    let mut checked = 0usize;

    let mut probe = inputs.to_vec();
    for (i, buf) in inputs.iter().enumerate() {
        let idxs: Vec<usize> = match elements {
            Some(sel) => sel[i].clone(),
            None => (0..buf.len()).collect(),
        };
        for &j in &idxs {
            let orig = probe[i][j];
            probe[i][j] = orig + FD_STEP;
            let up = f.loss(&probe);
            probe[i][j] = orig - FD_STEP;
            let down = f.loss(&probe);
            probe[i][j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i][j], fd);
            checked += 1;
            if e > max_rel {
                max_rel = e;
                worst = (i, j);
            }
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        worst,
        checked_elements: checked,
    }
}

/// Deterministic subset of element indices for large buffers: all of them
/// when small, otherwise an evenly spaced sample of `cap` entries.
pub fn sample_elements(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

/// Turn a failing report into an error naming op and element.
pub fn report_to_result(r: &CheckReport) -> Result<()> {
    if r.passed() {
        Ok(())
    } else {
        Err(Error::NumericAbort(format!(
            "gradient check failed for op `{}`: max rel err {:.3e} > {:.1e} at input {} element {}",
            r.name, r.max_rel_err, r.tolerance, r.worst.0, r.worst.1
        )))
    }
}

/// Check driver for functions expressed on a fresh tape per evaluation.
pub struct TapeCheck {
    shapes: Vec<Vec<usize>>,
    build: Box<dyn Fn(&mut crate::tape::Tape<f64>, &[crate::tape::NodeId]) -> crate::tape::NodeId>,
}

impl TapeCheck {
    pub fn new(
        shapes: Vec<Vec<usize>>,
        build: impl Fn(&mut crate::tape::Tape<f64>, &[crate::tape::NodeId]) -> crate::tape::NodeId
            + 'static,
    ) -> Self {
        TapeCheck {
            shapes,
            build: Box::new(build),
        }
    }

    fn run(&self, inputs: &[Vec<f64>]) -> (crate::tape::Tape<f64>, Vec<crate::tape::NodeId>, crate::tape::NodeId) {
        let mut tape = crate::tape::Tape::new();
        let ids: Vec<_> = self
            .shapes
            .iter()
            .zip(inputs)
            .map(|(s, d)| tape.leaf_from(s.clone(), d.clone(), true).expect("leaf"))
            .collect();
        let out = (self.build)(&mut tape, &ids);
        (tape, ids, out)
    }
}

impl LossFn for TapeCheck {
    fn loss(&self, inputs: &[Vec<f64>]) -> f64 {
        let (tape, _, out) = self.run(inputs);
        tape.data(out)[0]
    }

    fn grads(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (mut tape, ids, out) = self.run(inputs);
        tape.backward(out).expect("scalar loss");
        ids.iter()
            .map(|id| tape.grad(*id).expect("grad populated").to_vec())
            .collect()
    }
}

/// Finite-difference reports for every differentiable tape primitive.
pub mod suite {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check, CheckReport, TapeCheck, PRIMITIVE_TOL};

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Uniform values kept away from zero (for kinked ops like relu).
    fn uniform_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    /// Distinct values so that max-pool argmaxes are stable under the FD step.
    fn uniform_distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut base: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
        // deterministic shuffle keeps values far apart but unordered
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            base.swap(i, j);
        }
        base
    }

    fn wsum_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
    }

    fn run(name: &str, shapes: Vec<Vec<usize>>, inputs: Vec<Vec<f64>>, tc: TapeCheck) -> CheckReport {
        debug_assert_eq!(shapes.len(), inputs.len());
        check(name, &tc, &inputs, None, PRIMITIVE_TOL)
    }

    pub fn primitive_reports() -> Vec<CheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
        let mut reports = Vec::new();

        // matmul: 3x4 . 4x2
        {
            let shapes = vec![vec![3, 4], vec![4, 2]];
            let inputs = vec![uniform(&mut rng, 12), uniform(&mut rng, 8)];
            let w = wsum_weights(&mut rng, 6);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                t.weighted_sum(m, &w).unwrap()
            });
            reports.push(run("matmul", shapes, inputs, tc));
        }

        // elementwise add / mul
        {
            let shapes = vec![vec![2, 3], vec![2, 3]];
            let inputs = vec![uniform(&mut rng, 6), uniform(&mut rng, 6)];
            let w = wsum_weights(&mut rng, 6);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("add", shapes, inputs, tc));
        }
        {
            let shapes = vec![vec![2, 3], vec![2, 3]];
            let inputs = vec![uniform(&mut rng, 6), uniform(&mut rng, 6)];
            let w = wsum_weights(&mut rng, 6);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.mul(ids[0], ids[1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("mul", shapes, inputs, tc));
        }

        // scale
        {
            let shapes = vec![vec![5]];
            let inputs = vec![uniform(&mut rng, 5)];
            let w = wsum_weights(&mut rng, 5);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.scale(ids[0], -1.7);
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("scale", shapes, inputs, tc));
        }

        // relu (inputs kept away from the kink)
        {
            let shapes = vec![vec![4, 3]];
            let inputs = vec![uniform_off_zero(&mut rng, 12)];
            let w = wsum_weights(&mut rng, 12);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.relu(ids[0]);
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("relu", shapes, inputs, tc));
        }

        // bias_add
        {
            let shapes = vec![vec![4, 3], vec![3]];
            let inputs = vec![uniform(&mut rng, 12), uniform(&mut rng, 3)];
            let w = wsum_weights(&mut rng, 12);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.bias_add(ids[0], ids[1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("bias_add", shapes, inputs, tc));
        }

        // channel_bias_add
        {
            let shapes = vec![vec![3, 2, 2, 2], vec![3]];
            let inputs = vec![uniform(&mut rng, 24), uniform(&mut rng, 3)];
            let w = wsum_weights(&mut rng, 24);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.channel_bias_add(ids[0], ids[1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("channel_bias_add", shapes, inputs, tc));
        }

        // transpose
        {
            let shapes = vec![vec![3, 4]];
            let inputs = vec![uniform(&mut rng, 12)];
            let w = wsum_weights(&mut rng, 12);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.transpose(ids[0]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("transpose", shapes, inputs, tc));
        }

        // softmax along both axes of a matrix
        for axis in [0usize, 1usize] {
            let shapes = vec![vec![3, 5]];
            let inputs = vec![uniform(&mut rng, 15)];
            let w = wsum_weights(&mut rng, 15);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.softmax(ids[0], axis).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run(
                if axis == 0 { "softmax_axis0" } else { "softmax_axis1" },
                shapes,
                inputs,
                tc,
            ));
        }

        // stack_concat
        {
            let shapes = vec![vec![7], vec![7], vec![7]];
            let inputs = vec![
                uniform(&mut rng, 7),
                uniform(&mut rng, 7),
                uniform(&mut rng, 7),
            ];
            let w = wsum_weights(&mut rng, 21);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.stack_concat(ids).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("stack_concat", shapes, inputs, tc));
        }

        // mean_axis / global_average_pool
        {
            let shapes = vec![vec![4, 6]];
            let inputs = vec![uniform(&mut rng, 24)];
            let w = wsum_weights(&mut rng, 6);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.mean_axis(ids[0], 0).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("mean_axis", shapes, inputs, tc));
        }
        {
            let shapes = vec![vec![6, 4]];
            let inputs = vec![uniform(&mut rng, 24)];
            let w = wsum_weights(&mut rng, 6);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.global_average_pool(ids[0]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("global_average_pool", shapes, inputs, tc));
        }

        // reshape
        {
            let shapes = vec![vec![2, 6]];
            let inputs = vec![uniform(&mut rng, 12)];
            let w = wsum_weights(&mut rng, 12);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.reshape(ids[0], vec![3, 4]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("reshape", shapes, inputs, tc));
        }

        // conv3d: x [2,3,5,5], 4 kernels 3x3x3, stride 1, pad 1
        {
            let shapes = vec![vec![2, 3, 5, 5], vec![4, 2, 3, 3, 3]];
            let inputs = vec![uniform(&mut rng, 150), uniform(&mut rng, 216)];
            let w = wsum_weights(&mut rng, 4 * 3 * 5 * 5);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.conv3d(ids[0], ids[1], [1, 1, 1], [1, 1, 1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("conv3d", shapes, inputs, tc));
        }

        // conv3d with stride 2
        {
            let shapes = vec![vec![1, 4, 6, 6], vec![2, 1, 3, 3, 3]];
            let inputs = vec![uniform(&mut rng, 144), uniform(&mut rng, 54)];
            let w = wsum_weights(&mut rng, 2 * 2 * 3 * 3);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.conv3d(ids[0], ids[1], [2, 2, 2], [1, 1, 1]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("conv3d_strided", shapes, inputs, tc));
        }

        // maxpool3d (distinct inputs keep argmax stable under the step)
        {
            let shapes = vec![vec![2, 4, 4, 4]];
            let inputs = vec![uniform_distinct(&mut rng, 128)];
            let w = wsum_weights(&mut rng, 2 * 2 * 2 * 2);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let s = t.maxpool3d(ids[0], [2, 2, 2]).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("maxpool3d", shapes, inputs, tc));
        }

        // dropout in training mode with a fixed mask seed per evaluation
        {
            let shapes = vec![vec![40]];
            let inputs = vec![uniform(&mut rng, 40)];
            let w = wsum_weights(&mut rng, 40);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(1234);
                let s = t.dropout(ids[0], 0.3, true, &mut mask_rng).unwrap();
                t.weighted_sum(s, &w).unwrap()
            });
            reports.push(run("dropout", shapes, inputs, tc));
        }

        // cross_entropy on probabilities produced by a softmax
        {
            let shapes = vec![vec![4, 2]];
            let inputs = vec![uniform(&mut rng, 8)];
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                let p = t.softmax(ids[0], 1).unwrap();
                t.cross_entropy(p, &[0, 1, 1, 0]).unwrap()
            });
            reports.push(run("cross_entropy", shapes, inputs, tc));
        }

        // weighted_sum itself
        {
            let shapes = vec![vec![9]];
            let inputs = vec![uniform(&mut rng, 9)];
            let w = wsum_weights(&mut rng, 9);
            let tc = TapeCheck::new(shapes.clone(), move |t, ids| {
                t.weighted_sum(ids[0], &w).unwrap()
            });
            reports.push(run("weighted_sum", shapes, inputs, tc));
        }

        reports
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl LossFn for Quadratic {
        fn loss(&self, inputs: &[Vec<f64>]) -> f64 {
            inputs[0].iter().map(|v| v * v).sum()
        }
        fn grads(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
            vec![inputs[0].iter().map(|v| 2.0 * v).collect()]
        }
    }

    struct CorruptQuadratic;
    impl LossFn for CorruptQuadratic {
        fn loss(&self, inputs: &[Vec<f64>]) -> f64 {
            inputs[0].iter().map(|v| v * v).sum()
        }
        fn grads(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
            // deliberately wrong by 10%
            vec![inputs[0].iter().map(|v| 2.2 * v).collect()]
        }
    }

    #[test]
    fn accepts_correct_gradient() {
        let r = check("quadratic", &Quadratic, &[vec![0.3, -0.7, 1.1]], None, PRIMITIVE_TOL);
        assert!(r.passed(), "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn rejects_corrupted_gradient() {
        let r = check(
            "corrupt",
            &CorruptQuadratic,
            &[vec![0.3, -0.7, 1.1]],
            None,
            PRIMITIVE_TOL,
        );
        assert!(!r.passed());
        assert!(report_to_result(&r).is_err());
    }

    #[test]
    fn sampling_covers_small_buffers_fully() {
        assert_eq!(sample_elements(3, 8), vec![0, 1, 2]);
        let s = sample_elements(1000, 8);
        assert_eq!(s.len(), 8);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        for r in suite::primitive_reports() {
            assert!(
                r.passed(),
                "{}: max rel err {:.3e} (tol {:.1e}) at {:?}",
                r.name,
                r.max_rel_err,
                r.tolerance,
                r.worst
            );
        }
    }
}
