//! Network blocks: linear layers, the three-layer embedding MLP, the shared
//! 3-D conv encoder with per-modality stems, the self-attention module, and
//! the classifier head.
//!
//! All feature vectors produced by the blocks have width
//! [`FEATURE_WIDTH`] = 128.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Common width of every per-branch feature vector.
pub const FEATURE_WIDTH: usize = 128;
/// Channels produced by each modality stem and consumed by the trunk.
pub const STEM_CHANNELS: usize = 16;
/// Trunk output channels per block.
pub const TRUNK_CHANNELS: [usize; 4] = [32, 64, 128, 128];
/// Hidden width of the classifier head.
pub const HEAD_HIDDEN: usize = 64;
/// Width of a per-frame bbox encoding.
pub const BBOX_WIDTH: usize = 3;
/// Width of a per-frame pose encoding (18 joints x 2 coordinates).
pub const POSE_WIDTH: usize = 36;

/// Xavier-uniform init: U(-sqrt(6/(fan_in+fan_out)), +sqrt(...)).
pub fn xavier_uniform<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("consistent init shape").with_grad()
}

/// Visitor over named parameters. Iteration order is fixed by construction
/// and is the canonical order for the optimizer and checkpoints.
pub trait ParamVisitor<T: Scalar> {
    fn visit(&mut self, name: &str, decay: bool, t: &Tensor<T>);
}

pub trait ParamVisitorMut<T: Scalar> {
    fn visit(&mut self, name: &str, decay: bool, t: &mut Tensor<T>);
}

/// Fully-connected layer y = x W + b with x: [M, in], W: [in, out].
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    /// Whether L2 decay applies to `w` (fully-connected layers only).
    pub decay: bool,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, in_w: usize, out_w: usize, decay: bool) -> Self {
        Linear {
            w: xavier_uniform(rng, vec![in_w, out_w], in_w, out_w),
            b: Tensor::zeros(vec![out_w]).with_grad(),
            decay,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        let y = tape.matmul(x, w)?;
        let out = tape.bias_add(y, b)?;
        Ok(out)
    }

    /// Forward pass that also returns the parameter leaves for grad readback.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        binds: &mut Vec<(String, NodeId)>,
        prefix: &str,
    ) -> Result<NodeId> {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        binds.push((format!("{prefix}.w"), w));
        binds.push((format!("{prefix}.b"), b));
        let y = tape.matmul(x, w)?;
        let out = tape.bias_add(y, b)?;
        Ok(out)
    }

    pub fn visit(&self, prefix: &str, v: &mut impl ParamVisitor<T>) {
        v.visit(&format!("{prefix}.w"), self.decay, &self.w);
        v.visit(&format!("{prefix}.b"), false, &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl ParamVisitorMut<T>) {
        v.visit(&format!("{prefix}.w"), self.decay, &mut self.w);
        v.visit(&format!("{prefix}.b"), false, &mut self.b);
    }
}

/// Three linear layers with ReLU between them; embeds per-frame bbox (+pose)
/// rows into 128-wide feature vectors.
pub struct MlpEmbedder<T: Scalar> {
    pub layers: [Linear<T>; 3],
    pub input_width: usize,
}

impl<T: Scalar> MlpEmbedder<T> {
    pub fn new<R: Rng>(rng: &mut R, input_width: usize) -> Self {
        MlpEmbedder {
            layers: [
                Linear::new(rng, input_width, FEATURE_WIDTH, true),
                Linear::new(rng, FEATURE_WIDTH, FEATURE_WIDTH, true),
                Linear::new(rng, FEATURE_WIDTH, FEATURE_WIDTH, true),
            ],
            input_width,
        }
    }

    /// x: [N, input_width] -> [N, 128]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        binds: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.input_width {
            return Err(Error::Dimension(format!(
                "mlp expects [N, {}], got {s:?}",
                self.input_width
            )));
        }
        let mut h = self.layers[0].forward_bound(tape, x, binds, "mlp.l0")?;
        h = tape.relu(h);
        h = self.layers[1].forward_bound(tape, h, binds, "mlp.l1")?;
        h = tape.relu(h);
        self.layers[2].forward_bound(tape, h, binds, "mlp.l2")
    }

    pub fn visit(&self, v: &mut impl ParamVisitor<T>) {
        self.layers[0].visit("mlp.l0", v);
        self.layers[1].visit("mlp.l1", v);
        self.layers[2].visit("mlp.l2", v);
    }

    pub fn visit_mut(&mut self, v: &mut impl ParamVisitorMut<T>) {
        self.layers[0].visit_mut("mlp.l0", v);
        self.layers[1].visit_mut("mlp.l1", v);
        self.layers[2].visit_mut("mlp.l2", v);
    }
}

/// One 3-D convolution with bias.
pub struct Conv3dLayer<T: Scalar> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let kvol = kernel[0] * kernel[1] * kernel[2];
        Conv3dLayer {
            kernels: xavier_uniform(
                rng,
                vec![c_out, c_in, kernel[0], kernel[1], kernel[2]],
                c_in * kvol,
                c_out * kvol,
            ),
            bias: Tensor::zeros(vec![c_out]).with_grad(),
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        binds: &mut Vec<(String, NodeId)>,
        prefix: &str,
    ) -> Result<NodeId> {
        let k = tape.leaf(&self.kernels);
        let b = tape.leaf(&self.bias);
        binds.push((format!("{prefix}.k"), k));
        binds.push((format!("{prefix}.b"), b));
        let y = tape.conv3d(x, k, self.stride, self.pad)?;
        tape.channel_bias_add(y, b)
    }

    pub fn visit(&self, prefix: &str, v: &mut impl ParamVisitor<T>) {
        v.visit(&format!("{prefix}.k"), false, &self.kernels);
        v.visit(&format!("{prefix}.b"), false, &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl ParamVisitorMut<T>) {
        v.visit(&format!("{prefix}.k"), false, &mut self.kernels);
        v.visit(&format!("{prefix}.b"), false, &mut self.bias);
    }
}

/// Which stem a clip is routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// RGB crop of the pedestrian, 3 channels.
    Local,
    /// Binary segmentation masks, 8 channels.
    Semantic,
    /// Dense optical flow, 2 channels.
    Flow,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Local => 3,
            Modality::Semantic => 8,
            Modality::Flow => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Local => "local",
            Modality::Semantic => "semantic",
            Modality::Flow => "flow",
        }
    }
}

/// Shared spatio-temporal encoder. Each modality has its own 1x1x1 stem
/// projecting to 16 channels; the four-block trunk weights are the same
/// tensors for every modality. Blocks: conv 3x3x3 (pad 1) -> ReLU ->
/// max-pool halving every axis whose extent is still > 1.
pub struct ConvEncoder<T: Scalar> {
    pub stem_local: Option<Conv3dLayer<T>>,
    pub stem_semantic: Option<Conv3dLayer<T>>,
    pub stem_flow: Option<Conv3dLayer<T>>,
    pub trunk: Vec<Conv3dLayer<T>>,
}

impl<T: Scalar> ConvEncoder<T> {
    /// Build stems for the requested modalities plus the shared trunk.
    /// Draws for absent stems are skipped entirely, so parameter sets stay
    /// nested across variants sharing a seed only in structure, not values.
    pub fn new<R: Rng>(rng: &mut R, local: bool, semantic: bool, flow: bool) -> Self {
        let stem = |rng: &mut R, on: bool, c_in: usize| {
            on.then(|| Conv3dLayer::new(rng, c_in, STEM_CHANNELS, [1, 1, 1], [1, 1, 1], [0, 0, 0]))
        };
        let stem_local = stem(rng, local, Modality::Local.channels());
        let stem_semantic = stem(rng, semantic, Modality::Semantic.channels());
        let stem_flow = stem(rng, flow, Modality::Flow.channels());
        let mut trunk = Vec::with_capacity(4);
        let mut c_in = STEM_CHANNELS;
        for c_out in TRUNK_CHANNELS {
            trunk.push(Conv3dLayer::new(
                rng,
                c_in,
                c_out,
                [3, 3, 3],
                [1, 1, 1],
                [1, 1, 1],
            ));
            c_in = c_out;
        }
        ConvEncoder {
            stem_local,
            stem_semantic,
            stem_flow,
            trunk,
        }
    }

    fn stem(&self, m: Modality) -> Option<&Conv3dLayer<T>> {
        match m {
            Modality::Local => self.stem_local.as_ref(),
            Modality::Semantic => self.stem_semantic.as_ref(),
            Modality::Flow => self.stem_flow.as_ref(),
        }
    }

    /// x: [C_m, N, H, W] -> [128]
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        modality: Modality,
        binds: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[0] != modality.channels() {
            return Err(Error::Config(format!(
                "modality {} expects {} channels, got shape {s:?}",
                modality.name(),
                modality.channels()
            )));
        }
        let stem = self.stem(modality).ok_or_else(|| {
            Error::Config(format!("no stem built for modality {}", modality.name()))
        })?;
        let mut h = stem.forward(tape, x, binds, &format!("conv.stem_{}", modality.name()))?;
        for (i, block) in self.trunk.iter().enumerate() {
            h = block.forward(tape, h, binds, &format!("conv.trunk{i}"))?;
            h = tape.relu(h);
            let hs = tape.shape(h);
            let window = [
                if hs[1] > 1 { 2 } else { 1 },
                if hs[2] > 1 { 2 } else { 1 },
                if hs[3] > 1 { 2 } else { 1 },
            ];
            if window != [1, 1, 1] {
                h = tape.maxpool3d(h, window)?;
            }
        }
        // spatio-temporal mean -> one 128-wide vector
        let hs = tape.shape(h).to_vec();
        let flat = tape.reshape(h, vec![hs[0], hs[1] * hs[2] * hs[3]])?;
        tape.mean_axis(flat, 1)
    }

    pub fn visit(&self, v: &mut impl ParamVisitor<T>) {
        if let Some(s) = &self.stem_local {
            s.visit("conv.stem_local", v);
        }
        if let Some(s) = &self.stem_semantic {
            s.visit("conv.stem_semantic", v);
        }
        if let Some(s) = &self.stem_flow {
            s.visit("conv.stem_flow", v);
        }
        for (i, b) in self.trunk.iter().enumerate() {
            b.visit(&format!("conv.trunk{i}"), v);
        }
    }

    pub fn visit_mut(&mut self, v: &mut impl ParamVisitorMut<T>) {
        if let Some(s) = &mut self.stem_local {
            s.visit_mut("conv.stem_local", v);
        }
        if let Some(s) = &mut self.stem_semantic {
            s.visit_mut("conv.stem_semantic", v);
        }
        if let Some(s) = &mut self.stem_flow {
            s.visit_mut("conv.stem_flow", v);
        }
        for (i, b) in self.trunk.iter_mut().enumerate() {
            b.visit_mut(&format!("conv.trunk{i}"), v);
        }
    }
}

/// Attention output mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// [M, d] -> [M, d]: residual scaled dot-product refinement.
    Refine,
    /// [M, d] -> [d]: refine, then mean over rows.
    Reduce,
}

/// Single-head scaled dot-product self-attention with residual connection.
/// Dropout (when training) is applied to the attention weights.
pub struct AttentionModule<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub dim: usize,
}

impl<T: Scalar> AttentionModule<T> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        AttentionModule {
            wq: xavier_uniform(rng, vec![dim, dim], dim, dim),
            wk: xavier_uniform(rng, vec![dim, dim], dim, dim),
            wv: xavier_uniform(rng, vec![dim, dim], dim, dim),
            dim,
        }
    }

    /// x: [M, dim]. Refine: x + softmax(xWq (xWk)^T / sqrt(dim)) xWv.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        mode: AttentionMode,
        dropout_p: f64,
        training: bool,
        rng: &mut R,
        binds: &mut Vec<(String, NodeId)>,
        prefix: &str,
    ) -> Result<NodeId> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Dimension(format!(
                "attention expects [M, {}], got {s:?}",
                self.dim
            )));
        }
        let wq = tape.leaf(&self.wq);
        let wk = tape.leaf(&self.wk);
        let wv = tape.leaf(&self.wv);
        binds.push((format!("{prefix}.wq"), wq));
        binds.push((format!("{prefix}.wk"), wk));
        binds.push((format!("{prefix}.wv"), wv));

        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, T::from_f64(1.0 / (self.dim as f64).sqrt()));
        let mut weights = tape.softmax(scaled, 1)?;
        weights = tape.dropout(weights, dropout_p, training, rng)?;
        let attended = tape.matmul(weights, v)?;
        let refined = tape.add(x, attended)?;
        match mode {
            AttentionMode::Refine => Ok(refined),
            AttentionMode::Reduce => tape.mean_axis(refined, 0),
        }
    }

    pub fn visit(&self, prefix: &str, v: &mut impl ParamVisitor<T>) {
        v.visit(&format!("{prefix}.wq"), false, &self.wq);
        v.visit(&format!("{prefix}.wk"), false, &self.wk);
        v.visit(&format!("{prefix}.wv"), false, &self.wv);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl ParamVisitorMut<T>) {
        v.visit(&format!("{prefix}.wq"), false, &mut self.wq);
        v.visit(&format!("{prefix}.wk"), false, &mut self.wk);
        v.visit(&format!("{prefix}.wv"), false, &mut self.wv);
    }
}

/// FC 128 -> 64 -> ReLU -> FC 64 -> 2 -> softmax.
/// Output column 0 is p(crossing), column 1 is p(not crossing).
pub struct ClassifierHead<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        ClassifierHead {
            fc1: Linear::new(rng, FEATURE_WIDTH, HEAD_HIDDEN, true),
            fc2: Linear::new(rng, HEAD_HIDDEN, 2, true),
        }
    }

    /// f: [128] -> probabilities [2]
    pub fn classify(
        &self,
        tape: &mut Tape<T>,
        f: NodeId,
        binds: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let s = tape.shape(f);
        if s != [FEATURE_WIDTH] {
            return Err(Error::Dimension(format!(
                "classifier expects [{FEATURE_WIDTH}], got {s:?}"
            )));
        }
        let row = tape.reshape(f, vec![1, FEATURE_WIDTH])?;
        let mut h = self.fc1.forward_bound(tape, row, binds, "head.fc1")?;
        h = tape.relu(h);
        h = self.fc2.forward_bound(tape, h, binds, "head.fc2")?;
        let p = tape.softmax(h, 1)?;
        tape.reshape(p, vec![2])
    }

    pub fn visit(&self, v: &mut impl ParamVisitor<T>) {
        self.fc1.visit("head.fc1", v);
        self.fc2.visit("head.fc2", v);
    }

    pub fn visit_mut(&mut self, v: &mut impl ParamVisitorMut<T>) {
        self.fc1.visit_mut("head.fc1", v);
        self.fc2.visit_mut("head.fc2", v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ZeroWeights;
    impl ParamVisitorMut<f64> for ZeroWeights {
        fn visit(&mut self, _name: &str, _decay: bool, t: &mut Tensor<f64>) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mlp_zero_weights_passes_final_bias_through() {
        let mut r = rng();
        let mut mlp = MlpEmbedder::<f64>::new(&mut r, 39);
        mlp.visit_mut(&mut ZeroWeights);
        let bias: Vec<f64> = (0..FEATURE_WIDTH).map(|i| i as f64 * 0.01).collect();
        mlp.layers[2].b.data_mut().copy_from_slice(&bias);

        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 39], vec![0.3; 78], false).unwrap();
        let mut binds = Vec::new();
        let out = mlp.forward(&mut tape, x, &mut binds).unwrap();
        assert_eq!(tape.shape(out), &[2, FEATURE_WIDTH]);
        for row in 0..2 {
            assert_eq!(
                &tape.data(out)[row * FEATURE_WIDTH..(row + 1) * FEATURE_WIDTH],
                &bias[..]
            );
        }
    }

    #[test]
    fn mlp_zero_input_zero_bias_gives_zero() {
        let mut r = rng();
        let mlp = MlpEmbedder::<f64>::new(&mut r, 39);
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3, 39], vec![0.0; 117], false).unwrap();
        let mut binds = Vec::new();
        let out = mlp.forward(&mut tape, x, &mut binds).unwrap();
        assert!(tape.data(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut r = rng();
        let mlp = MlpEmbedder::<f64>::new(&mut r, 39);
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 3], vec![0.0; 6], false).unwrap();
        let mut binds = Vec::new();
        assert!(matches!(
            mlp.forward(&mut tape, x, &mut binds),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_zero_value_projection_is_identity() {
        let mut r = rng();
        let mut att = AttentionModule::<f64>::new(&mut r, 6);
        att.wv.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let row = vec![0.4, -0.2, 0.9, 0.0, 0.3, -0.7];
        let x = tape.leaf_from(vec![1, 6], row.clone(), false).unwrap();
        let mut binds = Vec::new();
        let out = att
            .forward(
                &mut tape,
                x,
                AttentionMode::Refine,
                0.0,
                false,
                &mut r,
                &mut binds,
                "att",
            )
            .unwrap();
        assert_eq!(tape.data(out), &row[..]);
    }

    #[test]
    fn attention_all_zero_projections_are_identity() {
        let mut r = rng();
        let mut att = AttentionModule::<f64>::new(&mut r, 5);
        att.visit_mut("att", &mut ZeroWeights);
        let mut tape = Tape::new();
        let data = uniform(&mut r, 15);
        let x = tape.leaf_from(vec![3, 5], data.clone(), false).unwrap();
        let mut binds = Vec::new();
        let out = att
            .forward(
                &mut tape,
                x,
                AttentionMode::Refine,
                0.0,
                false,
                &mut r,
                &mut binds,
                "att",
            )
            .unwrap();
        assert_eq!(tape.data(out), &data[..]);
    }

    #[test]
    fn attention_identical_rows_reduce_to_single_row_refine() {
        let mut r = rng();
        let att = AttentionModule::<f64>::new(&mut r, 6);
        let row = vec![0.2, -0.5, 0.7, 0.1, -0.3, 0.9];

        let mut tape = Tape::new();
        let mut binds = Vec::new();
        let mut stacked = Vec::new();
        for _ in 0..3 {
            stacked.extend_from_slice(&row);
        }
        let x3 = tape.leaf_from(vec![3, 6], stacked, false).unwrap();
        let reduced = att
            .forward(&mut tape, x3, AttentionMode::Reduce, 0.0, false, &mut r, &mut binds, "a")
            .unwrap();

        let x1 = tape.leaf_from(vec![1, 6], row, false).unwrap();
        let refined = att
            .forward(&mut tape, x1, AttentionMode::Refine, 0.0, false, &mut r, &mut binds, "a")
            .unwrap();

        for (a, b) in tape.data(reduced).iter().zip(tape.data(refined)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_matches_direct_small_matrix_evaluation() {
        let mut r = rng();
        let att = AttentionModule::<f64>::new(&mut r, 4);
        let x = uniform(&mut r, 12); // M=3, d=4

        // direct evaluation with plain loops
        let d = 4usize;
        let m = 3usize;
        let mm = |a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    for p in 0..inner {
                        out[i * cols + j] += a[i * inner + p] * b[p * cols + j];
                    }
                }
            }
            out
        };
        let q = mm(&x, att.wq.data(), m, d, d);
        let k = mm(&x, att.wk.data(), m, d, d);
        let v = mm(&x, att.wv.data(), m, d, d);
        let mut scores = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for p in 0..d {
                    scores[i * m + j] += q[i * d + p] * k[j * d + p];
                }
                scores[i * m + j] /= (d as f64).sqrt();
            }
        }
        let mut weights = vec![0.0; m * m];
        for i in 0..m {
            let mx = scores[i * m..(i + 1) * m]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                weights[i * m + j] = (scores[i * m + j] - mx).exp();
                z += weights[i * m + j];
            }
            for j in 0..m {
                weights[i * m + j] /= z;
            }
        }
        let mut expect = x.clone();
        let av = mm(&weights, &v, m, m, d);
        for i in 0..m * d {
            expect[i] += av[i];
        }

        let mut tape = Tape::new();
        let mut binds = Vec::new();
        let xn = tape.leaf_from(vec![3, 4], x, false).unwrap();
        let out = att
            .forward(&mut tape, xn, AttentionMode::Refine, 0.0, false, &mut r, &mut binds, "a")
            .unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn classifier_zero_weights_is_symmetric() {
        let mut r = rng();
        let mut head = ClassifierHead::<f64>::new(&mut r);
        head.visit_mut(&mut ZeroWeights);
        let mut tape = Tape::new();
        let f = tape
            .leaf_from(vec![FEATURE_WIDTH], uniform(&mut r, FEATURE_WIDTH), false)
            .unwrap();
        let mut binds = Vec::new();
        let p = head.classify(&mut tape, f, &mut binds).unwrap();
        assert_eq!(tape.data(p), &[0.5, 0.5]);
    }

    #[test]
    fn classifier_crafted_logits_give_closed_form() {
        let mut r = rng();
        let mut head = ClassifierHead::<f64>::new(&mut r);
        head.visit_mut(&mut ZeroWeights);
        // relu(fc1 bias)[0] = 1, then fc2 w[0,0] = ln 3 makes logits [ln3, 0]
        head.fc1.b.data_mut()[0] = 1.0;
        head.fc2.w.data_mut()[0] = 3.0f64.ln();
        let mut tape = Tape::new();
        let f = tape.leaf_from(vec![FEATURE_WIDTH], vec![0.0; FEATURE_WIDTH], false).unwrap();
        let mut binds = Vec::new();
        let p = head.classify(&mut tape, f, &mut binds).unwrap();
        let got = tape.data(p);
        assert!((got[0] - 0.75).abs() < 1e-12 && (got[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn classifier_outputs_are_probabilities() {
        let mut r = rng();
        let head = ClassifierHead::<f64>::new(&mut r);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let f = tape
                .leaf_from(vec![FEATURE_WIDTH], uniform(&mut r, FEATURE_WIDTH), false)
                .unwrap();
            let mut binds = Vec::new();
            let p = head.classify(&mut tape, f, &mut binds).unwrap();
            let got = tape.data(p);
            assert!(got.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!((got[0] + got[1] - 1.0).abs() < 1e-6);
        }
    }

    fn encoder_input(r: &mut ChaCha8Rng, m: Modality) -> Tensor<f64> {
        let c = m.channels();
        Tensor::new(vec![c, 2, 8, 8], uniform(r, c * 128)).unwrap()
    }

    fn encode_once(
        enc: &ConvEncoder<f64>,
        input: &Tensor<f64>,
        m: Modality,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let mut binds = Vec::new();
        let out = enc.encode(&mut tape, x, m, &mut binds).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn conv_encoder_output_width_at_full_resolution() {
        let mut r = rng();
        let enc = ConvEncoder::<f32>::new(&mut r, true, false, false);
        let input = Tensor::<f32>::zeros(vec![3, 16, 112, 112]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let mut binds = Vec::new();
        let out = enc.encode(&mut tape, x, Modality::Local, &mut binds).unwrap();
        assert_eq!(tape.shape(out), &[FEATURE_WIDTH]);
    }

    #[test]
    fn conv_encoder_zero_input_zero_bias_gives_zero() {
        let mut r = rng();
        let enc = ConvEncoder::<f64>::new(&mut r, true, true, true);
        let input = Tensor::<f64>::zeros(vec![8, 2, 8, 8]);
        let out = encode_once(&enc, &input, Modality::Semantic);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_encoder_rejects_channel_mismatch() {
        let mut r = rng();
        let enc = ConvEncoder::<f64>::new(&mut r, true, true, true);
        let input = Tensor::<f64>::zeros(vec![3, 2, 8, 8]);
        let mut tape = Tape::new();
        let x = tape.leaf(&input);
        let mut binds = Vec::new();
        assert!(matches!(
            enc.encode(&mut tape, x, Modality::Flow, &mut binds),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trunk_weights_are_shared_and_stems_are_not() {
        let mut r = rng();
        let mut enc = ConvEncoder::<f64>::new(&mut r, true, true, true);
        let inputs = [
            encoder_input(&mut r, Modality::Local),
            encoder_input(&mut r, Modality::Semantic),
            encoder_input(&mut r, Modality::Flow),
        ];
        let mods = [Modality::Local, Modality::Semantic, Modality::Flow];
        let base: Vec<Vec<f64>> = mods
            .iter()
            .zip(&inputs)
            .map(|(m, i)| encode_once(&enc, i, *m))
            .collect();

        // a trunk perturbation moves every modality's output
        enc.trunk[0].kernels.data_mut()[0] += 0.05;
        for (i, m) in mods.iter().enumerate() {
            let out = encode_once(&enc, &inputs[i], *m);
            assert_ne!(out, base[i], "trunk change must affect {}", m.name());
        }
        enc.trunk[0].kernels.data_mut()[0] -= 0.05;

        // a local-stem perturbation moves only the local output
        enc.stem_local.as_mut().unwrap().kernels.data_mut()[0] += 0.05;
        let out_local = encode_once(&enc, &inputs[0], Modality::Local);
        assert_ne!(out_local, base[0]);
        let out_sem = encode_once(&enc, &inputs[1], Modality::Semantic);
        let out_flow = encode_once(&enc, &inputs[2], Modality::Flow);
        assert_eq!(out_sem, base[1]);
        assert_eq!(out_flow, base[2]);
    }

    #[test]
    fn trunk_gradient_is_sum_of_per_modality_gradients() {
        let mut r = rng();
        let enc = ConvEncoder::<f64>::new(&mut r, true, true, true);
        let inputs = [
            encoder_input(&mut r, Modality::Local),
            encoder_input(&mut r, Modality::Semantic),
            encoder_input(&mut r, Modality::Flow),
        ];
        let mods = [Modality::Local, Modality::Semantic, Modality::Flow];
        let weights = uniform(&mut r, FEATURE_WIDTH);

        let trunk_grads = |only: Option<usize>| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let mut binds = Vec::new();
            let mut loss_terms = Vec::new();
            for (i, m) in mods.iter().enumerate() {
                if only.is_some_and(|o| o != i) {
                    continue;
                }
                let x = tape.leaf(&inputs[i]);
                let f = enc.encode(&mut tape, x, *m, &mut binds).unwrap();
                loss_terms.push(tape.weighted_sum(f, &weights).unwrap());
            }
            let mut loss = loss_terms[0];
            for t in &loss_terms[1..] {
                loss = tape.add(loss, *t).unwrap();
            }
            tape.backward(loss).unwrap();
            // gradient per trunk tensor, summed over all binds of that name
            let mut out = Vec::new();
            for block in 0..4 {
                let name = format!("conv.trunk{block}.k");
                let mut acc: Option<Vec<f64>> = None;
                for (n, id) in &binds {
                    if *n == name {
                        let g = tape.grad(*id).unwrap();
                        match &mut acc {
                            Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
                            None => acc = Some(g.to_vec()),
                        }
                    }
                }
                out.push(acc.unwrap());
            }
            out
        };

        let full = trunk_grads(None);
        let parts: Vec<_> = (0..3).map(|i| trunk_grads(Some(i))).collect();
        for block in 0..4 {
            for (j, &g) in full[block].iter().enumerate() {
                let sum: f64 = parts.iter().map(|p| p[block][j]).sum();
                assert!(
                    (g - sum).abs() < 1e-6,
                    "trunk{block}[{j}]: full {g} vs sum {sum}"
                );
            }
        }
    }
}
