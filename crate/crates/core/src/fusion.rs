//! The fused crossing-intention model and its ablation variants.
//!
//! Per sample, the full pipeline embeds the per-frame bbox(+pose) rows with
//! the MLP, pools them over time with a reduce-attention, encodes each image
//! modality through the shared conv trunk, fuses semantic+local into an
//! environment feature and flow+environment into a motion feature, refines
//! the final stack with attention, transposes it into f_H (128 x K), and
//! classifies the global average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::nn::{
    AttentionMode, AttentionModule, ClassifierHead, ConvEncoder, MlpEmbedder, Modality,
    ParamVisitor, ParamVisitorMut, FEATURE_WIDTH,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Which feature sources are wired in. `B` (bounding box) is always on;
/// the only valid presets are the ablation ladder rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub use_local: bool,
    pub use_global: bool,
    pub use_pose: bool,
    pub use_motion: bool,
}

impl VariantSpec {
    pub const B: VariantSpec = VariantSpec {
        use_local: false,
        use_global: false,
        use_pose: false,
        use_motion: false,
    };
    pub const BL: VariantSpec = VariantSpec {
        use_local: true,
        use_global: false,
        use_pose: false,
        use_motion: false,
    };
    pub const BLG: VariantSpec = VariantSpec {
        use_local: true,
        use_global: true,
        use_pose: false,
        use_motion: false,
    };
    pub const BLGP: VariantSpec = VariantSpec {
        use_local: true,
        use_global: true,
        use_pose: true,
        use_motion: false,
    };
    pub const BLGPM: VariantSpec = VariantSpec {
        use_local: true,
        use_global: true,
        use_pose: true,
        use_motion: true,
    };

    /// Table-ordered ablation ladder.
    pub const LADDER: [VariantSpec; 5] = [
        VariantSpec::B,
        VariantSpec::BL,
        VariantSpec::BLG,
        VariantSpec::BLGP,
        VariantSpec::BLGPM,
    ];

    pub const fn use_bbox(&self) -> bool {
        true
    }

    pub fn from_flags(local: bool, global: bool, pose: bool, motion: bool) -> Result<Self> {
        let v = VariantSpec {
            use_local: local,
            use_global: global,
            use_pose: pose,
            use_motion: motion,
        };
        if Self::LADDER.contains(&v) {
            Ok(v)
        } else {
            Err(Error::Config(format!(
                "invalid variant flags (L={local} G={global} P={pose} M={motion}); \
                 valid presets: B, BL, BLG, BLGP, BLGPM"
            )))
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Self::B),
            "BL" => Ok(Self::BL),
            "BLG" => Ok(Self::BLG),
            "BLGP" => Ok(Self::BLGP),
            "BLGPM" => Ok(Self::BLGPM),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`; expected one of B, BL, BLG, BLGP, BLGPM"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_local, self.use_global, self.use_pose, self.use_motion) {
            (false, false, false, false) => "B",
            (true, false, false, false) => "BL",
            (true, true, false, false) => "BLG",
            (true, true, true, false) => "BLGP",
            (true, true, true, true) => "BLGPM",
            _ => unreachable!("constructors reject non-preset flags"),
        }
    }

    pub fn mlp_input_width(&self) -> usize {
        if self.use_pose {
            3 + 36
        } else {
            3
        }
    }

    /// Number of rows in the final fused stack: f_a, plus one conv-side
    /// slot once any image branch exists, plus the motion slot.
    pub fn k(&self) -> usize {
        1 + usize::from(self.use_local) + usize::from(self.use_motion)
    }
}

/// Data dimensions the model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_frames: usize,
    pub local_res: usize,
    pub global_res: usize,
}

impl ModelDims {
    /// Full-scale dims matching 16-frame, 112x112 inputs.
    pub const fn full() -> Self {
        ModelDims {
            n_frames: 16,
            local_res: 112,
            global_res: 112,
        }
    }

    /// Desk-scale dims for fast experiments.
    pub const fn desk() -> Self {
        ModelDims {
            n_frames: 4,
            local_res: 32,
            global_res: 32,
        }
    }

    /// Tiny dims for 64-bit gradient checks.
    pub const fn tiny() -> Self {
        ModelDims {
            n_frames: 2,
            local_res: 8,
            global_res: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.local_res < 2 || self.global_res < 2 {
            return Err(Error::Config(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }
}

/// Forward-pass switches. The detach flags cut the gradient path after one
/// conv branch's encoder output (values unchanged), which isolates
/// per-modality contributions to the shared trunk gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub training: bool,
    pub detach_local: bool,
    pub detach_semantic: bool,
    pub detach_flow: bool,
}

/// Handles into the tape for one batch forward.
pub struct ForwardOutput {
    /// [B, 2] rows of [p_crossing, p_not_crossing].
    pub probs: NodeId,
    /// Per-sample temporal feature f_a, [128].
    pub f_a: Vec<NodeId>,
    /// Per-sample fused stack f_H, [128, K]; None when K = 1.
    pub f_h: Vec<Option<NodeId>>,
    /// (parameter name, leaf node) pairs, one per parameter use.
    pub binds: Vec<(String, NodeId)>,
}

/// Column of the classifier output holding the probability of `label`.
pub fn class_column(label: u8) -> usize {
    // column 0 is p(crossing = 1)
    1 - label as usize
}

/// All learnable parameters plus the variant wiring.
pub struct FusionModel<T: Scalar> {
    pub variant: VariantSpec,
    pub dims: ModelDims,
    pub mlp: MlpEmbedder<T>,
    pub conv: Option<ConvEncoder<T>>,
    pub att_temporal: AttentionModule<T>,
    pub att_env: Option<AttentionModule<T>>,
    pub att_mot: Option<AttentionModule<T>>,
    pub att_fuse: Option<AttentionModule<T>>,
    pub head: ClassifierHead<T>,
    pub dropout_p: f64,
}

impl<T: Scalar> FusionModel<T> {
    /// Build a variant with Xavier-uniform weights and zero biases,
    /// bit-reproducible per seed.
    pub fn build(variant: VariantSpec, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = MlpEmbedder::new(&mut rng, variant.mlp_input_width());
        let conv = if variant.use_local || variant.use_global || variant.use_motion {
            Some(ConvEncoder::new(
                &mut rng,
                variant.use_local,
                variant.use_global,
                variant.use_motion,
            ))
        } else {
            None
        };
        let att_temporal = AttentionModule::new(&mut rng, FEATURE_WIDTH);
        let att_env = variant
            .use_global
            .then(|| AttentionModule::new(&mut rng, FEATURE_WIDTH));
        let att_mot = variant
            .use_motion
            .then(|| AttentionModule::new(&mut rng, FEATURE_WIDTH));
        let att_fuse = variant
            .use_local
            .then(|| AttentionModule::new(&mut rng, FEATURE_WIDTH));
        let head = ClassifierHead::new(&mut rng);
        Ok(FusionModel {
            variant,
            dims,
            mlp,
            conv,
            att_env,
            att_mot,
            att_fuse,
            att_temporal,
            head,
            dropout_p: 0.5,
        })
    }

    fn check_sample(&self, s: &SequenceSample) -> Result<()> {
        let n = self.dims.n_frames;
        if s.bbox.shape() != [n, 3] {
            return Err(Error::Config(format!(
                "sample {}: bbox shape {:?} does not match model dims (N={n})",
                s.source_id,
                s.bbox.shape()
            )));
        }
        if self.variant.use_pose && s.pose.shape() != [n, 36] {
            return Err(Error::Config(format!(
                "sample {}: pose shape {:?} does not match model dims (N={n})",
                s.source_id,
                s.pose.shape()
            )));
        }
        let img = |name: &str, t: &Tensor<f32>, c: usize, res: usize| -> Result<()> {
            if t.shape() != [c, n, res, res] {
                return Err(Error::Config(format!(
                    "sample {}: {name} shape {:?} does not match model dims \
                     [{c}, {n}, {res}, {res}]",
                    s.source_id,
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.variant.use_local {
            img("local", &s.local, 3, self.dims.local_res)?;
        }
        if self.variant.use_global {
            img("semantic", &s.semantic, 8, self.dims.global_res)?;
        }
        if self.variant.use_motion {
            img("flow", &s.flow, 2, self.dims.global_res)?;
        }
        Ok(())
    }

    fn image_leaf(tape: &mut Tape<T>, t: &Tensor<f32>) -> Result<NodeId> {
        let cast = t.cast::<T>();
        tape.leaf_from(cast.shape().to_vec(), cast.data().to_vec(), false)
    }

    /// Forward one batch; returns tape handles for probabilities, the
    /// per-sample features and the parameter binds.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        samples: &[&SequenceSample],
        opts: ForwardOpts,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        if samples.is_empty() {
            return Err(Error::Config("forward on an empty batch".into()));
        }
        let mut binds = Vec::new();
        let mut prob_rows = Vec::with_capacity(samples.len());
        let mut f_a_out = Vec::with_capacity(samples.len());
        let mut f_h_out = Vec::with_capacity(samples.len());
        let n = self.dims.n_frames;
        let width = self.variant.mlp_input_width();

        for s in samples {
            self.check_sample(s)?;

            // per-frame bbox (+ pose) rows
            let mut rows = Vec::with_capacity(n * width);
            for t in 0..n {
                for j in 0..3 {
                    rows.push(T::from_f64(s.bbox.data()[t * 3 + j] as f64));
                }
                if self.variant.use_pose {
                    for j in 0..36 {
                        rows.push(T::from_f64(s.pose.data()[t * 36 + j] as f64));
                    }
                }
            }
            let v = tape.leaf_from(vec![n, width], rows, false)?;
            let h = self.mlp.forward(tape, v, &mut binds)?;
            let f_a = self.att_temporal.forward(
                tape,
                h,
                AttentionMode::Reduce,
                self.dropout_p,
                opts.training,
                rng,
                &mut binds,
                "att_temporal",
            )?;
            f_a_out.push(f_a);

            let mut f_cl = None;
            let mut f_env = None;
            let mut f_mot = None;
            if self.variant.use_local {
                let conv = self.conv.as_ref().expect("conv built for L");
                let x = Self::image_leaf(tape, &s.local)?;
                let mut f = conv.encode(tape, x, Modality::Local, &mut binds)?;
                if opts.detach_local {
                    f = tape.detach(f);
                }
                f_cl = Some(f);
            }
            if self.variant.use_global {
                let conv = self.conv.as_ref().expect("conv built for G");
                let x = Self::image_leaf(tape, &s.semantic)?;
                let mut f_cg = conv.encode(tape, x, Modality::Semantic, &mut binds)?;
                if opts.detach_semantic {
                    f_cg = tape.detach(f_cg);
                }
                let stacked = tape.stack_concat(&[f_cg, f_cl.expect("L precedes G")])?;
                f_env = Some(self.att_env.as_ref().expect("att_env built").forward(
                    tape,
                    stacked,
                    AttentionMode::Reduce,
                    self.dropout_p,
                    opts.training,
                    rng,
                    &mut binds,
                    "att_env",
                )?);
            }
            if self.variant.use_motion {
                let conv = self.conv.as_ref().expect("conv built for M");
                let x = Self::image_leaf(tape, &s.flow)?;
                let mut f_co = conv.encode(tape, x, Modality::Flow, &mut binds)?;
                if opts.detach_flow {
                    f_co = tape.detach(f_co);
                }
                let stacked = tape.stack_concat(&[f_co, f_env.expect("G precedes M")])?;
                f_mot = Some(self.att_mot.as_ref().expect("att_mot built").forward(
                    tape,
                    stacked,
                    AttentionMode::Reduce,
                    self.dropout_p,
                    opts.training,
                    rng,
                    &mut binds,
                    "att_mot",
                )?);
            }

            // final stack, high-level features first
            let mut parts = vec![f_a];
            match (f_mot, f_env, f_cl) {
                (Some(mot), Some(env), _) => {
                    parts.push(mot);
                    parts.push(env);
                }
                (None, Some(env), _) => parts.push(env),
                (None, None, Some(cl)) => parts.push(cl),
                (None, None, None) => {}
                (Some(_), None, _) => unreachable!("M requires G"),
            }

            let pooled = if parts.len() == 1 {
                f_h_out.push(None);
                f_a
            } else {
                let stacked = tape.stack_concat(&parts)?;
                let refined = self.att_fuse.as_ref().expect("att_fuse built").forward(
                    tape,
                    stacked,
                    AttentionMode::Refine,
                    self.dropout_p,
                    opts.training,
                    rng,
                    &mut binds,
                    "att_fuse",
                )?;
                let f_h = tape.transpose(refined)?;
                f_h_out.push(Some(f_h));
                tape.global_average_pool(f_h)?
            };
            let p = self.head.classify(tape, pooled, &mut binds)?;
            prob_rows.push(p);
        }

        let probs = tape.stack_concat(&prob_rows)?;
        Ok(ForwardOutput {
            probs,
            f_a: f_a_out,
            f_h: f_h_out,
            binds,
        })
    }

    /// Mean cross-entropy of a batch against its labels.
    pub fn loss_for(
        &self,
        tape: &mut Tape<T>,
        probs: NodeId,
        labels: &[u8],
    ) -> Result<NodeId> {
        let cols: Vec<usize> = labels.iter().map(|&l| class_column(l)).collect();
        tape.cross_entropy(probs, &cols)
    }

    pub fn visit(&self, v: &mut impl ParamVisitor<T>) {
        self.mlp.visit(v);
        if let Some(conv) = &self.conv {
            conv.visit(v);
        }
        self.att_temporal.visit("att_temporal", v);
        if let Some(a) = &self.att_env {
            a.visit("att_env", v);
        }
        if let Some(a) = &self.att_mot {
            a.visit("att_mot", v);
        }
        if let Some(a) = &self.att_fuse {
            a.visit("att_fuse", v);
        }
        self.head.visit(v);
    }

    pub fn visit_mut(&mut self, v: &mut impl ParamVisitorMut<T>) {
        self.mlp.visit_mut(v);
        if let Some(conv) = &mut self.conv {
            conv.visit_mut(v);
        }
        self.att_temporal.visit_mut("att_temporal", v);
        if let Some(a) = &mut self.att_env {
            a.visit_mut("att_env", v);
        }
        if let Some(a) = &mut self.att_mot {
            a.visit_mut("att_mot", v);
        }
        if let Some(a) = &mut self.att_fuse {
            a.visit_mut("att_fuse", v);
        }
        self.head.visit_mut(v);
    }

    pub fn num_params(&self) -> usize {
        struct Count(usize);
        impl<T: Scalar> ParamVisitor<T> for Count {
            fn visit(&mut self, _n: &str, _d: bool, t: &Tensor<T>) {
                self.0 += t.numel();
            }
        }
        let mut c = Count(0);
        self.visit(&mut c);
        c.0
    }

    /// Parameter names in canonical (visitor) order.
    pub fn param_names(&self) -> Vec<String> {
        struct Names(Vec<String>);
        impl<T: Scalar> ParamVisitor<T> for Names {
            fn visit(&mut self, n: &str, _d: bool, _t: &Tensor<T>) {
                self.0.push(n.to_string());
            }
        }
        let mut n = Names(Vec::new());
        self.visit(&mut n);
        n.0
    }

    /// Accumulate tape gradients into each parameter's grad buffer. Binds
    /// sharing a name (the shared trunk) are summed.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, binds: &[(String, NodeId)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_name: HashMap<&str, Vec<NodeId>> = HashMap::new();
        for (name, id) in binds {
            by_name.entry(name.as_str()).or_default().push(*id);
        }
        struct Absorb<'a, T: Scalar> {
            tape: &'a Tape<T>,
            by_name: HashMap<&'a str, Vec<NodeId>>,
            missing: Vec<String>,
        }
        impl<T: Scalar> ParamVisitorMut<T> for Absorb<'_, T> {
            fn visit(&mut self, name: &str, _d: bool, t: &mut Tensor<T>) {
                match self.by_name.get(name) {
                    Some(ids) => {
                        for id in ids {
                            match self.tape.grad(*id) {
                                Some(g) => t.accumulate_grad(g),
                                None => self.missing.push(name.to_string()),
                            }
                        }
                    }
                    None => self.missing.push(name.to_string()),
                }
            }
        }
        let mut a = Absorb {
            tape,
            by_name,
            missing: Vec::new(),
        };
        self.visit_mut(&mut a);
        if a.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "no gradient recorded for parameters {:?}",
                a.missing
            )))
        }
    }

    pub fn zero_grads(&mut self) {
        struct Zero;
        impl<T: Scalar> ParamVisitorMut<T> for Zero {
            fn visit(&mut self, _n: &str, _d: bool, t: &mut Tensor<T>) {
                t.zero_grad();
            }
        }
        self.visit_mut(&mut Zero);
    }

    /// Snapshot parameters as (name, tensor) pairs in canonical order.
    pub fn export_params(&self) -> Vec<(String, Tensor<T>)> {
        struct Export<T: Scalar>(Vec<(String, Tensor<T>)>);
        impl<T: Scalar> ParamVisitor<T> for Export<T> {
            fn visit(&mut self, n: &str, _d: bool, t: &Tensor<T>) {
                let mut c = t.clone();
                c.grad = None;
                self.0.push((n.to_string(), c));
            }
        }
        let mut e = Export(Vec::new());
        self.visit(&mut e);
        e.0
    }

    /// Load parameters exported by [`export_params`]; names, order and
    /// shapes must match exactly.
    pub fn import_params(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        struct Import<'a, T: Scalar> {
            src: &'a [(String, Tensor<T>)],
            i: usize,
            error: Option<Error>,
        }
        impl<T: Scalar> ParamVisitorMut<T> for Import<'_, T> {
            fn visit(&mut self, name: &str, _d: bool, t: &mut Tensor<T>) {
                if self.error.is_some() {
                    return;
                }
                let Some((src_name, src)) = self.src.get(self.i) else {
                    self.error = Some(Error::Config(format!(
                        "checkpoint is missing parameter `{name}`"
                    )));
                    return;
                };
                if src_name != name {
                    self.error = Some(Error::Config(format!(
                        "checkpoint parameter order mismatch: expected `{name}`, found `{src_name}`"
                    )));
                    return;
                }
                if src.shape() != t.shape() {
                    self.error = Some(Error::Config(format!(
                        "parameter `{name}`: checkpoint shape {:?} != model shape {:?}",
                        src.shape(),
                        t.shape()
                    )));
                    return;
                }
                t.data_mut().copy_from_slice(src.data());
                self.i += 1;
            }
        }
        let mut imp = Import {
            src: params,
            i: 0,
            error: None,
        };
        self.visit_mut(&mut imp);
        if let Some(e) = imp.error {
            return Err(e);
        }
        if imp.i != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} extra parameters",
                params.len() - imp.i
            )));
        }
        Ok(())
    }
}
