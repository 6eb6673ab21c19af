use std::fmt::Debug;

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DenoiserError;

/// Floating-point type the network can run in. Training and checkpoints use
/// `f32`; `f64` is available for finite-difference checks.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + LinalgScalar + ScalarOperand + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    /// One token per end-effector slot.
    Tokens,
    /// All slots concatenated into a single token.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub conditioning: ConditioningMode,
    /// Diffusion horizon `T` the timestep embedding is trained for.
    pub timesteps: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            conditioning: ConditioningMode::Tokens,
            timesteps: 100,
        }
    }
}

impl ArchConfig {
    pub fn new(n_blocks: usize, n_heads: usize, d_model: usize, d_ff: usize) -> Self {
        Self {
            n_blocks,
            n_heads,
            d_model,
            d_ff,
            ..Self::default()
        }
    }

    pub fn with_conditioning(mut self, mode: ConditioningMode) -> Self {
        self.conditioning = mode;
        self
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.n_blocks == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.timesteps == 0 {
            return Err(DenoiserError::InvalidArch("all sizes must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DenoiserError::InvalidArch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 128;
/// Pose feature layout `[x, y, z, w, qx, qy, qz]`.
pub const POSE_FEATURES: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in x out`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub res_norm: Array1<F>,
    pub res_in: Linear<F>,
    /// Timestep embedding projection, added inside the residual branch.
    pub res_time: Array2<F>,
    pub res_out: Linear<F>,
    pub attn_norm: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub attn_out: Linear<F>,
    pub ff_norm: Array1<F>,
    pub ff_in: Linear<F>,
    pub ff_out: Linear<F>,
}

/// Every learnable tensor of the noise predictor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub input: Linear<F>,
    pub time: Linear<F>,
    pub pose: Linear<F>,
    /// Learned empty-slot embedding.
    pub empty: Array1<F>,
    pub blocks: Vec<Block<F>>,
    pub out_norm: Array1<F>,
    pub out: Linear<F>,
}

/// Kind of tensor, for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TensorRole {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    Gain,
    Empty,
}

impl<F: Scalar> Weights<F> {
    pub fn zeros(arch: &ArchConfig, dof: usize, n_ee: usize) -> Self {
        let d = arch.d_model;
        let pose_in = match arch.conditioning {
            ConditioningMode::Tokens => POSE_FEATURES,
            ConditioningMode::Flat => POSE_FEATURES * n_ee,
        };
        let block = || Block {
            res_norm: Array1::zeros(d),
            res_in: Linear::zeros(d, d),
            res_time: Array2::zeros((d, d)),
            res_out: Linear::zeros(d, d),
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            attn_out: Linear::zeros(d, d),
            ff_norm: Array1::zeros(d),
            ff_in: Linear::zeros(d, arch.d_ff),
            ff_out: Linear::zeros(arch.d_ff, d),
        };
        Self {
            input: Linear::zeros(dof, d),
            time: Linear::zeros(TIME_FEATURES, d),
            pose: Linear::zeros(pose_in, d),
            empty: Array1::zeros(d),
            blocks: (0..arch.n_blocks).map(|_| block()).collect(),
            out_norm: Array1::zeros(d),
            out: Linear::zeros(d, dof),
        }
    }

    /// Named views of every tensor, in a fixed (unsorted) order.
    pub fn tensors(&self) -> Vec<(String, &[F], Vec<usize>)> {
        let mut out = Vec::new();
        self.walk(&mut |name, data: &[F], shape, _| out.push((name, data, shape)));
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out = Vec::new();
        self.walk_mut(&mut |name, data, _| out.push((name, data)));
        out
    }

    pub(crate) fn tensors_with_roles_mut(&mut self) -> Vec<(String, &mut [F], TensorRole)> {
        let mut out = Vec::new();
        self.walk_mut(&mut |name, data, role| out.push((name, data, role)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, d, _)| d.len()).sum()
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G + Copy) -> Weights<G> {
        let lin = |l: &Linear<F>| Linear {
            w: l.w.mapv(f),
            b: l.b.mapv(f),
        };
        Weights {
            input: lin(&self.input),
            time: lin(&self.time),
            pose: lin(&self.pose),
            empty: self.empty.mapv(f),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    res_norm: b.res_norm.mapv(f),
                    res_in: lin(&b.res_in),
                    res_time: b.res_time.mapv(f),
                    res_out: lin(&b.res_out),
                    attn_norm: b.attn_norm.mapv(f),
                    wq: b.wq.mapv(f),
                    wk: b.wk.mapv(f),
                    wv: b.wv.mapv(f),
                    attn_out: lin(&b.attn_out),
                    ff_norm: b.ff_norm.mapv(f),
                    ff_in: lin(&b.ff_in),
                    ff_out: lin(&b.ff_out),
                })
                .collect(),
            out_norm: self.out_norm.mapv(f),
            out: lin(&self.out),
        }
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights<F>, scale: F) {
        let src: Vec<Vec<F>> = other.tensors().into_iter().map(|(_, d, _)| d.to_vec()).collect();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += b * scale;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, d, _)| d.iter().all(|v| v.is_finite()))
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(String, &'a [F], Vec<usize>, TensorRole)) {
        fn lin<'a, F>(name: &str, l: &'a Linear<F>, f: &mut dyn FnMut(String, &'a [F], Vec<usize>, TensorRole)) {
            let fan_in = l.w.nrows();
            f(
                format!("{name}.weight"),
                slice(&l.w),
                l.w.shape().to_vec(),
                TensorRole::Weight { fan_in },
            );
            f(
                format!("{name}.bias"),
                l.b.as_slice().unwrap(),
                vec![l.b.len()],
                TensorRole::Bias { fan_in },
            );
        }
        lin("input", &self.input, f);
        lin("time", &self.time, f);
        lin("pose", &self.pose, f);
        f(
            "empty_token".into(),
            self.empty.as_slice().unwrap(),
            vec![self.empty.len()],
            TensorRole::Empty,
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i:02}");
            let d = b.wq.nrows();
            f(
                format!("{p}.res.norm"),
                b.res_norm.as_slice().unwrap(),
                vec![d],
                TensorRole::Gain,
            );
            lin(&format!("{p}.res.in"), &b.res_in, f);
            f(
                format!("{p}.res.time"),
                slice(&b.res_time),
                vec![d, d],
                TensorRole::Weight { fan_in: d },
            );
            lin(&format!("{p}.res.out"), &b.res_out, f);
            f(
                format!("{p}.attn.norm"),
                b.attn_norm.as_slice().unwrap(),
                vec![d],
                TensorRole::Gain,
            );
            f(
                format!("{p}.attn.q"),
                slice(&b.wq),
                vec![d, d],
                TensorRole::Weight { fan_in: d },
            );
            f(
                format!("{p}.attn.k"),
                slice(&b.wk),
                vec![d, d],
                TensorRole::Weight { fan_in: d },
            );
            f(
                format!("{p}.attn.v"),
                slice(&b.wv),
                vec![d, d],
                TensorRole::Weight { fan_in: d },
            );
            lin(&format!("{p}.attn.out"), &b.attn_out, f);
            f(
                format!("{p}.ff.norm"),
                b.ff_norm.as_slice().unwrap(),
                vec![d],
                TensorRole::Gain,
            );
            lin(&format!("{p}.ff.in"), &b.ff_in, f);
            lin(&format!("{p}.ff.out"), &b.ff_out, f);
        }
        f(
            "out.norm".into(),
            self.out_norm.as_slice().unwrap(),
            vec![self.out_norm.len()],
            TensorRole::Gain,
        );
        lin("out", &self.out, f);
    }

    fn walk_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut [F], TensorRole)) {
        fn lin<'a, F>(name: &str, l: &'a mut Linear<F>, f: &mut dyn FnMut(String, &'a mut [F], TensorRole)) {
            let fan_in = l.w.nrows();
            f(
                format!("{name}.weight"),
                l.w.as_slice_mut().unwrap(),
                TensorRole::Weight { fan_in },
            );
            f(
                format!("{name}.bias"),
                l.b.as_slice_mut().unwrap(),
                TensorRole::Bias { fan_in },
            );
        }
        lin("input", &mut self.input, f);
        lin("time", &mut self.time, f);
        lin("pose", &mut self.pose, f);
        f(
            "empty_token".into(),
            self.empty.as_slice_mut().unwrap(),
            TensorRole::Empty,
        );
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i:02}");
            let d = b.wq.nrows();
            f(
                format!("{p}.res.norm"),
                b.res_norm.as_slice_mut().unwrap(),
                TensorRole::Gain,
            );
            lin(&format!("{p}.res.in"), &mut b.res_in, f);
            f(
                format!("{p}.res.time"),
                b.res_time.as_slice_mut().unwrap(),
                TensorRole::Weight { fan_in: d },
            );
            lin(&format!("{p}.res.out"), &mut b.res_out, f);
            f(
                format!("{p}.attn.norm"),
                b.attn_norm.as_slice_mut().unwrap(),
                TensorRole::Gain,
            );
            f(
                format!("{p}.attn.q"),
                b.wq.as_slice_mut().unwrap(),
                TensorRole::Weight { fan_in: d },
            );
            f(
                format!("{p}.attn.k"),
                b.wk.as_slice_mut().unwrap(),
                TensorRole::Weight { fan_in: d },
            );
            f(
                format!("{p}.attn.v"),
                b.wv.as_slice_mut().unwrap(),
                TensorRole::Weight { fan_in: d },
            );
            lin(&format!("{p}.attn.out"), &mut b.attn_out, f);
            f(
                format!("{p}.ff.norm"),
                b.ff_norm.as_slice_mut().unwrap(),
                TensorRole::Gain,
            );
            lin(&format!("{p}.ff.in"), &mut b.ff_in, f);
            lin(&format!("{p}.ff.out"), &mut b.ff_out, f);
        }
        f(
            "out.norm".into(),
            self.out_norm.as_slice_mut().unwrap(),
            TensorRole::Gain,
        );
        lin("out", &mut self.out, f);
    }
}

fn slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("weights are stored in standard layout")
}

/// Fan-in scaled uniform initialization; unit RMS gains; small normal empty token.
pub(crate) fn init_weights(arch: &ArchConfig, dof: usize, n_ee: usize, seed: u64) -> Weights<f32> {
    let mut w = Weights::<f32>::zeros(arch, dof, n_ee);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = w.tensors_with_roles_mut();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, data, role) in tensors {
        match role {
            TensorRole::Weight { fan_in } | TensorRole::Bias { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in data.iter_mut() {
                    *v = rng.random_range(-bound..bound) as f32;
                }
            }
            TensorRole::Gain => data.fill(1.0),
            TensorRole::Empty => {
                for v in data.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (0.02 * n) as f32;
                }
            }
        }
    }
    w
}
