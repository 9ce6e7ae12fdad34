//! Tensor wrappers around [`crate::std_activation`].
//!
//! The solver itself runs in `f64` on the CPU; these ops move data in and
//! out of candle storage and hook the hand-written adjoint into autograd.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::std_activation::{self, StdParams, UpdateNumerator};

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("std layer expects contiguous input".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        other => candle_core::bail!("std layer: unsupported dtype {:?}", other.dtype()),
    })
}

/// Rounds a probability to `f32`, keeping it inside the open unit interval.
pub fn probability_f32(v: f64) -> f32 {
    (v as f32).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// Output storage for probabilities computed in `f64`.
fn from_f64(values: Vec<f64>, dtype: DType) -> candle_core::Result<CpuStorage> {
    Ok(match dtype {
        DType::F32 => CpuStorage::F32(values.into_iter().map(probability_f32).collect()),
        DType::F64 => CpuStorage::F64(values),
        other => candle_core::bail!("std layer: unsupported dtype {other:?}"),
    })
}

fn msg(e: Error) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

/// Elementwise logistic function matching [`std_activation::sigmoid`].
#[derive(Debug, Clone, Copy)]
pub struct SigmoidOp;

impl CustomOp1 for SigmoidOp {
    fn name(&self) -> &'static str {
        "variational-sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let v = to_f64(s, l)?;
        let out = v.into_iter().map(std_activation::sigmoid).collect();
        Ok((from_f64(out, s.dtype())?, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = (res * res.affine(-1.0, 1.0)?)?;
        Ok(Some((grad_res * slope)?))
    }
}

/// `Sig(v)` elementwise, bit-for-bit equal to the scalar function.
pub fn sigmoid(t: &Tensor) -> Result<Tensor> {
    Ok(t.contiguous()?.apply_op1(SigmoidOp)?)
}

/// Batched STD solve. The first input is `u` of shape `(N, 1, H, W)`; the
/// second holds `[ε, λ1, λ2, σ]`. The per-item confidences are constants of
/// the op, so no gradient can reach them.
#[derive(Debug, Clone)]
struct StdOp {
    confidence: Vec<f64>,
    iters: usize,
    kernel_radius: Option<usize>,
    numerator: UpdateNumerator,
}

impl StdOp {
    fn params(&self, v: &[f64]) -> StdParams {
        StdParams {
            eps: v[0],
            lambda1: v[1],
            lambda2: v[2],
            sigma: v[3],
            iters: self.iters,
            kernel_radius: self.kernel_radius,
            numerator: self.numerator,
        }
    }

    fn geometry(&self, l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
        let (n, c, h, w) = l.shape().dims4()?;
        if c != 1 || n != self.confidence.len() {
            candle_core::bail!(
                "std layer expects (N,1,H,W) with N = {}, got {:?}",
                self.confidence.len(),
                l.shape()
            );
        }
        Ok((n, h, w))
    }
}

impl CustomOp2 for StdOp {
    fn name(&self) -> &'static str {
        "std-solve"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, h, w) = self.geometry(l1)?;
        let u = to_f64(s1, l1)?;
        let p = self.params(&to_f64(s2, l2)?);
        let mut out = Vec::with_capacity(u.len());
        for (i, chunk) in u.chunks(h * w).enumerate().take(n) {
            let field = Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size");
            let x = std_activation::std_solve(&field, self.confidence[i], &p).map_err(msg)?;
            out.extend(x.iter());
        }
        Ok((from_f64(out, s1.dtype())?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        u: &Tensor,
        params: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, _, h, w) = u.dims4()?;
        let uv = u.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let gv = grad_res.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let p = self.params(&params.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        let mut grad_u: Vec<f64> = Vec::with_capacity(uv.len());
        let mut grad_p = [0.0f64; 4];
        for i in 0..n {
            let range = i * h * w..(i + 1) * h * w;
            let field = Array2::from_shape_vec((h, w), uv[range.clone()].to_vec()).expect("size");
            let g = Array2::from_shape_vec((h, w), gv[range].to_vec()).expect("size");
            let grads = std_activation::std_solve_backward(&field, self.confidence[i], &p, &g)
                .map_err(msg)?;
            grad_u.extend(grads.u.iter());
            grad_p[0] += grads.eps;
            grad_p[1] += grads.lambda1;
            grad_p[2] += grads.lambda2;
            grad_p[3] += grads.sigma;
        }
        let grad_u = Tensor::from_vec(grad_u, u.shape(), u.device())?.to_dtype(u.dtype())?;
        let grad_p = Tensor::new(&grad_p, params.device())?.to_dtype(params.dtype())?;
        Ok((Some(grad_u), Some(grad_p)))
    }
}

/// Solver settings and initial values of the STD layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StdConfig {
    pub eps0: f64,
    pub lambda1: f64,
    pub lambda2_0: f64,
    pub sigma0: f64,
    pub iters: usize,
    pub kernel_radius: Option<usize>,
    pub numerator: UpdateNumerator,
    pub learn_eps: bool,
    pub learn_lambda1: bool,
    pub learn_lambda2: bool,
    pub learn_sigma: bool,
}

impl Default for StdConfig {
    fn default() -> Self {
        let p = StdParams::default();
        Self {
            eps0: p.eps,
            lambda1: p.lambda1,
            lambda2_0: p.lambda2,
            sigma0: p.sigma,
            iters: p.iters,
            kernel_radius: p.kernel_radius,
            numerator: p.numerator,
            learn_eps: false,
            learn_lambda1: false,
            learn_lambda2: true,
            learn_sigma: true,
        }
    }
}

impl StdConfig {
    pub fn initial_params(&self) -> StdParams {
        StdParams {
            eps: self.eps0,
            lambda1: self.lambda1,
            lambda2: self.lambda2_0,
            sigma: self.sigma0,
            iters: self.iters,
            kernel_radius: self.kernel_radius,
            numerator: self.numerator,
        }
    }
}

/// The STD output layer with log-parameterized `ε, λ1, λ2, σ`.
#[derive(Debug, Clone)]
pub struct StdLayer {
    cfg: StdConfig,
    log_params: [Var; 4],
}

impl StdLayer {
    pub fn new(store: &mut ParamStore, cfg: &StdConfig) -> Result<Self> {
        cfg.initial_params().validate()?;
        let kind = |learn: bool| if learn { ParamKind::Trainable } else { ParamKind::Buffer };
        let mut add = |name: &str, v: f64, learn: bool| {
            store.add(&format!("STD.{name}"), kind(learn), &[1], Init::Constant(v.ln()))
        };
        let log_params = [
            add("log_eps", cfg.eps0, cfg.learn_eps)?,
            add("log_lambda1", cfg.lambda1, cfg.learn_lambda1)?,
            add("log_lambda2", cfg.lambda2_0, cfg.learn_lambda2)?,
            add("log_sigma", cfg.sigma0, cfg.learn_sigma)?,
        ];
        Ok(Self {
            cfg: cfg.clone(),
            log_params,
        })
    }

    /// `[ε, λ1, λ2, σ]` as a differentiable tensor.
    pub fn param_tensor(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.log_params.iter().map(|v| v.as_tensor()).collect();
        Ok(Tensor::cat(&parts, 0)?.exp()?)
    }

    /// Current parameter values.
    pub fn current(&self) -> Result<StdParams> {
        let v = self.param_tensor()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(StdParams {
            eps: v[0],
            lambda1: v[1],
            lambda2: v[2],
            sigma: v[3],
            ..self.cfg.initial_params()
        })
    }

    /// `x = std_solve(u, c)` per batch item; `c` is detached.
    pub fn forward(&self, u: &Tensor, c: &Tensor) -> Result<Tensor> {
        std_forward(u, &self.param_tensor()?, c, &self.cfg)
    }
}

/// Applies the STD solve to `u: (N,1,H,W)` with parameters `[ε, λ1, λ2, σ]`
/// and confidences `c: (N,)`, differentiable in `u` and the parameters.
pub fn std_forward(u: &Tensor, params: &Tensor, c: &Tensor, cfg: &StdConfig) -> Result<Tensor> {
    let confidence = c.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let op = StdOp {
        confidence,
        iters: cfg.iters,
        kernel_radius: cfg.kernel_radius,
        numerator: cfg.numerator,
    };
    Ok(u.contiguous()?.apply_op2(&params.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_op_is_the_scalar_function() {
        let vals = [-40.0f32, -3.5, 0.0, 0.25, 7.0, 40.0];
        let t = Tensor::new(&vals, &Device::Cpu).unwrap();
        let got = sigmoid(&t).unwrap().to_vec1::<f32>().unwrap();
        let want: Vec<f32> = vals.iter().map(|&v| probability_f32(std_activation::sigmoid(v as f64))).collect();
        assert!(got.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(got, want);
    }

    #[test]
    fn std_forward_matches_solver_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, h, w) = (2, 9, 7);
        let u: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cfg = StdConfig::default();
        let p = cfg.initial_params();
        let ut = Tensor::from_vec(u.clone(), (n, 1, h, w), &Device::Cpu).unwrap();
        let pt = Tensor::new(&[p.eps, p.lambda1, p.lambda2, p.sigma], &Device::Cpu).unwrap();
        let ct = Tensor::new(&[0.2f64, 0.9], &Device::Cpu).unwrap();
        let x = std_forward(&ut, &pt, &ct, &cfg).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, c) in [0.2, 0.9].into_iter().enumerate() {
            let field = Array2::from_shape_vec((h, w), u[i * h * w..(i + 1) * h * w].to_vec()).unwrap();
            let want = std_activation::std_solve(&field, c, &p).unwrap();
            assert_eq!(&x[i * h * w..(i + 1) * h * w], want.as_slice().unwrap());
        }
    }

    #[test]
    fn confidence_receives_no_gradient() {
        let dev = Device::Cpu;
        let u = Var::from_tensor(&Tensor::new(&[[[[0.3f64, -0.2], [1.0, 0.1]]]], &dev).unwrap()).unwrap();
        let c = Var::from_tensor(&Tensor::new(&[0.4f64], &dev).unwrap()).unwrap();
        let p = Tensor::new(&[1.0f64, 1.0, 0.5, 1.0], &dev).unwrap();
        let x = std_forward(u.as_tensor(), &p, c.as_tensor(), &StdConfig::default()).unwrap();
        let grads = x.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(u.as_tensor()).is_some());
        assert!(grads.get(c.as_tensor()).is_none());
    }

    #[test]
    fn layer_params_are_log_stored() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let layer = StdLayer::new(&mut store, &StdConfig::default()).unwrap();
        let p = layer.current().unwrap();
        assert!((p.sigma - 1.5).abs() < 1e-12 && (p.lambda2 - 0.1).abs() < 1e-12);
        assert_eq!(store.get("STD.log_eps").unwrap().kind, ParamKind::Buffer);
        assert_eq!(store.get("STD.log_sigma").unwrap().kind, ParamKind::Trainable);
        let bad = StdConfig { sigma0: -1.0, ..StdConfig::default() };
        assert!(StdLayer::new(&mut ParamStore::new(0, DType::F64, Device::Cpu), &bad).is_err());
    }
}
