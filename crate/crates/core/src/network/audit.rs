use sketchmod_tensor::gradcheck::{rel_error, GradCheck};
use sketchmod_tensor::{ParamId, Tape, Tensor, Var};

use super::SketchMod;
use crate::error::Result;

/// Step for [`check_param_gradients`]. The losses go through clamps and
/// softmaxes whose curvature makes a plain central difference at this size
/// too coarse, hence the fourth-order stencil.
pub const PARAM_STEP: f64 = 3e-3;

/// Compares reverse-mode gradients of `loss` with respect to every scalar
/// of `ids` against a fourth-order central difference. `worst` is
/// (position in `ids`, flat element index).
pub fn check_param_gradients(
    model: &mut SketchMod,
    ids: &[ParamId],
    loss: impl Fn(&SketchMod, &mut Tape) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::with_trainable(ids.iter().copied());
    let l = loss(model, &mut tape)?;
    let grads = tape.backward(l)?;
    let h = PARAM_STEP;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, &id) in ids.iter().enumerate() {
        let n = model.params().get(id).tensor.numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        for k in 0..n {
            let orig = model.params().get(id).tensor.data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                model.params_mut().tensor_mut(id).data_mut()[k] = x;
                let mut t = Tape::inference();
                let l = loss(model, &mut t)?;
                Ok(t.value(l).item()?)
            };
            let near = eval(orig + h)? - eval(orig - h)?;
            let far = eval(orig + 2.0 * h)? - eval(orig - 2.0 * h)?;
            eval(orig)?;
            let numeric = (8.0 * near - far) / (12.0 * h);
            let a = analytic.data()[k];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (i, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
