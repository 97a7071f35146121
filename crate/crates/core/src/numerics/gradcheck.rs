//! Central finite-difference gradient oracle.

use rand_chacha::ChaCha8Rng;

use super::nn::{Ctx, ParamStore};
use super::{Mode, Tape, Tensor, TensorError, Var};

pub const GRADCHECK_STEP: f64 = 1e-4;

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64, TensorError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Worst relative error between the recorded adjoint of `f` at `x` and
/// central differences with step `h`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    gradcheck_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`gradcheck`] over several inputs at once; the maximum over all of them.
pub fn gradcheck_inputs<F, E>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(scalar_of(&tape, out)?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; xs[k].numel()]);
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`gradcheck_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub coordinates: usize,
}

/// Checks every parameter gradient of a model-level loss.
///
/// `f` builds the loss on a fresh context in train mode; each call gets an
/// identically seeded generator so dropout masks repeat.
pub fn gradcheck_params<F, E>(store: &mut ParamStore<f64>, h: f64, seed: u64, f: F) -> Result<ParamCheck, E>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    use rand::SeedableRng;

    let run = |store: &mut ParamStore<f64>, backward: bool| -> Result<f64, E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx::new(store, Mode::Train, &mut rng);
        let loss = f(&mut ctx)?;
        let v = scalar_of(&ctx.tape, loss)?;
        if backward {
            ctx.tape.backward(loss)?;
            ctx.accumulate_grads();
        }
        Ok(v)
    };

    let snapshot = store.snapshot_buffers();
    store.zero_grad();
    run(store, true)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let mut report = ParamCheck {
        max_relative_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for pi in 0..store.len() {
        for i in 0..analytic[pi].len() {
            let orig = store.entry(pi).value.data()[i];
            store.entry_mut(pi).value.data_mut()[i] = orig + h;
            let fp = run(store, false)?;
            store.entry_mut(pi).value.data_mut()[i] = orig - h;
            let fm = run(store, false)?;
            store.entry_mut(pi).value.data_mut()[i] = orig;
            let err = relative_error(analytic[pi][i], (fp - fm) / (2.0 * h));
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.entry(pi).name.clone();
            }
        }
    }
    store.restore_buffers(snapshot);
    Ok(report)
}
