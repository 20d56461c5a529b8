//! C ABI over `mixlora` models.
//!
//! Models are opaque `MlModel` handles created by `ml_mixlora_create`,
//! `ml_lora_create` or `ml_checkpoint_load` and released with
//! `ml_model_free`. Every fallible call returns an `MlStatus`; on failure
//! the message is available from `ml_last_error` on the same thread.
//! Matrices are row-major `double` buffers. Panics never cross the
//! boundary; they surface as `ML_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mixlora::checkpoint::Checkpoint;
use mixlora::grad::{Adam, AdamConfig, LossSpec};
use mixlora::linalg::Matrix;
use mixlora::mixlora::{AdaptedLinear, GatingMode, LoraLinear, MixLoraConfig, RoutingMode};
use mixlora::model::{AdapterLayer, Instance, Model};
use mixlora::rng::{seeded, stream};
use mixlora::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlStatus {
    Ok = 0,
    Config = 1,
    Argument = 2,
    Shape = 3,
    Numeric = 4,
    State = 5,
    Degenerate = 6,
    Construction = 7,
    Training = 8,
    Format = 9,
    Io = 10,
    NullPointer = 11,
    Panic = 12,
}

impl From<&Error> for MlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => MlStatus::Config,
            Error::Argument(_) => MlStatus::Argument,
            Error::Shape(_) => MlStatus::Shape,
            Error::Numeric(_) => MlStatus::Numeric,
            Error::State(_) => MlStatus::State,
            Error::Degenerate(_) => MlStatus::Degenerate,
            Error::Construction(_) => MlStatus::Construction,
            Error::Training(_) => MlStatus::Training,
            Error::Format(_) => MlStatus::Format,
            Error::Io { .. } => MlStatus::Io,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlRouting {
    Instance = 0,
    Task = 1,
    Random = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlGating {
    Soft = 0,
    Hard = 1,
}

/// Adapter configuration. `alpha` and `init_std` take their defaults
/// (2E and 1/sqrt(d_in)) when NaN; `num_tasks` is only read under task
/// routing.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MlMixLoraConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub num_factors: usize,
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub routing: MlRouting,
    pub gating: MlGating,
    pub cfs: bool,
    pub num_tasks: usize,
}

/// A model plus the optimizer state used by `ml_model_train_step`.
pub struct MlModel {
    model: Model,
    adam: Option<Adam>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard<F: FnOnce() -> Result<(), (MlStatus, String)>>(f: F) -> MlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MlStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MlStatus::Panic
        }
    }
}

fn fail(e: Error) -> (MlStatus, String) {
    (MlStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (MlStatus, String) {
    (MlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, (MlStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| fail(Error::Shape(format!("{what} is too large"))))?;
    // SAFETY: the caller guarantees `data` points to `rows·cols` doubles.
    let v = unsafe { std::slice::from_raw_parts(data, n) }.to_vec();
    Matrix::from_vec(rows, cols, v).map_err(fail)
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, (MlStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(Error::Argument("path is not valid UTF-8".into())))
}

unsafe fn model_mut<'a>(m: *mut MlModel) -> Result<&'a mut MlModel, (MlStatus, String)> {
    // SAFETY: a non-null handle came from one of the constructors.
    unsafe { m.as_mut() }.ok_or_else(|| null("model"))
}

fn task(task_id: i64) -> Option<usize> {
    usize::try_from(task_id).ok()
}

fn emit(out: *mut *mut MlModel, model: Model, adam: Option<Adam>) {
    let boxed = Box::new(MlModel { model, adam });
    // SAFETY: `out` was checked non-null by the caller of `emit`.
    unsafe { *out = Box::into_raw(boxed) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ml_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Creates a routed adapter around the `d_out×d_in` base weight `base_w`.
/// Initialization draws from `seed`.
///
/// # Safety
/// `config` and `out` must be valid pointers; `base_w` must hold
/// `d_out·d_in` doubles.
#[no_mangle]
pub unsafe extern "C" fn ml_mixlora_create(
    config: *const MlMixLoraConfig,
    base_w: *const f64,
    seed: u64,
    out: *mut *mut MlModel,
) -> MlStatus {
    guard(|| {
        // SAFETY: checked for null just below via `as_ref`.
        let c = unsafe { config.as_ref() }.ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let w = unsafe { matrix(base_w, c.d_out, c.d_in, "base_w") }?;
        let mut cfg = MixLoraConfig::new(c.d_in, c.d_out, c.num_factors, c.rank)
            .with_routing(match c.routing {
                MlRouting::Instance => RoutingMode::Instance,
                MlRouting::Task => RoutingMode::Task,
                MlRouting::Random => RoutingMode::Random,
            })
            .with_gating(match c.gating {
                MlGating::Soft => GatingMode::Soft,
                MlGating::Hard => GatingMode::Hard,
            })
            .with_cfs(c.cfs)
            .with_num_tasks(c.num_tasks)
            .with_seed(seed);
        if !c.alpha.is_nan() {
            cfg = cfg.with_alpha(c.alpha);
        }
        if !c.init_std.is_nan() {
            cfg = cfg.with_init_std(c.init_std);
        }
        let layer = AdaptedLinear::init(cfg, w, &mut stream(seed, "init", 0)).map_err(fail)?;
        emit(out, Model::single(AdapterLayer::Mix(layer)), None);
        Ok(())
    })
}

/// Creates a plain LoRA adapter of rank `rank`. NaN `alpha` / `init_std`
/// select the defaults 2·rank and 1/sqrt(d_in).
///
/// # Safety
/// `base_w` must hold `d_out·d_in` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ml_lora_create(
    base_w: *const f64,
    d_out: usize,
    d_in: usize,
    rank: usize,
    alpha: f64,
    init_std: f64,
    seed: u64,
    out: *mut *mut MlModel,
) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = unsafe { matrix(base_w, d_out, d_in, "base_w") }?;
        let alpha = if alpha.is_nan() { 2.0 * rank as f64 } else { alpha };
        let std = if init_std.is_nan() { 1.0 / (d_in as f64).sqrt() } else { init_std };
        let layer = LoraLinear::init(w, rank, alpha, std, &mut stream(seed, "init", 0)).map_err(fail)?;
        emit(out, Model::single(AdapterLayer::Lora(layer)), None);
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ml_model_free(model: *mut MlModel) {
    if !model.is_null() {
        // SAFETY: the handle was produced by `Box::into_raw`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input and output widths of the model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ml_model_dims(model: *const MlModel, d_in: *mut usize, d_out: *mut usize) -> MlStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if d_in.is_null() || d_out.is_null() {
            return Err(null("output pointer"));
        }
        unsafe {
            *d_in = m.model.d_in();
            *d_out = m.model.d_out();
        }
        Ok(())
    })
}

/// Forward pass of one `seq×d_in` instance into `out` (`seq×d_out`).
/// `task_id` < 0 means none; `route_seed` seeds random routing.
///
/// # Safety
/// `h` must hold `seq·d_in` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ml_model_forward(
    model: *const MlModel,
    h: *const f64,
    seq: usize,
    d_in: usize,
    task_id: i64,
    route_seed: u64,
    out: *mut f64,
    out_len: usize,
) -> MlStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = unsafe { matrix(h, seq, d_in, "h") }?;
        let mut rng = seeded(route_seed);
        let r = m.model.needs_rng().then_some(&mut rng);
        let y = m.model.forward(&x, task(task_id), r).map_err(fail)?;
        if out_len != y.as_slice().len() {
            return Err(fail(Error::Shape(format!(
                "output buffer holds {out_len} values, forward produced {}",
                y.as_slice().len()
            ))));
        }
        // SAFETY: `out` holds `out_len` doubles.
        unsafe { ptr::copy_nonoverlapping(y.as_slice().as_ptr(), out, out_len) };
        Ok(())
    })
}

/// One Adam step on the mean squared error over `batch` instances.
/// `inputs` is `batch×seq×d_in`, `targets` `batch×seq×d_out`, both
/// contiguous. The optimizer state lives in the handle and is saved with
/// it. The batch loss before the step is written to `loss`.
///
/// # Safety
/// Buffers must hold the stated number of doubles; `loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn ml_model_train_step(
    model: *mut MlModel,
    inputs: *const f64,
    targets: *const f64,
    batch: usize,
    seq: usize,
    task_id: i64,
    lr: f64,
    route_seed: u64,
    loss: *mut f64,
) -> MlStatus {
    guard(|| {
        let m = unsafe { model_mut(model) }?;
        let (di, dout) = (m.model.d_in(), m.model.d_out());
        let xs = unsafe { matrix(inputs, batch * seq, di, "inputs") }?;
        let ys = unsafe { matrix(targets, batch * seq, dout, "targets") }?;
        if batch == 0 || seq == 0 {
            return Err(fail(Error::Argument("batch and seq must be positive".into())));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(fail(Error::Argument(format!("learning rate must be positive, got {lr}"))));
        }
        let rows = |src: &Matrix, b: usize, w: usize| {
            Matrix::from_vec(seq, w, src.as_slice()[b * seq * w..(b + 1) * seq * w].to_vec()).map_err(fail)
        };
        let instances = (0..batch)
            .map(|b| {
                Ok(Instance {
                    input: rows(&xs, b, di)?,
                    target: rows(&ys, b, dout)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = seeded(route_seed);
        let r = m.model.needs_rng().then_some(&mut rng);
        let (l, grads) = m
            .model
            .batch_loss_and_grads(&instances, task(task_id), LossSpec::mse(), r)
            .map_err(fail)?;
        let adam = m.adam.get_or_insert_with(|| Adam::new(AdamConfig::new(lr)));
        adam.config.lr = lr;
        m.model.apply_adam(adam, &grads).map_err(fail)?;
        if let Some(out) = unsafe { loss.as_mut() } {
            *out = l;
        }
        Ok(())
    })
}

/// Writes the model (and optimizer state, if any) to `path`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ml_checkpoint_save(model: *const MlModel, path: *const c_char) -> MlStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let p = unsafe { self::path(path) }?;
        let ck = match &m.adam {
            Some(a) => Checkpoint::with_optimizer(m.model.clone(), a.clone()),
            None => Checkpoint::new(m.model.clone()),
        };
        ck.save(&p).map_err(fail)
    })
}

/// Reads a checkpoint into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ml_checkpoint_load(path: *const c_char, out: *mut *mut MlModel) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = unsafe { self::path(path) }?;
        let ck = Checkpoint::load(&p).map_err(fail)?;
        emit(out, ck.model, ck.optimizer);
        Ok(())
    })
}
