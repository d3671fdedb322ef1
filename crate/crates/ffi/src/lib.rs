//! C ABI over `cts-core`. Objects cross the boundary as opaque handles that
//! the caller frees with the matching `*_free` function. Every fallible call
//! returns a `CtsStatus`; on failure `cts_last_error` describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cts_core::controllers::ControllerMode;
use cts_core::data::{synthetic_blobs, BlobSpec, Dataset};
use cts_core::harness::oracle::{brute_force_oracle, DEFAULT_BUDGET};
use cts_core::mask::Ticket;
use cts_core::nn::{Arch, Checkpoint, LrSchedule, ModelState, TrainConfig};
use cts_core::objectives::ObjectiveKind;
use cts_core::search::{evaluation_batch, run_cts, SearchConfig};
use cts_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    BudgetExceeded = 6,
    Failed = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsArch {
    TinyMlp = 0,
    Mlp2x256 = 1,
    LenetConv4 = 2,
    ResnetTiny = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsObjective {
    TaskLoss = 0,
    RelLossChange = 1,
    NegGradNorm = 2,
    ReverseKl = 3,
    FeatureMatch = 4,
    GradMatch = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsController {
    GradBalance = 0,
    Lagrange = 1,
}

/// Settings for one search run. Start from `cts_search_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtsSearchParams {
    /// Target density in (0, 1].
    pub kappa: f64,
    pub objective: CtsObjective,
    pub controller: CtsController,
    pub search_steps: usize,
    /// Total training steps.
    pub train_steps: usize,
    /// Step whose weights the ticket is drawn from and rewound to.
    pub rewind_step: usize,
    pub batch_size: usize,
    /// Constant SGD learning rate.
    pub learning_rate: f64,
    pub seed: u64,
}

/// A dataset with train and test splits.
pub struct CtsDataset(Dataset);

/// Network weights.
pub struct CtsModel(ModelState);

/// A binary mask over the maskable weights.
pub struct CtsTicket(Ticket);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CtsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_)
            | Error::UnknownArch(_)
            | Error::InvalidDensity(_)
            | Error::EmptyTicket { .. }
            | Error::OverlayLength { .. }
            | Error::Shape { .. }
            | Error::LayerCountMismatch { .. }
            | Error::MissingDistribution => CtsStatus::InvalidArgument,
            Error::Io(_) => CtsStatus::Io,
            Error::Parse { .. } | Error::Format(_) => CtsStatus::Parse,
            Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::DegenerateTeacherLoss(_)
            | Error::ZeroGradient
            | Error::LayerCollapse(_) => CtsStatus::Numerical,
            Error::BudgetExceeded { .. } => CtsStatus::BudgetExceeded,
            _ => CtsStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CtsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CtsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CtsStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn arch(a: CtsArch) -> Arch {
    match a {
        CtsArch::TinyMlp => Arch::TinyMlp,
        CtsArch::Mlp2x256 => Arch::Mlp2x256,
        CtsArch::LenetConv4 => Arch::LenetConv4,
        CtsArch::ResnetTiny => Arch::ResnetTiny,
    }
}

fn objective(o: CtsObjective) -> ObjectiveKind {
    match o {
        CtsObjective::TaskLoss => ObjectiveKind::TaskLoss,
        CtsObjective::RelLossChange => ObjectiveKind::RelLossChange,
        CtsObjective::NegGradNorm => ObjectiveKind::NegGradNorm,
        CtsObjective::ReverseKl => ObjectiveKind::ReverseKl,
        CtsObjective::FeatureMatch => ObjectiveKind::FeatureMatch,
        CtsObjective::GradMatch => ObjectiveKind::GradMatch,
    }
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn cts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn cts_search_params_default() -> CtsSearchParams {
    CtsSearchParams {
        kappa: 0.05,
        objective: CtsObjective::ReverseKl,
        controller: CtsController::GradBalance,
        search_steps: 1000,
        train_steps: 1000,
        rewind_step: 0,
        batch_size: 64,
        learning_rate: 0.05,
        seed: 0,
    }
}

/// Gaussian blobs with flat samples of length `dim`, split 80/20.
///
/// # Safety
/// `out_dataset` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn cts_dataset_blobs(
    classes: usize,
    dim: usize,
    n: usize,
    seed: u64,
    out_dataset: *mut *mut CtsDataset,
) -> CtsStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let data = synthetic_blobs(&BlobSpec::new(classes, dim, n, seed))?;
        *slot = boxed(CtsDataset(data));
        Ok(())
    })
}

/// Gaussian blobs viewed as `channels × height × width` images, for the
/// convolutional architectures.
///
/// # Safety
/// `out_dataset` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn cts_dataset_blobs_image(
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    n: usize,
    seed: u64,
    out_dataset: *mut *mut CtsDataset,
) -> CtsStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let spec = BlobSpec::new(classes, channels * height * width, n, seed).with_image_shape([channels, height, width]);
        *slot = boxed(CtsDataset(synthetic_blobs(&spec)?));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cts_dataset_free(dataset: *mut CtsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Freshly initialized weights for `arch` sized to `dataset`.
///
/// # Safety
/// Handles must be live; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_model_new(
    arch_id: CtsArch,
    dataset: *const CtsDataset,
    seed: u64,
    out_model: *mut *mut CtsModel,
) -> CtsStatus {
    guard(|| {
        let data = &get(dataset, "dataset")?.0;
        let slot = out(out_model, "out_model")?;
        *slot = boxed(CtsModel(ModelState::for_dataset(arch(arch_id), data, seed)?));
        Ok(())
    })
}

/// Loads weights from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_model_load(file: *const c_char, out_model: *mut *mut CtsModel) -> CtsStatus {
    guard(|| {
        let p = path(file)?;
        let slot = out(out_model, "out_model")?;
        *slot = boxed(CtsModel(Checkpoint::load(&p)?.to_model()?));
        Ok(())
    })
}

/// Writes weights to a checkpoint file, tagged with `step`.
///
/// # Safety
/// `model` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cts_model_save(model: *const CtsModel, file: *const c_char, step: u64) -> CtsStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        Checkpoint::from_model(m, step, None).save(&path(file)?)?;
        Ok(())
    })
}

/// Number of maskable weights `d`.
///
/// # Safety
/// `model` must be live; `out_d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_model_maskable_count(model: *const CtsModel, out_d: *mut usize) -> CtsStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        *out(out_d, "out_d")? = m.d();
        Ok(())
    })
}

/// Test-split loss and accuracy, with `ticket` applied when not NULL.
///
/// # Safety
/// Handles must be live or NULL where allowed; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_model_evaluate(
    model: *const CtsModel,
    dataset: *const CtsDataset,
    ticket: *const CtsTicket,
    out_loss: *mut f64,
    out_accuracy: *mut f64,
) -> CtsStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let data = &get(dataset, "dataset")?.0;
        let overlay = ticket.as_ref().map(|t| t.0.as_overlay());
        let (loss, acc) = (out(out_loss, "out_loss")?, out(out_accuracy, "out_accuracy")?);
        let eval = m.evaluate(data, &data.test, overlay.as_deref())?;
        *loss = eval.loss;
        *acc = eval.accuracy;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cts_model_free(model: *mut CtsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pre-trains to the rewind step, searches, clamps the ticket and retrains
/// it. Returns the ticket, the retrained model and its test accuracy. Either
/// output handle pointer may be NULL when not wanted.
///
/// # Safety
/// Handles must be live; `params` must point to a valid struct.
#[no_mangle]
pub unsafe extern "C" fn cts_search(
    dataset: *const CtsDataset,
    arch_id: CtsArch,
    params: *const CtsSearchParams,
    out_ticket: *mut *mut CtsTicket,
    out_model: *mut *mut CtsModel,
    out_test_accuracy: *mut f64,
) -> CtsStatus {
    guard(|| {
        let data = &get(dataset, "dataset")?.0;
        let p = *get(params, "params")?;
        let acc = out(out_test_accuracy, "out_test_accuracy")?;
        let cfg = SearchConfig {
            kappa: p.kappa,
            objective: objective(p.objective),
            controller: match p.controller {
                CtsController::GradBalance => ControllerMode::GradBalance,
                CtsController::Lagrange => ControllerMode::Lagrange,
            },
            search_steps: p.search_steps,
            init_seed: p.seed,
            search_seed: p.seed.wrapping_add(0x5EA2C4),
            train: TrainConfig {
                steps: p.train_steps,
                rewind_step: p.rewind_step,
                batch_size: p.batch_size,
                lr: LrSchedule::constant(p.learning_rate),
                seed: p.seed,
                ..TrainConfig::default()
            },
            ..SearchConfig::default()
        };
        let result = run_cts(&cfg, arch(arch_id), data)?;
        *acc = result.metrics.final_eval.accuracy;
        if let Some(slot) = out_ticket.as_mut() {
            *slot = boxed(CtsTicket(result.ticket));
        }
        if let Some(slot) = out_model.as_mut() {
            *slot = boxed(CtsModel(result.model));
        }
        Ok(())
    })
}

/// Exhaustive search over every mask with `round(kappa · d)` ones, scored on
/// the first `batch` training samples.
///
/// # Safety
/// Handles must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_oracle(
    model: *const CtsModel,
    dataset: *const CtsDataset,
    kappa: f64,
    objective_id: CtsObjective,
    batch: usize,
    out_ticket: *mut *mut CtsTicket,
    out_best_value: *mut f64,
) -> CtsStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let data = &get(dataset, "dataset")?.0;
        let slot = out(out_ticket, "out_ticket")?;
        let best = out(out_best_value, "out_best_value")?;
        let eval = evaluation_batch(data, batch);
        let result = brute_force_oracle(m, &eval, kappa, objective(objective_id), DEFAULT_BUDGET)?;
        *best = result.table[0].value;
        *slot = boxed(CtsTicket(result.best));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_ticket` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_load(file: *const c_char, out_ticket: *mut *mut CtsTicket) -> CtsStatus {
    guard(|| {
        let p = path(file)?;
        let slot = out(out_ticket, "out_ticket")?;
        *slot = boxed(CtsTicket(Ticket::load(&p)?));
        Ok(())
    })
}

/// # Safety
/// `ticket` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_save(ticket: *const CtsTicket, file: *const c_char) -> CtsStatus {
    guard(|| {
        get(ticket, "ticket")?.0.save(&path(file)?)?;
        Ok(())
    })
}

/// Mask length `d`, or 0 for NULL.
///
/// # Safety
/// `ticket` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_len(ticket: *const CtsTicket) -> usize {
    ticket.as_ref().map_or(0, |t| t.0.d())
}

/// Number of retained weights, or 0 for NULL.
///
/// # Safety
/// `ticket` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_retained(ticket: *const CtsTicket) -> usize {
    ticket.as_ref().map_or(0, |t| t.0.retained())
}

/// Achieved density, or NaN for NULL.
///
/// # Safety
/// `ticket` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_density(ticket: *const CtsTicket) -> f64 {
    ticket.as_ref().map_or(f64::NAN, |t| t.0.density)
}

/// Copies the mask as 0/1 bytes into `buf`, which must hold `len` bytes
/// with `len` equal to `cts_ticket_len`.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_copy_mask(ticket: *const CtsTicket, buf: *mut u8, len: usize) -> CtsStatus {
    guard(|| {
        let t = &get(ticket, "ticket")?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != t.d() {
            return Err(Failure(
                CtsStatus::InvalidArgument,
                format!("buffer holds {len} bytes, mask has {}", t.d()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, &m) in dst.iter_mut().zip(&t.mask) {
            *d = m as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `ticket` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cts_ticket_free(ticket: *mut CtsTicket) {
    if !ticket.is_null() {
        drop(Box::from_raw(ticket));
    }
}
