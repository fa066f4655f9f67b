//! C ABI for embedding the relation extractor in other languages.
//!
//! Handles are opaque pointers created and released by this library.
//! Every fallible call returns a status code (`SYNRE_OK`,
//! `SYNRE_ERR_USAGE`, `SYNRE_ERR_DATA`, `SYNRE_ERR_NUMERIC`, matching
//! the CLI exit codes); the per-thread message behind the most recent
//! failure is available from `synre_last_error`.
//!
//! The matching header lives in `include/synre.h` and is maintained by
//! hand alongside this file.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use synre::corpus::{load_corpus, load_corpus_discover, load_relations, Dataset};
use synre::error::Error;
use synre::evaluator::bag_probabilities;
use synre::model::{Model, Strategy};
use synre::trainer::{load_checkpoint, train, TrainConfig};

pub const SYNRE_OK: c_int = 0;
pub const SYNRE_ERR_USAGE: c_int = 1;
pub const SYNRE_ERR_DATA: c_int = 2;
pub const SYNRE_ERR_NUMERIC: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn fail(err: Error) -> c_int {
    let code = err.exit_code();
    set_error(&err.to_string());
    code
}

fn usage(msg: &str) -> c_int {
    set_error(msg);
    SYNRE_ERR_USAGE
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char) -> Option<PathBuf> {
    if ptr.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(ptr) }.to_str().ok()?;
    Some(PathBuf::from(s))
}

/// Opaque model handle.
pub struct SynreModel {
    model: Model,
}

/// Opaque dataset handle.
pub struct SynreDataset {
    dataset: Dataset,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn synre_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn synre_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a trained checkpoint. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn synre_model_load(
    path: *const c_char,
    out: *mut *mut SynreModel,
) -> c_int {
    let Some(path) = (unsafe { path_arg(path) }) else {
        return usage("model path must not be null");
    };
    if out.is_null() {
        return usage("output handle must not be null");
    }
    match load_checkpoint(&path) {
        Ok((model, _)) => {
            unsafe { *out = Box::into_raw(Box::new(SynreModel { model })) };
            SYNRE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from `synre_model_load` and
/// not have been freed already. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn synre_model_free(handle: *mut SynreModel) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of relations in the model's inventory, or -1 on null.
///
/// # Safety
/// `handle` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn synre_model_num_relations(handle: *const SynreModel) -> c_int {
    match unsafe { handle.as_ref() } {
        Some(m) => m.model.relations.len() as c_int,
        None => -1,
    }
}

/// Copy the NUL-terminated name of relation `index` into `buf`.
/// Returns the number of bytes written excluding the terminator, or -1
/// on bad arguments.
///
/// # Safety
/// `handle` must be a live model handle; `buf` must point to at least
/// `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn synre_model_relation_name(
    handle: *const SynreModel,
    index: c_int,
    buf: *mut c_char,
    cap: usize,
) -> c_int {
    let Some(m) = (unsafe { handle.as_ref() }) else {
        return -1;
    };
    if buf.is_null() || cap == 0 || index < 0 {
        return -1;
    }
    let Some(name) = m.model.relations.get(index as usize) else {
        return -1;
    };
    let bytes = name.as_bytes();
    let count = bytes.len().min(cap - 1);
    unsafe {
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, count);
        *buf.add(count) = 0;
    }
    count as c_int
}

/// Load a corpus. With a null `relations_path` the inventory is
/// collected from the file itself; otherwise it is read from the given
/// file and unknown relations are rejected.
///
/// # Safety
/// `corpus_path` must be a valid NUL-terminated path;
/// `relations_path` must be valid or null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn synre_dataset_load(
    corpus_path: *const c_char,
    relations_path: *const c_char,
    out: *mut *mut SynreDataset,
) -> c_int {
    let Some(corpus) = (unsafe { path_arg(corpus_path) }) else {
        return usage("corpus path must not be null");
    };
    if out.is_null() {
        return usage("output handle must not be null");
    }
    let loaded = match unsafe { path_arg(relations_path) } {
        Some(rel) => load_relations(&rel).and_then(|names| load_corpus(&corpus, &names)),
        None => load_corpus_discover(&corpus),
    };
    match loaded {
        Ok(dataset) => {
            unsafe { *out = Box::into_raw(Box::new(SynreDataset { dataset })) };
            SYNRE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from `synre_dataset_load` and not have been
/// freed already. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn synre_dataset_free(handle: *mut SynreDataset) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of bags in a dataset, or -1 on null.
///
/// # Safety
/// `handle` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn synre_dataset_num_bags(handle: *const SynreDataset) -> c_int {
    match unsafe { handle.as_ref() } {
        Some(d) => d.dataset.bags.len() as c_int,
        None => -1,
    }
}

/// Relation probabilities for one bag. `probs` must hold
/// `synre_model_num_relations` doubles; they sum to one.
///
/// # Safety
/// `model` and `dataset` must be live handles; `probs` must point to
/// `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn synre_predict_bag(
    model: *const SynreModel,
    dataset: *const SynreDataset,
    bag_index: usize,
    probs: *mut c_double,
    len: usize,
) -> c_int {
    let (Some(m), Some(d)) = (unsafe { model.as_ref() }, unsafe { dataset.as_ref() }) else {
        return usage("model and dataset handles must not be null");
    };
    if probs.is_null() {
        return usage("probability buffer must not be null");
    }
    if len != m.model.relations.len() {
        return usage("probability buffer length must equal the relation count");
    }
    let Some(bag) = d.dataset.bags.get(bag_index) else {
        return usage("bag index out of range");
    };
    if d.dataset.relation_names != m.model.relations {
        set_error("dataset relation inventory differs from the model's");
        return SYNRE_ERR_DATA;
    }
    match bag_probabilities(&m.model, bag) {
        Ok(p) => {
            unsafe { std::ptr::copy_nonoverlapping(p.as_ptr(), probs, len) };
            SYNRE_OK
        }
        Err(e) => fail(e),
    }
}

/// Train a model end to end, writing checkpoints and the training log
/// into `out_dir` exactly like the CLI `train` subcommand.
/// `config_json` (nullable) points to a JSON training configuration
/// file; `strategy` (nullable) overrides its strategy field.
///
/// # Safety
/// All non-null pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn synre_train(
    corpus_path: *const c_char,
    relations_path: *const c_char,
    config_json: *const c_char,
    strategy: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> c_int {
    let (Some(corpus), Some(relations), Some(out)) = (
        unsafe { path_arg(corpus_path) },
        unsafe { path_arg(relations_path) },
        unsafe { path_arg(out_dir) },
    ) else {
        return usage("corpus, relations and output paths must not be null");
    };
    let result = (|| -> synre::Result<()> {
        let names = load_relations(&relations)?;
        let dataset = load_corpus(&corpus, &names)?;
        let mut cfg = match unsafe { path_arg(config_json) } {
            Some(p) => read_config(&p)?,
            None => synre::trainer::default_config(),
        };
        if let Some(s) = unsafe { strategy.as_ref() } {
            let text = unsafe { CStr::from_ptr(s) }
                .to_str()
                .map_err(|_| Error::invalid("strategy must be valid UTF-8"))?;
            cfg.strategy = Strategy::from_str(text)?;
        }
        cfg.seed = seed;
        train(&dataset, &cfg, None, None, Some(&out))?;
        Ok(())
    })();
    match result {
        Ok(()) => SYNRE_OK,
        Err(e) => fail(e),
    }
}

fn read_config(path: &Path) -> synre::Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}
