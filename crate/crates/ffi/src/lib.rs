//! C ABI over `finegrain`.
//!
//! Objects are opaque handles created by `*_load`/`*_parse` and released with
//! the matching `*_free`. Every fallible call returns an [`FgStatus`]; on
//! failure [`fg_last_error`] describes the problem for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use finegrain::corpus::{self, AnnotatedResponse};
use finegrain::metrics;
use finegrain::reward::score_passage;
use finegrain::scorer::Scorer;
use finegrain::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidInput = 4,
    OutOfRange = 5,
    Undefined = 6,
    Panic = 7,
}

/// A loaded, validated corpus.
pub struct FgCorpus {
    records: Vec<AnnotatedResponse>,
}

/// A trained scorer checkpoint.
pub struct FgScorer {
    model: Scorer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: FgStatus, msg: impl Into<String>) -> FgStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> FgStatus {
    match err {
        Error::Io(_) => FgStatus::Io,
        Error::Undefined(_) => FgStatus::Undefined,
        _ => FgStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FgStatus, String)>) -> FgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(FgStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (FgStatus, String)> {
    if p.is_null() {
        return Err((FgStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FgStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn lib_err(e: Error) -> (FgStatus, String) {
    (status_of(&e), e.to_string())
}

macro_rules! nonnull {
    ($p:expr, $name:expr) => {
        if $p.is_null() {
            return Err((FgStatus::NullPointer, format!("{} is null", $name)));
        }
    };
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse JSONL corpus text. Fails on the first invalid line.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_parse(text: *const c_char, out: *mut *mut FgCorpus) -> FgStatus {
    guard(|| {
        nonnull!(out, "out");
        let text = str_arg(text, "text")?;
        let records = corpus::ingest_str(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FgCorpus { records }));
        Ok(())
    })
}

/// Load a JSONL corpus file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_load(path: *const c_char, out: *mut *mut FgCorpus) -> FgStatus {
    guard(|| {
        nonnull!(out, "out");
        let path = str_arg(path, "path")?;
        let records = corpus::ingest(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FgCorpus { records }));
        Ok(())
    })
}

/// Count the problems in JSONL corpus text without stopping at the first.
/// Returns `FG_STATUS_INVALID_INPUT` when any were found; the last error
/// then holds the first one.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out_issues` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_validate(
    text: *const c_char,
    out_issues: *mut usize,
) -> FgStatus {
    guard(|| {
        nonnull!(out_issues, "out_issues");
        let text = str_arg(text, "text")?;
        let (_, issues) = corpus::lint_str(text);
        *out_issues = issues.len();
        match issues.first() {
            None => Ok(()),
            Some(i) => Err((
                FgStatus::InvalidInput,
                format!("line {}: {}", i.line, i.message),
            )),
        }
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_len(corpus: *const FgCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.records.len())
}

/// Word-level hallucination rate of record `index`.
///
/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_hallucination_rate(
    corpus: *const FgCorpus,
    index: usize,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        nonnull!(corpus, "corpus");
        nonnull!(out, "out");
        let c = &*corpus;
        let r = c.records.get(index).ok_or_else(|| {
            (
                FgStatus::OutOfRange,
                format!("index {index} out of range for {} records", c.records.len()),
            )
        })?;
        *out = metrics::hallucination_rate(r);
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_corpus_free(corpus: *mut FgCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Load a scorer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_scorer_load(path: *const c_char, out: *mut *mut FgScorer) -> FgStatus {
    guard(|| {
        nonnull!(out, "out");
        let path = str_arg(path, "path")?;
        let model = Scorer::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FgScorer { model }));
        Ok(())
    })
}

/// Number of classifier classes (2 or 3 for a reward model); 0 for null.
///
/// # Safety
/// `scorer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_scorer_num_classes(scorer: *const FgScorer) -> usize {
    scorer.as_ref().map_or(0, |s| s.model.num_classes())
}

/// Score a passage. Writes the passage score to `out_score`, the sentence
/// count to `out_sentences`, and up to `capacity` sentence scores into
/// `sentence_scores` (which may be null when `capacity` is 0).
///
/// # Safety
/// String arguments must be NUL-terminated; `sentence_scores` must have room
/// for `capacity` values; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_scorer_score_passage(
    scorer: *const FgScorer,
    prompt: *const c_char,
    response: *const c_char,
    out_score: *mut f64,
    sentence_scores: *mut f64,
    capacity: usize,
    out_sentences: *mut usize,
) -> FgStatus {
    guard(|| {
        nonnull!(scorer, "scorer");
        nonnull!(out_score, "out_score");
        nonnull!(out_sentences, "out_sentences");
        if capacity > 0 {
            nonnull!(sentence_scores, "sentence_scores");
        }
        let prompt = str_arg(prompt, "prompt")?;
        let response = str_arg(response, "response")?;
        let score = score_passage(&(*scorer).model, prompt, response).map_err(lib_err)?;
        let n = score.sentence_scores.len();
        for (i, s) in score.sentence_scores.iter().take(capacity).enumerate() {
            *sentence_scores.add(i) = *s;
        }
        *out_sentences = n;
        *out_score = score.passage_score;
        Ok(())
    })
}

/// # Safety
/// `scorer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_scorer_free(scorer: *mut FgScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Pearson correlation of two arrays of length `len`.
///
/// # Safety
/// `xs` and `ys` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_pearson(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        nonnull!(xs, "xs");
        nonnull!(ys, "ys");
        nonnull!(out, "out");
        let xs = std::slice::from_raw_parts(xs, len);
        let ys = std::slice::from_raw_parts(ys, len);
        *out = metrics::pearson(xs, ys).map_err(lib_err)?;
        Ok(())
    })
}
