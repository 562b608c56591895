//! C ABI over the `wordstyle` library.
//!
//! Objects cross the boundary as opaque handles that must be released with
//! their `*_free` function. Every fallible call returns a [`WsStatus`]; the
//! message of the most recent failure on the calling thread is available from
//! [`ws_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use wordstyle::control::{apply_biases, style_transfer, BiasSpec};
use wordstyle::corpus::{generate_synthetic_corpus, load_corpus, AcousticFeatures, GeneratorConfig, PhonemeSequence, N_CHANNELS};
use wordstyle::encoders::WordStyleEmbeddings;
use wordstyle::metrics::{evaluate_pair, DEFAULT_VOICING_THRESHOLD};
use wordstyle::training::Checkpoint;
use wordstyle::Error;

/// Number of feature channels per frame.
pub const WS_N_CHANNELS: usize = 22;

const _: () = assert!(WS_N_CHANNELS == N_CHANNELS);

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullOrInvalidArgument = 1,
    /// Input failed validation (unknown phoneme, bad shape, out-of-range
    /// index, malformed text).
    Validation = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A checkpoint is missing, corrupt or incompatible.
    Checkpoint = 4,
    /// A caller-supplied buffer is too small.
    BufferTooSmall = 5,
    /// Any other failure, including a caught panic.
    Internal = 6,
}

/// Style bias applied to synthesized word embeddings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WsBias {
    pub token: u32,
    /// Amount in standard deviations of the token's corpus weight.
    pub amount_stds: f64,
    /// Word index, or a negative value for every word.
    pub word: i64,
}

/// Corpus-level scores of one synthesized utterance.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct WsMetrics {
    pub ffe: f64,
    pub vde: f64,
    pub gpe: f64,
    pub mcd: f64,
    pub n_frames_compared: usize,
}

/// A loaded checkpoint.
pub struct WsModel {
    ckpt: Checkpoint,
}

/// Synthesized features with their phoneme durations.
pub struct WsSynthesis {
    features: AcousticFeatures,
    durations: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WsStatus {
    match e {
        Error::Io { .. } => WsStatus::Io,
        Error::Checkpoint(_) | Error::Json { .. } => WsStatus::Checkpoint,
        e if e.is_validation() => WsStatus::Validation,
        _ => WsStatus::Internal,
    }
}

struct Failure(WsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WsStatus::Internal
        }
    }
}

fn invalid(what: &str) -> Failure {
    Failure(WsStatus::NullOrInvalidArgument, what.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(&format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(&format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ws_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a synthetic corpus of `n_utterances` into `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ws_generate_corpus(out_dir: *const c_char, n_utterances: u32, seed: u64) -> WsStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        generate_synthetic_corpus(&dir, n_utterances as usize, seed, &GeneratorConfig::default())?;
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_model_load(dir: *const c_char, out: *mut *mut WsModel) -> WsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(WsModel { ckpt }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`ws_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ws_model_free(model: *mut WsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of style tokens, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ws_model_n_tokens(model: *const WsModel) -> u32 {
    model.as_ref().map_or(0, |m| m.ckpt.model.config.n_tokens as u32)
}

/// Training steps recorded in the checkpoint, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ws_model_step(model: *const WsModel) -> u64 {
    model.as_ref().map_or(0, |m| m.ckpt.step as u64)
}

fn bias_specs(biases: &[WsBias]) -> Vec<BiasSpec> {
    biases
        .iter()
        .map(|b| BiasSpec { token: b.token as usize, amount_stds: b.amount_stds, word: usize::try_from(b.word).ok() })
        .collect()
}

fn synthesize(
    model: &WsModel,
    text: &PhonemeSequence,
    style: WordStyleEmbeddings,
    biases: &[WsBias],
) -> Result<WsSynthesis, Failure> {
    let style = if biases.is_empty() {
        style
    } else {
        let stats = model
            .ckpt
            .token_stats
            .as_ref()
            .ok_or_else(|| Failure(WsStatus::Checkpoint, "checkpoint has no token statistics".into()))?;
        apply_biases(&model.ckpt.model, &style, &bias_specs(biases), stats)?
    };
    let s = model.ckpt.model.synthesize(text, &style, None)?;
    Ok(WsSynthesis { features: s.features, durations: s.durations })
}

/// Synthesizes `text` (words separated by spaces, phonemes by `.`) with
/// word styles predicted by the prior, then biased.
///
/// # Safety
/// `model` must be a live handle, `text` a valid NUL-terminated string,
/// `biases` readable for `n_biases` elements (may be null when zero) and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesize_prior(
    model: *const WsModel,
    text: *const c_char,
    biases: *const WsBias,
    n_biases: usize,
    out: *mut *mut WsSynthesis,
) -> WsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = ref_arg(model, "model")?;
        let text = PhonemeSequence::parse(str_arg(text, "text")?)?;
        let biases = slice_arg(biases, n_biases, "biases")?;
        let style = model.ckpt.model.prior_embeddings(&text)?;
        *out = Box::into_raw(Box::new(synthesize(model, &text, style, biases)?));
        Ok(())
    })
}

/// Synthesizes `text` with the word styles of utterance `reference_id` in
/// `corpus_dir`, mixed with the prior by `alpha` (1 uses the reference
/// alone), then biased.
///
/// # Safety
/// As for [`ws_synthesize_prior`]; `corpus_dir` and `reference_id` must be
/// valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesize_reference(
    model: *const WsModel,
    text: *const c_char,
    corpus_dir: *const c_char,
    reference_id: *const c_char,
    alpha: f64,
    biases: *const WsBias,
    n_biases: usize,
    out: *mut *mut WsSynthesis,
) -> WsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = ref_arg(model, "model")?;
        let text = PhonemeSequence::parse(str_arg(text, "text")?)?;
        let id = str_arg(reference_id, "reference_id")?;
        let corpus = load_corpus(&PathBuf::from(str_arg(corpus_dir, "corpus_dir")?))?;
        let source = corpus
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Failure(WsStatus::Validation, format!("utterance {id} is not in the corpus")))?;
        let biases = slice_arg(biases, n_biases, "biases")?;
        let style = style_transfer(&model.ckpt.model, source, &text, alpha)?;
        *out = Box::into_raw(Box::new(synthesize(model, &text, style, biases)?));
        Ok(())
    })
}

/// Releases a synthesis result. Null is ignored.
///
/// # Safety
/// `synth` must come from a `ws_synthesize_*` call and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesis_free(synth: *mut WsSynthesis) {
    if !synth.is_null() {
        drop(Box::from_raw(synth));
    }
}

/// Number of frames, or 0 for a null handle.
///
/// # Safety
/// `synth` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesis_n_frames(synth: *const WsSynthesis) -> usize {
    synth.as_ref().map_or(0, |s| s.features.n_frames())
}

/// Number of phonemes, or 0 for a null handle.
///
/// # Safety
/// `synth` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesis_n_phonemes(synth: *const WsSynthesis) -> usize {
    synth.as_ref().map_or(0, |s| s.durations.len())
}

/// Copies the `n_frames x 22` row-major features into `buf`, which must
/// hold `len >= n_frames * 22` floats.
///
/// # Safety
/// `synth` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesis_copy_features(synth: *const WsSynthesis, buf: *mut f32, len: usize) -> WsStatus {
    guard(|| {
        let s = ref_arg(synth, "synth")?;
        let frames = s.features.frames();
        let n = frames.len();
        if len < n {
            return Err(Failure(WsStatus::BufferTooSmall, format!("need {n} floats, buffer holds {len}")));
        }
        if buf.is_null() {
            return Err(invalid("buf is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, n);
        for (d, v) in dst.iter_mut().zip(frames.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Copies the per-phoneme frame counts into `buf` (`len >= n_phonemes`).
///
/// # Safety
/// `synth` must be a live handle and `buf` writable for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ws_synthesis_copy_durations(synth: *const WsSynthesis, buf: *mut u32, len: usize) -> WsStatus {
    guard(|| {
        let s = ref_arg(synth, "synth")?;
        let n = s.durations.len();
        if len < n {
            return Err(Failure(WsStatus::BufferTooSmall, format!("need {n} entries, buffer holds {len}")));
        }
        if buf.is_null() {
            return Err(invalid("buf is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, n);
        for (d, &v) in dst.iter_mut().zip(&s.durations) {
            *d = u32::try_from(v).unwrap_or(u32::MAX);
        }
        Ok(())
    })
}

/// DTW-aligns `estimate` to `reference` (both row-major `frames x 22`) and
/// computes FFE, VDE, GPE and MCD.
///
/// # Safety
/// `reference` and `estimate` must be readable for `frames * 22` floats and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ws_evaluate_pair(
    reference: *const f32,
    reference_frames: usize,
    estimate: *const f32,
    estimate_frames: usize,
    out: *mut WsMetrics,
) -> WsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let features = |p: *const f32, n: usize, name: &str| -> Result<AcousticFeatures, Failure> {
            let len = n.checked_mul(N_CHANNELS).ok_or_else(|| invalid("frame count overflows"))?;
            let bytes: Vec<u8> = slice_arg(p, len, name)?.iter().flat_map(|v| v.to_le_bytes()).collect();
            Ok(AcousticFeatures::from_le_bytes(&bytes, n)?)
        };
        let r = features(reference, reference_frames, "reference")?;
        let e = features(estimate, estimate_frames, "estimate")?;
        let m = evaluate_pair("pair", &r, &e, DEFAULT_VOICING_THRESHOLD)?;
        *out = WsMetrics { ffe: m.ffe, vde: m.vde, gpe: m.gpe, mcd: m.mcd, n_frames_compared: m.n_frames_compared };
        Ok(())
    })
}
