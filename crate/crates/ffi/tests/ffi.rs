use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use wordstyle::corpus::load_corpus;
use wordstyle::decoder::SigmaMode;
use wordstyle::model::ModelConfig;
use wordstyle::training::{train, TrainingConfig};
use wordstyle_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    cstr(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = ws_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_enc: 8,
        d_ws: 4,
        d_ref: 8,
        n_tokens: 4,
        d_token: 6,
        d_attn: 4,
        ref_channels: 4,
        kernel: 3,
        d_prior: 8,
        dur_hidden: 4,
        prenet: 4,
        d_dec: 8,
        sigma_mode: SigmaMode::Predicted,
        init_seed: 2,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: CString,
    model: *mut WsModel,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe { ws_model_free(self.model) };
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    let corpus = cpath(&corpus_dir);
    assert_eq!(unsafe { ws_generate_corpus(corpus.as_ptr(), 4, 3) }, WsStatus::Ok);
    let utts = load_corpus(&corpus_dir).unwrap();
    let cfg = TrainingConfig { batch_size: 2, warmup_steps: 1, max_steps: 3, ..TrainingConfig::default() };
    let ckpt = train(&utts, tiny_config(), cfg).unwrap();
    let model_dir = dir.path().join("model");
    ckpt.save(&model_dir).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ws_model_load(cpath(&model_dir).as_ptr(), &mut model) }, WsStatus::Ok);
    Fixture { _dir: dir, corpus, model }
}

unsafe fn read_synthesis(s: *const WsSynthesis) -> (Vec<f32>, Vec<u32>) {
    let n = ws_synthesis_n_frames(s);
    let mut feats = vec![0f32; n * WS_N_CHANNELS];
    assert_eq!(ws_synthesis_copy_features(s, feats.as_mut_ptr(), feats.len()), WsStatus::Ok);
    let mut durs = vec![0u32; ws_synthesis_n_phonemes(s)];
    assert_eq!(ws_synthesis_copy_durations(s, durs.as_mut_ptr(), durs.len()), WsStatus::Ok);
    (feats, durs)
}

#[test]
fn version_is_a_string() {
    let v = unsafe { CStr::from_ptr(ws_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        assert_eq!(ws_generate_corpus(ptr::null(), 1, 0), WsStatus::NullOrInvalidArgument);
        assert!(last_error().contains("out_dir"));
        let dir = cstr("/nonexistent");
        assert_eq!(ws_model_load(dir.as_ptr(), ptr::null_mut()), WsStatus::NullOrInvalidArgument);
        let mut out = ptr::null_mut();
        let text = cstr("aa");
        assert_eq!(ws_synthesize_prior(ptr::null(), text.as_ptr(), ptr::null(), 0, &mut out), WsStatus::NullOrInvalidArgument);
        assert!(out.is_null());
        assert_eq!(ws_model_n_tokens(ptr::null()), 0);
        assert_eq!(ws_synthesis_n_frames(ptr::null()), 0);
        ws_model_free(ptr::null_mut());
        ws_synthesis_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_an_io_or_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { ws_model_load(cpath(&dir.path().join("none")).as_ptr(), &mut out) };
    assert!(matches!(status, WsStatus::Io | WsStatus::Checkpoint), "{status:?}");
    assert!(out.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn prior_synthesis_round_trip() {
    let f = fixture();
    unsafe {
        assert_eq!(ws_model_n_tokens(f.model), 4);
        assert_eq!(ws_model_step(f.model), 3);
        let text = cstr("aa.b iy.k ow");
        let mut s = ptr::null_mut();
        assert_eq!(ws_synthesize_prior(f.model, text.as_ptr(), ptr::null(), 0, &mut s), WsStatus::Ok);
        assert_eq!(ws_synthesis_n_phonemes(s), 5);
        let (feats, durs) = read_synthesis(s);
        assert_eq!(durs.iter().sum::<u32>() as usize, ws_synthesis_n_frames(s));
        assert!(feats.iter().all(|v| v.is_finite()));

        let mut small = [0f32; 1];
        assert_eq!(ws_synthesis_copy_features(s, small.as_mut_ptr(), 1), WsStatus::BufferTooSmall);
        assert!(last_error().contains("need"));

        let mut again = ptr::null_mut();
        assert_eq!(ws_synthesize_prior(f.model, text.as_ptr(), ptr::null(), 0, &mut again), WsStatus::Ok);
        assert_eq!(read_synthesis(again).0, feats);

        let biases = [WsBias { token: 1, amount_stds: 2.0, word: 0 }, WsBias { token: 2, amount_stds: -1.0, word: -1 }];
        let mut biased = ptr::null_mut();
        assert_eq!(ws_synthesize_prior(f.model, text.as_ptr(), biases.as_ptr(), 2, &mut biased), WsStatus::Ok);
        assert_eq!(ws_synthesis_n_phonemes(biased), 5);

        ws_synthesis_free(s);
        ws_synthesis_free(again);
        ws_synthesis_free(biased);
    }
}

#[test]
fn validation_failures() {
    let f = fixture();
    unsafe {
        let mut s = ptr::null_mut();
        let bad = cstr("aa.qq");
        assert_eq!(ws_synthesize_prior(f.model, bad.as_ptr(), ptr::null(), 0, &mut s), WsStatus::Validation);
        assert!(s.is_null());
        let text = cstr("aa b");
        let bias = [WsBias { token: 9, amount_stds: 1.0, word: -1 }];
        assert_eq!(ws_synthesize_prior(f.model, text.as_ptr(), bias.as_ptr(), 1, &mut s), WsStatus::Validation);
        let bias = [WsBias { token: 0, amount_stds: 1.0, word: 5 }];
        assert_eq!(ws_synthesize_prior(f.model, text.as_ptr(), bias.as_ptr(), 1, &mut s), WsStatus::Validation);
        let id = cstr("utt0000");
        assert_eq!(
            ws_synthesize_reference(f.model, text.as_ptr(), f.corpus.as_ptr(), id.as_ptr(), 1.5, ptr::null(), 0, &mut s),
            WsStatus::Validation
        );
        let unknown = cstr("nope");
        assert_eq!(
            ws_synthesize_reference(f.model, text.as_ptr(), f.corpus.as_ptr(), unknown.as_ptr(), 1.0, ptr::null(), 0, &mut s),
            WsStatus::Validation
        );
        assert!(s.is_null());
    }
}

#[test]
fn reference_synthesis_and_evaluation() {
    let f = fixture();
    unsafe {
        let text = cstr("aa.b iy.k");
        let id = cstr("utt0001");
        let mut s = ptr::null_mut();
        assert_eq!(
            ws_synthesize_reference(f.model, text.as_ptr(), f.corpus.as_ptr(), id.as_ptr(), 0.5, ptr::null(), 0, &mut s),
            WsStatus::Ok
        );
        let (feats, _) = read_synthesis(s);
        let n = ws_synthesis_n_frames(s);

        let mut m = WsMetrics { ffe: -1.0, vde: -1.0, gpe: -1.0, mcd: -1.0, n_frames_compared: 0 };
        assert_eq!(ws_evaluate_pair(feats.as_ptr(), n, feats.as_ptr(), n, &mut m), WsStatus::Ok);
        assert_eq!((m.ffe, m.vde, m.gpe, m.mcd), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.n_frames_compared, n);

        let shifted: Vec<f32> = feats.iter().enumerate().map(|(i, v)| if i % WS_N_CHANNELS < 20 { v + 0.1 } else { *v }).collect();
        assert_eq!(ws_evaluate_pair(feats.as_ptr(), n, shifted.as_ptr(), n, &mut m), WsStatus::Ok);
        assert!(m.mcd > 0.0 && m.ffe == 0.0);

        assert_eq!(ws_evaluate_pair(ptr::null(), 3, feats.as_ptr(), n, &mut m), WsStatus::NullOrInvalidArgument);
        assert_eq!(ws_evaluate_pair(feats.as_ptr(), 0, feats.as_ptr(), n, &mut m), WsStatus::Validation);
        ws_synthesis_free(s);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wordstyle.h")).unwrap();
    for name in [
        "ws_last_error_message",
        "ws_version",
        "ws_generate_corpus",
        "ws_model_load",
        "ws_model_free",
        "ws_synthesize_prior",
        "ws_synthesize_reference",
        "ws_synthesis_copy_features",
        "ws_synthesis_copy_durations",
        "ws_evaluate_pair",
        "typedef struct WsModel WsModel",
        "WS_STATUS_BUFFER_TOO_SMALL",
        "#define WS_N_CHANNELS 22",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
