use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use finegrain::scorer::{Scorer, ScorerConfig, Vocab};
use finegrain_ffi::*;

const CORPUS: &str = concat!(
    r#"{"id":"a","image_ref":"img/1.jpg","prompt":"Describe.","response":"w0 w1 w2 w3","spans":[{"start":3,"end":5,"label":"inaccurate"}],"split":"train"}"#,
    "\n",
    r#"{"id":"b","image_ref":"img/2.jpg","prompt":"Describe.","response":"all good","spans":[],"split":"val"}"#,
    "\n"
);

fn last_error() -> String {
    let p = fg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn corpus_handle_lifecycle() {
    let text = CString::new(CORPUS).unwrap();
    let mut corpus = ptr::null_mut();
    unsafe {
        assert_eq!(fg_corpus_parse(text.as_ptr(), &mut corpus), FgStatus::Ok);
        assert!(fg_last_error().is_null());
        assert_eq!(fg_corpus_len(corpus), 2);
        let mut rate = -1.0;
        assert_eq!(
            fg_corpus_hallucination_rate(corpus, 0, &mut rate),
            FgStatus::Ok
        );
        assert_eq!(rate, 0.25);
        assert_eq!(
            fg_corpus_hallucination_rate(corpus, 1, &mut rate),
            FgStatus::Ok
        );
        assert_eq!(rate, 0.0);
        assert_eq!(
            fg_corpus_hallucination_rate(corpus, 2, &mut rate),
            FgStatus::OutOfRange
        );
        assert!(last_error().contains("out of range"));
        fg_corpus_free(corpus);
        fg_corpus_free(ptr::null_mut());
        assert_eq!(fg_corpus_len(ptr::null()), 0);
    }
}

#[test]
fn invalid_input_reports_codes() {
    let bad = CString::new(
        r#"{"id":"a","image_ref":"i","prompt":"p","response":"abc","spans":[{"start":2,"end":9,"label":"accurate"}],"split":"train"}"#,
    )
    .unwrap();
    let mut corpus = ptr::null_mut();
    let mut issues = 0usize;
    unsafe {
        assert_eq!(
            fg_corpus_parse(bad.as_ptr(), &mut corpus),
            FgStatus::InvalidInput
        );
        assert!(corpus.is_null());
        assert!(last_error().contains("line 1"));
        assert_eq!(
            fg_corpus_validate(bad.as_ptr(), &mut issues),
            FgStatus::InvalidInput
        );
        assert_eq!(issues, 1);
        assert_eq!(
            fg_corpus_parse(ptr::null(), &mut corpus),
            FgStatus::NullPointer
        );
        let not_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            fg_corpus_parse(not_utf8.as_ptr().cast(), &mut corpus),
            FgStatus::InvalidUtf8
        );
        let missing = CString::new("/nonexistent/corpus.jsonl").unwrap();
        assert_eq!(fg_corpus_load(missing.as_ptr(), &mut corpus), FgStatus::Io);
    }
}

#[test]
fn scorer_passage_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rm.bin");
    let vocab = Vocab::build(["a", "dog", "."], 16);
    let cfg = ScorerConfig {
        dim: 4,
        classes: 3,
        ..Default::default()
    };
    Scorer::new(vocab, cfg, 7).save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let prompt = CString::new("Describe.").unwrap();
    let response = CString::new("A dog. A cat. Maybe.").unwrap();
    let mut scorer = ptr::null_mut();
    unsafe {
        assert_eq!(fg_scorer_load(c_path.as_ptr(), &mut scorer), FgStatus::Ok);
        assert_eq!(fg_scorer_num_classes(scorer), 3);
        let (mut score, mut n) = (0.0, 0usize);
        let mut buf = [0.0f64; 2];
        let st = fg_scorer_score_passage(
            scorer,
            prompt.as_ptr(),
            response.as_ptr(),
            &mut score,
            buf.as_mut_ptr(),
            buf.len(),
            &mut n,
        );
        assert_eq!(st, FgStatus::Ok);
        assert_eq!(n, 3);
        // A zero-initialized head gives uniform class probabilities, so each
        // sentence keeps 2/3 of the mass (Accurate plus Analysis).
        let expected = -(2.0f64 / 3.0).ln();
        assert!((score - expected).abs() < 1e-12);
        assert!(buf.iter().all(|s| (s - expected).abs() < 1e-12));
        let st = fg_scorer_score_passage(
            scorer,
            prompt.as_ptr(),
            response.as_ptr(),
            &mut score,
            ptr::null_mut(),
            0,
            &mut n,
        );
        assert_eq!(st, FgStatus::Ok);
        fg_scorer_free(scorer);
    }
}

#[test]
fn pearson_through_abi() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [2.0, 4.0, 6.0, 8.5];
    let mut r = 0.0;
    unsafe {
        assert_eq!(
            fg_pearson(xs.as_ptr(), ys.as_ptr(), 4, &mut r),
            FgStatus::Ok
        );
        assert!(r > 0.99 && r <= 1.0);
        let flat = [1.0; 4];
        assert_eq!(
            fg_pearson(xs.as_ptr(), flat.as_ptr(), 4, &mut r),
            FgStatus::Undefined
        );
    }
    let v = unsafe { CStr::from_ptr(fg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/finegrain.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "fg_corpus_parse",
        "fg_scorer_score_passage",
        "FG_STATUS_INVALID_INPUT",
        "typedef struct FgCorpus FgCorpus",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"finegrain.h\"\nint main(void) { FgCorpus *c = 0; return fg_corpus_parse(\"\", &c) == FG_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler found; header only checked textually");
            return;
        }
    };
    assert!(status.success());
}
