use std::ffi::{c_char, CStr, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use i2i_core::checkpoint::Checkpoint;
use i2i_core::cli::{main_with_args, EXIT_OK};
use i2i_core::harness::CLRunRecord;
use i2i_core::Tensor;
use i2i_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(i2i_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn read_string(f: impl Fn(*mut c_char, usize, *mut usize) -> I2iStatus) -> String {
    let mut needed = 0usize;
    assert_eq!(
        f(ptr::null_mut(), 0, &mut needed),
        I2iStatus::BufferTooSmall
    );
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(f(buf.as_mut_ptr(), buf.len(), &mut needed), I2iStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(i2i_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn checkpoint_handle_reports_blocks_counts_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let mut ck = Checkpoint::new("cfg");
    ck.push("adapter.w", Tensor::zeros(&[3, 4]));
    ck.push("adapter.b", Tensor::zeros(&[4]));
    ck.push("head.w", Tensor::full(&[2, 5], 1.5));
    let sha = ck.write(&path).unwrap();

    let mut h: *mut I2iCheckpoint = ptr::null_mut();
    unsafe {
        assert_eq!(
            i2i_checkpoint_read(cpath(&path).as_ptr(), &mut h),
            I2iStatus::Ok
        );
        let mut n = 0usize;
        assert_eq!(i2i_checkpoint_block_count(h, &mut n), I2iStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(
            i2i_checkpoint_param_count(h, ptr::null(), &mut n),
            I2iStatus::Ok
        );
        assert_eq!(n, 26);
        let prefix = CString::new("adapter.").unwrap();
        assert_eq!(
            i2i_checkpoint_param_count(h, prefix.as_ptr(), &mut n),
            I2iStatus::Ok
        );
        assert_eq!(n, 16);
        let got = read_string(|b, c, nd| i2i_checkpoint_sha256(h, b, c, nd));
        assert_eq!(got, sha);
        assert_eq!(got.len(), 64);
        i2i_checkpoint_free(h);
        i2i_checkpoint_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut h: *mut I2iCheckpoint = ptr::null_mut();
    unsafe {
        assert_eq!(
            i2i_checkpoint_read(ptr::null(), &mut h),
            I2iStatus::NullPointer
        );
        assert!(last_error().contains("null"));
        let missing = cpath(&dir.path().join("none.ckpt"));
        assert_eq!(i2i_checkpoint_read(missing.as_ptr(), &mut h), I2iStatus::Io);
        assert!(!last_error().is_empty());
        let junk = dir.path().join("junk.ckpt");
        fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(
            i2i_checkpoint_read(cpath(&junk).as_ptr(), &mut h),
            I2iStatus::Format
        );
        assert!(h.is_null());

        let good = dir.path().join("good.ckpt");
        let mut ck = Checkpoint::new("cfg");
        ck.push("w", Tensor::full(&[8], 0.25));
        ck.write(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        fs::write(&good, bytes).unwrap();
        let status = i2i_checkpoint_read(cpath(&good).as_ptr(), &mut h);
        assert!(
            matches!(status, I2iStatus::Format | I2iStatus::DigestMismatch),
            "{status:?}"
        );
        assert!(h.is_null());
        let mut n = 0usize;
        assert_eq!(
            i2i_checkpoint_block_count(ptr::null(), &mut n),
            I2iStatus::NullPointer
        );
    }
}

#[test]
fn metric_functions_match_the_core_formulas() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(
            i2i_knowledge_transfer(26.24, 24.56, &mut out),
            I2iStatus::Ok
        );
        assert!((out - 100.0 * (26.24 - 24.56) / 24.56).abs() < 1e-12);
        assert_eq!(
            i2i_knowledge_transfer(1.0, 0.0, &mut out),
            I2iStatus::InvalidArgument
        );
        assert!(last_error().contains("vanilla"));

        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            i2i_overall_transfer(v.as_ptr(), v.len(), &mut out),
            I2iStatus::Ok
        );
        assert_eq!(out, 2.5);
        assert_eq!(
            i2i_overall_transfer(ptr::null(), 0, &mut out),
            I2iStatus::InvalidArgument
        );
        assert_eq!(
            i2i_overall_transfer(ptr::null(), 2, &mut out),
            I2iStatus::NullPointer
        );

        assert_eq!(i2i_distillation_decay(50.0, 45.0, &mut out), I2iStatus::Ok);
        assert_eq!(out, 10.0);

        let (a2, a3) = ([50.0, 40.0], [55.0, 44.0]);
        assert_eq!(
            i2i_phase3_gain(a2.as_ptr(), a3.as_ptr(), 2, &mut out),
            I2iStatus::Ok
        );
        assert_eq!(out, 10.0);

        let (x, y) = ([1.0, 2.0, 3.0], [-2.0, 1.0, 0.0]);
        assert_eq!(
            i2i_cosine(x.as_ptr(), x.as_ptr(), 3, &mut out),
            I2iStatus::Ok
        );
        assert_eq!(out, 1.0);
        assert_eq!(
            i2i_cosine(x.as_ptr(), y.as_ptr(), 3, &mut out),
            I2iStatus::Ok
        );
        assert_eq!(out, 0.0);
        assert_eq!(
            i2i_knowledge_transfer(1.0, 1.0, ptr::null_mut()),
            I2iStatus::NullPointer
        );
    }
}

const TINY: &str = r#"
seed = 4
[backbone]
d_model = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 24
[data]
train_size = 200
val_size = 40
[pretrain]
train_size = 128
val_size = 24
hyper = { epochs = 2, adam = { lr = 1e-2 } }
[hyper]
bottleneck = 4
adapter = { epochs = 4, adam = { lr = 1e-2 } }
improvise = { epochs = 1, adam = { lr = 1e-2 } }
initialize = { epochs = 1, adam = { lr = 1e-2 } }
train = { epochs = 1, adam = { lr = 1e-2 } }
fusion = { epochs = 1, adam = { lr = 1e-2 } }
knowledge_free = { epochs = 1, adam = { lr = 1e-2 } }
"#;

#[test]
fn record_handle_exposes_tasks_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let (c, o) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let run = |args: &[&str]| main_with_args(["i2i"].iter().chain(args).copied());
    assert_eq!(run(&["pretrain", "--config", c, "--out", o]), EXIT_OK);
    assert_eq!(
        run(&[
            "run",
            "--algo",
            "i2i",
            "--variant",
            "FF",
            "--config",
            c,
            "--out",
            o
        ]),
        EXIT_OK
    );
    let path = dir.path().join("runs/i2i_FF_seed4_order1/record.json");
    let record = CLRunRecord::read(&path).unwrap();

    let mut h: *mut I2iRecord = ptr::null_mut();
    unsafe {
        assert_eq!(
            i2i_record_read(cpath(&path).as_ptr(), &mut h),
            I2iStatus::Ok
        );
        let mut n = 0usize;
        assert_eq!(i2i_record_task_count(h, &mut n), I2iStatus::Ok);
        assert_eq!(n, record.tasks.len());
        for (i, t) in record.tasks.iter().enumerate() {
            assert_eq!(
                read_string(|b, c, nd| i2i_record_task_id(h, i, b, c, nd)),
                t.task_id
            );
            let mut s = 0.0;
            assert_eq!(i2i_record_score(h, i, &mut s), I2iStatus::Ok);
            assert_eq!(s.to_bits(), t.score.to_bits());
        }
        let mut s = 0.0;
        assert_eq!(i2i_record_score(h, n, &mut s), I2iStatus::OutOfRange);
        let mut overall = 0.0;
        match record.metrics.overall_transfer {
            Some(v) => {
                assert_eq!(i2i_record_overall_transfer(h, &mut overall), I2iStatus::Ok);
                assert_eq!(overall.to_bits(), v.to_bits());
            }
            None => assert_eq!(
                i2i_record_overall_transfer(h, &mut overall),
                I2iStatus::Unavailable
            ),
        }
        let mut small = [0 as c_char; 2];
        let mut needed = 0usize;
        assert_eq!(
            i2i_record_task_id(h, 0, small.as_mut_ptr(), small.len(), &mut needed),
            I2iStatus::BufferTooSmall
        );
        assert_eq!(needed, record.tasks[0].task_id.len() + 1);
        i2i_record_free(h);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/i2i.h")).unwrap();
    for name in [
        "i2i_version",
        "i2i_last_error",
        "i2i_checkpoint_read",
        "i2i_checkpoint_free",
        "i2i_record_read",
        "i2i_record_overall_transfer",
        "i2i_cosine",
        "I2I_STATUS_BUFFER_TOO_SMALL",
        "typedef struct i2i_checkpoint i2i_checkpoint",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
