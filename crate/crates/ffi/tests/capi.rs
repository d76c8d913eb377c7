use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use prompt_diffuser::datasets::{collect, fit_norm_stats};
use prompt_diffuser::diffuser::{Diffuser, DiffuserConfig};
use prompt_diffuser::envs::{make_task, Family, Tier};
use prompt_diffuser::harness::{diffuser_prompt, mean_std};
use prompt_diffuser::prompt_dt::{self, Plm, PlmConfig};
use prompt_diffuser::rng;
use prompt_diffuser_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    plm_path: CString,
    diffuser_path: CString,
    plm: Plm,
    diffuser: Diffuser,
    stats: prompt_diffuser::datasets::NormStats,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let task = make_task(Family::Vel, 0).unwrap();
    let stats = fit_norm_stats(&collect(&task, Tier::Expert, 2, 1).unwrap()).unwrap();
    let mut plm = Plm::new(
        PlmConfig {
            layers: 1,
            dim: 8,
            ..PlmConfig::default()
        },
        3,
    )
    .unwrap();
    plm.set_training(false);
    let diffuser = Diffuser::new(
        DiffuserConfig {
            hidden: 16,
            steps: 10,
            ..DiffuserConfig::default()
        },
        4,
    )
    .unwrap();
    let p = dir.path().join("plm.ckpt");
    plm.to_checkpoint(Some(&stats)).save(&p).unwrap();
    let q = dir.path().join("d.ckpt");
    diffuser.to_checkpoint().save(&q).unwrap();
    Fixture {
        plm_path: CString::new(p.to_str().unwrap()).unwrap(),
        diffuser_path: CString::new(q.to_str().unwrap()).unwrap(),
        _dir: dir,
        plm,
        diffuser,
        stats,
    }
}

#[test]
fn handles_reproduce_core_results() {
    let f = fixture();
    let (mut plm, mut d) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(pd_plm_load(f.plm_path.as_ptr(), &mut plm), PdStatus::Ok);
        assert_eq!(
            pd_diffuser_load(f.diffuser_path.as_ptr(), &mut d),
            PdStatus::Ok
        );
        let k = pd_diffuser_prompt_len(d);
        assert_eq!(k, f.diffuser.config.prompt_len);

        let mut small = vec![0.0; k * PD_PROMPT_STEP_WIDTH - 1];
        let s = pd_diffuser_sample(d, plm, 0.0, 0.5, 9, small.as_mut_ptr(), small.len());
        assert_eq!(s, PdStatus::BufferTooSmall);

        let mut buf = vec![0.0; k * PD_PROMPT_STEP_WIDTH];
        assert_eq!(
            pd_diffuser_sample(d, plm, 0.0, 0.5, 9, buf.as_mut_ptr(), buf.len()),
            PdStatus::Ok
        );
        let seg = diffuser_prompt(&f.diffuser, &f.stats, 0.0, 0.5, &mut rng::seeded(9)).unwrap();
        for t in 0..k {
            let row = &buf[t * PD_PROMPT_STEP_WIDTH..(t + 1) * PD_PROMPT_STEP_WIDTH];
            assert_eq!(
                row,
                [
                    seg.rtg[t],
                    seg.states[t][0],
                    seg.states[t][1],
                    seg.actions[t][0],
                    seg.actions[t][1]
                ]
            );
        }

        let family = CString::new("vel").unwrap();
        let (mut m, mut s) = (0.0, 0.0);
        let st = pd_evaluate(
            plm,
            ptr::null(),
            family.as_ptr(),
            0,
            0.0,
            0.5,
            2,
            5,
            &mut m,
            &mut s,
        );
        assert_eq!(st, PdStatus::Ok);
        let env = make_task(Family::Vel, 0).unwrap();
        let res = prompt_dt::rollout(&f.plm, &f.stats, None, &env, 0.0, 2, rng::derive_seed(5, 1))
            .unwrap();
        assert_eq!((m, s), mean_std(&res.returns));

        let st = pd_evaluate(plm, d, family.as_ptr(), 0, 0.0, 0.5, 2, 5, &mut m, &mut s);
        assert_eq!(st, PdStatus::Ok);
        assert!(m.is_finite() && s >= 0.0);

        let bad = CString::new("cheetah").unwrap();
        let st = pd_evaluate(plm, d, bad.as_ptr(), 0, 0.0, 0.5, 2, 5, &mut m, &mut s);
        assert_eq!(st, PdStatus::InvalidArgument);
        assert!(!CStr::from_ptr(pd_last_error()).to_bytes().is_empty());

        pd_diffuser_free(d);
        pd_plm_free(plm);
    }
}

#[test]
fn wrong_checkpoint_kind_is_a_format_error() {
    let f = fixture();
    let mut plm = ptr::null_mut();
    assert_eq!(
        unsafe { pd_plm_load(f.diffuser_path.as_ptr(), &mut plm) },
        PdStatus::Format
    );
    assert!(plm.is_null());
}

#[test]
fn header_declares_api_and_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/prompt_diffuser.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "pd_plm_load",
        "pd_plm_free",
        "pd_diffuser_load",
        "pd_diffuser_free",
        "pd_diffuser_sample",
        "pd_evaluate",
        "pd_project",
        "pd_combine",
        "pd_last_error",
        "PD_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    match Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", header])
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("cc unavailable, skipping compile check: {e}"),
    }
}
