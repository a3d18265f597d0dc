//! Timing-dependent criteria. These measure this machine, so they are
//! ignored by default: `cargo test -p odl-bench --test perf -- --ignored`.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use odl_bench::Timing;
use odl_kernels::ElemType;
use support::*;

fn timing() -> Timing {
    Timing::new(1, 7).expect("valid timing")
}

fn assert_passed(v: &Verdict) {
    println!("{v}");
    assert!(v.passed(), "{v}");
}

#[test]
#[ignore]
fn unrolled_and_half_kernels_are_faster() {
    let verdicts = performance_trends(timing());
    for v in &verdicts {
        println!("{v}");
    }
    for v in &verdicts {
        assert!(v.passed(), "{v}");
    }
}

#[test]
#[ignore]
fn matmul_dominates_the_table3_breakdown() {
    let benches = table3_benches(timing()).unwrap();
    assert_passed(&breakdown_structure(&benches));
}

#[test]
#[ignore]
fn phases_cover_the_measured_steps() {
    let mut short = Vec::new();
    for b in table3_benches(timing()).unwrap() {
        let cover = b.train.coverage();
        let line = format!("{} {}: phases cover {:.1}% of the wall time", b.config.name, b.config.elem, cover * 100.0);
        println!("{line}");
        if cover < 0.95 {
            short.push(line);
        }
    }
    assert!(short.is_empty(), "{}", short.join("; "));
}

#[test]
#[ignore]
fn resnet8_step_is_matmul_bound() {
    let runs: Vec<_> = [ElemType::F32, ElemType::F16].into_iter().map(|e| resnet8(e, timing()).unwrap()).collect();
    let (budget, share) = end_to_end(&runs);
    assert_passed(&budget);
    assert_passed(&share);
}

#[test]
#[ignore]
fn hwc_transforms_are_faster_in_half_precision() {
    let cmp = layout_benches(timing()).unwrap();
    let (agree, trend) = layout_equivalence(&cmp);
    assert_passed(&agree);
    assert_passed(&trend);
}
