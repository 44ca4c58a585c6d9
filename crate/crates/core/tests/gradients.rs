mod common;

use common::{model_gradient_error, op_instance, tiny_spec, FD_TOLERANCE, OPS};

const INSTANCES: u64 = 20;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for op in OPS {
        for i in 0..INSTANCES {
            let e = op_instance(op, 1000 * i + 7);
            if !(e <= FD_TOLERANCE) {
                failures.push(format!("{op} instance {i}: {e:.2e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn two_block_dual_stream_model() {
    let (e, name) = model_gradient_error(&tiny_spec(0), 3);
    assert!(e <= FD_TOLERANCE, "{name}: {e:.2e}");
}

#[test]
fn shared_encoder_model() {
    let (e, name) = model_gradient_error(&tiny_spec(2), 5);
    assert!(e <= FD_TOLERANCE, "{name}: {e:.2e}");
}
