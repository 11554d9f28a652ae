mod common;

use common::{all_ablations, grad_check, grad_pipeline};
use weathergan_core::trainer::Ablation;

#[test]
fn total_loss_gradients_match_central_differences() {
    for (name, ab) in all_ablations() {
        let mut p = grad_pipeline(ab, 21);
        let r = grad_check(&mut p, 3, 1e-5, 1e-3, 5);
        assert!(r.checked >= 30, "{}: only {} parameters sampled", name, r.checked);
        assert!(r.agreeing as f64 >= 0.95 * r.checked as f64, "{}: {}/{} agree, worst {:e}", name, r.agreeing, r.checked, r.worst);
    }
}

#[test]
fn gradients_without_detection_term_match_too() {
    let mut p = grad_pipeline(Ablation { use_detection_loss: false, ..Ablation::default() }, 4);
    let r = grad_check(&mut p, 2, 1e-5, 1e-3, 9);
    assert!(r.agreeing as f64 >= 0.95 * r.checked as f64, "{}/{} agree, worst {:e}", r.agreeing, r.checked, r.worst);
}
