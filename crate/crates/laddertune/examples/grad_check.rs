//! Finite-difference validation of the tape: every trainable parameter of a
//! tiny float64 ladder model is compared against central differences.
//!
//!     cargo run --example grad_check

use laddertune::backbone::init_backbone;
use laddertune::gradcheck::{jitter_and_check, GradCheckConfig};
use laddertune::params::ParamStore;
use laddertune::petl::MethodConfig;
use laddertune::side::SideConfig;
use laddertune::task::{sample_batch, Task, TaskSpec};
use laddertune::train::{probe_loss, stand_up};
use laddertune::Result;

fn main() -> Result<()> {
    // Small and double-precision on purpose: finite differences lose half
    // their digits to cancellation, so f32 would drown the comparison.
    let spec = TaskSpec::new(Task::Copy, 16, 5, 5);
    let model = spec.model_for(2, 8, 2, 16, 8, 7);
    spec.validate_for(&model)?;
    let method = MethodConfig::lst(SideConfig::full(&model, 2));

    let trunk: ParamStore<f64> = {
        let mut s = init_backbone(&model)?;
        s.freeze_all();
        s
    };
    let mut store = stand_up(&trunk, &model, &method, None, &[], 1)?;
    let batch = sample_batch(&spec, 2, 0)?;

    // Jitter first so no parameter sits at an init symmetry point, then
    // compare analytic gradients on one fixed batch.
    let report = jitter_and_check(&mut store, 0.02, &GradCheckConfig::default(), |s, grads| {
        probe_loss(s, &model, &method, &batch, grads)
    })?;

    for p in &report.per_param {
        println!("{:<34} coords={:<2} max_rel={:.3e}", p.name, p.coords_checked, p.max_rel);
    }
    println!();
    println!(
        "checked {} trainable tensors, worst `{}` at {:.3e}",
        report.per_param.len(),
        report.worst_param,
        report.max_rel
    );
    let tol = 1e-4;
    println!("tolerance {tol:.0e}: {}", if report.passes(tol) { "pass" } else { "FAIL" });
    Ok(())
}
