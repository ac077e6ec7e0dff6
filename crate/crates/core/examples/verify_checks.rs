//! Runs the invariant suite, then again with a deliberately broken
//! cross-normalisation to show a failing check.

use dcnet::harness::verify::{format_outcome, run_checks};

fn main() {
    for o in run_checks(None) {
        println!("{}", format_outcome(&o));
    }
    dcnet::intra::set_cross_norm_fault(true);
    for o in run_checks(Some("cross_normalize")) {
        println!("with fault: {}", format_outcome(&o));
    }
}
