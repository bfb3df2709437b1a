//! Fixtures shared by the benchmarks.

use gcwm_core::simgen::{generate_gcwm_study, generate_zip_study, SimOutput};
use gcwm_core::{Condition, SimDesign};

pub fn severity_sample(n_per_component: usize, seed: u64) -> SimOutput {
    let mut d = SimDesign::severity_model(1).expect("model 1 exists");
    d.n_per_component = n_per_component;
    generate_gcwm_study(&d, seed).expect("canonical design is valid")
}

pub fn zip_sample(n_per_component: usize, seed: u64) -> SimOutput {
    let mut d = SimDesign::zip_default();
    d.n_per_component = n_per_component;
    generate_zip_study(&d, seed, Condition::Normal).expect("canonical design is valid")
}
