//! Fixed workloads shared by the criterion benchmarks.

use nbpk::{Configuration, LevyModel, ModelParams};

/// The four closed-form models at representative parameters, with `r`.
pub fn models(r: f64) -> Vec<(&'static str, ModelParams)> {
    let mk = |m: nbpk::Result<LevyModel>| ModelParams::new(m.expect("valid model"), r).expect("valid r");
    vec![
        ("stable", mk(LevyModel::stable(0.5))),
        ("gamma", mk(LevyModel::gamma(1.0))),
        ("gengamma", mk(LevyModel::generalized_gamma(0.5))),
        ("truncstable", mk(LevyModel::truncated_stable(0.5))),
    ]
}

/// A mid-sized configuration with mixed block sizes.
pub fn sample_config() -> Configuration {
    Configuration::new(vec![4, 3, 2, 1, 1]).expect("valid counts")
}
