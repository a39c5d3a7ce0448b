//! Shared fixtures for the engine benchmarks.

use mrc_distill::encoder::{EncoderConfig, ModelParams};
use mrc_distill::synthdata::{generate_example, render_input, DatasetSpec, RenderedInput, View};

/// A default-sized model and one rendered input for `view`.
pub fn fixture(view: View) -> (ModelParams, RenderedInput) {
    let config = EncoderConfig::default();
    let params = ModelParams::init(&config, 7).expect("default config is valid");
    let spec = DatasetSpec {
        seed: 11,
        n_examples: 1,
        ..DatasetSpec::default()
    };
    let example = generate_example(&spec, 0).expect("default spec is valid");
    let input = render_input(&example, view, &config).expect("fits max_len");
    (params, input)
}
