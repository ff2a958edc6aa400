pub mod augment;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod generators;
pub mod models;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(quickstart, "quickstart.md");
    chapter!(tensors, "tensors.md");
    chapter!(datasets, "datasets.md");
    chapter!(augmentations, "augmentations.md");
    chapter!(pretraining, "pretraining.md");
    chapter!(generators, "generators.md");
    chapter!(baselines, "baselines.md");
    chapter!(pipeline, "pipeline.md");
    chapter!(evaluation, "evaluation.md");
}
