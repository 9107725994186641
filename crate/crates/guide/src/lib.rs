//! The book in `book/src`, compiled as doc-tests so its snippets cannot rot.
//! One module per chapter keeps failures traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/gaussians.md")]
pub mod gaussians {}
#[doc = include_str!("../../../book/src/rounds.md")]
pub mod rounds {}
#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/toy-study.md")]
pub mod toy_study {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
