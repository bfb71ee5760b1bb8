//! Runs the code blocks of the guide in `book/` as doctests, one module per
//! chapter so a failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}

#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}

#[doc = include_str!("../../../book/src/mutual-information.md")]
pub mod mutual_information {}

#[doc = include_str!("../../../book/src/bayesian-head.md")]
pub mod bayesian_head {}

#[doc = include_str!("../../../book/src/sessions.md")]
pub mod sessions {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/service.md")]
pub mod service {}
