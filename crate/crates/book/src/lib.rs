//! The guide under `book/` compiled as doctests, one module per chapter.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quickstart.md")]
mod quickstart {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/configuration.md")]
mod configuration {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/library.md")]
mod library {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/metrics.md")]
mod metrics {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod service {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reproducibility.md")]
mod reproducibility {}
