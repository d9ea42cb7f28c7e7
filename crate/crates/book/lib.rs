// mdbook cannot run listings that depend on workspace crates, so every
// chapter is compiled here as a module doc and its listings run as doc-tests
// under `cargo test`.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/images.md")]
pub mod images {}
#[doc = include_str!("../../book/src/augmentation.md")]
pub mod augmentation {}
#[doc = include_str!("../../book/src/architecture.md")]
pub mod architecture {}
#[doc = include_str!("../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../book/src/applications.md")]
pub mod applications {}
#[doc = include_str!("../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../book/src/service.md")]
pub mod service {}
