pub mod characteristics;
pub mod cli;
pub mod field;
pub mod lipsolve;
pub mod measures;
pub mod models;
pub mod monotone;
pub mod noisetransform;
pub mod report;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/monotonicity.md")]
    mod monotonicity {}
    #[doc = include_str!("../../../book/src/common_noise.md")]
    mod common_noise {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
