pub mod algebra;
pub mod backend;
pub mod bench;
pub mod config;
pub mod dsl;
pub mod meta;
pub mod planner;
pub mod state;
pub mod store;
pub mod tokenize;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/prompt-store.md")]
    mod prompt_store {}
    #[doc = include_str!("../../../book/src/state.md")]
    mod state {}
    #[doc = include_str!("../../../book/src/algebra.md")]
    mod algebra {}
    #[doc = include_str!("../../../book/src/language.md")]
    mod language {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/planner.md")]
    mod planner {}
    #[doc = include_str!("../../../book/src/meta.md")]
    mod meta {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
