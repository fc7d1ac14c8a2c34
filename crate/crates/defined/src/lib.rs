//! Decision-feedback in-context symbol detection on simulated block-fading
//! channels.
//!
//! The crate provides four layers that build on each other:
//!
//! * [`constellation`] and [`channel`] — digital modulation schemes and a
//!   synthetic MIMO block-fading channel with counter-based, reproducible
//!   randomness.
//! * [`baselines`] — classical detectors: MMSE channel estimation with
//!   nearest-symbol search, its decision-feedback variant, and a perfect-CSI
//!   genie bound.
//! * [`nn`], [`model`], [`train`], [`checkpoint`] — a from-scratch
//!   reverse-mode autodiff tape, a small decoder-only transformer that reads
//!   channel prompts as interleaved receive/transmit token pairs, and the
//!   two-phase training recipe (in-context pretraining followed by
//!   decision-feedback fine-tuning).
//! * [`eval`], [`report`], [`config`] — paired Monte Carlo SER evaluation
//!   across detector arms, gain and error-locality statistics, and the JSON
//!   experiment configuration consumed by the `defined` binary.
//!
//! The guide in `book/` walks through the same layers with runnable
//! examples; its chapters are doc-tested against this crate.

pub mod baselines;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod constellation;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod report;
pub mod train;

#[cfg(doctest)]
mod book {
    //! Doc-tests the mdbook chapters so the guide can never drift from the
    //! crate's actual API.
    #![allow(unused_attributes)]

    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(intro, "../../../book/src/intro.md");
    chapter!(channel, "../../../book/src/channel.md");
    chapter!(baselines, "../../../book/src/baselines.md");
    chapter!(autodiff, "../../../book/src/autodiff.md");
    chapter!(transformer, "../../../book/src/transformer.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
