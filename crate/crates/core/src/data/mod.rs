//! Synthetic event world, pre-training and downstream datasets, and their
//! on-disk format.

pub mod io;
pub mod qa;
pub mod sequence;
pub mod tokens;
pub mod trm;
pub mod verify;
pub mod vocab;
pub mod world;

pub use qa::{gen_downstream_dataset, QaKind, QaSample, QuestionType};
pub use sequence::{synthesize_sequence, Manifest};
pub use trm::{gen_trm_dataset, gen_trm_sample, Template, TrmSample};
pub use vocab::build_answer_vocabulary;
pub use world::{gen_clip, Clip, EventVocab};
