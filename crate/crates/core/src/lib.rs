pub mod taxonomy;
pub mod trace;
pub mod prompt;
pub mod gateway;
pub mod eval;
pub mod annotation;
pub mod gate;
pub mod run;
pub mod synth;
pub mod import;
