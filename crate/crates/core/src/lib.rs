pub mod attack;
pub mod autodiff;
pub mod data;
pub mod detect;
pub mod nn;
pub mod sanitize;
