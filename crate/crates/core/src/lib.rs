pub mod ac_model;
pub mod ambiguity;
pub mod case_io;
pub mod dc_model;
pub mod evaluation;
pub mod scenario_mip;
pub mod scenarios;
