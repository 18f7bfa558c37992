#![allow(dead_code)]

pub mod ap_oracle;
pub mod clahe_ref;
