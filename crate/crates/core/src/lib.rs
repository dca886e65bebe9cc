// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod experiment;
pub mod field;
pub mod gaussian;
pub mod mc;
pub mod quadrature;
pub mod recursion;
pub mod spectral;
pub mod spine;
pub mod stats;
pub mod traversal;
