//! Range coding and the bitstream container.

pub mod container;
pub mod range;
pub mod tables;

pub use container::{pack_container, unpack_container, Container, Family, FillMode, Flags, Header, K_ALL};
pub use range::{Decoder, Encoder};
pub use tables::{cdf_from_gaussian, range_decode, range_encode, CdfTable, GaussianTables, SIGMA_MIN};
