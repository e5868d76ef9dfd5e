//! File formats: PLY point clouds and the codec's bitstream container.

pub mod container;
pub mod ply;

pub use container::{pack_container, unpack_container, Container, ContainerError, ContainerHeader};
pub use ply::{read_ply, write_ply, write_ply_real, PlyError, PlyFormat};
