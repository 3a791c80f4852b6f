//! Supervised training targets derived from instance label maps.

mod star;
mod three_class;

pub use star::{edt_to_boundary, ray_directions, star_distances, StarTarget, DEFAULT_N_RAYS};
pub use three_class::{class_weight_map, to_three_class, BorderWeightMap, PixelClass, ThreeClassMap};
