//! Procedural glyph dataset: identity is the palette and background texture
//! of a set, shape is the glyph geometry of one image. Because every image is
//! rendered from known specs, the ideal fusion of any pair can be rendered too.

mod io;
mod render;
mod sets;

pub use io::{load_image_dirs, load_png, save_png, save_sets, to_byte, InstanceRecord, SetRecord};
pub use render::{
    quantize, render, rgb_distance, Glyph, IdentitySpec, Landmark, Rgb, ShapeSpec, Texture, CENTER_RANGE,
    SCALE_RANGE, SUPPORTED_RES,
};
pub(crate) use render::render_polygon;
pub use sets::{
    derive_seed, generate_holdout, generate_identities, generate_instance, generate_sets, make_sample, on_byte_grid,
    random_shape, recolor, sample_companion, sample_pair, FusionSample, IdentitySet, Instance, HOLDOUT_OFFSET,
};
