//! Images, resampling, CLAHE, augmentation and crops.

mod augment;
mod clahe;
mod crop;
mod image;
mod io;
mod resize;

pub use self::augment::{random_augment, sample_transform, warp_affine, AffineTransform, AugmentConfig};
pub use self::clahe::{clahe, clahe_plane, ClaheParams};
pub use self::crop::{crop, pixel_block, CropAffine};
pub use self::image::{luma, normalize, Image};
pub use self::io::{load_image, save_image};
pub use self::resize::resize_bilinear;
