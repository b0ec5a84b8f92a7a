//! Images, square windows, exact and continuous rotation, window remapping
//! across orientation frames, box regression, IoU and NMS.

mod boxes;
mod frames;
mod image;
pub mod io;
mod sample;

pub use boxes::{bbox_apply, bbox_targets, iou, nms, nms_indices, Box, RegressionTarget};
pub use frames::{frame_image, remap_box, remap_window, rot_exact, OrientationFrame, QuarterTurn};
pub use image::ImageBuffer;
pub use sample::{
    bilinear, crop_resize, normalize_deg, rotate_continuous, rotated_crop_resize, sin_cos_deg,
};
