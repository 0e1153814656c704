use std::path::Path;

use image::DynamicImage;

use crate::engine::{ops, Tensor};
use crate::error::{Error, Result};

pub const INPUT_SIZE: usize = 224;

/// Decodes an image file into a `3 x size x size` tensor in `[0, 1]`.
pub fn preprocess_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    preprocess_dynamic(&img, size)
}

/// RGB conversion (grey replicated across channels), scaling by 1/255 and a
/// half-pixel bilinear resize that ignores aspect ratio.
pub fn preprocess_dynamic(img: &DynamicImage, size: usize) -> Result<Tensor> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let at = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + at] = px[c] as f32 / 255.0;
        }
    }
    let planes = Tensor::new(vec![1, 3, h, w], data)?;
    let resized = if (h, w) == (size, size) {
        planes
    } else {
        ops::resize_bilinear(&planes, size, size)?
    };
    resized.reshape(&[3, size, size])
}

/// Rotates every channel about the image centre by `degrees`
/// (counter-clockwise as displayed). Bilinear sampling; pixels that map
/// outside the source read as zero.
pub fn rotate_image(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "rotate_image",
                format!("expected C x H x W, got {:?}", image.shape()),
            ))
        }
    };
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; image.numel()];
    for (src, dst) in image.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        let at = |x: i64, y: i64| -> f32 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + dx * cos - dy * sin;
                let sy = cy + dx * sin + dy * cos;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                dst[y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}
