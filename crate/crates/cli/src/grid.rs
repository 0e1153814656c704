use image::{GrayImage, Luma};
use ranet::model::FeatureMap;

/// Smallest `side` with `side * side >= count`.
pub fn grid_side(count: usize) -> usize {
    let mut side = 0;
    while side * side < count {
        side += 1;
    }
    side
}

/// Lays `maps` out row-major in a `side x side` grid. Tiles are separated
/// (and surrounded) by one black pixel; unused cells stay black.
pub fn render_grid(maps: &[FeatureMap], side: usize) -> GrayImage {
    let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
    let width = (side * (w + 1) + 1) as u32;
    let height = (side * (h + 1) + 1) as u32;
    let mut img = GrayImage::new(width, height);
    for (k, map) in maps.iter().enumerate().take(side * side) {
        let (row, col) = (k / side, k % side);
        let (x0, y0) = (col * (w + 1) + 1, row * (h + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let v = (map.data[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([v]));
            }
        }
    }
    img
}
