//! Fixed-size tiling of large scenes with edge-anchored remainders.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub top: usize,
    pub left: usize,
    pub image: ImageTensor,
}

/// Offsets along one axis. When the stride does not land the last tile
/// exactly on the border, one extra tile is anchored at `side - tile`, so
/// it overlaps its neighbour and every pixel is covered.
pub fn tile_offsets(side: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::invalid("tile and stride must be at least 1"));
    }
    if tile > side {
        return Err(Error::invalid(format!("tile {tile} larger than image side {side}")));
    }
    let last = side - tile;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offsets.last().unwrap() != last {
        offsets.push(last);
    }
    Ok(offsets)
}

/// Raster-order tiles (row of tiles by row of tiles, left to right).
pub fn tile_image(image: &ImageTensor, tile: usize, stride: usize) -> Result<Vec<Tile>> {
    let rows = tile_offsets(image.height(), tile, stride)?;
    let cols = tile_offsets(image.width(), tile, stride)?;
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            tiles.push(Tile {
                top,
                left,
                image: image.crop(top, left, tile, tile)?,
            });
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(side: usize) -> ImageTensor {
        let data = (0..side * side * 3).map(|i| (i % 251) as f32 / 250.0).collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    #[test]
    fn exact_division() {
        let tiles = tile_image(&ImageTensor::zeros(1024, 1024), 512, 512).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| (t.top, t.left)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
    }

    #[test]
    fn single_tile_is_identity() {
        let img = ramp(16);
        let tiles = tile_image(&img, 16, 16).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image, img);
    }

    #[test]
    fn remainder_anchors_to_edge() {
        assert_eq!(tile_offsets(600, 512, 512).unwrap(), vec![0, 88]);
        let tiles = tile_image(&ImageTensor::zeros(600, 600), 512, 512).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| (t.top, t.left)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 88), (88, 0), (88, 88)]);
    }

    #[test]
    fn tile_contents_match_source() {
        let img = ramp(10);
        for t in tile_image(&img, 4, 3).unwrap() {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(t.image.pixel(y, x), img.pixel(t.top + y, t.left + x));
                }
            }
        }
    }

    #[test]
    fn oversized_tile_is_an_error() {
        assert!(tile_image(&ImageTensor::zeros(8, 8), 9, 1).is_err());
        assert!(tile_offsets(8, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn coverage_is_total(side in 1usize..200, tile in 1usize..64, stride in 1usize..80) {
            prop_assume!(tile <= side && stride <= tile);
            let offs = tile_offsets(side, tile, stride).unwrap();
            let mut covered = vec![false; side];
            for &o in &offs {
                prop_assert!(o + tile <= side);
                covered[o..o + tile].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert!(offs.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
