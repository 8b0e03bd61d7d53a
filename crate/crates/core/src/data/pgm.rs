use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SEPARATOR: u8 = 128;

/// `(width, height)` of a grid of `n` tiles of `h×w` pixels with `cols`
/// tiles per row and 1-px separators between tiles.
pub fn grid_dims(n: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    let cols = cols.min(n).max(1);
    let rows = n.div_ceil(cols);
    (cols * w + cols - 1, rows * h + rows - 1)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `[N × C × H × W]` images as a tiled binary PGM (C = 1) or PPM (C = 3).
pub fn encode_grid(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || (s[1] != 1 && s[1] != 3) {
        return Err(Error::dim("write_pgm_grid", format!("expected [N, 1|3, H, W], got {s:?}")));
    }
    if cols == 0 {
        return Err(Error::Contract("grid needs at least one column".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.min(n);
    let (gw, gh) = grid_dims(n, cols, h, w);
    let mut pix = vec![SEPARATOR; gw * gh * c];
    let data = images.data();
    for i in 0..n {
        let (ty, tx) = (i / cols * (h + 1), i % cols * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((i * c + ch) * h + y) * w + x];
                    pix[((ty + y) * gw + tx + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

pub fn write_pgm_grid(images: &Tensor, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_grid(images, cols)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_bytes() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let bytes = encode_grid(&img, 4).unwrap();
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend_from_slice(&[0, 255, 255, 0]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn grid_rows() {
        assert_eq!(grid_dims(5, 2, 3, 4), (9, 11));
        assert_eq!(grid_dims(4, 2, 3, 4), (9, 7));
        assert_eq!(grid_dims(1, 8, 3, 4), (4, 3));
        let imgs = Tensor::full(&[5, 3, 2, 2], 0.5);
        let bytes = encode_grid(&imgs, 2).unwrap();
        assert!(bytes.starts_with(b"P6\n5 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 5 * 8 * 3);
    }

    #[test]
    fn bad_channels_rejected() {
        assert!(encode_grid(&Tensor::zeros(&[1, 2, 2, 2]), 1).is_err());
    }
}
