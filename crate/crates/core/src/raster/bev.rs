use std::io::Write;
use std::path::Path;

use super::OccupancyGrid;
use crate::taxonomy::{self, BACKGROUND_RGB, NUM_CLASSES, PALETTE};
use crate::{Error, Result};

/// 8-bit RGB raster, row-major from the top row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Top-down view: column `ix`, row `ny - 1 - iy` (+y up), colored by the
/// highest semantic voxel in each vertical column.
pub fn bev_image(grid: &OccupancyGrid) -> Image {
    let [nx, ny, nz] = grid.grid.dims;
    let mut rgb = Vec::with_capacity(nx * ny * 3);
    for row in 0..ny {
        let iy = ny - 1 - row;
        for ix in 0..nx {
            let top = (0..nz)
                .rev()
                .map(|iz| grid.get(ix, iy, iz))
                .find(|&l| taxonomy::is_semantic(l));
            let c = match top {
                Some(l) => PALETTE[l as usize - 1],
                None => BACKGROUND_RGB,
            };
            rgb.extend_from_slice(&c);
        }
    }
    Image {
        width: nx,
        height: ny,
        rgb,
    }
}

pub fn export_bev(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    let img = bev_image(grid);
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.rgb);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::malformed(path, format!("magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::malformed(path, format!("bad header field {s}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::malformed(path, format!("max value {maxval}")));
    }
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(Error::malformed(path, "truncated pixel data"));
    }
    Ok(Image {
        width,
        height,
        rgb: bytes[pos..pos + n].to_vec(),
    })
}

/// Inverts the palette: per-column labels indexed `ix * ny + iy`, 0 for
/// background. Unknown colors are an error.
pub fn decode_bev(img: &Image) -> Result<Vec<u8>> {
    let (nx, ny) = (img.width, img.height);
    let mut out = vec![0u8; nx * ny];
    for row in 0..ny {
        for ix in 0..nx {
            let p = (row * nx + ix) * 3;
            let c = [img.rgb[p], img.rgb[p + 1], img.rgb[p + 2]];
            let label = if c == BACKGROUND_RGB {
                taxonomy::EMPTY
            } else {
                match (0..NUM_CLASSES).find(|&k| PALETTE[k] == c) {
                    Some(k) => k as u8 + 1,
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "color {c:?} is not in the palette"
                        )))
                    }
                }
            };
            out[ix * ny + (ny - 1 - row)] = label;
        }
    }
    Ok(out)
}
