//! Binary PGM (P5) reading and writing for 8-bit frames and label maps.
//!
//! Polar frames are stored with one row per radial sample and one column per
//! scan line. Label maps use a fixed grey-level palette so they are viewable:
//!
//! | class      | id  | grey |
//! |------------|-----|------|
//! | background | 255 | 0    |
//! | lumen      | 0   | 85   |
//! | media      | 1   | 170  |
//! | external   | 2   | 255  |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, PolarFrame, ProbeGeometry, BACKGROUND, EXTERNAL, LUMEN, MEDIA};

const PALETTE: [(u8, u8); 4] = [(BACKGROUND, 0), (LUMEN, 85), (MEDIA, 170), (EXTERNAL, 255)];

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("PGM", "unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::format("PGM", format!("expected P5, found {magic:?}")));
    }
    let mut number = |name: &str| -> Result<usize> {
        let tok = token()?;
        tok.parse()
            .map_err(|_| Error::format("PGM", format!("bad {name} {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            "PGM",
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height;
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::format(
            "PGM",
            format!("raster needs {len} bytes, found {}", bytes.len().saturating_sub(start)),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[start..end].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<GrayImage> {
    decode(&std::fs::read(path)?)
}

/// Writes via a sibling temporary file so a failed run leaves no partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode(img))
}

pub fn polar_to_image(frame: &PolarFrame) -> GrayImage {
    GrayImage {
        width: frame.geometry.num_scan_lines,
        height: frame.geometry.samples_per_line,
        pixels: frame.samples.clone(),
    }
}

/// Interprets an image as a polar frame: rows are radii, columns scan lines.
/// The Cartesian frame defaults to the disc's bounding square.
pub fn image_to_polar(img: &GrayImage) -> Result<PolarFrame> {
    let geometry = ProbeGeometry::ivus(img.height, img.width);
    PolarFrame::new(geometry, img.pixels.clone())
}

pub fn label_to_gray(id: u8) -> u8 {
    PALETTE.iter().find(|(c, _)| *c == id).map_or(id, |(_, g)| *g)
}

pub fn gray_to_label(grey: u8) -> Result<u8> {
    PALETTE
        .iter()
        .find(|(_, g)| *g == grey)
        .map(|(c, _)| *c)
        .ok_or_else(|| Error::format("label PGM", format!("grey level {grey} is not in the palette")))
}

pub fn labels_to_image(labels: &LabelMap) -> GrayImage {
    GrayImage {
        width: labels.geometry.num_scan_lines,
        height: labels.geometry.samples_per_line,
        pixels: labels.labels.iter().map(|&l| label_to_gray(l)).collect(),
    }
}

pub fn image_to_labels(img: &GrayImage) -> Result<LabelMap> {
    let labels = img
        .pixels
        .iter()
        .map(|&g| gray_to_label(g))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(ProbeGeometry::ivus(img.height, img.width), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment_parses() {
        let mut bytes = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn short_raster_is_an_error() {
        let bytes = b"P5 4 4 255\n\x01\x02".to_vec();
        assert!(decode(&bytes).is_err());
        assert!(decode(b"P2 1 1 255\n0").is_err());
    }

    #[test]
    fn palette_is_a_bijection() {
        for id in [BACKGROUND, LUMEN, MEDIA, EXTERNAL] {
            assert_eq!(gray_to_label(label_to_gray(id)).unwrap(), id);
        }
        assert!(gray_to_label(3).is_err());
    }
}
