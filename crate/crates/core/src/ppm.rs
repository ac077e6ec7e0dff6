//! Binary PNM rasters: `P6` (RGB) and `P5` (grey), maxval 255.
//!
//! Header: magic, width, height and maxval as ASCII decimals separated by
//! whitespace, one whitespace byte, then raw row-major samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Image;

/// Encodes a 3-channel image as `P6` or a 1-channel image as `P5`.
/// Binary 0/1 maps are stretched to 0/255.
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::Dimension(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    if img.channels == 1 && img.data.iter().all(|&v| v <= 1) {
        out.extend(img.data.iter().map(|&v| v * 255));
    } else {
        out.extend_from_slice(&img.data);
    }
    Ok(out)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported")));
    }
    let start = pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(Error::Format("truncated PNM payload".into()));
    }
    Ok(Image { height, width, channels, data: bytes[start..start + n].to_vec() })
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip() {
        let mut img = Image::new(2, 3, 3);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i * 13) as u8);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn binary_grey_is_stretched() {
        let img = Image { height: 1, width: 2, channels: 1, data: vec![0, 1] };
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.data, vec![0, 255]);
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P5\n# hi\n1 1\n255\n\x07";
        assert_eq!(decode(bytes).unwrap().data, vec![7]);
    }
}
