//! Single-HDU FITS images: square, `BITPIX = -64`, optional `PIXSCALE` card.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::PixelGrid;

pub const BLOCK: usize = 2880;
const CARD: usize = 80;

fn card(key: &str, value: &str, comment: Option<&str>) -> String {
    let mut c = format!("{key:<8}= {value:>20}");
    if let Some(text) = comment {
        c.push_str(" / ");
        c.push_str(text);
    }
    c.truncate(CARD);
    format!("{c:<80}")
}

/// FITS bytes for `grid`; the pixel scale goes into `PIXSCALE` (mas/px).
pub fn encode(grid: &PixelGrid) -> Vec<u8> {
    let n = grid.n().to_string();
    let mut header = String::new();
    header.push_str(&card("SIMPLE", "T", Some("conforms to FITS")));
    header.push_str(&card("BITPIX", "-64", Some("IEEE double")));
    header.push_str(&card("NAXIS", "2", None));
    header.push_str(&card("NAXIS1", &n, None));
    header.push_str(&card("NAXIS2", &n, None));
    header.push_str(&card("PIXSCALE", &format!("{:E}", grid.pixel_scale()), Some("mas per pixel")));
    header.push_str(&format!("{:<80}", "END"));
    let mut bytes = header.into_bytes();
    bytes.resize(bytes.len().div_ceil(BLOCK) * BLOCK, b' ');
    for v in grid.values() {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.resize(bytes.len().div_ceil(BLOCK) * BLOCK, 0);
    bytes
}

fn parse_value(card: &str) -> &str {
    let raw = card.get(10..).unwrap_or("");
    raw.split('/').next().unwrap_or("").trim()
}

fn int_card(cards: &[(String, String)], key: &str) -> Result<i64> {
    let (_, v) = cards
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::Fits(format!("missing {key} card")))?;
    v.parse()
        .map_err(|_| Error::Fits(format!("{key} value '{v}' is not an integer")))
}

pub fn decode(bytes: &[u8]) -> Result<PixelGrid> {
    let mut cards: Vec<(String, String)> = Vec::new();
    let mut end = None;
    for (i, chunk) in bytes.chunks(CARD).enumerate() {
        if chunk.len() < CARD {
            break;
        }
        let text = std::str::from_utf8(chunk).map_err(|_| Error::Fits("header is not ASCII".into()))?;
        let key = text[..8].trim_end().to_string();
        if key == "END" {
            end = Some(i);
            break;
        }
        if text.as_bytes().get(8) == Some(&b'=') {
            cards.push((key, parse_value(text).to_string()));
        }
    }
    let end = end.ok_or_else(|| Error::Fits("malformed header: no END card".into()))?;
    match cards.first() {
        Some((k, v)) if k == "SIMPLE" && v == "T" => {}
        _ => return Err(Error::Fits("malformed header: first card must be SIMPLE = T".into())),
    }
    let bitpix = int_card(&cards, "BITPIX")?;
    if bitpix != -64 {
        return Err(Error::Fits(format!("unsupported BITPIX {bitpix}")));
    }
    let naxis = int_card(&cards, "NAXIS")?;
    if naxis != 2 {
        return Err(Error::Fits(format!("unsupported NAXIS {naxis}")));
    }
    let nx = int_card(&cards, "NAXIS1")?;
    let ny = int_card(&cards, "NAXIS2")?;
    if nx != ny || nx <= 0 {
        return Err(Error::Fits(format!("image must be square, got {nx} x {ny}")));
    }
    let pixel_scale = match cards.iter().find(|(k, _)| k == "PIXSCALE") {
        Some((_, v)) => v
            .parse::<f64>()
            .map_err(|_| Error::Fits(format!("PIXSCALE value '{v}' is not a number")))?,
        None => 1.0,
    };
    let n = nx as usize;
    let start = ((end + 1) * CARD).div_ceil(BLOCK) * BLOCK;
    let need = n * n * 8;
    if bytes.len() < start + need {
        return Err(Error::Fits(format!(
            "truncated data: expected {need} bytes after the header, found {}",
            bytes.len().saturating_sub(start)
        )));
    }
    let values = bytes[start..start + need]
        .chunks_exact(8)
        .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    PixelGrid::new(n, pixel_scale, values)
}

pub fn write_fits(path: &Path, grid: &PixelGrid) -> Result<()> {
    super::write_atomic(path, &encode(grid))
}

pub fn read_fits(path: &Path) -> Result<PixelGrid> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}
