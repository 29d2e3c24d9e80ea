//! Writes a grid as FITS, reads it back and shows the header.

use blind_deconv::io::fits::{encode, BLOCK};
use blind_deconv::io::{read_fits, write_fits};
use blind_deconv::PixelGrid;

fn main() -> blind_deconv::Result<()> {
    let n = 256;
    let grid = PixelGrid::new(n, 15.0, (0..n * n).map(|i| (i as f64).sqrt()).collect())?;
    let dir = std::env::temp_dir().join("blind-deconv-fits-example");
    let path = dir.join("ramp.fits");
    write_fits(&path, &grid)?;
    let back = read_fits(&path)?;

    let bytes = encode(&grid);
    for card in bytes[..BLOCK].chunks(80).take(7) {
        println!("{}", String::from_utf8_lossy(card).trim_end());
    }
    println!("file size {} bytes", std::fs::metadata(&path)?.len());
    let identical = back
        .values()
        .iter()
        .zip(grid.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("bitwise identical: {identical}, pixel scale {}", back.pixel_scale());
    std::fs::remove_dir_all(dir)?;
    Ok(())
}
