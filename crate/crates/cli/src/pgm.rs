//! 16-bit binary portable graymap previews (P5, maxval 65535, big-endian
//! samples), max-scaled from the image's value range.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use petsr_core::grid::GridImage;

use crate::error::{CliError, Result};

pub fn write_preview(path: &Path, img: &GridImage) -> Result<()> {
    let peak = img.max();
    let mut out = Vec::with_capacity(64 + 2 * img.len());
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", img.width(), img.height()).as_bytes());
    for &v in img.data() {
        let scaled = if peak > 0.0 {
            ((v.max(0.0) / peak) * 65535.0 + 0.5).floor().min(65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&scaled.to_be_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&out).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use petsr_core::grid::Units;
    use tempfile::tempdir;

    #[test]
    fn header_and_scaling() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let img = GridImage::new(2, 2, 1.0, Units::Activity, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        write_preview(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px: Vec<u16> = bytes[header.len()..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(px, vec![0, 16384, 32768, 65535]);
    }

    #[test]
    fn all_zero_image() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        let img = GridImage::zeros(3, 3, 1.0, Units::Activity);
        write_preview(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[b"P5\n3 3\n65535\n".len()..].iter().all(|&b| b == 0));
    }
}
