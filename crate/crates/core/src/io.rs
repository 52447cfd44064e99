//! Portable file formats: the MVOL1 volume container and 8/16-bit binary
//! PGM import/export. Everything is little-endian on disk except PGM's
//! 16-bit samples, which are big-endian per the format.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{DenoiseError, Result};
use crate::volume::{ImageVolume, Modality};

pub const VOLUME_MAGIC: &[u8; 5] = b"MVOL1";
const DTYPE_F32: u8 = 1;

/// MVOL1 layout: magic, dtype code (f32 = 1), dims nx ny nz as u64 LE,
/// intensity_max as f64 LE, then nx*ny*nz f32 LE values, x fastest.
pub fn write_volume(path: &Path, vol: &ImageVolume) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write_volume_to(&mut w, vol)
}

pub fn write_volume_to<W: Write>(w: &mut W, vol: &ImageVolume) -> Result<()> {
    let (nz, ny, nx) = vol.dim();
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&[DTYPE_F32])?;
    for d in [nx as u64, ny as u64, nz as u64] {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&vol.intensity_max().to_le_bytes())?;
    // (z, y, x) C-order iteration is exactly x-fastest.
    for &v in vol.data().iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<ImageVolume> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    read_volume_from(&mut r)
}

pub fn read_volume_from<R: Read>(r: &mut R) -> Result<ImageVolume> {
    let mut magic = [0u8; 5];
    read_exact(r, &mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(DenoiseError::BadMagic { expected: "MVOL1" });
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(DenoiseError::UnsupportedDtype { code: dtype[0] });
    }
    let mut dims = [0u64; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        *d = u64::from_le_bytes(b);
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let intensity_max = f64::from_le_bytes(b);
    let count = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or(DenoiseError::TruncatedBody {
            expected: usize::MAX,
            got: 0,
        })?;
    let mut body = vec![0.0f64; count];
    for v in body.iter_mut() {
        let mut fb = [0u8; 4];
        read_exact(r, &mut fb)?;
        *v = f32::from_le_bytes(fb) as f64;
    }
    let data = Array3::from_shape_vec((nz, ny, nx), body).expect("dims match body");
    ImageVolume::new(data, intensity_max, Modality::Synthetic)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(DenoiseError::TruncatedBody {
                expected: buf.len(),
                got,
            });
        }
        got += n;
    }
    Ok(())
}

/// Imports a binary PGM ("P5") as a single-slice volume; 8-bit images get
/// intensity_max 255, 16-bit get 65535.
pub fn read_pgm(path: &Path) -> Result<ImageVolume> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 2];
    read_exact(&mut r, &mut magic)?;
    if &magic != b"P5" {
        return Err(DenoiseError::BadMagic { expected: "P5" });
    }
    let width = read_pgm_token(&mut r)?;
    let height = read_pgm_token(&mut r)?;
    let maxval = read_pgm_token(&mut r)?;
    if maxval == 0 || maxval > 65535 {
        return Err(DenoiseError::UnsupportedDtype {
            code: (maxval & 0xff) as u8,
        });
    }
    let (w, h) = (width as usize, height as usize);
    let mut data = Array3::<f64>::zeros((1, h, w));
    if maxval < 256 {
        let mut body = vec![0u8; w * h];
        read_exact(&mut r, &mut body)?;
        for (i, &b) in body.iter().enumerate() {
            data[(0, i / w, i % w)] = b as f64;
        }
        ImageVolume::new(data, 255.0, Modality::Synthetic)
    } else {
        let mut body = vec![0u8; 2 * w * h];
        read_exact(&mut r, &mut body)?;
        for i in 0..w * h {
            let v = u16::from_be_bytes([body[2 * i], body[2 * i + 1]]);
            data[(0, i / w, i % w)] = v as f64;
        }
        ImageVolume::new(data, 65535.0, Modality::Synthetic)
    }
}

/// Reads one whitespace-delimited ASCII integer, skipping '#' comments.
fn read_pgm_token<R: BufRead>(r: &mut R) -> Result<u64> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        read_exact(r, &mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        if !c.is_ascii_digit() {
            return Err(DenoiseError::BadMagic { expected: "P5" });
        }
        tok.push(c);
    }
    tok.parse::<u64>()
        .map_err(|_| DenoiseError::BadMagic { expected: "P5" })
}

/// Exports the first slice of a volume as 8-bit binary PGM, scaling
/// intensity_max to 255.
pub fn write_pgm(path: &Path, vol: &ImageVolume) -> Result<()> {
    let (_, ny, nx) = vol.dim();
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let scale = 255.0 / vol.intensity_max();
    for y in 0..ny {
        for x in 0..nx {
            let v = (vol.data()[(0, y, x)] * scale).round().clamp(0.0, 255.0) as u8;
            w.write_all(&[v])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exports a unit-range grayscale map (e.g. a dictionary mosaic) as
/// 8-bit PGM.
pub fn write_pgm_gray(path: &Path, gray: &Array2<f64>) -> Result<()> {
    let (ny, nx) = gray.dim();
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    for y in 0..ny {
        for x in 0..nx {
            let v = (gray[(y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
            w.write_all(&[v])?;
        }
    }
    w.flush()?;
    Ok(())
}
