//! File formats and target preparation: PGM read/write, IDX (ubyte image
//! container) read, parameter JSON, loss CSV, and random target generation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ifs::{
    iterate_ifs, normalize_points, sample_index_sequence, sample_v0, FractalSystem,
    IndexSequence,
};
use crate::optim::OptimizerConfig;
use crate::render::{rasterize_hard, Canvas};

/// A binarized target image plus where it came from.
#[derive(Clone, Debug)]
pub struct TargetImage {
    /// Pixel values are exactly 0.0 or 1.0.
    pub canvas: Canvas,
    /// File path or generator tag.
    pub source: String,
}

/// A random chaos-game target together with everything that generated it.
#[derive(Clone, Debug)]
pub struct GeneratedTarget {
    pub image: TargetImage,
    pub system: FractalSystem,
    pub sequence: IndexSequence,
    pub v0: [f64; 2],
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// Writes a canvas as binary PGM (P5, maxval 255); values are clipped to
/// `[0, 1]` and rounded.
pub fn write_pgm_p5<P: AsRef<Path>>(canvas: &Canvas, path: P) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", canvas.w, canvas.h)?;
    let bytes: Vec<u8> = canvas
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Writes a canvas as plain-text PGM (P2, maxval 255).
pub fn write_pgm_p2<P: AsRef<Path>>(canvas: &Canvas, path: P) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P2\n{} {}\n255\n", canvas.w, canvas.h)?;
    for row in canvas.pixels.chunks(canvas.w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a P2 or P5 PGM into a canvas with intensities scaled to `[0, 1]`.
pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<Canvas> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_pgm_bytes(&bytes)
}

fn read_pgm_bytes(bytes: &[u8]) -> Result<Canvas> {
    let magic = bytes.get(0..2).ok_or_else(|| corrupt("empty file"))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(Error::UnsupportedFormat("not a P2/P5 PGM".into())),
    };
    let mut pos = 2usize;
    let w = read_pnm_int(bytes, &mut pos)? as usize;
    let h = read_pnm_int(bytes, &mut pos)? as usize;
    let maxval = read_pnm_int(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt("maxval out of range"));
    }
    if h == 0 || w == 0 {
        return Err(corrupt("zero dimension"));
    }
    let count = h * w;
    let mut values = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        if maxval < 256 {
            let data = bytes
                .get(pos..pos + count)
                .ok_or_else(|| corrupt("truncated raster"))?;
            values.extend(data.iter().map(|&b| b as f64 / maxval as f64));
        } else {
            let data = bytes
                .get(pos..pos + 2 * count)
                .ok_or_else(|| corrupt("truncated raster"))?;
            values.extend(
                data.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64),
            );
        }
    } else {
        for _ in 0..count {
            let v = read_pnm_int(bytes, &mut pos)?;
            if v > maxval {
                return Err(corrupt("sample exceeds maxval"));
            }
            values.push(v as f64 / maxval as f64);
        }
    }
    Ok(Canvas {
        h,
        w,
        pixels: values,
        pre_clamp: None,
    })
}

/// Reads the next ASCII unsigned integer, skipping whitespace and `#`
/// comments.
fn read_pnm_int(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(_) => return Err(corrupt("unexpected byte in header")),
            None => return Err(corrupt("unexpected end of file")),
        }
    }
    let mut value: u64 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + (b - b'0') as u64;
        if value > u32::MAX as u64 {
            return Err(corrupt("integer overflow in header"));
        }
        *pos += 1;
    }
    Ok(value as u32)
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptFile(msg.to_string())
}

// ---------------------------------------------------------------------------
// IDX (big-endian ubyte image container)
// ---------------------------------------------------------------------------

/// Contents of an IDX image file (magic `0x00000803`): `count` grayscale
/// images of `h x w` unsigned bytes.
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl IdxImages {
    /// Image `i` with intensities scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Canvas {
        assert!(i < self.count, "image index out of range");
        let size = self.h * self.w;
        let slice = &self.data[i * size..(i + 1) * size];
        Canvas {
            h: self.h,
            w: self.w,
            pixels: slice.iter().map(|&b| b as f64 / 255.0).collect(),
            pre_clamp: None,
        }
    }
}

/// Reads an IDX ubyte image file.
pub fn read_idx_images<P: AsRef<Path>>(path: P) -> Result<IdxImages> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    reader
        .read_exact(&mut header)
        .map_err(|_| corrupt("IDX header truncated"))?;
    let magic = u32::from_be_bytes([header[0], header[1], header[2], header[3]]);
    if magic != 0x0000_0803 {
        return Err(Error::UnsupportedFormat(format!(
            "IDX magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let count = u32::from_be_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let h = u32::from_be_bytes([header[8], header[9], header[10], header[11]]) as usize;
    let w = u32::from_be_bytes([header[12], header[13], header[14], header[15]]) as usize;
    let mut data = vec![0u8; count * h * w];
    reader
        .read_exact(&mut data)
        .map_err(|_| corrupt("IDX data truncated"))?;
    Ok(IdxImages { count, h, w, data })
}

// ---------------------------------------------------------------------------
// Target preparation
// ---------------------------------------------------------------------------

/// Nearest-neighbor resample to `h x w`.
pub fn resize_nearest(canvas: &Canvas, h: usize, w: usize) -> Canvas {
    if canvas.h == h && canvas.w == w {
        return canvas.clone();
    }
    let mut out = Canvas::zeros(h, w);
    for i in 0..h {
        let src_i = ((i as f64 + 0.5) * canvas.h as f64 / h as f64) as usize;
        let src_i = src_i.min(canvas.h - 1);
        for j in 0..w {
            let src_j = ((j as f64 + 0.5) * canvas.w as f64 / w as f64) as usize;
            let src_j = src_j.min(canvas.w - 1);
            out.set(i, j, canvas.at(src_i, src_j));
        }
    }
    out
}

/// Thresholds intensities into exact 0/1 values.
pub fn binarize(canvas: &Canvas, threshold: f64) -> Canvas {
    Canvas {
        h: canvas.h,
        w: canvas.w,
        pixels: canvas
            .pixels
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
        pre_clamp: None,
    }
}

/// Turns an already-decoded grayscale canvas into a run-ready target:
/// nearest-neighbor resize to `(h, w)` then binarize.
pub fn prepare_target(canvas: &Canvas, h: usize, w: usize, threshold: f64, source: String) -> TargetImage {
    TargetImage {
        canvas: binarize(&resize_nearest(canvas, h, w), threshold),
        source,
    }
}

/// Loads a PGM (or, with the `png` feature, PNG grayscale) file, scales
/// intensities to `[0, 1]`, resizes to `(h, w)`, and binarizes at
/// `threshold`.
pub fn load_target<P: AsRef<Path>>(path: P, h: usize, w: usize, threshold: f64) -> Result<TargetImage> {
    let path = path.as_ref();
    let mut head = [0u8; 8];
    let n = File::open(path)?.read(&mut head)?;
    let canvas = if n >= 2 && (&head[0..2] == b"P2" || &head[0..2] == b"P5") {
        read_pgm(path)?
    } else if n >= 8 && head == [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a] {
        read_png_gray(path)?
    } else {
        return Err(Error::UnsupportedFormat(format!(
            "{}: not a PGM (or PNG) file",
            path.display()
        )));
    };
    Ok(prepare_target(
        &canvas,
        h,
        w,
        threshold,
        path.display().to_string(),
    ))
}

#[cfg(feature = "png")]
fn read_png_gray(path: &Path) -> Result<Canvas> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptFile(format!("png: {e}")))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Canvas {
        h,
        w,
        pixels: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        pre_clamp: None,
    })
}

#[cfg(not(feature = "png"))]
fn read_png_gray(_path: &Path) -> Result<Canvas> {
    Err(Error::UnsupportedFormat(
        "PNG support not compiled in (enable the `png` feature)".into(),
    ))
}

/// Loads image `index` from an IDX container and prepares it as a target.
pub fn load_idx_target<P: AsRef<Path>>(
    path: P,
    index: usize,
    h: usize,
    w: usize,
    threshold: f64,
) -> Result<TargetImage> {
    let images = read_idx_images(&path)?;
    if index >= images.count {
        return Err(Error::InvalidConfig(format!(
            "image index {index} out of range (file holds {})",
            images.count
        )));
    }
    Ok(prepare_target(
        &images.image(index),
        h,
        w,
        threshold,
        format!("{}#{index}", path.as_ref().display()),
    ))
}

/// Samples a random system, runs one chaos-game trajectory, and rasterizes it
/// into a binary target. Returns the ground truth alongside the image.
pub fn generate_fractaldb_target(
    seed: u64,
    h: usize,
    w: usize,
    n: usize,
    t_len: usize,
) -> Result<GeneratedTarget> {
    assert!(n >= 1 && t_len >= 1, "n and t_len must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = Error::DegenerateSystem;
    for _ in 0..100 {
        let system = FractalSystem::random(n, &mut rng);
        let sequence = match sample_index_sequence(&system, t_len, &mut rng) {
            Ok(z) => z,
            Err(e) => {
                last_err = e;
                continue;
            }
        };
        let v0 = sample_v0(&mut rng);
        let traj = match iterate_ifs(&system, &sequence, v0) {
            Ok(t) => t,
            Err(e) => {
                last_err = e;
                continue;
            }
        };
        let pixel_points = normalize_points(&traj, h, w);
        let canvas = rasterize_hard(&pixel_points, h, w);
        return Ok(GeneratedTarget {
            image: TargetImage {
                canvas,
                source: format!("fractaldb:seed={seed}"),
            },
            system,
            sequence,
            v0,
        });
    }
    Err(last_err)
}

// ---------------------------------------------------------------------------
// Parameter JSON and loss CSV
// ---------------------------------------------------------------------------

/// Writes a system as the documented JSON schema (full double precision).
pub fn save_system_json<P: AsRef<Path>>(system: &FractalSystem, path: P) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, system)
        .map_err(|e| Error::CorruptFile(format!("json write: {e}")))?;
    Ok(())
}

pub fn load_system_json<P: AsRef<Path>>(path: P) -> Result<FractalSystem> {
    let file = BufReader::new(File::open(path)?);
    serde_json::from_reader(file).map_err(|e| Error::CorruptFile(format!("json read: {e}")))
}

/// Writes the per-step loss curve as `step,loss,lr,noise_applied` with
/// one-based step numbers.
pub fn write_loss_csv<P: AsRef<Path>>(
    path: P,
    cfg: &OptimizerConfig,
    losses: &[f64],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,loss,lr,noise_applied")?;
    for (i, loss) in losses.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            loss,
            cfg.lr_at(i),
            cfg.noise_applied_at(i)
        )?;
    }
    Ok(())
}
