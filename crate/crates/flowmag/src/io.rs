//! File formats: PNG frames and masks, Middlebury .flo flow files, and
//! clip directories (numbered frames plus a small metadata file).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, VideoClip};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Loads an 8- or 16-bit RGB raster image, mapping samples linearly to
/// [0, 1].
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (frame, _) = decode_rgb(img, path)?;
    if frame.height() < crate::types::MIN_FRAME_SIDE || frame.width() < crate::types::MIN_FRAME_SIDE
    {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("frame too small: {}x{}", frame.height(), frame.width()),
        });
    }
    Ok(frame)
}

fn decode_rgb(img: image::DynamicImage, path: &Path) -> Result<(Frame, u32)> {
    use image::DynamicImage::*;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    let depth = match img {
        ImageRgb8(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px.0[c] as f64 / 255.0;
                }
            }
            8
        }
        ImageRgb16(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px.0[c] as f64 / 65535.0;
                }
            }
            16
        }
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!(
                    "expected an RGB image, got {:?} ({} channels)",
                    other.color(),
                    other.color().channel_count()
                ),
            })
        }
    };
    Ok((Frame::patch(h, w, data)?, depth))
}

/// Saves a frame as an 8-bit RGB PNG (values quantized to the 1/255 grid).
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (frame.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a single-channel mask; a sample at or above half range counts as
/// inside.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    use image::DynamicImage::*;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mask = match img {
        ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] >= 128).collect(),
        ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] >= 32768).collect(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("expected a single-channel mask, got {:?}", other.color()),
            })
        }
    };
    Ok((mask, h, w))
}

pub fn save_mask(mask: &[bool], height: usize, width: usize, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = if mask[y * width + x] { 255 } else { 0 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a Middlebury .flo file: magic "PIEH", little-endian i32 width and
/// height, then row-major interleaved (u, v) f32 pairs.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "flo file too short ({} bytes): {}",
            bytes.len(),
            path.display()
        )));
    }
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::Format(format!(
            "bad flo magic in {}: expected PIEH",
            path.display()
        )));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!(
            "flo dimensions {width}x{height} are not positive"
        )));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "truncated flo payload: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut u = vec![0.0f32; w * h];
    let mut v = vec![0.0f32; w * h];
    for i in 0..w * h {
        let off = 12 + 8 * i;
        u[i] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        v[i] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
    }
    FlowField::new(h, w, u, v)
}

/// Writes a flow field in the Middlebury .flo layout. Rejects non-finite
/// components. A write/read round trip reproduces the field bit-exactly.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    if !flow.u().iter().chain(flow.v().iter()).all(|c| c.is_finite()) {
        return Err(Error::InvalidData(
            "refusing to write non-finite flow components".into(),
        ));
    }
    let (h, w) = (flow.height(), flow.width());
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(FLO_MAGIC);
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h * w {
        bytes.extend_from_slice(&flow.u()[i].to_le_bytes());
        bytes.extend_from_slice(&flow.v()[i].to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipMeta {
    fps: f64,
    frame_count: usize,
}

/// Writes a clip as a directory of numbered PNGs plus `clip.json`.
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames().iter().enumerate() {
        save_frame(frame, &dir.join(format!("frame_{i:06}.png")))?;
    }
    let meta = ClipMeta {
        fps: clip.fps(),
        frame_count: clip.len(),
    };
    let path = dir.join("clip.json");
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("clip metadata: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Loads a clip directory written by [`save_clip`]. Without `clip.json`,
/// any directory of numbered images is accepted at a default 30 fps.
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let meta_path = dir.join("clip.json");
    let fps = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ClipMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("clip metadata: {e}")))?;
        meta.fps
    } else {
        30.0
    };
    let frames: Vec<Frame> = list_images(dir)?
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<_>>()?;
    VideoClip::new(frames, fps)
}

/// Image files in a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "PNG" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flo_round_trip_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.flo");
        let field = FlowField::zeros(2, 2);
        write_flo(&field, &path).unwrap();
        assert_eq!(read_flo(&path).unwrap(), field);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_flo(&path), Err(Error::Format(_))));
    }

    #[test]
    fn flo_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flo");
        let field = FlowField::constant(3, 3, 1.0, -2.0).unwrap();
        write_flo(&field, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_flo(&path), Err(Error::Format(_))));
    }

    #[test]
    fn flo_file_size_matches_layout() {
        // 3x1 field: 4 magic + 4 width + 4 height + 3 * 8 payload = 36 bytes.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.flo");
        let field = FlowField::new(1, 3, vec![0.25, -1.5, 7.0], vec![0.0; 3]).unwrap();
        write_flo(&field, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 36);
    }

    proptest! {
        #[test]
        fn flo_round_trip_is_bit_exact(
            w in 1usize..6,
            h in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let v: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let field = FlowField::new(h, w, u, v).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.flo");
            write_flo(&field, &path).unwrap();
            prop_assert_eq!(read_flo(&path).unwrap(), field);
        }
    }

    #[test]
    fn png_round_trip_is_lossless_on_the_quantization_grid() {
        // Values already on the 1/255 grid survive save/load exactly.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut data = vec![0.0; 3 * 8 * 8];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let frame = Frame::new(8, 8, data).unwrap();
        save_frame(&frame, &path).unwrap();
        let back = load_frame(&path).unwrap();
        for (a, b) in frame.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn load_frame_maps_endpoints_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        let mut buf = image::RgbImage::new(8, 8);
        buf.put_pixel(0, 0, image::Rgb([255, 0, 128]));
        buf.save(&path).unwrap();
        let frame = load_frame(&path).unwrap();
        assert_eq!(frame.get(0, 0, 0), 1.0);
        assert_eq!(frame.get(1, 0, 0), 0.0);
        // v / 255 linear map: 128 -> 0.50196...
        assert!((frame.get(2, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn load_frame_rejects_non_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let buf = image::GrayImage::new(8, 8);
        buf.save(&path).unwrap();
        assert!(matches!(load_frame(&path), Err(Error::Image { .. })));
        assert!(load_mask(&path).is_ok());
    }

    #[test]
    fn load_frame_missing_file_errors() {
        assert!(matches!(
            load_frame(Path::new("/nonexistent/x.png")),
            Err(Error::Image { .. })
        ));
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![
            Frame::filled(8, 8, [0.2, 0.4, 0.6]).unwrap(),
            Frame::filled(8, 8, [0.8, 0.1, 0.3]).unwrap(),
        ];
        let clip = VideoClip::new(frames, 24.0).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.fps(), 24.0);
        assert!(back.frames()[1].mean_abs_diff(&clip.frames()[1]).unwrap() < 1e-2);
    }
}
