//! Domain containers shared by every module: frames, frame pairs, flow
//! fields, per-pixel magnification maps, and clips.
//!
//! Coordinate convention: origin at the top-left, x rightward, y downward.
//! Flow components (u, v) are displacements in that frame, in pixels.

use crate::error::{Error, Result};

/// Minimum side length for full frames entering the pipeline.
pub const MIN_FRAME_SIDE: usize = 8;

/// An RGB image with real-valued samples in [0, 1], stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>, // [3 * height * width], plane per channel
}

impl Frame {
    /// Builds a frame, enforcing the full-frame invariants: three channels,
    /// every value in [0, 1], both sides at least [`MIN_FRAME_SIDE`].
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_FRAME_SIDE || width < MIN_FRAME_SIDE {
            return Err(Error::InvalidArgument(format!(
                "frame sides must be >= {MIN_FRAME_SIDE}, got {height}x{width}"
            )));
        }
        Self::patch(height, width, data)
    }

    /// Builds a small image patch: same value/channel invariants as
    /// [`Frame::new`] but without the size floor. Used for kernel-level
    /// fixtures and y-t slice outputs, which may be narrower than a full
    /// frame.
    pub fn patch(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty frame".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples for a {height}x{width} RGB frame, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData(
                "frame values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Frame {
            height,
            width,
            data,
        })
    }

    /// A patch filled with one RGB color.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        for c in 0..3 {
            data[c * height * width..(c + 1) * height * width].fill(rgb[c]);
        }
        Self::patch(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        self.data[(channel * self.height + y) * self.width + x] = value;
    }

    /// One channel plane as a slice.
    pub fn plane(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.height * self.width..(channel + 1) * self.height * self.width]
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let (r, g, b) = (&self.data[..hw], &self.data[hw..2 * hw], &self.data[2 * hw..]);
        (0..hw)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        if !self.same_size(other) {
            return Err(Error::DimensionMismatch("frames differ in size".into()));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }
}

/// A reference/target frame pair, optionally carrying ground-truth flow
/// (synthetic data only).
#[derive(Clone, Debug)]
pub struct FramePair {
    pub reference: Frame,
    pub target: Frame,
    pub gt_flow: Option<FlowField>,
}

impl FramePair {
    pub fn new(reference: Frame, target: Frame, gt_flow: Option<FlowField>) -> Result<Self> {
        if !reference.same_size(&target) {
            return Err(Error::DimensionMismatch(
                "reference and target frames differ in size".into(),
            ));
        }
        if let Some(flow) = &gt_flow {
            if flow.height() != reference.height() || flow.width() != reference.width() {
                return Err(Error::DimensionMismatch(
                    "ground-truth flow does not match the frame size".into(),
                ));
            }
        }
        Ok(FramePair {
            reference,
            target,
            gt_flow,
        })
    }

    pub fn height(&self) -> usize {
        self.reference.height()
    }

    pub fn width(&self) -> usize {
        self.reference.width()
    }
}

/// A per-pixel 2-vector displacement map. Components are stored as f32,
/// matching the interchange file format exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty flow field".into()));
        }
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} components per plane for a {height}x{width} flow field",
                height * width
            )));
        }
        if !u.iter().chain(v.iter()).all(|c| c.is_finite()) {
            return Err(Error::InvalidData("flow components must be finite".into()));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    /// A spatially constant field.
    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![u; height * width],
            vec![v; height * width],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i] as f64, self.v[i] as f64)
    }

    /// Per-pixel magnitude sqrt(u^2 + v^2).
    pub fn magnitudes(&self) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| ((u as f64).powi(2) + (v as f64).powi(2)).sqrt())
            .collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitudes();
        m.iter().sum::<f64>() / m.len() as f64
    }

    /// Component-wise scaling by a constant factor.
    pub fn scaled(&self, factor: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|&c| (c as f64 * factor) as f32).collect(),
            v: self.v.iter().map(|&c| (c as f64 * factor) as f32).collect(),
        }
    }

    /// Component-wise scaling by a per-pixel factor map.
    pub fn scaled_by_map(&self, alpha: &AlphaMap) -> Result<FlowField> {
        if alpha.height() != self.height || alpha.width() != self.width {
            return Err(Error::DimensionMismatch(
                "alpha map does not match the flow field".into(),
            ));
        }
        let a = alpha.values();
        Ok(FlowField {
            height: self.height,
            width: self.width,
            u: self
                .u
                .iter()
                .zip(a)
                .map(|(&c, &f)| (c as f64 * f) as f32)
                .collect(),
            v: self
                .v
                .iter()
                .zip(a)
                .map(|(&c, &f)| (c as f64 * f) as f32)
                .collect(),
        })
    }

    pub fn same_size(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A per-pixel magnification factor map. Spatially constant during
/// training; arbitrary at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AlphaMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for a {height}x{width} alpha map",
                height * width
            )));
        }
        if !values.iter().all(|a| a.is_finite() && *a >= 0.0) {
            return Err(Error::InvalidData(
                "alpha values must be finite and >= 0".into(),
            ));
        }
        Ok(AlphaMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, alpha: f64) -> Result<Self> {
        Self::new(height, width, vec![alpha; height * width])
    }

    /// α = `inside` where the mask is set, `outside` elsewhere, after
    /// dilating the mask by `dilate_px` (chessboard metric).
    pub fn from_mask(
        mask: &[bool],
        height: usize,
        width: usize,
        inside: f64,
        outside: f64,
        dilate_px: usize,
    ) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::DimensionMismatch("mask size mismatch".into()));
        }
        let dilated = dilate_mask(mask, height, width, dilate_px);
        Self::new(
            height,
            width,
            dilated
                .iter()
                .map(|&m| if m { inside } else { outside })
                .collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Binary mask dilation with a square structuring element of the given
/// radius.
pub fn dilate_mask(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut hit = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0
                        && nx >= 0
                        && ny < height as isize
                        && nx < width as isize
                        && mask[ny as usize * width + nx as usize]
                    {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            out[y as usize * width + x as usize] = hit;
        }
    }
    out
}

/// An ordered sequence of same-sized frames plus playback metadata.
#[derive(Clone, Debug)]
pub struct VideoClip {
    frames: Vec<Frame>,
    fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(
                "a clip needs at least two frames".into(),
            ));
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        let first = &frames[0];
        if !frames.iter().all(|f| f.same_size(first)) {
            return Err(Error::DimensionMismatch(
                "all clip frames must share dimensions".into(),
            ));
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

/// Extracts a space-time slice: a 1-pixel-wide axis-aligned segment sampled
/// from every frame in temporal order. Rows are the spatial extent, columns
/// are frames.
///
/// The segment is the half-open rectangle [x1, x2) x [y1, y2) and must have
/// unit thickness along exactly one axis, e.g. upper-left (180, 250) with
/// bottom-right (181, 310) is a vertical segment of length 60.
pub fn yt_slice(clip: &VideoClip, x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Frame> {
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::InvalidArgument(
            "slice corners must satisfy x2 > x1 and y2 > y1".into(),
        ));
    }
    if x2 > clip.width() || y2 > clip.height() {
        return Err(Error::InvalidArgument("slice exceeds frame bounds".into()));
    }
    let (w, h) = (x2 - x1, y2 - y1);
    let vertical = w == 1;
    if !vertical && h != 1 {
        return Err(Error::InvalidArgument(
            "slice must be axis-aligned with unit thickness".into(),
        ));
    }
    let extent = if vertical { h } else { w };
    let t_count = clip.len();
    let mut data = vec![0.0; 3 * extent * t_count];
    for (t, frame) in clip.frames().iter().enumerate() {
        for s in 0..extent {
            let (x, y) = if vertical { (x1, y1 + s) } else { (x1 + s, y1) };
            for c in 0..3 {
                data[(c * extent + s) * t_count + t] = frame.get(c, y, x);
            }
        }
    }
    Frame::patch(extent, t_count, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(h: usize, w: usize) -> Frame {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = (x + y) as f64 / (h + w) as f64;
                }
            }
        }
        Frame::patch(h, w, data).unwrap()
    }

    #[test]
    fn frame_rejects_out_of_range_values() {
        let err = Frame::new(8, 8, vec![1.5; 3 * 64]);
        assert!(matches!(err, Err(Error::InvalidData(_))));
    }

    #[test]
    fn frame_enforces_size_floor_but_patch_does_not() {
        assert!(Frame::new(4, 4, vec![0.0; 48]).is_err());
        assert!(Frame::patch(2, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn alpha_map_rejects_negative() {
        assert!(AlphaMap::new(2, 2, vec![1.0, -0.5, 1.0, 1.0]).is_err());
        assert!(AlphaMap::constant(2, 2, 0.0).is_ok());
    }

    #[test]
    fn pair_requires_matching_dims() {
        let a = Frame::filled(8, 8, [0.5; 3]).unwrap();
        let b = Frame::filled(8, 10, [0.5; 3]).unwrap();
        assert!(FramePair::new(a.clone(), b, None).is_err());
        assert!(FramePair::new(a.clone(), a, None).is_ok());
    }

    #[test]
    fn yt_slice_shape_matches_segment_and_frame_count() {
        // 10-frame clip, vertical segment of length 60 -> 60x10 slice.
        let frames = vec![Frame::filled(80, 80, [0.25; 3]).unwrap(); 10];
        let clip = VideoClip::new(frames, 30.0).unwrap();
        let slice = yt_slice(&clip, 20, 10, 21, 70).unwrap();
        assert_eq!((slice.height(), slice.width()), (60, 10));
    }

    #[test]
    fn yt_slice_of_static_clip_is_constant_over_time() {
        let f = gradient_frame(16, 16);
        let clip = VideoClip::new(vec![f; 6], 10.0).unwrap();
        let slice = yt_slice(&clip, 3, 2, 4, 14).unwrap();
        for c in 0..3 {
            for s in 0..slice.height() {
                let first = slice.get(c, s, 0);
                for t in 0..slice.width() {
                    assert_eq!(slice.get(c, s, t), first);
                }
            }
        }
    }

    #[test]
    fn yt_slice_of_moving_bar_is_diagonal() {
        // A horizontal bright bar shifts down 1 px per frame; a vertical
        // slice must show a diagonal stripe of slope 1 px/frame.
        let (h, w, t_count) = (16, 16, 6);
        let mut frames = Vec::new();
        for t in 0..t_count {
            let mut data = vec![0.0; 3 * h * w];
            let bar_y = 4 + t;
            for c in 0..3 {
                for x in 0..w {
                    data[(c * h + bar_y) * w + x] = 1.0;
                }
            }
            frames.push(Frame::patch(h, w, data).unwrap());
        }
        let clip = VideoClip::new(frames, 10.0).unwrap();
        let slice = yt_slice(&clip, 8, 0, 9, 16).unwrap();
        for t in 0..t_count {
            for s in 0..16 {
                let expected = if s == 4 + t { 1.0 } else { 0.0 };
                assert_eq!(slice.get(0, s, t), expected, "s={s} t={t}");
            }
        }
    }

    #[test]
    fn yt_slice_rejects_thick_or_out_of_bounds_segments() {
        let frames = vec![Frame::filled(16, 16, [0.5; 3]).unwrap(); 3];
        let clip = VideoClip::new(frames, 10.0).unwrap();
        assert!(yt_slice(&clip, 2, 2, 4, 10).is_err());
        assert!(yt_slice(&clip, 2, 2, 3, 40).is_err());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut mask = vec![false; 49];
        mask[3 * 7 + 3] = true;
        let d = dilate_mask(&mask, 7, 7, 2);
        assert!(d[1 * 7 + 1] && d[5 * 7 + 5]);
        assert!(!d[0]);
    }
}
