//! Multi-channel samples, channel masks, normalization, tiling and the
//! on-disk container format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of unique channel names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ChannelPanel {
    names: Vec<String>,
}

impl ChannelPanel {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidPanel("panel has no channels".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::InvalidPanel(format!("channel {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidPanel(format!("duplicate channel name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Resolves channel names to indices, failing on the first unknown name.
    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.index_of(n.as_ref())
                    .ok_or_else(|| Error::UnknownChannel(n.as_ref().to_string()))
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for ChannelPanel {
    type Error = Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ChannelPanel> for Vec<String> {
    fn from(p: ChannelPanel) -> Self {
        p.names
    }
}

/// A dense `C x H x W` sample, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSample {
    panel: Arc<ChannelPanel>,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MultiChannelSample {
    pub fn new(panel: Arc<ChannelPanel>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimMismatch(format!("spatial dims must be positive, got {height}x{width}")));
        }
        let expected = panel.count() * height * width;
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "data has {} values, expected {}x{}x{} = {expected}",
                data.len(),
                panel.count(),
                height,
                width
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample value at flat index {i}")));
        }
        Ok(Self { panel, height, width, data })
    }

    pub fn panel(&self) -> &Arc<ChannelPanel> {
        &self.panel
    }

    pub fn channels(&self) -> usize {
        self.panel.count()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height, self.width)
    }
}

/// Partition of the panel into observed (`true`) and missing channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    observed: Vec<bool>,
}

impl ChannelMask {
    pub fn new(observed: Vec<bool>) -> Self {
        Self { observed }
    }

    pub fn all_observed(channels: usize) -> Self {
        Self { observed: vec![true; channels] }
    }

    /// Mask with every channel observed except `missing`.
    pub fn with_missing(channels: usize, missing: &[usize]) -> Self {
        let mut observed = vec![true; channels];
        for &m in missing {
            observed[m] = false;
        }
        Self { observed }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_observed(&self, c: usize) -> bool {
        self.observed[c]
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn missing_count(&self) -> usize {
        self.len() - self.observed_count()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.observed[c]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.observed[c]).collect()
    }

    /// Checks the mask is usable as a condition for a `channels`-channel panel.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.len() != channels {
            return Err(Error::DimMismatch(format!("mask has {} entries, panel has {channels}", self.len())));
        }
        if self.observed_count() == 0 {
            return Err(Error::EmptyObservedSet);
        }
        Ok(())
    }
}

/// Spatially aligned condition: observed channels copied, missing channels
/// zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    mask: ChannelMask,
    unconditional: bool,
}

impl Condition {
    /// The reserved all-zero condition used for unconditional generation.
    pub fn unconditional(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            mask: ChannelMask::new(vec![false; channels]),
            unconditional: true,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    pub fn is_unconditional(&self) -> bool {
        self.unconditional
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Network input planes: the zero-filled data, optionally followed by one
    /// binary indicator plane per channel (1 where observed).
    pub fn input_planes(&self, with_indicators: bool) -> Vec<f32> {
        if !with_indicators {
            return self.data.clone();
        }
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len() * 2);
        out.extend_from_slice(&self.data);
        for c in 0..self.channels {
            let v = if self.mask.is_observed(c) { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat(v).take(n));
        }
        out
    }

    /// View the condition as a sample over `panel`, e.g. to re-apply a mask.
    pub fn as_sample(&self, panel: Arc<ChannelPanel>) -> Result<MultiChannelSample> {
        MultiChannelSample::new(panel, self.height, self.width, self.data.clone())
    }
}

/// Zero-fill the channels of `x` that `mask` marks missing.
pub fn apply_mask(x: &MultiChannelSample, mask: &ChannelMask) -> Result<Condition> {
    mask.validate(x.channels())?;
    let n = x.pixels();
    let mut data = x.data().to_vec();
    for c in mask.missing_indices() {
        data[c * n..(c + 1) * n].fill(0.0);
    }
    Ok(Condition {
        channels: x.channels(),
        height: x.height(),
        width: x.width(),
        data,
        mask: mask.clone(),
        unconditional: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-channel normalization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Upper clip value (the train-split percentile).
    pub clip: f32,
    pub min: f32,
    pub max: f32,
    /// Channel had no spread below the clip value; it is mapped to zeros.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub clip_percentile: f64,
    pub channels: Vec<ChannelStats>,
}

impl NormStats {
    /// Stats that map `[0, 1]` data onto itself.
    pub fn identity(channels: usize) -> Self {
        Self {
            clip_percentile: 1.0,
            channels: vec![ChannelStats { clip: 1.0, min: 0.0, max: 1.0, degenerate: false }; channels],
        }
    }

    pub fn map_value(&self, c: usize, v: f32) -> f32 {
        let s = &self.channels[c];
        if s.degenerate {
            0.0
        } else {
            (v.min(s.clip) - s.min) / (s.clip - s.min)
        }
    }

    /// Maps a normalized value back to raw units (clipped values stay clipped).
    pub fn unmap_value(&self, c: usize, v: f32) -> f32 {
        let s = &self.channels[c];
        if s.degenerate {
            s.min
        } else {
            v * (s.clip - s.min) + s.min
        }
    }
}

/// Samples sharing one panel and spatial shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    panel: Arc<ChannelPanel>,
    height: usize,
    width: usize,
    split: Split,
    samples: Vec<MultiChannelSample>,
    stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        panel: Arc<ChannelPanel>,
        height: usize,
        width: usize,
        split: Split,
        samples: Vec<MultiChannelSample>,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.panel() != &panel {
                return Err(Error::PanelMismatch(format!("sample {i} has a different panel")));
            }
            if s.height() != height || s.width() != width {
                return Err(Error::DimMismatch(format!(
                    "sample {i} is {}x{}, dataset is {height}x{width}",
                    s.height(),
                    s.width()
                )));
            }
        }
        Ok(Self { panel, height, width, split, samples, stats: None })
    }

    /// Builds a dataset from a flat `N x C x H x W` buffer.
    pub fn from_flat(
        panel: Arc<ChannelPanel>,
        height: usize,
        width: usize,
        split: Split,
        flat: Vec<f32>,
    ) -> Result<Self> {
        let per = panel.count() * height * width;
        if per == 0 || flat.len() % per != 0 {
            return Err(Error::DimMismatch(format!("{} values is not a multiple of {per}", flat.len())));
        }
        let samples = flat
            .chunks_exact(per)
            .map(|c| MultiChannelSample::new(panel.clone(), height, width, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(panel, height, width, split, samples)
    }

    pub fn with_stats(mut self, stats: Option<NormStats>) -> Self {
        self.stats = stats;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn panel(&self) -> &Arc<ChannelPanel> {
        &self.panel
    }

    pub fn channels(&self) -> usize {
        self.panel.count()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[MultiChannelSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    /// All values of channel `c`, pooled over samples in sample order.
    pub fn channel_values(&self, c: usize) -> Vec<f32> {
        self.samples.iter().flat_map(|s| s.channel(c).iter().copied()).collect()
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let mut d = self.clone();
        d.samples.truncate(n);
        d
    }

    /// Restricts (and reorders) channels to `indices`.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        let names: Vec<String> = indices.iter().map(|&i| self.panel.names()[i].clone()).collect();
        let panel = Arc::new(ChannelPanel::new(names)?);
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut data = Vec::with_capacity(indices.len() * s.pixels());
                for &i in indices {
                    data.extend_from_slice(s.channel(i));
                }
                MultiChannelSample::new(panel.clone(), self.height, self.width, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = self.stats.as_ref().map(|st| NormStats {
            clip_percentile: st.clip_percentile,
            channels: indices.iter().map(|&i| st.channels[i]).collect(),
        });
        Ok(Self { panel, height: self.height, width: self.width, split: self.split, samples, stats })
    }

    /// Concatenates samples of datasets with identical panel and shape.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidConfig("nothing to concatenate".into()))?;
        let mut samples = Vec::new();
        for p in parts {
            if p.panel != first.panel {
                return Err(Error::PanelMismatch("concatenated datasets differ in panel".into()));
            }
            samples.extend(p.samples.iter().cloned());
        }
        Ok(Self::new(first.panel.clone(), first.height, first.width, first.split, samples)?
            .with_stats(first.stats.clone()))
    }
}

/// Nearest-rank percentile of `values` (`fraction` in `(0, 1]`).
pub fn percentile(values: &[f32], fraction: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = (fraction * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Clips each channel at its `clip_percentile` value and min-max scales it to
/// `[0, 1]`. Statistics come from `d` itself; use [`apply_stats`] to map other
/// splits with the same parameters.
pub fn normalize_per_channel(d: &Dataset, clip_percentile: f64) -> Result<Dataset> {
    if d.is_normalized() {
        return Err(Error::InvalidConfig("dataset is already normalized".into()));
    }
    if !(clip_percentile > 0.5 && clip_percentile <= 1.0) {
        return Err(Error::InvalidConfig(format!("clip percentile {clip_percentile} not in (0.5, 1]")));
    }
    if d.is_empty() {
        return Err(Error::InvalidConfig("cannot normalize an empty dataset".into()));
    }
    let channels = (0..d.channels())
        .map(|c| {
            let values = d.channel_values(c);
            let clip = percentile(&values, clip_percentile);
            let min = values.iter().copied().fold(f32::INFINITY, f32::min);
            let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let degenerate = clip <= min;
            if degenerate {
                log::warn!("channel {} is degenerate (no spread below the clip value); mapped to zeros", d.panel().names()[c]);
            }
            ChannelStats { clip, min, max, degenerate }
        })
        .collect();
    apply_stats(d, &NormStats { clip_percentile, channels })
}

/// Maps raw values through stored statistics.
pub fn apply_stats(d: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.channels.len() != d.channels() {
        return Err(Error::DimMismatch(format!(
            "stats cover {} channels, dataset has {}",
            stats.channels.len(),
            d.channels()
        )));
    }
    let samples = d
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for c in 0..s.channels() {
                for v in s.channel_mut(c) {
                    *v = stats.map_value(c, *v);
                }
            }
            s
        })
        .collect();
    Ok(Dataset { samples, stats: Some(stats.clone()), ..d.clone() })
}

/// Cuts `x` into `size x size` tiles, row-major; partial tiles are dropped.
pub fn tile(x: &MultiChannelSample, size: usize, stride: usize) -> Result<Vec<MultiChannelSample>> {
    if size == 0 || size > x.height() || size > x.width() {
        return Err(Error::SizeTooLarge { size, height: x.height(), width: x.width() });
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("tile stride must be at least 1".into()));
    }
    let mut tiles = Vec::new();
    let mut top = 0;
    while top + size <= x.height() {
        let mut left = 0;
        while left + size <= x.width() {
            let mut data = Vec::with_capacity(x.channels() * size * size);
            for c in 0..x.channels() {
                let plane = x.channel(c);
                for r in top..top + size {
                    data.extend_from_slice(&plane[r * x.width() + left..r * x.width() + left + size]);
                }
            }
            tiles.push(MultiChannelSample::new(x.panel().clone(), size, size, data)?);
            left += stride;
        }
        top += stride;
    }
    Ok(tiles)
}

/// Reassembles a row-major grid of equally sized, non-overlapping tiles.
pub fn assemble(tiles: &[MultiChannelSample], rows: usize, cols: usize) -> Result<MultiChannelSample> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::DimMismatch(format!("{} tiles for a {rows}x{cols} grid", tiles.len())));
    }
    let (ch, th, tw) = tiles[0].shape();
    let (height, width) = (th * rows, tw * cols);
    let mut data = vec![0.0f32; ch * height * width];
    for (k, t) in tiles.iter().enumerate() {
        if t.shape() != (ch, th, tw) {
            return Err(Error::DimMismatch("tiles differ in shape".into()));
        }
        let (gr, gc) = (k / cols, k % cols);
        for c in 0..ch {
            let src = t.channel(c);
            for r in 0..th {
                let dst = c * height * width + (gr * th + r) * width + gc * tw;
                data[dst..dst + tw].copy_from_slice(&src[r * tw..(r + 1) * tw]);
            }
        }
    }
    MultiChannelSample::new(tiles[0].panel().clone(), height, width, data)
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"MCT1";
pub const CONTAINER_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 4096;

/// Writes `d` as an `MCT1` container.
///
/// Layout (little-endian): magic `MCT1`; `u32` version, N, C, H, W; C
/// length-prefixed (`u32`) UTF-8 names; `u8` split tag; `u8` stats flag, and
/// when set an `f64` clip percentile followed by `(f32 clip, f32 min, f32 max,
/// u8 degenerate)` per channel; then `N*C*H*W` `f32` values, sample-major then
/// channel-major.
pub fn write_container(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if d.is_empty() {
        return Err(Error::InvalidConfig("refusing to write an empty dataset".into()));
    }
    let file = File::create(path).map_err(|e| Error::disk(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes);
    let io = |e| Error::disk(path, e);
    put(CONTAINER_MAGIC).map_err(io)?;
    for v in [CONTAINER_VERSION, d.len() as u32, d.channels() as u32, d.height() as u32, d.width() as u32] {
        put(&v.to_le_bytes()).map_err(io)?;
    }
    for name in d.panel().names() {
        put(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        put(name.as_bytes()).map_err(io)?;
    }
    put(&[d.split().tag()]).map_err(io)?;
    match d.stats() {
        None => put(&[0]).map_err(io)?,
        Some(st) => {
            put(&[1]).map_err(io)?;
            put(&st.clip_percentile.to_le_bytes()).map_err(io)?;
            for c in &st.channels {
                put(&c.clip.to_le_bytes()).map_err(io)?;
                put(&c.min.to_le_bytes()).map_err(io)?;
                put(&c.max.to_le_bytes()).map_err(io)?;
                put(&[c.degenerate as u8]).map_err(io)?;
            }
        }
    }
    for s in d.samples() {
        for v in s.data() {
            put(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct ByteReader<R> {
    inner: R,
    what: String,
}

impl<R: Read> ByteReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(self.what.clone()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::disk(path, e))?;
    let mut r = ByteReader { inner: BufReader::new(file), what: path.display().to_string() };
    if r.bytes(4).map_err(|_| Error::BadMagic(path.to_path_buf()))? != CONTAINER_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        // A name block shorter than declared shows up as an implausible
        // length prefix or non-text bytes where the next name should be.
        let len = r.u32()? as usize;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::PanelCountMismatch { declared: c, found: i });
        }
        match String::from_utf8(r.bytes(len)?) {
            Ok(s) if !s.chars().any(char::is_control) => names.push(s),
            _ => return Err(Error::PanelCountMismatch { declared: c, found: i }),
        }
    }
    let split_tag = r.u8()?;
    let split = Split::from_tag(split_tag)
        .ok_or_else(|| Error::TruncatedFile(format!("{}: bad split tag {split_tag}", r.what)))?;
    let stats = match r.u8()? {
        0 => None,
        1 => {
            let clip_percentile = r.f64()?;
            let mut channels = Vec::with_capacity(c);
            for _ in 0..c {
                let clip = r.f32()?;
                let min = r.f32()?;
                let max = r.f32()?;
                let degenerate = r.u8()? != 0;
                channels.push(ChannelStats { clip, min, max, degenerate });
            }
            Some(NormStats { clip_percentile, channels })
        }
        other => return Err(Error::TruncatedFile(format!("{}: bad stats flag {other}", r.what))),
    };
    let panel = Arc::new(ChannelPanel::new(names)?);
    let per = c * h * w;
    let raw = r.bytes(n * per * 4)?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::DimMismatch(format!("{}: trailing bytes after {n} samples", r.what)));
    }
    let flat: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Dataset::from_flat(panel, h, w, split, flat)?.with_stats(stats))
}

/// One container referenced by a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub split: Split,
    pub samples: usize,
}

/// JSON description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<ManifestFile>,
    /// How the splits were formed and which split the statistics come from.
    pub split: String,
    pub panel: ChannelPanel,
    pub height: usize,
    pub width: usize,
    pub normalization: Option<NormStats>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes one container per split plus `manifest.json` into `dir`.
pub fn write_dataset_dir(dir: impl AsRef<Path>, parts: &[&Dataset], split_note: &str) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::disk(dir, e))?;
    let first = parts.first().ok_or_else(|| Error::InvalidConfig("no datasets to write".into()))?;
    let mut files = Vec::new();
    for d in parts {
        if d.panel() != first.panel() {
            return Err(Error::PanelMismatch("splits differ in panel".into()));
        }
        let name = format!("{}.mct", d.split().as_str());
        write_container(d, dir.join(&name))?;
        files.push(ManifestFile { path: name, split: d.split(), samples: d.len() });
    }
    let manifest = DatasetManifest {
        files,
        split: split_note.to_string(),
        panel: (**first.panel()).clone(),
        height: first.height(),
        width: first.width(),
        normalization: first.stats().cloned(),
    };
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::disk(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::disk(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the container of `split` listed in the manifest of `dir`.
pub fn read_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let file = manifest
        .files
        .iter()
        .find(|f| f.split == split)
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no {} split", dir.display(), split.as_str())))?;
    read_container(dir.join(&file.path))
}

pub fn container_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.mct", split.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(c: usize) -> Arc<ChannelPanel> {
        Arc::new(ChannelPanel::new((0..c).map(|i| format!("CH{i}"))).unwrap())
    }

    fn ramp(c: usize, h: usize, w: usize) -> MultiChannelSample {
        let data = (0..c * h * w).map(|i| i as f32 * 0.5 + 1.0).collect();
        MultiChannelSample::new(panel(c), h, w, data).unwrap()
    }

    #[test]
    fn panel_rejects_duplicates_and_empty() {
        assert!(ChannelPanel::new(["A", "A"]).is_err());
        assert!(ChannelPanel::new([""]).is_err());
        assert!(ChannelPanel::new(Vec::<String>::new()).is_err());
        let p = ChannelPanel::new(["A", "B"]).unwrap();
        assert_eq!(p.index_of("B"), Some(1));
        assert!(matches!(p.indices_of(&["C"]), Err(Error::UnknownChannel(_))));
    }

    #[test]
    fn sample_rejects_non_finite() {
        let r = MultiChannelSample::new(panel(1), 1, 2, vec![0.0, f32::NAN]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_all_observed_is_identity() {
        let x = ramp(3, 4, 4);
        let c = apply_mask(&x, &ChannelMask::all_observed(3)).unwrap();
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn mask_all_missing_is_rejected() {
        let x = ramp(3, 2, 2);
        let r = apply_mask(&x, &ChannelMask::new(vec![false; 3]));
        assert!(matches!(r, Err(Error::EmptyObservedSet)));
        let r = apply_mask(&x, &ChannelMask::all_observed(2));
        assert!(matches!(r, Err(Error::DimMismatch(_))));
    }

    #[test]
    fn masked_channel_is_zeroed_others_untouched() {
        let x = ramp(3, 2, 2);
        let c = apply_mask(&x, &ChannelMask::new(vec![true, false, true])).unwrap();
        assert!(c.data()[4..8].iter().all(|&v| v == 0.0));
        assert_eq!(&c.data()[0..4], x.channel(0));
        assert_eq!(&c.data()[8..12], x.channel(2));
    }

    #[test]
    fn indicator_planes_follow_mask() {
        let x = ramp(2, 1, 2);
        let c = apply_mask(&x, &ChannelMask::new(vec![false, true])).unwrap();
        let planes = c.input_planes(true);
        assert_eq!(planes.len(), 8);
        assert_eq!(&planes[4..], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(c.input_planes(false), c.data());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f32> = (0..100).map(|i| i as f32).collect();
        assert_eq!(percentile(&v, 0.99), 98.0);
        assert_eq!(percentile(&v, 1.0), 99.0);
        assert_eq!(percentile(&v, 0.51), 50.0);
    }

    #[test]
    fn normalization_clips_and_scales() {
        let p = Arc::new(ChannelPanel::new(["A", "CONST"]).unwrap());
        let mut flat = Vec::new();
        flat.extend((0..100).map(|i| i as f32));
        flat.extend(std::iter::repeat(3.0).take(100));
        let d = Dataset::from_flat(p, 10, 10, Split::Train, flat).unwrap();
        let n = normalize_per_channel(&d, 0.99).unwrap();
        let st = n.stats().unwrap();
        // Sort-based nearest-rank oracle: the 99th of 100 sorted values.
        let mut sorted: Vec<f32> = (0..100).map(|i| i as f32).collect();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(st.channels[0].clip, sorted[98]);
        let a = n.samples()[0].channel(0);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[98], 1.0);
        assert_eq!(a[99], 1.0);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(st.channels[1].degenerate);
        assert!(n.samples()[0].channel(1).iter().all(|&v| v == 0.0));
        assert!(normalize_per_channel(&n, 0.99).is_err());
        assert!(normalize_per_channel(&d, 0.5).is_err());
    }

    #[test]
    fn identity_stats_are_a_fixed_point() {
        let p = panel(1);
        let flat: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let d = Dataset::from_flat(p, 4, 4, Split::Test, flat.clone()).unwrap();
        let n = apply_stats(&d, &NormStats::identity(1)).unwrap();
        assert_eq!(n.samples()[0].data(), &flat[..]);
    }

    #[test]
    fn stored_stats_reproduce_the_mapping() {
        let p = panel(2);
        let flat: Vec<f32> = (0..2 * 2 * 16).map(|i| ((i * 37) % 23) as f32).collect();
        let d = Dataset::from_flat(p, 4, 4, Split::Train, flat).unwrap();
        let n = normalize_per_channel(&d, 0.9).unwrap();
        let again = apply_stats(&d.clone().with_split(Split::Test), n.stats().unwrap()).unwrap();
        assert_eq!(again.samples(), n.samples());
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile(&ramp(1, 64, 64), 64, 64).unwrap().len(), 1);
        assert_eq!(tile(&ramp(1, 16, 16), 8, 8).unwrap().len(), 4);
        assert_eq!(tile(&ramp(1, 17, 17), 8, 8).unwrap().len(), 4);
        assert_eq!(tile(&ramp(1, 16, 16), 8, 4).unwrap().len(), 9);
        assert!(matches!(tile(&ramp(1, 8, 16), 9, 9), Err(Error::SizeTooLarge { .. })));
    }

    #[test]
    fn tile_then_assemble_roundtrips() {
        let x = ramp(3, 12, 8);
        let tiles = tile(&x, 4, 4).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(assemble(&tiles, 3, 2).unwrap(), x);
    }

    fn sample_dataset() -> Dataset {
        let p = panel(8);
        let flat: Vec<f32> = (0..4 * 8 * 16 * 16).map(|i| (i as f32).sin() * 3.0).collect();
        let d = Dataset::from_flat(p, 16, 16, Split::Train, flat).unwrap();
        normalize_per_channel(&d, 0.99).unwrap()
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mct");
        let d = sample_dataset();
        write_container(&d, &path).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.samples().iter().zip(d.samples()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_mask(c: usize) -> impl Strategy<Value = ChannelMask> {
            prop::collection::vec(any::<bool>(), c)
                .prop_filter("at least one observed", |b| b.iter().any(|&o| o))
                .prop_map(ChannelMask::new)
        }

        proptest! {
            #[test]
            fn masking_is_idempotent(seed in 0u32..1000, m in any_mask(5)) {
                let data: Vec<f32> = (0..5 * 3 * 2).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 7.0).collect();
                let x = MultiChannelSample::new(panel(5), 3, 2, data).unwrap();
                let once = apply_mask(&x, &m).unwrap();
                let as_sample = MultiChannelSample::new(panel(5), 3, 2, once.data().to_vec()).unwrap();
                let twice = apply_mask(&as_sample, &m).unwrap();
                prop_assert_eq!(twice.data(), once.data());
            }

            #[test]
            fn container_roundtrip_for_any_finite_payload(
                bits in prop::collection::vec(any::<u32>().prop_filter("finite", |b| f32::from_bits(*b).is_finite()), 12),
                specials in prop::collection::vec(prop::sample::select(vec![0.0f32, -0.0, f32::MIN_POSITIVE / 2.0, -1e-45, f32::MAX]), 12),
            ) {
                let mut flat: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                flat.extend(specials);
                let d = Dataset::from_flat(panel(2), 3, 2, Split::Val, flat.clone()).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("p.mct");
                write_container(&d, &path).unwrap();
                let back = read_container(&path).unwrap();
                let got: Vec<u32> = back.samples().iter().flat_map(|s| s.data().iter().map(|v| v.to_bits())).collect();
                let want: Vec<u32> = flat.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(got, want);
                prop_assert_eq!(back.split(), Split::Val);
            }

            #[test]
            fn exact_tiles_reassemble(c in 1usize..4, size in 1usize..5, rows in 1usize..4, cols in 1usize..4) {
                let x = ramp(c, size * rows, size * cols);
                let tiles = tile(&x, size, size).unwrap();
                prop_assert_eq!(tiles.len(), rows * cols);
                prop_assert_eq!(assemble(&tiles, rows, cols).unwrap(), x);
            }

            #[test]
            fn normalized_train_values_lie_in_unit_interval(
                vals in prop::collection::vec(-1e4f32..1e4, 32),
                q in 0.51f64..=1.0,
            ) {
                let d = Dataset::from_flat(panel(2), 4, 2, Split::Train, vals).unwrap();
                let n = normalize_per_channel(&d, q).unwrap();
                for s in n.samples() {
                    prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn container_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mct");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_container(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn container_rejects_short_names_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mct");
        write_container(&sample_dataset().truncated(1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Drop the last name ("CH7") together with its length prefix.
        let mut names_end = 24;
        for _ in 0..8 {
            let len = u32::from_le_bytes(bytes[names_end..names_end + 4].try_into().unwrap()) as usize;
            names_end += 4 + len;
        }
        let mut cut = bytes[..names_end - 7].to_vec();
        cut.extend_from_slice(&bytes[names_end..]);
        std::fs::write(&path, cut).unwrap();
        assert!(matches!(read_container(&path), Err(Error::PanelCountMismatch { declared: 8, .. })));
    }

    #[test]
    fn container_rejects_truncation_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mct");
        write_container(&sample_dataset(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::TruncatedFile(_))));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        std::fs::write(&path, v2).unwrap();
        assert!(matches!(read_container(&path), Err(Error::VersionUnsupported(9))));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let train = sample_dataset();
        let test = train.clone().with_split(Split::Test);
        write_dataset_dir(dir.path(), &[&train, &test], "synthetic").unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.files.len(), 2);
        assert_eq!(m.panel.count(), 8);
        assert_eq!(read_split(dir.path(), Split::Test).unwrap(), test);
    }
}
