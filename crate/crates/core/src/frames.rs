//! Bit-packed binary frame container and the `SPF1` on-disk format.
//!
//! Layout of an `SPF1` file:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPF1" (0x53 0x50 0x46 0x31)
//! 4       2     height   (u16, little endian)
//! 6       2     width    (u16, little endian)
//! 8       8     n_frames (u64, little endian)
//! 16      ...   frames, each ceil(width*height/8) bytes
//! ```
//!
//! Pixels are numbered row-major (`index = y * width + x`) and packed
//! least-significant-bit first: pixel `p` lives in bit `p % 8` of byte `p / 8`
//! of its frame. Rows are not padded individually, only whole frames.
//!
//! A sidecar `<path>.meta` holds `pixel_pitch`, `exposure` and `source_tag` as
//! `key=value` lines so the payload stays a plain frame stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SPF1";
pub const HEADER_LEN: u64 = 16;

/// Pixel layout and timing of a binary single-photon sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorGeometry {
    pub width: usize,
    pub height: usize,
    /// Pixel pitch in micrometres.
    pub pixel_pitch: f64,
    /// Exposure time in nanoseconds.
    pub exposure: f64,
}

impl SensorGeometry {
    pub fn new(width: usize, height: usize, pixel_pitch: f64, exposure: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Geometry(format!(
                "sensor must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::Geometry(format!("pixel pitch must be > 0, got {pixel_pitch}")));
        }
        if !(exposure > 0.0 && exposure.is_finite()) {
            return Err(Error::Geometry(format!("exposure must be > 0, got {exposure}")));
        }
        Ok(Self {
            width,
            height,
            pixel_pitch,
            exposure,
        })
    }

    /// The 64x32 array with 150 µm pitch operated at a 10 ns exposure.
    pub fn paper() -> Self {
        Self {
            width: 64,
            height: 32,
            pixel_pitch: 150.0,
            exposure: 10.0,
        }
    }

    /// Square test sensor with unit pitch.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side, 1.0, 1.0)
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn frame_bytes(&self) -> usize {
        self.n_pixels().div_ceil(8)
    }

    #[inline]
    pub fn coords(&self, pixel: usize) -> (usize, usize) {
        (pixel % self.width, pixel / self.width)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Two geometries describe the same pixel grid (timing may differ).
    pub fn same_grid(&self, other: &SensorGeometry) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Total byte length of an `SPF1` file holding `n_frames` frames.
    pub fn encoded_len(&self, n_frames: u64) -> u64 {
        HEADER_LEN + n_frames * self.frame_bytes() as u64
    }
}

/// One packed frame borrowed from a [`FrameSet`].
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    bytes: &'a [u8],
    n_pixels: usize,
}

impl<'a> Frame<'a> {
    pub fn new(bytes: &'a [u8], n_pixels: usize) -> Self {
        debug_assert_eq!(bytes.len(), n_pixels.div_ceil(8));
        Self { bytes, n_pixels }
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> bool {
        pixel < self.n_pixels && (self.bytes[pixel >> 3] >> (pixel & 7)) & 1 == 1
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.bytes
    }

    /// Appends the indices of lit pixels, ascending, to `out`.
    pub fn lit_pixels_into(&self, out: &mut Vec<u32>) {
        let mut base = 0u32;
        let mut words = self.bytes.chunks_exact(8);
        for w in &mut words {
            let mut word = u64::from_le_bytes(w.try_into().unwrap());
            while word != 0 {
                out.push(base + word.trailing_zeros());
                word &= word - 1;
            }
            base += 64;
        }
        for &b in words.remainder() {
            let mut byte = b;
            while byte != 0 {
                out.push(base + byte.trailing_zeros());
                byte &= byte - 1;
            }
            base += 8;
        }
        // padding bits past the last pixel are ignored
        while out.last().is_some_and(|&p| p as usize >= self.n_pixels) {
            out.pop();
        }
    }

    pub fn lit_pixels(&self) -> Vec<u32> {
        let mut v = Vec::new();
        self.lit_pixels_into(&mut v);
        v
    }

    pub fn lit_count(&self) -> usize {
        let full: u32 = self.bytes.iter().map(|b| b.count_ones()).sum();
        let pad = self.bytes.len() * 8 - self.n_pixels;
        if pad == 0 {
            return full as usize;
        }
        let last = self.bytes[self.bytes.len() - 1];
        let pad_bits = (last >> (8 - pad)).count_ones();
        (full - pad_bits) as usize
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.n_pixels).map(|p| self.get(p)).collect()
    }
}

/// Packs a pixel vector into frame bytes.
pub fn pack_pixels(pixels: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len().div_ceil(8)];
    for (p, _) in pixels.iter().enumerate().filter(|(_, &on)| on) {
        out[p >> 3] |= 1 << (p & 7);
    }
    out
}

/// A sequence of binary frames sharing one sensor geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    geometry: SensorGeometry,
    n_frames: usize,
    payload: Vec<u8>,
    pub source_tag: String,
}

impl FrameSet {
    pub fn new(geometry: SensorGeometry, source_tag: impl Into<String>) -> Self {
        Self {
            geometry,
            n_frames: 0,
            payload: Vec::new(),
            source_tag: source_tag.into(),
        }
    }

    pub fn from_payload(
        geometry: SensorGeometry,
        n_frames: usize,
        payload: Vec<u8>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let expected = n_frames * geometry.frame_bytes();
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                actual: payload.len() as u64,
            });
        }
        let mut set = Self {
            geometry,
            n_frames,
            payload,
            source_tag: source_tag.into(),
        };
        set.clear_padding();
        Ok(set)
    }

    /// Builds a frame set from per-frame pixel vectors (row-major).
    pub fn from_pixel_frames(
        geometry: SensorGeometry,
        frames: &[Vec<bool>],
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let mut set = Self::new(geometry, source_tag);
        for f in frames {
            set.push_pixels(f)?;
        }
        Ok(set)
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn frame(&self, index: usize) -> Frame<'_> {
        let fb = self.geometry.frame_bytes();
        Frame::new(
            &self.payload[index * fb..(index + 1) * fb],
            self.geometry.n_pixels(),
        )
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Frame<'_>> + '_ {
        let n = self.geometry.n_pixels();
        self.payload
            .chunks_exact(self.geometry.frame_bytes())
            .map(move |b| Frame::new(b, n))
    }

    pub fn push_packed(&mut self, bytes: &[u8]) -> Result<()> {
        let fb = self.geometry.frame_bytes();
        if bytes.len() != fb {
            return Err(Error::GeometryMismatch(format!(
                "frame of {} bytes pushed into a set with {fb}-byte frames",
                bytes.len()
            )));
        }
        self.payload.extend_from_slice(bytes);
        self.n_frames += 1;
        let last = self.payload.len() - 1;
        self.payload[last] &= self.padding_mask();
        Ok(())
    }

    pub fn push_pixels(&mut self, pixels: &[bool]) -> Result<()> {
        if pixels.len() != self.geometry.n_pixels() {
            return Err(Error::GeometryMismatch(format!(
                "frame of {} pixels pushed into a {}x{} set",
                pixels.len(),
                self.geometry.width,
                self.geometry.height
            )));
        }
        self.payload.extend_from_slice(&pack_pixels(pixels));
        self.n_frames += 1;
        Ok(())
    }

    /// Appends all frames of `other`.
    pub fn extend(&mut self, other: &FrameSet) -> Result<()> {
        if !self.geometry.same_grid(&other.geometry) {
            return Err(Error::GeometryMismatch(format!(
                "cannot append {}x{} frames to {}x{}",
                other.geometry.width, other.geometry.height, self.geometry.width, self.geometry.height
            )));
        }
        self.payload.extend_from_slice(&other.payload);
        self.n_frames += other.n_frames;
        Ok(())
    }

    /// Copies frames `range` into a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FrameSet {
        let fb = self.geometry.frame_bytes();
        let end = range.end.min(self.n_frames);
        let start = range.start.min(end);
        FrameSet {
            geometry: self.geometry,
            n_frames: end - start,
            payload: self.payload[start * fb..end * fb].to_vec(),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Mask keeping only the real pixels of the final byte of a frame.
    fn padding_mask(&self) -> u8 {
        match self.geometry.n_pixels() % 8 {
            0 => 0xff,
            r => (1u8 << r) - 1,
        }
    }

    fn clear_padding(&mut self) {
        let mask = self.padding_mask();
        if mask == 0xff {
            return;
        }
        let fb = self.geometry.frame_bytes();
        for f in self.payload.chunks_exact_mut(fb) {
            f[fb - 1] &= mask;
        }
    }
}

/// Sidecar metadata stored next to an `SPF1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMeta {
    pub pixel_pitch: f64,
    pub exposure: f64,
    pub source_tag: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn escape_tag(tag: &str) -> String {
    tag.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_tag(tag: &str) -> String {
    let mut out = String::with_capacity(tag.len());
    let mut chars = tag.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_meta(path: &Path, meta: &FrameMeta) -> Result<()> {
    let text = format!(
        "pixel_pitch={}\nexposure={}\nsource_tag={}\n",
        meta.pixel_pitch,
        meta.exposure,
        escape_tag(&meta.source_tag)
    );
    let mp = meta_path(path);
    std::fs::write(&mp, text).map_err(|e| Error::io(mp, e))
}

pub fn read_meta(path: &Path) -> Result<Option<FrameMeta>> {
    let mp = meta_path(path);
    let text = match std::fs::read_to_string(&mp) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(mp, e)),
    };
    let mut pitch = None;
    let mut exposure = None;
    let mut tag = String::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("{}: bad value for {k}: {v:?}", mp.display())))
        };
        match k.trim() {
            "pixel_pitch" => pitch = Some(parse(v)?),
            "exposure" => exposure = Some(parse(v)?),
            "source_tag" => tag = unescape_tag(v),
            _ => {}
        }
    }
    match (pitch, exposure) {
        (Some(pixel_pitch), Some(exposure)) => Ok(Some(FrameMeta {
            pixel_pitch,
            exposure,
            source_tag: tag,
        })),
        _ => Err(Error::Parse(format!(
            "{}: pixel_pitch and exposure are required",
            mp.display()
        ))),
    }
}

/// Streaming `SPF1` writer. The frame count in the header is patched on
/// [`FrameWriter::finish`].
pub struct FrameWriter {
    out: BufWriter<File>,
    path: PathBuf,
    geometry: SensorGeometry,
    written: u64,
}

impl FrameWriter {
    pub fn create(path: &Path, geometry: SensorGeometry, source_tag: &str) -> Result<Self> {
        let (w, h) = (geometry.width, geometry.height);
        if w > u16::MAX as usize || h > u16::MAX as usize {
            return Err(Error::Geometry(format!(
                "{w}x{h} exceeds the u16 range of the SPF1 header"
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let mut header = [0u8; HEADER_LEN as usize];
        header[..4].copy_from_slice(&MAGIC);
        header[4..6].copy_from_slice(&(h as u16).to_le_bytes());
        header[6..8].copy_from_slice(&(w as u16).to_le_bytes());
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        write_meta(
            path,
            &FrameMeta {
                pixel_pitch: geometry.pixel_pitch,
                exposure: geometry.exposure,
                source_tag: source_tag.to_string(),
            },
        )?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
            geometry,
            written: 0,
        })
    }

    pub fn write_set(&mut self, frames: &FrameSet) -> Result<()> {
        if !self.geometry.same_grid(frames.geometry()) {
            return Err(Error::GeometryMismatch(
                "frame set geometry differs from the writer's".into(),
            ));
        }
        self.out
            .write_all(frames.payload())
            .map_err(|e| Error::io(&self.path, e))?;
        self.written += frames.n_frames() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        self.out.flush().map_err(io)?;
        let mut file = self.out.into_inner().map_err(|e| io(e.into_error()))?;
        file.seek(SeekFrom::Start(8)).map_err(io)?;
        file.write_all(&self.written.to_le_bytes()).map_err(io)?;
        file.sync_data().ok();
        Ok(self.written)
    }
}

pub fn write_frames(path: &Path, frames: &FrameSet) -> Result<()> {
    let mut w = FrameWriter::create(path, *frames.geometry(), &frames.source_tag)?;
    w.write_set(frames)?;
    w.finish()?;
    Ok(())
}

/// Header-validated reader over an `SPF1` file.
pub struct FrameReader {
    input: BufReader<File>,
    path: PathBuf,
    geometry: SensorGeometry,
    n_frames: u64,
    delivered: u64,
    source_tag: String,
}

impl FrameReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut input = BufReader::with_capacity(1 << 20, file);
        if actual < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual,
            });
        }
        let mut header = [0u8; HEADER_LEN as usize];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::io(path, e))?;
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let height = u16::from_le_bytes([header[4], header[5]]) as usize;
        let width = u16::from_le_bytes([header[6], header[7]]) as usize;
        let n_frames = u64::from_le_bytes(header[8..16].try_into().unwrap());

        let meta = read_meta(path)?;
        let (pitch, exposure, tag) = match meta {
            Some(m) => (m.pixel_pitch, m.exposure, m.source_tag),
            None => {
                let p = SensorGeometry::paper();
                log::warn!(
                    "{}: no .meta sidecar, assuming {} µm pitch and {} ns exposure",
                    path.display(),
                    p.pixel_pitch,
                    p.exposure
                );
                (p.pixel_pitch, p.exposure, String::new())
            }
        };
        let geometry = SensorGeometry::new(width, height, pitch, exposure)?;
        let expected = geometry.encoded_len(n_frames);
        if actual != expected {
            return Err(Error::Truncated { expected, actual });
        }
        Ok(Self {
            input,
            path: path.to_path_buf(),
            geometry,
            n_frames,
            delivered: 0,
            source_tag: tag,
        })
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn n_frames(&self) -> u64 {
        self.n_frames
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Reads up to `max_frames` frames; `None` at end of file.
    pub fn next_chunk(&mut self, max_frames: usize) -> Option<Result<FrameSet>> {
        let remaining = self.n_frames - self.delivered;
        if remaining == 0 || max_frames == 0 {
            return None;
        }
        let n = (max_frames as u64).min(remaining) as usize;
        let mut buf = vec![0u8; n * self.geometry.frame_bytes()];
        if let Err(e) = self.input.read_exact(&mut buf) {
            self.delivered = self.n_frames;
            return Some(Err(if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated {
                    expected: self.geometry.encoded_len(self.n_frames),
                    actual: self.geometry.encoded_len(self.delivered),
                }
            } else {
                Error::io(&self.path, e)
            }));
        }
        self.delivered += n as u64;
        Some(FrameSet::from_payload(
            self.geometry,
            n,
            buf,
            self.source_tag.clone(),
        ))
    }

    pub fn chunks(self, chunk_size: usize) -> FrameChunks {
        FrameChunks {
            reader: self,
            chunk_size: chunk_size.max(1),
        }
    }
}

/// Iterator of frame chunks in file order.
pub struct FrameChunks {
    reader: FrameReader,
    chunk_size: usize,
}

impl FrameChunks {
    pub fn geometry(&self) -> &SensorGeometry {
        self.reader.geometry()
    }

    pub fn n_frames(&self) -> u64 {
        self.reader.n_frames()
    }
}

impl Iterator for FrameChunks {
    type Item = Result<FrameSet>;

    fn next(&mut self) -> Option<Self::Item> {
        self.reader.next_chunk(self.chunk_size)
    }
}

pub fn stream_frames(path: &Path, chunk_size: usize) -> Result<FrameChunks> {
    Ok(FrameReader::open(path)?.chunks(chunk_size))
}

/// Reads a whole file into memory.
pub fn read_frames(path: &Path) -> Result<FrameSet> {
    let mut chunks = stream_frames(path, usize::MAX)?;
    let geometry = *chunks.geometry();
    let tag = chunks.reader.source_tag.clone();
    match chunks.next() {
        Some(set) => set,
        None => Ok(FrameSet::new(geometry, tag)),
    }
}
