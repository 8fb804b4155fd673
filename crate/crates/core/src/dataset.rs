//! Scene files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! file    := "DGK1" version:u16 record*
//! record  := len:u32 payload[len]
//! payload := scene_id:u64 tick:f64 frame target_kind:u8
//!            H:u32 state[H]
//!            n:u32 track[n]                    nearby
//!            m:u32 polyline[m]
//!            k:u32 polygon[k]                  drivable area
//!            has_future:u8 [T:u32 vec2[T]]
//!            f:u32 track[f]                    nearby futures
//! frame   := origin:vec2 heading:f64
//! state   := position:vec2 heading:f64 velocity:vec2 acceleration:vec2 valid:u8
//! track   := id:u32 kind:u8 length:f64 width:f64 s:u32 state[s]
//! polyline:= id:u32 semantic:u8 p:u32 vec2[p]
//! polygon := p:u32 vec2[p]
//! vec2    := x:f64 y:f64
//! ```
//!
//! Readers stream one record at a time; errors carry the byte offset of the
//! offending record.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

use crate::geometry::{Frame, Polygon, Vec2};
use crate::scene::{AgentKind, AgentState, AgentTrack, MapSemantic, Polyline, Scene};

pub const MAGIC: &[u8; 4] = b"DGK1";
pub const VERSION: u16 = 1;
const HEADER_LEN: u64 = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported version {version} at offset {offset}")]
    BadVersion { offset: u64, version: u16 },
    #[error("truncated record at offset {offset}")]
    Truncated { offset: u64 },
    #[error("corrupt record at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("scene index {index} out of range ({len} scenes)")]
    OutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Other(String),
}

/// Random access to scenes by index.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;
    fn scene(&self, index: usize) -> Result<Scene, DataError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for [Scene] {
    fn len(&self) -> usize {
        <[Scene]>::len(self)
    }

    fn scene(&self, index: usize) -> Result<Scene, DataError> {
        self.get(index).cloned().ok_or(DataError::OutOfRange { index, len: <[Scene]>::len(self) })
    }
}

impl SceneSource for Vec<Scene> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene(&self, index: usize) -> Result<Scene, DataError> {
        self.as_slice().scene(index)
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec2(&mut self, v: Vec2) {
        self.f64(v.x);
        self.f64(v.y);
    }
    fn state(&mut self, s: &AgentState) {
        self.vec2(s.position);
        self.f64(s.heading);
        self.vec2(s.velocity);
        self.vec2(s.acceleration);
        self.u8(s.valid as u8);
    }
    fn track(&mut self, t: &AgentTrack) {
        self.u32(t.id as usize);
        self.u8(t.kind.code());
        self.f64(t.length);
        self.f64(t.width);
        self.u32(t.states.len());
        t.states.iter().for_each(|s| self.state(s));
    }
    fn points(&mut self, pts: &[Vec2]) {
        self.u32(pts.len());
        pts.iter().for_each(|&p| self.vec2(p));
    }
}

/// Serializes one scene payload (without the length prefix).
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut e = Enc(Vec::with_capacity(4096));
    e.u64(scene.scene_id);
    e.f64(scene.tick_duration);
    e.vec2(scene.frame.origin);
    e.f64(scene.frame.heading);
    e.u8(scene.target_kind.code());
    e.u32(scene.target_history.len());
    scene.target_history.iter().for_each(|s| e.state(s));
    e.u32(scene.nearby.len());
    scene.nearby.iter().for_each(|t| e.track(t));
    e.u32(scene.map.len());
    for p in &scene.map {
        e.u32(p.id as usize);
        e.u8(p.semantic.code());
        e.points(&p.points);
    }
    e.u32(scene.drivable_area.len());
    scene.drivable_area.iter().for_each(|p| e.points(&p.points));
    match &scene.future_gt {
        Some(f) => {
            e.u8(1);
            e.points(f);
        }
        None => e.u8(0),
    }
    e.u32(scene.nearby_future.len());
    scene.nearby_future.iter().for_each(|t| e.track(t));
    e.0
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

type DecResult<T> = Result<T, String>;

impl Dec<'_> {
    fn take(&mut self, n: usize) -> DecResult<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format!("payload ends at byte {} while reading {n} bytes", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> DecResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> DecResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn count(&mut self, min_item: usize) -> DecResult<usize> {
        let n = self.u32()?;
        if n.saturating_mul(min_item) > self.buf.len() - self.pos {
            return Err(format!("count {n} exceeds remaining payload"));
        }
        Ok(n)
    }
    fn u64(&mut self) -> DecResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> DecResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn vec2(&mut self) -> DecResult<Vec2> {
        Ok(Vec2::new(self.f64()?, self.f64()?))
    }
    fn state(&mut self) -> DecResult<AgentState> {
        Ok(AgentState {
            position: self.vec2()?,
            heading: self.f64()?,
            velocity: self.vec2()?,
            acceleration: self.vec2()?,
            valid: match self.u8()? {
                0 => false,
                1 => true,
                v => return Err(format!("validity byte {v}")),
            },
        })
    }
    fn track(&mut self) -> DecResult<AgentTrack> {
        let id = self.u32()? as u32;
        let kind = AgentKind::from_code(self.u8()?).ok_or("unknown agent kind")?;
        let length = self.f64()?;
        let width = self.f64()?;
        let n = self.count(57)?;
        let states = (0..n).map(|_| self.state()).collect::<DecResult<_>>()?;
        Ok(AgentTrack { id, kind, length, width, states })
    }
    fn points(&mut self) -> DecResult<Vec<Vec2>> {
        let n = self.count(16)?;
        (0..n).map(|_| self.vec2()).collect()
    }
}

/// Parses one scene payload.
pub fn decode_scene(payload: &[u8]) -> Result<Scene, String> {
    let mut d = Dec { buf: payload, pos: 0 };
    let scene_id = d.u64()?;
    let tick_duration = d.f64()?;
    let origin = d.vec2()?;
    let heading = d.f64()?;
    let target_kind = AgentKind::from_code(d.u8()?).ok_or("unknown target kind")?;
    let h = d.count(57)?;
    let target_history = (0..h).map(|_| d.state()).collect::<DecResult<_>>()?;
    let n = d.count(25)?;
    let nearby = (0..n).map(|_| d.track()).collect::<DecResult<_>>()?;
    let m = d.count(9)?;
    let map = (0..m)
        .map(|_| {
            let id = d.u32()? as u32;
            let semantic = MapSemantic::from_code(d.u8()?).ok_or("unknown map semantic")?;
            Ok(Polyline { id, semantic, points: d.points()? })
        })
        .collect::<DecResult<_>>()?;
    let k = d.count(4)?;
    let drivable_area = (0..k).map(|_| Ok(Polygon::new(d.points()?))).collect::<DecResult<_>>()?;
    let future_gt = match d.u8()? {
        0 => None,
        1 => Some(d.points()?),
        v => return Err(format!("future flag {v}")),
    };
    let f = d.count(25)?;
    let nearby_future = (0..f).map(|_| d.track()).collect::<DecResult<_>>()?;
    if d.pos != payload.len() {
        return Err(format!("{} trailing bytes", payload.len() - d.pos));
    }
    // Frame stores its heading already wrapped; bypass re-wrapping to keep bits.
    let frame = Frame { origin, heading };
    Ok(Scene { scene_id, tick_duration, frame, target_kind, target_history, nearby, map, drivable_area, future_gt, nearby_future })
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Streams scenes into a writer.
pub struct DatasetWriter<W: Write> {
    inner: W,
    count: usize,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, DataError> {
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        Ok(Self { inner, count: 0 })
    }

    pub fn write(&mut self, scene: &Scene) -> Result<(), DataError> {
        let payload = encode_scene(scene);
        let len = u32::try_from(payload.len()).map_err(|_| DataError::Other("scene record exceeds 4 GiB".into()))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&payload)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<W, DataError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<(), DataError> {
    let mut w = DatasetWriter::new(BufWriter::new(File::create(path)?))?;
    for s in scenes {
        w.write(s)?;
    }
    w.finish()?;
    Ok(())
}

/// Reads `n` bytes or reports how many were available.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn check_header(r: &mut impl Read) -> Result<(), DataError> {
    let mut head = [0u8; 6];
    if read_full(r, &mut head)? < 6 {
        return Err(DataError::Truncated { offset: 0 });
    }
    if &head[..4] != MAGIC {
        return Err(DataError::BadMagic { offset: 0 });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(DataError::BadVersion { offset: 4, version });
    }
    Ok(())
}

/// Iterator over the records of a scene file; holds one record at a time.
pub struct DatasetReader<R: Read> {
    inner: R,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DataError> {
        check_header(&mut inner)?;
        Ok(Self { inner, offset: HEADER_LEN, buf: Vec::new(), done: false })
    }

    /// Byte offset of the next record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn next_record(&mut self) -> Result<Option<Scene>, DataError> {
        let start = self.offset;
        let mut len = [0u8; 4];
        match read_full(&mut self.inner, &mut len)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(DataError::Truncated { offset: start }),
        }
        let n = u32::from_le_bytes(len) as usize;
        self.buf.resize(n, 0);
        if read_full(&mut self.inner, &mut self.buf)? < n {
            return Err(DataError::Truncated { offset: start });
        }
        self.offset += 4 + n as u64;
        decode_scene(&self.buf).map(Some).map_err(|reason| DataError::Corrupt { offset: start, reason })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Scene, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_record().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>, DataError> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>, DataError> {
    open_dataset(path)?.collect()
}

/// File-backed [`SceneSource`] keeping only record offsets in memory.
pub struct IndexedDataset {
    file: Mutex<BufReader<File>>,
    offsets: Vec<(u64, u32)>,
}

impl IndexedDataset {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        check_header(&mut r)?;
        let end = r.get_ref().metadata()?.len();
        let mut offsets = Vec::new();
        let mut offset = HEADER_LEN;
        while offset < end {
            let mut len = [0u8; 4];
            if read_full(&mut r, &mut len)? < 4 {
                return Err(DataError::Truncated { offset });
            }
            let n = u32::from_le_bytes(len);
            if offset + 4 + n as u64 > end {
                return Err(DataError::Truncated { offset });
            }
            offsets.push((offset, n));
            r.seek_relative(n as i64)?;
            offset += 4 + n as u64;
        }
        Ok(Self { file: Mutex::new(r), offsets })
    }
}

impl SceneSource for IndexedDataset {
    fn len(&self) -> usize {
        self.offsets.len()
    }

    fn scene(&self, index: usize) -> Result<Scene, DataError> {
        let &(offset, n) = self.offsets.get(index).ok_or(DataError::OutOfRange { index, len: self.offsets.len() })?;
        let mut buf = vec![0u8; n as usize];
        {
            let mut f = self.file.lock().map_err(|_| DataError::Other("dataset file lock poisoned".into()))?;
            f.seek(SeekFrom::Start(offset + 4))?;
            if read_full(&mut *f, &mut buf)? < buf.len() {
                return Err(DataError::Truncated { offset });
            }
        }
        decode_scene(&buf).map_err(|reason| DataError::Corrupt { offset, reason })
    }
}

/// Human-readable debug dump, one JSON object per line.
pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::Other(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
