//! Single-file episode container. Byte layout is documented in docs/format.md.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Action, Episode, Observation, Step};
use crate::error::{Error, Result};
use crate::tensor::DType;

pub const CONTAINER_MAGIC: [u8; 8] = *b"DSKEPIS\0";
pub const CONTAINER_VERSION: u32 = 1;
const ARRAYS: usize = 4;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("header ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::BadContainer(format!("{what} is not UTF-8")))
    }
}

fn array_bytes(ep: &Episode) -> [Vec<u8>; ARRAYS] {
    let mut rgb = Vec::new();
    let mut pcd = Vec::new();
    let mut grip = Vec::new();
    let mut act = Vec::new();
    for s in &ep.steps {
        let o = &s.observation;
        rgb.extend(o.rgb.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        pcd.extend(o.pcd.iter().flat_map(|v| v.to_le_bytes()));
        grip.extend(o.gripper_map.iter().map(|&v| v as u8));
        act.extend(s.action.to_vec().iter().flat_map(|v| v.to_le_bytes()));
    }
    [rgb, pcd, grip, act]
}

/// Serializes an episode. RGB is stored as `round(255 * v)`, so values that
/// are multiples of 1/255 round-trip exactly.
pub fn encode_episode(ep: &Episode) -> Result<Vec<u8>> {
    if ep.is_empty() {
        return Err(Error::Shape("episode has no steps".into()));
    }
    let (k, h, w) = ep.dims();
    if ep.steps.iter().any(|s| !s.observation.is_consistent() || s.observation.dims() != (k, h, w)) {
        return Err(Error::Shape("observations disagree on K/H/W".into()));
    }
    let arrays = array_bytes(ep);
    let dtypes = [DType::U8, DType::F32, DType::U8, DType::F32];

    let mut head = Vec::new();
    head.extend(ep.task_id.to_le_bytes());
    head.extend(ep.variation_id.to_le_bytes());
    head.extend(ep.seed.to_le_bytes());
    for d in [k, h, w, ep.len()] {
        head.extend((d as u32).to_le_bytes());
    }
    for s in [&ep.task, &ep.instruction] {
        head.extend((s.len() as u32).to_le_bytes());
        head.extend(s.as_bytes());
    }
    let mut offset = 0u64;
    for (a, d) in arrays.iter().zip(dtypes) {
        head.extend(u32::from(d.code()).to_le_bytes());
        head.extend(offset.to_le_bytes());
        head.extend((a.len() as u64).to_le_bytes());
        offset += a.len() as u64;
    }

    let mut crc = crc32fast::Hasher::new();
    crc.update(&head);
    arrays.iter().for_each(|a| crc.update(a));

    let mut out = Vec::with_capacity(24 + head.len() + offset as usize);
    out.extend(CONTAINER_MAGIC);
    out.extend(CONTAINER_VERSION.to_le_bytes());
    out.extend((head.len() as u32).to_le_bytes());
    out.extend(head);
    out.extend(crc.finalize().to_le_bytes());
    arrays.iter().for_each(|a| out.extend(a));
    Ok(out)
}

pub fn decode_episode(buf: &[u8]) -> Result<Episode> {
    if buf.len() < 8 || buf[..8] != CONTAINER_MAGIC {
        return Err(Error::BadContainer("missing episode magic".into()));
    }
    let mut c = Cursor { buf, pos: 8 };
    let version = c.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CONTAINER_VERSION });
    }
    let head_len = c.u32("header length")? as usize;
    let head = c.take(head_len, "header")?;
    let expected_crc = c.u32("checksum")?;
    let payload = &buf[c.pos..];

    let mut hc = Cursor { buf: head, pos: 0 };
    let task_id = hc.u32("task id")?;
    let variation_id = hc.u32("variation id")?;
    let seed = hc.u64("seed")?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = hc.u32("dimensions")? as usize;
    }
    let [k, h, w, t] = dims;
    let task = hc.string("task name")?;
    let instruction = hc.string("instruction")?;
    let px = k * h * w;
    let want = [(DType::U8, t * px * 3), (DType::F32, t * px * 3 * 4), (DType::U8, t * px), (DType::F32, t * 8 * 4)];
    let mut ranges = Vec::with_capacity(ARRAYS);
    for (i, &(dtype, len)) in want.iter().enumerate() {
        let code = hc.u32("array table")?;
        let offset = hc.u64("array table")? as usize;
        let declared = hc.u64("array table")? as usize;
        if code > 255 || DType::from_code(code as u8) != Some(dtype) {
            return Err(Error::BadContainer(format!("array {i} has dtype code {code}")));
        }
        if declared != len {
            return Err(Error::BadContainer(format!("array {i} holds {declared} bytes, dims imply {len}")));
        }
        ranges.push(offset..offset + len);
    }
    let end = ranges.iter().map(|r| r.end).max().unwrap_or(0);
    if payload.len() < end {
        return Err(Error::Truncated(format!("payload has {} bytes, header declares {end}", payload.len())));
    }
    if payload.len() > end {
        return Err(Error::BadContainer(format!("{} trailing bytes after payload", payload.len() - end)));
    }
    let mut crc = crc32fast::Hasher::new();
    crc.update(head);
    crc.update(payload);
    let found = crc.finalize();
    if found != expected_crc {
        return Err(Error::Checksum { expected: expected_crc, found });
    }

    let rgb = &payload[ranges[0].clone()];
    let pcd = &payload[ranges[1].clone()];
    let grip = &payload[ranges[2].clone()];
    let act = &payload[ranges[3].clone()];
    let f32s =
        |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
    let mut steps = Vec::with_capacity(t);
    for s in 0..t {
        let mut o = Observation::zeros(k, h, w);
        o.rgb = rgb[s * px * 3..(s + 1) * px * 3].iter().map(|&v| f32::from(v) / 255.0).collect();
        o.pcd = f32s(&pcd[s * px * 12..(s + 1) * px * 12]);
        o.gripper_map = grip[s * px..(s + 1) * px].iter().map(|&v| f32::from(v)).collect();
        let a = f32s(&act[s * 32..(s + 1) * 32]);
        steps.push(Step { observation: o, action: Action::from_slice(&a) });
    }
    Ok(Episode { task, instruction, task_id, variation_id, seed, steps })
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    let bytes = encode_episode(ep)?;
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    f.write_all(&bytes).map_err(|e| Error::from(e).in_file(path))?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_episode(&bytes).map_err(|e| e.in_file(path))
}
