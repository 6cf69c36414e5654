//! AMCD dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "AMCD"
//! u32    format version
//! u16    class count, then per class: u8 name length, UTF-8 name
//! u16    SNR count, then i16 per SNR (dB; i16::MAX = noiseless)
//! u64    frame count
//! frames { u16 label, i16 snr, 2 * 1024 f32 interleaved I, Q }
//! ```

use std::io::{Seek, SeekFrom, Write};

use super::{Dataset, Frame, FRAME_LEN};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AMCD";
pub const FORMAT_VERSION: u32 = 1;

const RECORD_LEN: usize = 2 + 2 + 2 * FRAME_LEN * 4;

/// Streaming writer; the frame count is patched into the header on
/// [`AmcdWriter::finish`].
pub struct AmcdWriter<W: Write + Seek> {
    out: W,
    count_offset: u64,
    count: u64,
    classes: usize,
    snrs: Vec<i16>,
}

impl<W: Write + Seek> AmcdWriter<W> {
    pub fn new(mut out: W, classes: &[String], snrs: &[i16]) -> Result<Self> {
        if classes.len() > usize::from(u16::MAX) || snrs.len() > usize::from(u16::MAX) {
            return Err(Error::config("class table or SNR grid too large"));
        }
        let mut head = Writer::default();
        head.bytes(MAGIC);
        head.u32(FORMAT_VERSION);
        head.u16(classes.len() as u16);
        for name in classes {
            let len = u8::try_from(name.len())
                .map_err(|_| Error::config(format!("class name {name:?} longer than 255 bytes")))?;
            head.u8(len);
            head.bytes(name.as_bytes());
        }
        head.u16(snrs.len() as u16);
        snrs.iter().for_each(|&s| head.i16(s));
        let head = head.buf;
        let start = out.stream_position()?;
        out.write_all(&head)?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(Self {
            out,
            count_offset: start + head.len() as u64,
            count: 0,
            classes: classes.len(),
            snrs: snrs.to_vec(),
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<()> {
        if usize::from(frame.label) >= self.classes {
            return Err(Error::config(format!(
                "label {} outside the class table",
                frame.label
            )));
        }
        if !self.snrs.contains(&frame.snr_db) {
            return Err(Error::config(format!(
                "SNR {} outside the grid",
                frame.snr_db
            )));
        }
        if frame.iq.len() != 2 * FRAME_LEN {
            return Err(Error::shape(format!(
                "frame has {} values, expected {}",
                frame.iq.len(),
                2 * FRAME_LEN
            )));
        }
        let mut rec = Vec::with_capacity(RECORD_LEN);
        rec.extend_from_slice(&frame.label.to_le_bytes());
        rec.extend_from_slice(&frame.snr_db.to_le_bytes());
        for n in 0..FRAME_LEN {
            rec.extend_from_slice(&frame.iq[n].to_le_bytes());
            rec.extend_from_slice(&frame.iq[FRAME_LEN + n].to_le_bytes());
        }
        self.out.write_all(&rec)?;
        self.count += 1;
        Ok(())
    }

    /// Patches the frame count and returns the underlying writer.
    pub fn finish(mut self) -> Result<W> {
        let end = self.out.stream_position()?;
        self.out.seek(SeekFrom::Start(self.count_offset))?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.seek(SeekFrom::Start(end))?;
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_dataset<W: Write + Seek>(out: W, ds: &Dataset) -> Result<W> {
    let mut w = AmcdWriter::new(out, &ds.classes, &ds.snrs)?;
    for f in &ds.frames {
        w.push(f)?;
    }
    w.finish()
}

/// Parses a complete AMCD image.
pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Reader::new(bytes);
    let magic = c.array::<4>()?;
    if &magic != MAGIC {
        return Err(c.error(0, format!("expected magic \"AMCD\", found {magic:?}")));
    }
    let version = u32::from_le_bytes(c.array()?);
    if version != FORMAT_VERSION {
        return Err(c.error(
            4,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let n_classes = u16::from_le_bytes(c.array()?);
    let mut classes = Vec::with_capacity(n_classes.into());
    for _ in 0..n_classes {
        let len = c.array::<1>()?[0] as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| c.error(at, "class name is not valid UTF-8"))?;
        classes.push(name.to_string());
    }
    let n_snrs = c.u16()?;
    let snrs: Vec<i16> = (0..n_snrs).map(|_| c.i16()).collect::<Result<_>>()?;
    let count_at = c.pos;
    let count = c.u64()?;
    let remaining = bytes.len() - c.pos;
    let needed = usize::try_from(count)
        .ok()
        .and_then(|n| n.checked_mul(RECORD_LEN))
        .ok_or_else(|| c.error(count_at, "frame count overflows"))?;
    if remaining < needed {
        return Err(Error::Truncated {
            offset: c.pos,
            needed,
            available: remaining,
        });
    }
    if remaining > needed {
        return Err(c.error(
            c.pos + needed,
            format!("{} trailing bytes after {count} frames", remaining - needed),
        ));
    }
    let mut frames = Vec::with_capacity(needed / RECORD_LEN);
    for _ in 0..count {
        let at = c.pos;
        let label = c.u16()?;
        if label >= n_classes {
            return Err(c.error(at, format!("label {label} outside the class table")));
        }
        let snr_db = c.i16()?;
        if !snrs.contains(&snr_db) {
            return Err(c.error(at + 2, format!("SNR {snr_db} outside the grid")));
        }
        let raw = c.take(2 * FRAME_LEN * 4)?;
        let mut iq = vec![0f32; 2 * FRAME_LEN];
        for (n, pair) in raw.chunks_exact(8).enumerate() {
            iq[n] = f32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
            iq[FRAME_LEN + n] = f32::from_le_bytes(pair[4..].try_into().expect("4 bytes"));
        }
        frames.push(Frame { label, snr_db, iq });
    }
    Ok(Dataset {
        classes,
        snrs,
        frames,
    })
}
