//! Binary persistence for field samples.
//!
//! Layout: magic `SIGF`, format version (u16 LE), side N (u32 LE), flags
//! (u32 LE, bit 0 = underlying φ present), then N² row-major f64 LE
//! heights, then the optional φ block in the same shape.

use crate::fields::FieldSample;
use crate::lattice::GridSpec;
use crate::{Error, Result};
use nalgebra::DVector;
use std::path::Path;

pub const FIELD_MAGIC: [u8; 4] = *b"SIGF";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_UNDERLYING: u32 = 1;

pub fn dump_field(field: &FieldSample) -> Vec<u8> {
    let n = field.spec.side();
    let cells = field.heights.len();
    let mut out = Vec::with_capacity(14 + 8 * cells * 2);
    out.extend_from_slice(&FIELD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    let flags = if field.underlying.is_some() {
        FLAG_UNDERLYING
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    for h in field.heights.iter() {
        out.extend_from_slice(&h.to_le_bytes());
    }
    if let Some(phi) = &field.underlying {
        for p in phi.iter() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

pub fn load_field(bytes: &[u8]) -> Result<FieldSample> {
    if bytes.len() < 4 || bytes[..4] != FIELD_MAGIC {
        let found: Vec<u8> = bytes.iter().take(4).copied().collect();
        return Err(Error::Parse(format!(
            "bad magic: expected {:?}, found {:?}",
            FIELD_MAGIC, found
        )));
    }
    if bytes.len() < 14 {
        return Err(Error::Parse(format!(
            "truncated header: expected at least 14 bytes, found {}",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format version {version}; this build reads {FORMAT_VERSION}"
        )));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let flags = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    if flags & !FLAG_UNDERLYING != 0 {
        return Err(Error::Parse(format!("unknown flag bits {flags:#x}")));
    }
    let spec =
        GridSpec::new(n).map_err(|e| Error::Parse(format!("field file declares side {n}: {e}")))?;
    let cells = n as usize * n as usize;
    let blocks = if flags & FLAG_UNDERLYING != 0 { 2 } else { 1 };
    let expected = 14 + 8 * cells * blocks;
    if bytes.len() != expected {
        return Err(Error::Parse(format!(
            "payload length mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let read_block = |offset: usize| {
        DVector::from_iterator(
            cells,
            (0..cells).map(|i| {
                let at = offset + 8 * i;
                f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
            }),
        )
    };
    let heights = read_block(14);
    let underlying = (flags & FLAG_UNDERLYING != 0).then(|| read_block(14 + 8 * cells));
    Ok(FieldSample {
        spec,
        heights,
        underlying,
        tag: "loaded".into(),
    })
}

pub fn write_field(path: &Path, field: &FieldSample) -> Result<()> {
    std::fs::write(path, dump_field(field))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("writing {}: {e}", path.display()))))
}

pub fn read_field(path: &Path) -> Result<FieldSample> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("reading {}: {e}", path.display()))))?;
    load_field(&bytes)
}
