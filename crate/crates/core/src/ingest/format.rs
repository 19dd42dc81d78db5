//! Classic libpcap container: global header and per-record headers.

use super::IngestError;
use crate::time::{Nanos, NANOS_PER_SEC};

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

/// Link-layer framing of the records in a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    /// Raw IP; version taken from the first nibble.
    RawIp,
    Ipv4,
    Ipv6,
    /// Linux "cooked" capture (SLL), as produced by captures on `any`.
    LinuxSll,
}

impl LinkType {
    pub fn from_code(code: u32) -> Option<LinkType> {
        match code {
            1 => Some(LinkType::Ethernet),
            12 | 101 => Some(LinkType::RawIp),
            113 => Some(LinkType::LinuxSll),
            228 => Some(LinkType::Ipv4),
            229 => Some(LinkType::Ipv6),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
            LinkType::LinuxSll => 113,
            LinkType::Ipv4 => 228,
            LinkType::Ipv6 => 229,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHeader {
    pub big_endian: bool,
    pub nanosecond: bool,
    pub version_major: u16,
    pub version_minor: u16,
    pub snaplen: u32,
    pub link_type: LinkType,
}

impl GlobalHeader {
    fn u32_at(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }
}

pub fn parse_global_header(data: &[u8]) -> Result<GlobalHeader, IngestError> {
    if data.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::MalformedHeader(format!(
            "global header needs {GLOBAL_HEADER_LEN} bytes, got {}",
            data.len()
        )));
    }
    let magic = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
    let (big_endian, nanosecond) = match magic {
        MAGIC_MICROS => (false, false),
        MAGIC_NANOS => (false, true),
        m if m.swap_bytes() == MAGIC_MICROS => (true, false),
        m if m.swap_bytes() == MAGIC_NANOS => (true, true),
        m => {
            return Err(IngestError::MalformedHeader(format!(
                "unrecognized magic 0x{m:08x}"
            )))
        }
    };
    let u16_at = |i: usize| {
        let a = [data[i], data[i + 1]];
        if big_endian {
            u16::from_be_bytes(a)
        } else {
            u16::from_le_bytes(a)
        }
    };
    let mut header = GlobalHeader {
        big_endian,
        nanosecond,
        version_major: u16_at(4),
        version_minor: u16_at(6),
        snaplen: 0,
        link_type: LinkType::Ethernet,
    };
    header.snaplen = header.u32_at(&data[16..20]);
    let code = header.u32_at(&data[20..24]);
    // the upper 16 bits may carry FCS information
    header.link_type =
        LinkType::from_code(code & 0xFFFF).ok_or(IngestError::UnsupportedLinkType(code))?;
    Ok(header)
}

/// One record as stored in the file; `timestamp` is absolute capture time.
#[derive(Debug, Clone, Copy)]
pub struct RawRecord<'a> {
    pub timestamp: Nanos,
    pub orig_len: u32,
    pub data: &'a [u8],
}

/// Iterates the records following the global header.
pub struct Records<'a> {
    header: GlobalHeader,
    rest: &'a [u8],
    offset: usize,
    failed: bool,
}

impl<'a> Records<'a> {
    pub fn new(data: &'a [u8]) -> Result<(GlobalHeader, Records<'a>), IngestError> {
        let header = parse_global_header(data)?;
        Ok((
            header,
            Records {
                header,
                rest: &data[GLOBAL_HEADER_LEN..],
                offset: GLOBAL_HEADER_LEN,
                failed: false,
            },
        ))
    }
}

impl<'a> Iterator for Records<'a> {
    type Item = Result<RawRecord<'a>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.rest.is_empty() {
            return None;
        }
        if self.rest.len() < RECORD_HEADER_LEN {
            self.failed = true;
            return Some(Err(IngestError::TruncatedPacket {
                offset: self.offset,
                needed: RECORD_HEADER_LEN,
                available: self.rest.len(),
            }));
        }
        let h = &self.header;
        let ts_sec = h.u32_at(&self.rest[0..4]) as u64;
        let ts_frac = h.u32_at(&self.rest[4..8]) as u64;
        let incl_len = h.u32_at(&self.rest[8..12]) as usize;
        let orig_len = h.u32_at(&self.rest[12..16]);
        let body = &self.rest[RECORD_HEADER_LEN..];
        if body.len() < incl_len {
            self.failed = true;
            return Some(Err(IngestError::TruncatedPacket {
                offset: self.offset,
                needed: RECORD_HEADER_LEN + incl_len,
                available: self.rest.len(),
            }));
        }
        let frac_ns = if h.nanosecond {
            ts_frac
        } else {
            ts_frac * 1_000
        };
        let record = RawRecord {
            timestamp: Nanos(ts_sec * NANOS_PER_SEC + frac_ns),
            orig_len,
            data: &body[..incl_len],
        };
        self.rest = &body[incl_len..];
        self.offset += RECORD_HEADER_LEN + incl_len;
        Some(Ok(record))
    }
}
