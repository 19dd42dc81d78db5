//! QUIC packet recognition on UDP payloads.

use super::QuicFilterConfig;

/// Header form bit: set for long-header packets.
pub const LONG_HEADER: u8 = 0x80;
/// Fixed bit, set on every QUIC v1 packet.
pub const FIXED_BIT: u8 = 0x40;
/// Smallest long-header packet we accept: flags, 4-byte version, both
/// connection-ID length bytes and one byte of payload.
pub const MIN_LONG_HEADER_LEN: usize = 7;

/// Port rule plus the QUIC v1 invariant-header check. Any version number is
/// accepted once the fixed bit is present.
pub fn classify_quic(payload: &[u8], ports: (u16, u16), config: &QuicFilterConfig) -> bool {
    let port_ok = config.quic_ports.contains(&ports.0) || config.quic_ports.contains(&ports.1);
    if !port_ok {
        return false;
    }
    let Some(&first) = payload.first() else {
        return false;
    };
    if first & FIXED_BIT == 0 {
        return false;
    }
    if first & LONG_HEADER != 0 && payload.len() < MIN_LONG_HEADER_LEN {
        return false;
    }
    true
}
