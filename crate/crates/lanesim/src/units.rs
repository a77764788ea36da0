//! Byte-size constants and parsing for CLI flags.
//!
//! Flags accept raw byte counts ("12000000000") or binary suffixes
//! ("12GiB", "512MiB"). Decimal GB/MB suffixes are deliberately not
//! accepted on flags so units never drift silently; decimal quantities
//! appear only as exact byte counts.

use crate::error::{Result, SimError};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Decimal units, used for catalog values quoted in MB/GB.
pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;

/// Parse "16GiB", "512MiB", "4KiB" or a raw byte count.
pub fn parse_bytes(s: &str) -> Result<u64> {
    let s = s.trim();
    let (num, mult) = if let Some(n) = s.strip_suffix("GiB") {
        (n, GIB)
    } else if let Some(n) = s.strip_suffix("MiB") {
        (n, MIB)
    } else if let Some(n) = s.strip_suffix("KiB") {
        (n, KIB)
    } else {
        (s, 1)
    };
    let num = num.trim();
    if num.is_empty() {
        return Err(SimError::Config(format!("empty size in {s:?}")));
    }
    // Allow a fractional count with a binary suffix ("1.5GiB"), integers otherwise.
    if mult == 1 {
        num.parse::<u64>()
            .map_err(|_| SimError::Config(format!("bad byte count {s:?} (use raw bytes or GiB/MiB/KiB)")))
    } else {
        let v: f64 = num
            .parse()
            .map_err(|_| SimError::Config(format!("bad size {s:?}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(SimError::Config(format!("bad size {s:?}")));
        }
        Ok((v * mult as f64).round() as u64)
    }
}

/// Render a byte count with a binary suffix when it divides evenly.
pub fn format_bytes(b: u64) -> String {
    if b >= GIB && b.is_multiple_of(GIB) {
        format!("{}GiB", b / GIB)
    } else if b >= MIB && b.is_multiple_of(MIB) {
        format!("{}MiB", b / MIB)
    } else {
        format!("{b}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_binary_suffixes() {
        assert_eq!(parse_bytes("16GiB").unwrap(), 16 * GIB);
        assert_eq!(parse_bytes("512MiB").unwrap(), 512 * MIB);
        assert_eq!(parse_bytes("4KiB").unwrap(), 4096);
        assert_eq!(parse_bytes("1.5GiB").unwrap(), 3 * GIB / 2);
    }

    #[test]
    fn parses_raw_bytes() {
        assert_eq!(parse_bytes("12000000000").unwrap(), 12_000_000_000);
        assert_eq!(parse_bytes("0").unwrap(), 0);
    }

    #[test]
    fn rejects_garbage_and_decimal_suffixes() {
        assert!(parse_bytes("12GB").is_err());
        assert!(parse_bytes("GiB").is_err());
        assert!(parse_bytes("-1").is_err());
        assert!(parse_bytes("1.5").is_err());
    }

    #[test]
    fn formats_round_sizes() {
        assert_eq!(format_bytes(2 * GIB), "2GiB");
        assert_eq!(format_bytes(3 * MIB), "3MiB");
        assert_eq!(format_bytes(1234), "1234");
    }
}
