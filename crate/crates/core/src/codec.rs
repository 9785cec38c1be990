//! Compressed container: acquisition metadata plus one 2-bit chain code per
//! tissue boundary, and compression-ratio accounting.
//!
//! Layout, all multi-byte integers big-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `USQZ`                   |
//! | 4      | 1    | version (1)                    |
//! | 5      | 4    | acquisition frequency, kHz     |
//! | 9      | 2    | scan lines N_θ                 |
//! | 11     | 2    | samples per line N_r           |
//! | 13     | 2    | Cartesian width                |
//! | 15     | 2    | Cartesian height               |
//! | 17     | 1    | number of contours             |
//!
//! Each contour follows as class id (1), start radius (2), number of moves
//! (2, always N_θ − 1) and the moves packed four per byte, most significant
//! pair first, padded with the zero-move symbol. A CRC-32 of every preceding
//! byte closes the file.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::ProbeGeometry;
use crate::segmenter::{Boundary, ContourSet};

pub const MAGIC: [u8; 4] = *b"USQZ";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const CONTOUR_PREFIX_LEN: usize = 5;
pub const CHECKSUM_LEN: usize = 4;

/// One radius step between neighbouring scan lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    Inward = 0b00,
    Hold = 0b01,
    Outward = 0b10,
    OutwardTwo = 0b11,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Inward, Move::Hold, Move::Outward, Move::OutwardTwo];

    pub fn from_delta(delta: i32) -> Option<Self> {
        match delta {
            -1 => Some(Move::Inward),
            0 => Some(Move::Hold),
            1 => Some(Move::Outward),
            2 => Some(Move::OutwardTwo),
            _ => None,
        }
    }

    pub fn delta(self) -> i32 {
        self as i32 - 1
    }

    pub fn bits(self) -> u8 {
        self as u8
    }

    pub fn from_bits(bits: u8) -> Self {
        Self::ALL[(bits & 0b11) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressedHeader {
    pub acquisition_frequency_khz: u32,
    pub num_scan_lines: u16,
    pub samples_per_line: u16,
    pub cart_width: u16,
    pub cart_height: u16,
    pub num_contours: u8,
}

impl CompressedHeader {
    pub fn from_geometry(geometry: &ProbeGeometry, acquisition_frequency_khz: u32, num_contours: u8) -> Result<Self> {
        let field = |name: &str, v: usize| {
            u16::try_from(v).map_err(|_| Error::InvalidGeometry(format!("{name} {v} does not fit in 16 bits")))
        };
        let header = Self {
            acquisition_frequency_khz,
            num_scan_lines: field("scan line count", geometry.num_scan_lines)?,
            samples_per_line: field("samples per line", geometry.samples_per_line)?,
            cart_width: field("Cartesian width", geometry.cart_width)?,
            cart_height: field("Cartesian height", geometry.cart_height)?,
            num_contours,
        };
        header.validate()?;
        Ok(header)
    }

    /// Every count except the number of contours must be nonzero.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            (5, "acquisition frequency", self.acquisition_frequency_khz as usize),
            (9, "scan line count", self.num_scan_lines as usize),
            (11, "samples per line", self.samples_per_line as usize),
            (13, "Cartesian width", self.cart_width as usize),
            (15, "Cartesian height", self.cart_height as usize),
        ];
        for (offset, name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidField {
                    offset,
                    reason: format!("{name} is zero"),
                });
            }
        }
        Ok(())
    }

    pub fn moves_per_contour(&self) -> usize {
        self.num_scan_lines as usize - 1
    }

    /// Bytes of one serialized contour record.
    pub fn contour_record_len(&self) -> usize {
        CONTOUR_PREFIX_LEN + packed_len(self.moves_per_contour())
    }

    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.num_contours as usize * self.contour_record_len() + CHECKSUM_LEN
    }

    /// Bits of one raw 8-bit polar frame of this geometry.
    pub fn raw_bits(&self) -> u64 {
        self.samples_per_line as u64 * self.num_scan_lines as u64 * 8
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5..9].copy_from_slice(&self.acquisition_frequency_khz.to_be_bytes());
        out[9..11].copy_from_slice(&self.num_scan_lines.to_be_bytes());
        out[11..13].copy_from_slice(&self.samples_per_line.to_be_bytes());
        out[13..15].copy_from_slice(&self.cart_width.to_be_bytes());
        out[15..17].copy_from_slice(&self.cart_height.to_be_bytes());
        out[17] = self.num_contours;
        out
    }
}

fn packed_len(moves: usize) -> usize {
    (2 * moves).div_ceil(8)
}

/// Start radius plus the moves to every following scan line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainCode {
    pub class_id: u8,
    pub start_radius: u16,
    pub moves: Vec<Move>,
}

impl ChainCode {
    pub fn num_moves(&self) -> usize {
        self.moves.len()
    }

    pub fn pack_moves(&self) -> Vec<u8> {
        let mut out = vec![0x55u8; packed_len(self.moves.len())];
        for (i, m) in self.moves.iter().enumerate() {
            let shift = 6 - 2 * (i % 4);
            out[i / 4] = (out[i / 4] & !(0b11 << shift)) | (m.bits() << shift);
        }
        out
    }
}

/// Encodes a closed contour. Every circular delta, including the one from
/// the last scan line back to the first, must be in the move alphabet.
pub fn encode_contour(class_id: u8, radii: &[u16]) -> Result<ChainCode> {
    let n = radii.len();
    if n == 0 {
        return Err(Error::InvalidInput("contour has no scan lines".into()));
    }
    let mut moves = Vec::with_capacity(n - 1);
    for t in 0..n {
        let delta = radii[(t + 1) % n] as i32 - radii[t] as i32;
        let m = Move::from_delta(delta).ok_or(Error::UnencodableDelta { scan_line: t, delta })?;
        if t + 1 < n {
            moves.push(m);
        }
    }
    Ok(ChainCode {
        class_id,
        start_radius: radii[0],
        moves,
    })
}

/// Radii by cumulative sum of the moves; all must stay below
/// `samples_per_line` and the contour must close within the alphabet.
pub fn decode_contour(code: &ChainCode, samples_per_line: u16) -> Result<Vec<u16>> {
    let max = samples_per_line.saturating_sub(1);
    let check = |scan_line: usize, r: i64| {
        if r < 0 || r > max as i64 {
            Err(Error::RangeViolation {
                scan_line,
                radius: r,
                max,
            })
        } else {
            Ok(r as u16)
        }
    };
    let mut radii = Vec::with_capacity(code.moves.len() + 1);
    let mut r = code.start_radius as i64;
    radii.push(check(0, r)?);
    for (i, m) in code.moves.iter().enumerate() {
        r += m.delta() as i64;
        radii.push(check(i + 1, r)?);
    }
    let last = *radii.last().unwrap();
    if Move::from_delta(code.start_radius as i32 - last as i32).is_none() {
        return Err(Error::ClosureViolation {
            start: code.start_radius,
            last,
        });
    }
    Ok(radii)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedFile {
    pub header: CompressedHeader,
    pub contours: Vec<ChainCode>,
}

impl CompressedFile {
    pub fn from_contour_set(
        geometry: &ProbeGeometry,
        acquisition_frequency_khz: u32,
        contours: &ContourSet,
    ) -> Result<Self> {
        let count = u8::try_from(contours.boundaries.len())
            .map_err(|_| Error::InvalidInput(format!("{} contours exceed 255", contours.boundaries.len())))?;
        let header = CompressedHeader::from_geometry(geometry, acquisition_frequency_khz, count)?;
        contours.validate(geometry)?;
        let contours = contours
            .boundaries
            .iter()
            .map(|b| encode_contour(b.class_id, &b.radii))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, contours })
    }

    pub fn contour_set(&self) -> Result<ContourSet> {
        let boundaries = self
            .contours
            .iter()
            .map(|c| {
                Ok(Boundary::new(
                    c.class_id,
                    decode_contour(c, self.header.samples_per_line)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContourSet { boundaries })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_file(self)
    }
}

pub fn write_file(file: &CompressedFile) -> Result<Vec<u8>> {
    let h = &file.header;
    h.validate()?;
    if h.num_contours as usize != file.contours.len() {
        return Err(Error::InvalidInput(format!(
            "header declares {} contours, {} given",
            h.num_contours,
            file.contours.len()
        )));
    }
    let mut out = Vec::with_capacity(h.file_len());
    out.extend_from_slice(&h.to_bytes());
    for (i, c) in file.contours.iter().enumerate() {
        if c.num_moves() != h.moves_per_contour() {
            return Err(Error::InvalidInput(format!(
                "contour {i} has {} moves, expected {}",
                c.num_moves(),
                h.moves_per_contour()
            )));
        }
        if c.start_radius >= h.samples_per_line {
            return Err(Error::InvalidInput(format!(
                "contour {i} starts at radius {} of {}",
                c.start_radius, h.samples_per_line
            )));
        }
        out.push(c.class_id);
        out.extend_from_slice(&c.start_radius.to_be_bytes());
        out.extend_from_slice(&(c.num_moves() as u16).to_be_bytes());
        out.extend_from_slice(&c.pack_moves());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    debug_assert_eq!(out.len(), h.file_len());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::TruncatedFile {
                offset: self.bytes.len(),
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses one file from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn read_file_prefix(bytes: &[u8]) -> Result<(CompressedFile, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = match c.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(e) => {
            if bytes.iter().zip(&MAGIC).any(|(a, b)| a != b) {
                let mut found = [0u8; 4];
                found[..bytes.len()].copy_from_slice(bytes);
                return Err(Error::BadMagic { found });
            }
            return Err(e);
        }
    };
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { version });
    }
    let header = CompressedHeader {
        acquisition_frequency_khz: c.u32()?,
        num_scan_lines: c.u16()?,
        samples_per_line: c.u16()?,
        cart_width: c.u16()?,
        cart_height: c.u16()?,
        num_contours: c.u8()?,
    };
    header.validate()?;
    let expected_moves = header.moves_per_contour();
    let mut contours = Vec::with_capacity(header.num_contours as usize);
    for _ in 0..header.num_contours {
        let class_id = c.u8()?;
        let start_offset = c.pos;
        let start_radius = c.u16()?;
        if start_radius >= header.samples_per_line {
            return Err(Error::InvalidField {
                offset: start_offset,
                reason: format!(
                    "start radius {start_radius} outside [0, {}]",
                    header.samples_per_line - 1
                ),
            });
        }
        let moves_offset = c.pos;
        let num_moves = c.u16()? as usize;
        if num_moves != expected_moves {
            return Err(Error::InvalidField {
                offset: moves_offset,
                reason: format!("{num_moves} moves, expected {expected_moves}"),
            });
        }
        let packed_offset = c.pos;
        let packed = c.take(packed_len(num_moves))?;
        let moves = (0..num_moves)
            .map(|i| Move::from_bits(packed[i / 4] >> (6 - 2 * (i % 4))))
            .collect();
        for slot in num_moves..packed.len() * 4 {
            if (packed[slot / 4] >> (6 - 2 * (slot % 4))) & 0b11 != Move::Hold.bits() {
                return Err(Error::BadPadding {
                    offset: packed_offset + slot / 4,
                });
            }
        }
        contours.push(ChainCode {
            class_id,
            start_radius,
            moves,
        });
    }
    let crc_offset = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&bytes[..crc_offset]);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            offset: crc_offset,
            stored,
            computed,
        });
    }
    Ok((CompressedFile { header, contours }, c.pos))
}

/// Parses a complete file; bytes past its end are an error.
pub fn read_file(bytes: &[u8]) -> Result<CompressedFile> {
    let (file, used) = read_file_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingBytes {
            offset: used,
            extra: bytes.len() - used,
        });
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatioMode {
    /// Start radius and moves only, unpadded, as in the usual payload count.
    #[default]
    Paper,
    /// Whole file including header, per-contour fields, padding and checksum.
    Actual,
}

impl FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RatioMode::Paper),
            "actual" => Ok(RatioMode::Actual),
            _ => Err(Error::InvalidInput(format!(
                "ratio mode must be paper or actual, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatioMode::Paper => "paper",
            RatioMode::Actual => "actual",
        })
    }
}

/// Unpadded payload bits of one contour: a 16-bit start radius counted
/// twice (one per polar coordinate) plus two bits per move.
pub fn paper_payload_bits(num_scan_lines: u16) -> u64 {
    32 + 2 * (num_scan_lines as u64 - 1)
}

/// Start radius plus moves padded to a byte boundary.
pub fn padded_payload_bits(num_scan_lines: u16) -> u64 {
    16 + 8 * packed_len(num_scan_lines as usize - 1) as u64
}

/// Raw frame bits over compressed bits. Infinite for a contour-free file in
/// paper mode.
pub fn compression_ratio(header: &CompressedHeader, mode: RatioMode) -> f64 {
    match mode {
        RatioMode::Paper => {
            let bits = header.num_contours as u64 * paper_payload_bits(header.num_scan_lines);
            if bits == 0 {
                f64::INFINITY
            } else {
                header.raw_bits() as f64 / bits as f64
            }
        }
        RatioMode::Actual => ratio_for_size(header, header.file_len()),
    }
}

/// Raw frame bits over `compressed_bytes` bytes.
pub fn ratio_for_size(header: &CompressedHeader, compressed_bytes: usize) -> f64 {
    header.raw_bits() as f64 / (8 * compressed_bytes) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(nc: u8) -> CompressedHeader {
        CompressedHeader::from_geometry(&ProbeGeometry::ivus(384, 256), 20_000, nc).unwrap()
    }

    #[test]
    fn alphabet_bits() {
        for (d, b) in [(-1, 0b00), (0, 0b01), (1, 0b10), (2, 0b11)] {
            let m = Move::from_delta(d).unwrap();
            assert_eq!(m.bits(), b);
            assert_eq!(m.delta(), d);
            assert_eq!(Move::from_bits(b), m);
        }
        assert_eq!(Move::from_delta(-2), None);
        assert_eq!(Move::from_delta(3), None);
    }

    #[test]
    fn hand_encoded_example() {
        let code = encode_contour(0, &[100, 100, 101, 100]).unwrap();
        assert_eq!(code.moves, vec![Move::Hold, Move::Outward, Move::Inward]);
        // 01 10 00 + pad 01
        assert_eq!(code.pack_moves(), vec![0b0110_0001]);
        assert_eq!(decode_contour(&code, 384).unwrap(), vec![100, 100, 101, 100]);
    }

    #[test]
    fn constant_radii_are_all_hold() {
        let code = encode_contour(1, &[7; 9]).unwrap();
        assert!(code.moves.iter().all(|&m| m == Move::Hold));
        assert_eq!(code.pack_moves(), vec![0x55, 0x55]);
    }

    #[test]
    fn large_jumps_and_bad_closure_are_rejected() {
        assert!(matches!(
            encode_contour(0, &[10, 8, 8, 9]),
            Err(Error::UnencodableDelta {
                scan_line: 0,
                delta: -2
            })
        ));
        // 10 -> 11 -> 12 -> 13 closes with -3
        assert!(matches!(
            encode_contour(0, &[10, 11, 12, 13]),
            Err(Error::UnencodableDelta {
                scan_line: 3,
                delta: -3
            })
        ));
    }

    #[test]
    fn decode_range_and_closure() {
        let code = ChainCode {
            class_id: 0,
            start_radius: 383,
            moves: vec![Move::OutwardTwo, Move::Inward, Move::Inward],
        };
        assert!(matches!(
            decode_contour(&code, 384),
            Err(Error::RangeViolation {
                scan_line: 1,
                radius: 385,
                max: 383
            })
        ));
        let open = ChainCode {
            class_id: 0,
            start_radius: 10,
            moves: vec![Move::OutwardTwo, Move::OutwardTwo],
        };
        assert!(matches!(
            decode_contour(&open, 384),
            Err(Error::ClosureViolation { start: 10, last: 14 })
        ));
        assert_eq!(decode_contour(&code_of_len(17), 384).unwrap().len(), 17);
    }

    fn code_of_len(n: usize) -> ChainCode {
        encode_contour(2, &vec![5; n]).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let h = header(2);
        assert_eq!(h.contour_record_len(), 69);
        assert_eq!(padded_payload_bits(256), 528);
        assert_eq!(paper_payload_bits(256), 542);
        assert_eq!(h.file_len(), 18 + 2 * 69 + 4);
        let file = CompressedFile {
            header: h,
            contours: vec![code_of_len(256), code_of_len(256)],
        };
        let bytes = write_file(&file).unwrap();
        assert_eq!(bytes.len(), 160);
        assert_eq!(
            &bytes[..18],
            b"USQZ\x01\x00\x00\x4e\x20\x01\x00\x01\x80\x03\x00\x03\x00\x02"
        );
        assert_eq!(read_file(&bytes).unwrap(), file);
    }

    #[test]
    fn ratios() {
        let r = compression_ratio(&header(2), RatioMode::Paper);
        assert!((r - 786_432.0 / 1084.0).abs() < 1e-12);
        assert_eq!(format!("{r:.1}"), "725.5");
        let one = compression_ratio(&header(1), RatioMode::Paper);
        assert_eq!(format!("{one:.1}"), "1451.0");
        assert_eq!(format!("{:.1}", ratio_for_size(&header(2), 149)), "659.8");
        assert!((compression_ratio(&header(2), RatioMode::Actual) - 786_432.0 / 1280.0).abs() < 1e-12);
        assert!(compression_ratio(&header(0), RatioMode::Paper).is_infinite());
    }

    #[test]
    fn empty_contour_list_round_trips() {
        let file = CompressedFile {
            header: header(0),
            contours: vec![],
        };
        let bytes = write_file(&file).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + CHECKSUM_LEN);
        assert_eq!(read_file(&bytes).unwrap(), file);
    }

    #[test]
    fn reader_errors_carry_offsets() {
        let file = CompressedFile {
            header: header(1),
            contours: vec![code_of_len(256)],
        };
        let bytes = write_file(&file).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_file(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_file(&bad), Err(Error::UnsupportedVersion { version: 2 })));
        assert!(matches!(
            read_file(&bytes[..40]),
            Err(Error::TruncatedFile { offset: 40, .. })
        ));
        assert!(matches!(
            read_file(b"US"),
            Err(Error::TruncatedFile { offset: 2, needed: 2 })
        ));
        let mut bad = bytes.clone();
        bad[bytes.len() - 5] ^= 0x01;
        assert!(matches!(read_file(&bad), Err(Error::BadPadding { .. })));
        let mut bad = bytes.clone();
        bad[30] ^= 0x80;
        assert!(matches!(
            read_file(&bad),
            Err(Error::ChecksumMismatch { offset: 87, .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            read_file(&longer),
            Err(Error::TrailingBytes { offset: 91, extra: 1 })
        ));
        assert_eq!(read_file_prefix(&longer).unwrap().1, bytes.len());
    }

    #[test]
    fn contour_set_round_trip() {
        let g = ProbeGeometry::ivus(64, 16);
        let inner: Vec<u16> = (0..16).map(|t| 20 + (t % 2) as u16).collect();
        let outer: Vec<u16> = (0..16).map(|t| 40 + (t % 3 == 0) as u16).collect();
        let cs = ContourSet {
            boundaries: vec![Boundary::new(0, inner), Boundary::new(1, outer)],
        };
        let file = CompressedFile::from_contour_set(&g, 20_000, &cs).unwrap();
        let back = read_file(&file.to_bytes().unwrap()).unwrap();
        assert_eq!(back.contour_set().unwrap(), cs);
    }
}
