//! Minimal POSIX ustar encoder and decoder.
//!
//! Only regular-file members are written or accepted. Headers carry fixed
//! metadata (mode 0644, uid/gid 0, mtime 0) so archives are a pure function
//! of member names and payloads.

pub const BLOCK_LEN: usize = 512;
/// Largest payload an 11-digit octal size field can describe.
pub const MAX_MEMBER_SIZE: u64 = 0o77_777_777_777;

const NAME: (usize, usize) = (0, 100);
const MODE: (usize, usize) = (100, 8);
const UID: (usize, usize) = (108, 8);
const GID: (usize, usize) = (116, 8);
const SIZE: (usize, usize) = (124, 12);
const MTIME: (usize, usize) = (136, 12);
const CHKSUM: (usize, usize) = (148, 8);
const TYPEFLAG: usize = 156;
const MAGIC: (usize, usize) = (257, 6);
const VERSION: (usize, usize) = (263, 2);
const DEVMAJOR: (usize, usize) = (329, 8);
const DEVMINOR: (usize, usize) = (337, 8);
const PREFIX: (usize, usize) = (345, 155);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum UstarError {
    #[error("member name {0:?} does not fit the 100-byte name field")]
    NameTooLong(String),
    #[error("member {name:?} is {size} bytes, beyond the ustar size field")]
    TooLarge { name: String, size: u64 },
    #[error("header checksum mismatch at offset {offset}: stored {stored}, computed {computed}")]
    Checksum {
        offset: usize,
        stored: u32,
        computed: u32,
    },
    #[error("bad {field} field in header at offset {offset}")]
    BadField { offset: usize, field: &'static str },
    #[error("header at offset {offset} is not ustar")]
    BadMagic { offset: usize },
    #[error("unsupported member type {flag:?} at offset {offset}")]
    UnsupportedType { offset: usize, flag: char },
    #[error("archive truncated at offset {offset}")]
    Truncated { offset: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    pub name: String,
    pub data: Vec<u8>,
    /// Byte offset of the member's header within the archive.
    pub offset: usize,
}

fn put(block: &mut [u8; BLOCK_LEN], (start, len): (usize, usize), bytes: &[u8]) {
    debug_assert!(bytes.len() <= len);
    block[start..start + bytes.len()].copy_from_slice(bytes);
}

fn put_octal(block: &mut [u8; BLOCK_LEN], field: (usize, usize), value: u64) {
    let digits = field.1 - 1;
    put(block, field, format!("{value:0digits$o}\0").as_bytes());
}

fn checksum(block: &[u8; BLOCK_LEN]) -> u32 {
    block
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (CHKSUM.0..CHKSUM.0 + CHKSUM.1).contains(&i) {
                u32::from(b' ')
            } else {
                u32::from(b)
            }
        })
        .sum()
}

pub fn header(name: &str, size: u64) -> Result<[u8; BLOCK_LEN], UstarError> {
    if name.is_empty() || name.len() > NAME.1 {
        return Err(UstarError::NameTooLong(name.to_string()));
    }
    if size > MAX_MEMBER_SIZE {
        return Err(UstarError::TooLarge {
            name: name.to_string(),
            size,
        });
    }
    let mut block = [0u8; BLOCK_LEN];
    put(&mut block, NAME, name.as_bytes());
    put_octal(&mut block, MODE, 0o644);
    put_octal(&mut block, UID, 0);
    put_octal(&mut block, GID, 0);
    put_octal(&mut block, SIZE, size);
    put_octal(&mut block, MTIME, 0);
    block[TYPEFLAG] = b'0';
    put(&mut block, MAGIC, b"ustar\0");
    put(&mut block, VERSION, b"00");
    put_octal(&mut block, DEVMAJOR, 0);
    put_octal(&mut block, DEVMINOR, 0);
    let sum = checksum(&block);
    put(&mut block, CHKSUM, format!("{sum:06o}\0 ").as_bytes());
    Ok(block)
}

fn padding(len: usize) -> usize {
    (BLOCK_LEN - len % BLOCK_LEN) % BLOCK_LEN
}

/// Appends one regular-file member (header, payload, zero padding).
pub fn append(out: &mut Vec<u8>, name: &str, data: &[u8]) -> Result<(), UstarError> {
    out.extend_from_slice(&header(name, data.len() as u64)?);
    out.extend_from_slice(data);
    out.resize(out.len() + padding(data.len()), 0);
    Ok(())
}

/// Writes the two zero blocks that end an archive.
pub fn finish(out: &mut Vec<u8>) {
    out.resize(out.len() + 2 * BLOCK_LEN, 0);
}

fn parse_octal(bytes: &[u8], offset: usize, field: &'static str) -> Result<u64, UstarError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| UstarError::BadField { offset, field })?
        .trim_matches(|c| c == '\0' || c == ' ');
    if text.is_empty() {
        return Ok(0);
    }
    u64::from_str_radix(text, 8).map_err(|_| UstarError::BadField { offset, field })
}

fn field_str(block: &[u8], (start, len): (usize, usize)) -> &[u8] {
    let raw = &block[start..start + len];
    let end = raw.iter().position(|&b| b == 0).unwrap_or(len);
    &raw[..end]
}

/// Decodes every member of a ustar archive.
pub fn read_members(archive: &[u8]) -> Result<Vec<Member>, UstarError> {
    let mut members = Vec::new();
    let mut offset = 0;
    loop {
        let Some(block) = archive.get(offset..offset + BLOCK_LEN) else {
            return Err(UstarError::Truncated { offset });
        };
        let block: &[u8; BLOCK_LEN] = block.try_into().expect("block length");
        if block.iter().all(|&b| b == 0) {
            let next = offset + BLOCK_LEN;
            return match archive.get(next..next + BLOCK_LEN) {
                Some(b) if b.iter().all(|&x| x == 0) => Ok(members),
                Some(_) => Err(UstarError::BadField {
                    offset: next,
                    field: "end-of-archive",
                }),
                None => Err(UstarError::Truncated { offset: next }),
            };
        }

        let stored = parse_octal(&block[CHKSUM.0..CHKSUM.0 + CHKSUM.1], offset, "chksum")?;
        let computed = checksum(block);
        if stored != u64::from(computed) {
            return Err(UstarError::Checksum {
                offset,
                stored: stored as u32,
                computed,
            });
        }
        if &block[MAGIC.0..MAGIC.0 + 5] != b"ustar" {
            return Err(UstarError::BadMagic { offset });
        }
        let flag = block[TYPEFLAG];
        if flag != b'0' && flag != 0 {
            return Err(UstarError::UnsupportedType {
                offset,
                flag: flag as char,
            });
        }
        let size = parse_octal(&block[SIZE.0..SIZE.0 + SIZE.1], offset, "size")? as usize;
        let name_bytes = field_str(block, NAME);
        let prefix_bytes = field_str(block, PREFIX);
        let mut name = String::from_utf8(prefix_bytes.to_vec())
            .map_err(|_| UstarError::BadField { offset, field: "prefix" })?;
        if !name.is_empty() {
            name.push('/');
        }
        name.push_str(
            std::str::from_utf8(name_bytes)
                .map_err(|_| UstarError::BadField { offset, field: "name" })?,
        );

        let data_start = offset + BLOCK_LEN;
        let data = archive
            .get(data_start..data_start + size)
            .ok_or(UstarError::Truncated { offset: archive.len() })?
            .to_vec();
        members.push(Member { name, data, offset });
        offset = data_start + size + padding(size);
        if offset > archive.len() {
            return Err(UstarError::Truncated { offset: archive.len() });
        }
    }
}
