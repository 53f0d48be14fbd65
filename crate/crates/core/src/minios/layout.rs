//! Byte layouts of the tables kept inside memory domains.

/// Descriptor slots in the handle table.
pub const FD_SLOTS: usize = 64;
pub const FD_SLOT_BYTES: usize = 32;
pub const FD_TABLE_BYTES: usize = FD_SLOTS * FD_SLOT_BYTES;

/// Mapping counter: next region id, then number of mappings made.
pub const VMA_TABLE_BYTES: usize = 16;

pub const FS_HEADER_BYTES: usize = 16;
pub const MOUNT_SLOTS: usize = 8;
pub const MOUNT_PATH_MAX: usize = 64;
pub const MOUNT_ENTRY_BYTES: usize = MOUNT_PATH_MAX + 8;
pub const INDEX_SLOTS: usize = 96;
pub const PATH_MAX: usize = 96;
pub const INDEX_ENTRY_BYTES: usize = 16 + PATH_MAX;
pub const MOUNTS_OFFSET: usize = FS_HEADER_BYTES;
pub const INDEX_OFFSET: usize = MOUNTS_OFFSET + MOUNT_SLOTS * MOUNT_ENTRY_BYTES;
pub const FS_META_BYTES: usize = INDEX_OFFSET + INDEX_SLOTS * INDEX_ENTRY_BYTES;

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// One descriptor slot: `[0]` in use, `[4..8]` flags, `[8..16]` vnode,
/// `[16..24]` offset, rest reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FdSlot {
    pub in_use: bool,
    pub flags: u32,
    pub vnode: u64,
    pub offset: u64,
}

impl FdSlot {
    pub fn decode(b: &[u8]) -> Self {
        FdSlot {
            in_use: b[0] != 0,
            flags: u32_at(b, 4),
            vnode: u64_at(b, 8),
            offset: u64_at(b, 16),
        }
    }

    pub fn encode(&self) -> [u8; FD_SLOT_BYTES] {
        let mut b = [0u8; FD_SLOT_BYTES];
        if self.in_use {
            b[0] = 1;
            b[4..8].copy_from_slice(&self.flags.to_le_bytes());
            b[8..16].copy_from_slice(&self.vnode.to_le_bytes());
            b[16..24].copy_from_slice(&self.offset.to_le_bytes());
        }
        b
    }
}

pub fn fd_slot_offset(fd: usize) -> usize {
    fd * FD_SLOT_BYTES
}

/// Header of the fs metadata: next vnode id, mount count, entry count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FsHeader {
    pub next_vnode: u64,
    pub mounts: u32,
    pub entries: u32,
}

impl FsHeader {
    pub fn decode(b: &[u8]) -> Self {
        FsHeader {
            next_vnode: u64_at(b, 0),
            mounts: u32_at(b, 8),
            entries: u32_at(b, 12),
        }
    }

    pub fn encode(&self) -> [u8; FS_HEADER_BYTES] {
        let mut b = [0u8; FS_HEADER_BYTES];
        b[0..8].copy_from_slice(&self.next_vnode.to_le_bytes());
        b[8..12].copy_from_slice(&self.mounts.to_le_bytes());
        b[12..16].copy_from_slice(&self.entries.to_le_bytes());
        b
    }
}

/// Mount table entry: NUL-padded path, then the root vnode. An empty path
/// marks a free entry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MountEntry {
    pub path: String,
    pub root: u64,
}

impl MountEntry {
    pub fn decode(b: &[u8]) -> Option<Self> {
        let len = b[..MOUNT_PATH_MAX].iter().position(|&c| c == 0).unwrap_or(MOUNT_PATH_MAX);
        if len == 0 {
            return None;
        }
        Some(MountEntry {
            path: String::from_utf8_lossy(&b[..len]).into_owned(),
            root: u64_at(b, MOUNT_PATH_MAX),
        })
    }

    pub fn encode(&self) -> [u8; MOUNT_ENTRY_BYTES] {
        let mut b = [0u8; MOUNT_ENTRY_BYTES];
        b[..self.path.len()].copy_from_slice(self.path.as_bytes());
        b[MOUNT_PATH_MAX..].copy_from_slice(&self.root.to_le_bytes());
        b
    }
}

pub fn mount_offset(slot: usize) -> usize {
    MOUNTS_OFFSET + slot * MOUNT_ENTRY_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Empty,
    Used,
    Tombstone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    File,
    Dir,
}

/// Name index entry: `[0]` state, `[1]` kind, `[2..4]` path length,
/// `[4..8]` mount index, `[8..16]` vnode, `[16..]` path bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub state: SlotState,
    pub kind: NodeKind,
    pub dev: u32,
    pub vnode: u64,
    pub path: Vec<u8>,
}

impl IndexEntry {
    pub fn decode(b: &[u8]) -> Self {
        let state = match b[0] {
            1 => SlotState::Used,
            2 => SlotState::Tombstone,
            _ => SlotState::Empty,
        };
        let kind = if b[1] == 2 { NodeKind::Dir } else { NodeKind::File };
        let len = usize::from(u16::from_le_bytes([b[2], b[3]])).min(PATH_MAX);
        IndexEntry {
            state,
            kind,
            dev: u32_at(b, 4),
            vnode: u64_at(b, 8),
            path: b[16..16 + len].to_vec(),
        }
    }

    pub fn encode(&self) -> [u8; INDEX_ENTRY_BYTES] {
        let mut b = [0u8; INDEX_ENTRY_BYTES];
        match self.state {
            SlotState::Empty => return b,
            SlotState::Used => b[0] = 1,
            SlotState::Tombstone => {
                b[0] = 2;
                return b;
            }
        }
        b[1] = match self.kind {
            NodeKind::File => 1,
            NodeKind::Dir => 2,
        };
        b[2..4].copy_from_slice(&(self.path.len() as u16).to_le_bytes());
        b[4..8].copy_from_slice(&self.dev.to_le_bytes());
        b[8..16].copy_from_slice(&self.vnode.to_le_bytes());
        b[16..16 + self.path.len()].copy_from_slice(&self.path);
        b
    }
}

pub fn index_offset(slot: usize) -> usize {
    INDEX_OFFSET + slot * INDEX_ENTRY_BYTES
}

/// FNV-1a, 64-bit.
pub fn path_hash(path: &[u8]) -> u64 {
    path.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Probe sequence for `path`: linear from its home slot.
pub fn probe(path: &[u8]) -> impl Iterator<Item = usize> {
    let home = (path_hash(path) % INDEX_SLOTS as u64) as usize;
    (0..INDEX_SLOTS).map(move |i| (home + i) % INDEX_SLOTS)
}
