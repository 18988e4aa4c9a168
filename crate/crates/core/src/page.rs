//! What a block id can hold, how many blocks each kind spans, and the
//! byte layout used by the page file.
//!
//! Layout (little-endian): a one-byte tag, then the fields of the variant.
//! Updates are written as a one-byte kind (`1` insert, `2` delete)
//! followed by the key in its native width. Sequences are prefixed by a
//! `u32` count.

use crate::core_tree::{InternalNode, Update, UpdateKind};
use crate::error::PagerError;
use crate::key::Key;
use crate::leaf_store::{LeafNode, MicroLeaf, MicroRef};
use crate::pager::{BlockId, Extent, PageCodec, PagerResult};

pub const MAGIC: u64 = u64::from_le_bytes(*b"BEPSTREE");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Superblock {
    pub block: u64,
    pub epsilon: f64,
    pub n_cap: u64,
    pub root: BlockId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Page<K> {
    Super(Superblock),
    Internal(InternalNode<K>),
    Leaf(LeafNode<K>),
    Micro(MicroLeaf<K>),
}

impl<K: Key> Page<K> {
    pub fn as_internal(&self) -> Option<&InternalNode<K>> {
        match self {
            Page::Internal(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_internal_mut(&mut self) -> Option<&mut InternalNode<K>> {
        match self {
            Page::Internal(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_leaf(&self) -> Option<&LeafNode<K>> {
        match self {
            Page::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_leaf_mut(&mut self) -> Option<&mut LeafNode<K>> {
        match self {
            Page::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_micro(&self) -> Option<&MicroLeaf<K>> {
        match self {
            Page::Micro(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_micro_mut(&mut self) -> Option<&mut MicroLeaf<K>> {
        match self {
            Page::Micro(m) => Some(m),
            _ => None,
        }
    }

    /// Records stored, in key-sized units.
    pub fn units(&self) -> u64 {
        match self {
            Page::Super(_) => 1,
            Page::Internal(n) => {
                (n.buffer.len() + n.pivots.len() + 3 * n.children.len()) as u64
            }
            Page::Leaf(l) => (l.buffer.len() + 3 * l.micro.len() + 1) as u64,
            Page::Micro(m) => m.keys.len() as u64,
        }
    }
}

impl<K: Key> Extent for Page<K> {
    fn span(&self, block: u64) -> u64 {
        self.units().div_ceil(block).max(1)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_updates<K: Key>(out: &mut Vec<u8>, ups: &[Update<K>]) {
    put_u32(out, ups.len());
    for u in ups {
        out.push(match u.kind {
            UpdateKind::Insert => 1,
            UpdateKind::Delete => 2,
        });
        u.key.encode_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> PagerResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PagerError::Codec("truncated page".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> PagerResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> PagerResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> PagerResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn key<K: Key>(&mut self) -> PagerResult<K> {
        Ok(K::decode_le(self.take(K::WIDTH)?))
    }

    fn updates<K: Key>(&mut self) -> PagerResult<Vec<Update<K>>> {
        let n = self.len()?;
        (0..n)
            .map(|_| {
                let kind = match self.u8()? {
                    1 => UpdateKind::Insert,
                    2 => UpdateKind::Delete,
                    t => return Err(PagerError::Codec(format!("bad update kind {t}"))),
                };
                Ok(Update {
                    key: self.key()?,
                    kind,
                })
            })
            .collect()
    }

    fn u64s(&mut self) -> PagerResult<Vec<u64>> {
        let n = self.len()?;
        (0..n).map(|_| self.u64()).collect()
    }
}

impl<K: Key> PageCodec for Page<K> {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Page::Super(s) => {
                out.push(0);
                put_u64(out, MAGIC);
                put_u64(out, s.block);
                out.extend_from_slice(&s.epsilon.to_le_bytes());
                put_u64(out, s.n_cap);
                put_u64(out, s.root.0);
            }
            Page::Internal(n) => {
                out.push(1);
                out.push(n.leaf_children as u8 | (n.overfull as u8) << 1);
                put_u32(out, n.pivots.len());
                for p in &n.pivots {
                    p.encode_le(out);
                }
                put_u32(out, n.children.len());
                for c in &n.children {
                    put_u64(out, c.0);
                }
                put_u32(out, n.child_max.len());
                for v in &n.child_max {
                    put_u64(out, *v);
                }
                put_u32(out, n.child_min.len());
                for v in &n.child_min {
                    put_u64(out, *v);
                }
                put_updates(out, &n.buffer);
            }
            Page::Leaf(l) => {
                out.push(2);
                put_u64(out, l.net_size);
                put_u32(out, l.micro.len());
                for m in &l.micro {
                    put_u64(out, m.id.0);
                    m.first.encode_le(out);
                    put_u64(out, m.len as u64);
                }
                put_updates(out, &l.buffer);
            }
            Page::Micro(m) => {
                out.push(3);
                put_u32(out, m.keys.len());
                for k in &m.keys {
                    k.encode_le(out);
                }
            }
        }
    }

    fn decode(bytes: &[u8]) -> PagerResult<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        match c.u8()? {
            0 => {
                if c.u64()? != MAGIC {
                    return Err(PagerError::Codec("bad superblock magic".into()));
                }
                let block = c.u64()?;
                let epsilon = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
                let n_cap = c.u64()?;
                let root = BlockId(c.u64()?);
                Ok(Page::Super(Superblock {
                    block,
                    epsilon,
                    n_cap,
                    root,
                }))
            }
            1 => {
                let flags = c.u8()?;
                let np = c.len()?;
                let pivots = (0..np).map(|_| c.key()).collect::<PagerResult<Vec<K>>>()?;
                let children = c.u64s()?.into_iter().map(BlockId).collect();
                let child_max = c.u64s()?;
                let child_min = c.u64s()?;
                let buffer = c.updates()?;
                let mut n = InternalNode::with_children(
                    flags & 1 != 0,
                    pivots,
                    children,
                    child_max,
                    child_min,
                );
                n.buffer = buffer;
                n.overfull = flags & 2 != 0;
                Ok(Page::Internal(n))
            }
            2 => {
                let net_size = c.u64()?;
                let n = c.len()?;
                let micro = (0..n)
                    .map(|_| {
                        Ok(MicroRef {
                            id: BlockId(c.u64()?),
                            first: c.key()?,
                            len: c.u64()? as usize,
                        })
                    })
                    .collect::<PagerResult<Vec<_>>>()?;
                let buffer = c.updates()?;
                Ok(Page::Leaf(LeafNode {
                    buffer,
                    micro,
                    net_size,
                }))
            }
            3 => {
                let n = c.len()?;
                let keys = (0..n).map(|_| c.key()).collect::<PagerResult<Vec<K>>>()?;
                Ok(Page::Micro(MicroLeaf { keys }))
            }
            t => Err(PagerError::Codec(format!("bad page tag {t}"))),
        }
    }
}
