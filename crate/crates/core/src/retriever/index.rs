//! Exact maximum-inner-product search over an immutable passage matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::PassageCollection;
use crate::encoder::{
    dot, expect_eof, read_f64s, read_u32, to_u32, write_f64s, Embedding, EncoderParams,
};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"CIDX";
pub const INDEX_VERSION: u32 = 1;

/// Rows per scan shard.
const SHARD_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    ids: Vec<String>,
    /// `ids.len() x dim`, row-major.
    matrix: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPassage {
    pub passage_id: String,
    pub score: f64,
}

/// Descending by score, ties by ascending passage id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub entries: Vec<ScoredPassage>,
    pub k: usize,
}

impl RankedList {
    pub fn rank_of(&self, passage_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.passage_id == passage_id)
            .map(|i| i + 1)
    }
}

/// `Ordering::Less` means `a` ranks ahead of `b`.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

pub fn score(q: &[f64], p: &[f64]) -> Result<f64> {
    Error::check_dim(q.len(), p.len())?;
    Ok(dot(q, p))
}

struct Hit<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl PartialEq for Hit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Hit<'_> {}

impl PartialOrd for Hit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Max-heap top is the worst-ranked hit kept so far.
impl Ord for Hit<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.id, other.score, other.id)
    }
}

impl DenseIndex {
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut matrix = Vec::with_capacity(ids.len() * dim);
        for r in &rows {
            Error::check_dim(dim, r.len())?;
            matrix.extend_from_slice(r);
        }
        let index = DenseIndex { ids, matrix, dim };
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate index id {id:?}")));
            }
        }
        if self.matrix.len() != self.ids.len() * self.dim {
            return Err(Error::Format("matrix size does not match ids".into()));
        }
        if !self.matrix.iter().all(|x| x.is_finite()) {
            return Err(Error::Format("non-finite index entry".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` rows by dot product with `q`, exact.
    ///
    /// Each shard keeps its own bounded heap; shard results are merged in
    /// shard order and sorted with the global tie-break, so the result does
    /// not depend on the thread count.
    pub fn search(&self, q: &Embedding, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        Error::check_dim(self.dim, q.dim())?;
        let n = self.len();
        let shard_hits: Vec<Vec<Hit<'_>>> = (0..n.div_ceil(SHARD_ROWS))
            .into_par_iter()
            .map(|shard| {
                let rows = shard * SHARD_ROWS..n.min((shard + 1) * SHARD_ROWS);
                let mut heap = BinaryHeap::with_capacity(k + 1);
                for row in rows {
                    let hit = Hit {
                        score: dot(q, self.row(row)),
                        id: &self.ids[row],
                        row,
                    };
                    if heap.len() < k {
                        heap.push(hit);
                    } else if hit < *heap.peek().expect("heap holds k >= 1 hits") {
                        heap.pop();
                        heap.push(hit);
                    }
                }
                heap.into_vec()
            })
            .collect();

        let mut merged: Vec<Hit<'_>> = shard_hits.into_iter().flatten().collect();
        merged.sort();
        merged.truncate(k);
        Ok(RankedList {
            entries: merged
                .into_iter()
                .map(|h| ScoredPassage {
                    passage_id: self.ids[h.row].clone(),
                    score: h.score,
                })
                .collect(),
            k,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&to_u32(self.len())?.to_le_bytes())?;
        w.write_all(&to_u32(self.dim)?.to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&to_u32(id.len())?.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        write_f64s(w, &self.matrix)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format(format!("bad index magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
        }
        let matrix = read_f64s(r, n * dim)?;
        let index = DenseIndex { ids, matrix, dim };
        index.validate()?;
        Ok(index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let index = Self::read_from(&mut cursor)?;
        expect_eof(cursor)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Encodes every passage with the passage encoder, in collection order.
pub fn build_index(params: &EncoderParams, collection: &PassageCollection) -> Result<DenseIndex> {
    if collection.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty collection".into()));
    }
    let rows = collection
        .passages()
        .par_iter()
        .map(|p| params.encode(&p.tokens).map(|e| e.0))
        .collect::<Result<Vec<_>>>()?;
    DenseIndex::from_rows(collection.iter().map(|p| p.id.clone()).collect(), rows)
}
