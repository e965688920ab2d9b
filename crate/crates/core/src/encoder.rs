//! Hashed-embedding text encoder.
//!
//! A token is hashed into one of `vocab_buckets` rows of an embedding
//! table; a sequence is the mean of its rows passed through a square linear
//! projection. The same parameter type backs the question encoder, the
//! passage encoder, the teacher pair and the reader's token features.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::composer::RESERVED;
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const MODEL_MAGIC: &[u8; 4] = b"CADR";
pub const MODEL_VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Reserved markers take buckets 0..3; everything else hashes above them.
pub fn hash_token(token: &str, vocab_buckets: usize) -> usize {
    if let Some(i) = RESERVED.iter().position(|r| *r == token) {
        return i;
    }
    let free = (vocab_buckets - RESERVED.len()) as u64;
    RESERVED.len() + (fnv1a64(token.as_bytes()) % free) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab_buckets: usize,
    pub dim: usize,
    pub seed: u64,
    /// `vocab_buckets x dim`, row-major.
    pub embed: Vec<f64>,
    /// `dim x dim`, row-major.
    pub proj: Vec<f64>,
}

/// Forward-pass intermediates needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub buckets: Vec<usize>,
    pub mean: Vec<f64>,
    pub output: Embedding,
}

/// Sparse gradient: only touched embedding rows are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub embed: BTreeMap<usize, Vec<f64>>,
    pub proj: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros(dim: usize) -> Self {
        EncoderGrad {
            embed: BTreeMap::new(),
            proj: vec![0.0; dim * dim],
        }
    }

    /// Value at a flat parameter index (embedding table first, then proj).
    pub fn flat(&self, index: usize, params: &EncoderParams) -> f64 {
        let d = params.dim;
        let table = params.vocab_buckets * d;
        if index < table {
            self.embed.get(&(index / d)).map_or(0.0, |row| row[index % d])
        } else {
            self.proj[index - table]
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embed.values_mut() {
            row.iter_mut().for_each(|x| *x *= factor);
        }
        self.proj.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn add(&mut self, other: &EncoderGrad) {
        for (&b, row) in &other.embed {
            let dst = self
                .embed
                .entry(b)
                .or_insert_with(|| vec![0.0; row.len()]);
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        self.proj.iter_mut().zip(&other.proj).for_each(|(a, b)| *a += b);
    }
}

pub fn init_params(vocab_buckets: usize, dim: usize, seed: u64, scale: f64) -> Result<EncoderParams> {
    if vocab_buckets <= RESERVED.len() || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "encoder needs vocab_buckets >= {} and dim >= 1, got {vocab_buckets} x {dim}",
            RESERVED.len() + 1
        )));
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::InvalidArgument(format!("bad init scale {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || scale * (2.0 * rng.gen::<f64>() - 1.0);
    let embed = (0..vocab_buckets * dim).map(|_| draw()).collect();
    let proj = (0..dim * dim)
        .map(|k| {
            let noise = draw();
            if k / dim == k % dim {
                1.0 + noise
            } else {
                noise
            }
        })
        .collect();
    Ok(EncoderParams {
        vocab_buckets,
        dim,
        seed,
        embed,
        proj,
    })
}

impl EncoderParams {
    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.embed[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn bucket(&self, token: &str) -> usize {
        hash_token(token, self.vocab_buckets)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let row = &self.proj[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect()
    }

    /// Mean-pool then project, keeping intermediates.
    pub fn pool<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Pooled> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let buckets: Vec<usize> = tokens.iter().map(|t| self.bucket(t.as_ref())).collect();
        let mut mean = vec![0.0; self.dim];
        for &b in &buckets {
            mean.iter_mut().zip(self.row(b)).for_each(|(m, x)| *m += x);
        }
        let n = buckets.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let output = Embedding(self.project(&mean));
        Ok(Pooled {
            buckets,
            mean,
            output,
        })
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Embedding> {
        Ok(self.pool(tokens)?.output)
    }

    /// Projected embedding of every token on its own.
    pub fn encode_tokenwise<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<Embedding>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        Ok(tokens
            .iter()
            .map(|t| Embedding(self.project(self.row(self.bucket(t.as_ref())))))
            .collect())
    }

    /// Accumulates the gradient of a scalar loss given `d loss / d output`
    /// for an output `proj * mean(rows[buckets])`.
    pub fn backprop(&self, grad: &mut EncoderGrad, buckets: &[usize], mean: &[f64], d_out: &[f64]) {
        let d = self.dim;
        let mut d_mean = vec![0.0; d];
        for i in 0..d {
            let g = d_out[i];
            if g == 0.0 {
                continue;
            }
            let grow = &mut grad.proj[i * d..(i + 1) * d];
            let prow = &self.proj[i * d..(i + 1) * d];
            for j in 0..d {
                grow[j] += g * mean[j];
                d_mean[j] += g * prow[j];
            }
        }
        let n = buckets.len() as f64;
        for &b in buckets {
            let row = grad.embed.entry(b).or_insert_with(|| vec![0.0; d]);
            row.iter_mut().zip(&d_mean).for_each(|(r, g)| *r += g / n);
        }
    }

    /// Plain gradient-descent step.
    pub fn apply(&mut self, grad: &EncoderGrad, learning_rate: f64) {
        let d = self.dim;
        for (&b, row) in &grad.embed {
            let dst = &mut self.embed[b * d..(b + 1) * d];
            dst.iter_mut().zip(row).for_each(|(p, g)| *p -= learning_rate * g);
        }
        self.proj
            .iter_mut()
            .zip(&grad.proj)
            .for_each(|(p, g)| *p -= learning_rate * g);
    }

    pub fn param_count(&self) -> usize {
        self.embed.len() + self.proj.len()
    }

    pub fn flat(&self, index: usize) -> f64 {
        match index.checked_sub(self.embed.len()) {
            None => self.embed[index],
            Some(i) => self.proj[i],
        }
    }

    pub fn flat_mut(&mut self, index: usize) -> &mut f64 {
        match index.checked_sub(self.embed.len()) {
            None => &mut self.embed[index],
            Some(i) => &mut self.proj[i],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embed.iter().chain(&self.proj).all(|x| x.is_finite())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&to_u32(self.vocab_buckets)?.to_le_bytes())?;
        w.write_all(&to_u32(self.dim)?.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_f64s(w, &self.embed)?;
        write_f64s(w, &self.proj)?;
        Ok(())
    }

    /// Reads one encoder record; trailing bytes are left to the caller.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let vocab_buckets = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        if vocab_buckets <= RESERVED.len() || dim == 0 {
            return Err(Error::Format(format!("bad shape {vocab_buckets} x {dim}")));
        }
        let embed = read_f64s(r, vocab_buckets * dim)?;
        let proj = read_f64s(r, dim * dim)?;
        let params = EncoderParams {
            vocab_buckets,
            dim,
            seed,
            embed,
            proj,
        };
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let params = Self::read_from(&mut cursor)?;
        expect_eof(cursor)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

pub(crate) fn expect_eof(rest: &[u8]) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("{} trailing bytes", rest.len())))
    }
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{ANSWER_MARK, CANNOT_MARK, QUESTION_MARK};
    use proptest::prelude::*;

    #[test]
    fn reserved_buckets() {
        assert_eq!(hash_token(QUESTION_MARK, 1024), 0);
        assert_eq!(hash_token(ANSWER_MARK, 1024), 1);
        assert_eq!(hash_token(CANNOT_MARK, 1024), 2);
    }

    #[test]
    fn fnv_golden_values() {
        // reference FNV-1a 64 computed outside this crate
        assert_eq!(fnv1a64(b"the"), 0x56f5_c919_4461_d57c);
        assert_eq!(hash_token("the", 1024), 759);
        assert_eq!(hash_token("a", 1024), 159);
        assert_eq!(hash_token("pittsburgh", 1024), 100);
    }

    fn identity_params(vocab: usize, dim: usize, seed: u64) -> EncoderParams {
        let mut p = init_params(vocab, dim, seed, 0.5).unwrap();
        p.proj = (0..dim * dim)
            .map(|k| if k / dim == k % dim { 1.0 } else { 0.0 })
            .collect();
        p
    }

    #[test]
    fn identity_projection_returns_rows() {
        let p = identity_params(64, 4, 1);
        let b = p.bucket("hello");
        assert_eq!(p.encode(&["hello"]).unwrap().0, p.row(b));

        let (b1, b2) = (p.bucket("x"), p.bucket("y"));
        let want: Vec<f64> = p.row(b1).iter().zip(p.row(b2)).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(p.encode(&["x", "y"]).unwrap().0, want);
    }

    #[test]
    fn encode_is_deterministic() {
        let p = init_params(256, 8, 7, 0.3).unwrap();
        let toks = ["a", "b", "c", "a"];
        let x = p.encode(&toks).unwrap();
        let y = p.encode(&toks).unwrap();
        assert_eq!(
            x.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_input_rejected() {
        let p = init_params(16, 2, 0, 0.1).unwrap();
        let empty: [&str; 0] = [];
        assert!(matches!(p.encode(&empty), Err(Error::EmptyTokens)));
        assert!(matches!(p.encode_tokenwise(&empty), Err(Error::EmptyTokens)));
    }

    #[test]
    fn tokenwise_matches_encode() {
        let p = init_params(128, 6, 3, 0.4).unwrap();
        let single = p.encode_tokenwise(&["word"]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], p.encode(&["word"]).unwrap());

        let toks = ["a", "bb", "ccc", "dd"];
        let rows = p.encode_tokenwise(&toks).unwrap();
        let pooled = p.encode(&toks).unwrap();
        for j in 0..p.dim {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            assert!((mean - pooled[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(64, 4, 9, 0.2).unwrap();
        let b = init_params(64, 4, 9, 0.2).unwrap();
        assert_eq!(a, b);
        let c = init_params(64, 4, 10, 0.2).unwrap();
        assert_ne!(a.embed, c.embed);
        assert!(a.embed.iter().all(|x| x.abs() <= 0.2));
    }

    #[test]
    fn zero_scale_init() {
        let p = init_params(16, 3, 1, 0.0).unwrap();
        assert!(p.embed.iter().all(|&x| x == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.proj[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(init_params(3, 4, 0, 0.1).is_err());
        assert!(init_params(8, 0, 0, 0.1).is_err());
    }

    #[test]
    fn model_bytes_round_trip() {
        let p = init_params(32, 5, 77, 0.9).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"CADR");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8 + 8 * (32 * 5 + 25));
        let q = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EncoderParams::from_bytes(&extra).is_err());
        assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn doubling_projection_doubles_output(seed in any::<u64>(), toks in prop::collection::vec("[a-z]{1,5}", 1..8)) {
            let p = init_params(64, 5, seed, 0.7).unwrap();
            let mut p2 = p.clone();
            p2.proj.iter_mut().for_each(|x| *x *= 2.0);
            let a = p.encode(&toks).unwrap();
            let b = p2.encode(&toks).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert_eq!(2.0 * x, *y);
            }
        }

        #[test]
        fn pooling_ignores_token_order(seed in any::<u64>(), toks in prop::collection::vec("[a-z]{1,5}", 1..8)) {
            let p = init_params(64, 5, seed, 0.7).unwrap();
            let mut rev = toks.clone();
            rev.reverse();
            let a = p.encode(&toks).unwrap();
            let b = p.encode(&rev).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
