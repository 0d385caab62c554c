//! A small linear embedding model standing in for the vision-language
//! encoder: token lookup for text, one projected row per image, and
//! last-token / mean pooling on top.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::ops::{Deref, Range};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, ImageStore};
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, Fnv1a};
use crate::rng::Stream;
use crate::scalar::Scalar;

pub type TokenId = u32;

/// Emitted for empty text.
pub const PAD_TOKEN: TokenId = 0;
/// Stands for the image placeholder; expands to one projected image row.
pub const IMAGE_TOKEN: TokenId = 1;
/// Ids below this are never produced by hashing.
pub const RESERVED_TOKENS: TokenId = 2;

const PLACEHOLDER_TAG: &str = "<|image_1|>";

/// Split `text` into hashed token ids.
///
/// Text is lowercased and cut into maximal alphanumeric runs; everything
/// else separates tokens and is dropped. A token `t` maps to
/// `2 + fnv1a64(utf8(t)) mod (vocab_size - 2)`. The image placeholder
/// (with or without its trailing newline) becomes [`IMAGE_TOKEN`].
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<TokenId> {
    assert!(vocab_size > RESERVED_TOKENS as usize, "vocabulary too small");
    let buckets = (vocab_size - RESERVED_TOKENS as usize) as u64;
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<TokenId>| {
        if !word.is_empty() {
            let h = fnv1a64(word.as_bytes()) % buckets;
            ids.push(RESERVED_TOKENS + h as TokenId);
            word.clear();
        }
    };
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(after) = rest.strip_prefix(PLACEHOLDER_TAG) {
            flush(&mut word, &mut ids);
            ids.push(IMAGE_TOKEN);
            rest = after.strip_prefix('\n').unwrap_or(after);
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut ids);
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut ids);
    if ids.is_empty() {
        ids.push(PAD_TOKEN);
    }
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub feature_dim: usize,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            dim: 64,
            feature_dim: 32,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Trainable parameters: a `V x d` token table and a `k x d` image
/// projector, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    vocab_size: usize,
    dim: usize,
    feature_dim: usize,
    pub(crate) table: Vec<T>,
    pub(crate) projector: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Seeded uniform initialization, table first, then projector.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.vocab_size <= RESERVED_TOKENS as usize || cfg.dim == 0 || cfg.feature_dim == 0 {
            return Err(Error::invalid(
                "encoder config",
                format!(
                    "need vocab_size > {RESERVED_TOKENS}, dim > 0, feature_dim > 0 (got {}, {}, {})",
                    cfg.vocab_size, cfg.dim, cfg.feature_dim
                ),
            ));
        }
        let mut rng = Stream::new(cfg.seed);
        let s = cfg.init_scale;
        let mut draw = |n: usize| (0..n).map(|_| T::lit(rng.uniform(-s, s))).collect::<Vec<T>>();
        let table = draw(cfg.vocab_size * cfg.dim);
        let projector = draw(cfg.feature_dim * cfg.dim);
        Ok(Self {
            vocab_size: cfg.vocab_size,
            dim: cfg.dim,
            feature_dim: cfg.feature_dim,
            table,
            projector,
        })
    }

    pub fn from_parts(vocab_size: usize, dim: usize, feature_dim: usize, table: Vec<T>, projector: Vec<T>) -> Result<Self> {
        if vocab_size <= RESERVED_TOKENS as usize || dim == 0 || feature_dim == 0 {
            return Err(Error::invalid("encoder shape", "dimensions must be positive"));
        }
        if table.len() != vocab_size * dim || projector.len() != feature_dim * dim {
            return Err(Error::invalid(
                "encoder shape",
                format!(
                    "table has {} values (want {}), projector {} (want {})",
                    table.len(),
                    vocab_size * dim,
                    projector.len(),
                    feature_dim * dim
                ),
            ));
        }
        if table.iter().chain(&projector).any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder parameters", "non-finite value"));
        }
        Ok(Self {
            vocab_size,
            dim,
            feature_dim,
            table,
            projector,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn row(&self, token: TokenId) -> &[T] {
        let t = token as usize;
        &self.table[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, token: TokenId) -> &mut [T] {
        let t = token as usize;
        &mut self.table[t * self.dim..(t + 1) * self.dim]
    }

    pub fn projector(&self) -> &[T] {
        &self.projector
    }

    pub fn projector_mut(&mut self) -> &mut [T] {
        &mut self.projector
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, self.vocab_size)
    }

    /// `featuresᵀ · projector`, the row an image contributes.
    pub fn project_image(&self, features: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (r, &f) in features.iter().enumerate() {
            let prow = &self.projector[r * self.dim..(r + 1) * self.dim];
            for (o, &p) in out.iter_mut().zip(prow) {
                *o += f * p;
            }
        }
        out
    }

    /// Sequence embedding of `text`, with `image` substituted at the
    /// placeholder.
    pub fn forward(&self, text: &str, image: Option<&[T]>) -> Result<EmbeddingMatrix<T>> {
        let tokens = self.tokenize(text);
        self.forward_tokens(&tokens, image)
    }

    pub fn forward_tokens(&self, tokens: &[TokenId], image: Option<&[T]>) -> Result<EmbeddingMatrix<T>> {
        let sentinels = tokens.iter().filter(|&&t| t == IMAGE_TOKEN).count();
        if sentinels > 1 {
            return Err(Error::invalid("encoder input", "more than one image placeholder"));
        }
        match (sentinels == 1, image) {
            (true, None) => return Err(Error::invalid("encoder input", "placeholder without image")),
            (false, Some(_)) => return Err(Error::invalid("encoder input", "image without placeholder")),
            (_, Some(f)) if f.len() != self.feature_dim => {
                return Err(Error::Dimension {
                    id: "image features".into(),
                    expected: self.feature_dim,
                    got: f.len(),
                })
            }
            _ => {}
        }
        let mut rows = Vec::with_capacity(tokens.len());
        let mut image_span = None;
        for (i, &t) in tokens.iter().enumerate() {
            if t == IMAGE_TOKEN {
                rows.push(self.project_image(image.expect("checked above")));
                image_span = Some(i..i + 1);
            } else {
                rows.push(self.row(t).to_vec());
            }
        }
        EmbeddingMatrix::new(rows, image_span)
    }

    /// Copy with seeded uniform noise in `[-scale, scale)` added to every
    /// parameter.
    pub fn perturbed(&self, scale: f64, seed: u64) -> Self {
        let mut rng = Stream::keyed(seed, &[b"perturb"]);
        let mut out = self.clone();
        for v in out.table.iter_mut().chain(out.projector.iter_mut()) {
            *v += T::lit(rng.uniform(-scale, scale));
        }
        out
    }

    /// Deep copy that can no longer be mutated.
    pub fn clone_frozen(&self) -> Frozen<T> {
        Frozen(self.clone())
    }

    /// FNV-1a over the shape and the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.vocab_size as u64)
            .write_u64(self.dim as u64)
            .write_u64(self.feature_dim as u64);
        for v in self.table.iter().chain(&self.projector) {
            h.write_u64(v.bits());
        }
        h.finish()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.table
            .iter()
            .chain(&self.projector)
            .zip(other.table.iter().chain(&other.projector))
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    // -- checkpoint files ---------------------------------------------------

    /// Text checkpoint: a header with the three dimensions, then the table
    /// and the projector row-major, one row per line. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "vocab_size {}", self.vocab_size).unwrap();
        writeln!(s, "dim {}", self.dim).unwrap();
        writeln!(s, "feature_dim {}", self.feature_dim).unwrap();
        for (name, data) in [("embedding_table", &self.table), ("image_projector", &self.projector)] {
            writeln!(s, "{name}").unwrap();
            for row in data.chunks(self.dim) {
                let mut first = true;
                for v in row {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    write!(s, "{v}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = crate::corpus::create(path)?;
        w.write_all(self.to_checkpoint_string().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    pub fn parse_checkpoint(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or((0, format!("truncated before {what}")));
        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err((n, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let mut dims = [0usize; 3];
        for (slot, key) in dims.iter_mut().zip(["vocab_size", "dim", "feature_dim"]) {
            let (n, line) = next(key)?;
            *slot = line
                .strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or((n, format!("expected `{key} <n>`")))?;
        }
        let [vocab_size, dim, feature_dim] = dims;
        let mut read_block = |name: &str, rows: usize| -> std::result::Result<Vec<T>, (usize, String)> {
            let (n, line) = next(name)?;
            if line != name {
                return Err((n, format!("expected `{name}`")));
            }
            let mut out = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let (n, line) = next(name)?;
                let before = out.len();
                for tok in line.split_ascii_whitespace() {
                    out.push(tok.parse::<T>().map_err(|_| (n, format!("bad number `{tok}`")))?);
                }
                if out.len() - before != dim {
                    return Err((n, format!("expected {dim} values")));
                }
            }
            Ok(out)
        };
        let table = read_block("embedding_table", vocab_size)?;
        let projector = read_block("image_projector", feature_dim)?;
        Self::from_parts(vocab_size, dim, feature_dim, table, projector).map_err(|e| (0, e.to_string()))
    }
}

const CHECKPOINT_MAGIC: &str = "polyembed-checkpoint v1";

/// Read-only encoder parameters, used for the distillation teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T>(EncoderParams<T>);

impl<T: Scalar> Frozen<T> {
    pub fn clone_frozen(&self) -> Frozen<T> {
        self.clone()
    }

    /// A mutable copy, e.g. to start a student from the teacher.
    pub fn thaw(&self) -> EncoderParams<T> {
        self.0.clone()
    }
}

impl<T> Deref for Frozen<T> {
    type Target = EncoderParams<T>;

    fn deref(&self) -> &EncoderParams<T> {
        &self.0
    }
}

/// `m x d` sequence output, optionally marking the image rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    rows: Vec<Vec<T>>,
    image_span: Option<Range<usize>>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(rows: Vec<Vec<T>>, image_span: Option<Range<usize>>) -> Result<Self> {
        let Some(d) = rows.first().map(Vec::len) else {
            return Err(Error::invalid("embedding matrix", "no rows"));
        };
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Dimension {
                id: format!("row {bad}"),
                expected: d,
                got: rows[bad].len(),
            });
        }
        if let Some(span) = &image_span {
            if span.start > span.end || span.end > rows.len() {
                return Err(Error::invalid("embedding matrix", format!("image span {span:?} out of bounds")));
            }
        }
        Ok(Self { rows, image_span })
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn image_span(&self) -> Option<Range<usize>> {
        self.image_span.clone()
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| v * alpha).collect())
                .collect(),
            image_span: self.image_span.clone(),
        }
    }

    /// Pool all rows.
    pub fn pool(&self, mode: Pooling) -> PooledVector<T> {
        match mode {
            Pooling::LastToken => PooledVector::new(self.rows[self.rows.len() - 1].clone(), mode),
            Pooling::Mean => self.mean_over(0..self.rows.len()).expect("matrix has rows"),
        }
    }

    /// Mean of the rows in `span`.
    pub fn mean_over(&self, span: Range<usize>) -> Result<PooledVector<T>> {
        if span.is_empty() || span.end > self.rows.len() {
            return Err(Error::invalid("pooling span", format!("{span:?} is empty or out of bounds")));
        }
        let n = T::from_usize_lossy(span.len());
        let mut acc = vec![T::zero(); self.dim()];
        for row in &self.rows[span] {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(PooledVector::new(acc.into_iter().map(|v| v / n).collect(), Pooling::Mean))
    }

    /// Mean over the image rows.
    pub fn pool_image(&self) -> Result<PooledVector<T>> {
        let span = self
            .image_span
            .clone()
            .ok_or_else(|| Error::invalid("pooling span", "sequence has no image rows"))?;
        self.mean_over(span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    LastToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector<T> {
    pub values: Vec<T>,
    pub pooling: Pooling,
}

impl<T: Scalar> PooledVector<T> {
    pub fn new(values: Vec<T>, pooling: Pooling) -> Self {
        Self { values, pooling }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self::new(self.values.iter().map(|&v| v * alpha).collect(), self.pooling)
    }
}

// ---------------------------------------------------------------------------
// Embedders

/// One text (plus optional image) to embed, with a stable key for
/// precomputed stores.
#[derive(Debug, Clone, Copy)]
pub struct EmbedItem<'a> {
    pub key: &'a str,
    pub text: &'a str,
    pub image_ref: Option<&'a str>,
}

/// Anything that turns an item into a pooled vector.
pub trait Embedder<T>: Sync {
    fn embed(&self, item: &EmbedItem<'_>) -> Result<PooledVector<T>>;
}

/// The reference encoder with last-token pooling. Images are fed only when
/// the text carries the placeholder.
pub struct ReferenceEmbedder<'a, T> {
    pub params: &'a EncoderParams<T>,
    pub images: &'a ImageStore<T>,
}

impl<T: Scalar> Embedder<T> for ReferenceEmbedder<'_, T> {
    fn embed(&self, item: &EmbedItem<'_>) -> Result<PooledVector<T>> {
        let wants_image = item.text.contains(PLACEHOLDER_TAG);
        let features = match (wants_image, item.image_ref) {
            (true, Some(r)) => Some(self.images.features(r)?),
            (true, None) => {
                return Err(Error::invalid(
                    "embed item",
                    format!("`{}` has an image placeholder but no image_ref", item.key),
                ))
            }
            (false, _) => None,
        };
        let m = self.params.forward(item.text, features.as_deref())?;
        Ok(m.pool(Pooling::LastToken))
    }
}

/// Vectors exported from an external model, looked up by key.
pub struct PrecomputedEmbedder<T> {
    pub table: EmbeddingTable<T>,
}

impl<T: Scalar> Embedder<T> for PrecomputedEmbedder<T> {
    fn embed(&self, item: &EmbedItem<'_>) -> Result<PooledVector<T>> {
        self.table
            .get(item.key)
            .cloned()
            .ok_or_else(|| Error::invalid("embedding store", format!("no vector for `{}`", item.key)))
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(table: Vec<f64>, projector: Vec<f64>, v: usize, d: usize, k: usize) -> EncoderParams<f64> {
        EncoderParams::from_parts(v, d, k, table, projector).unwrap()
    }

    #[test]
    fn tokenize_hashes_words() {
        // Oracle: independent FNV-1a evaluation in Python,
        // 2 + fnv1a64(w) % 4094 for w in ("a", "red", "car").
        assert_eq!(tokenize("A red car.", 4096), vec![1190, 1270, 819]);
        assert_eq!(tokenize("A red car.", 4096), tokenize("a RED car", 4096));
    }

    #[test]
    fn tokenize_edge_cases() {
        assert_eq!(tokenize("", 4096), vec![PAD_TOKEN]);
        assert_eq!(tokenize("?!", 4096), vec![PAD_TOKEN]);
        let t = tokenize("<|image_1|>\nhello", 4096);
        assert_eq!(t[0], IMAGE_TOKEN);
        assert_eq!(t[1..], tokenize("hello", 4096)[..]);
        assert_eq!(t.len(), 2);
        assert_eq!(tokenize("l'immagine", 4096).len(), 2);
    }

    #[test]
    fn single_token_is_a_lookup() {
        let mut p = EncoderParams::<f64>::init(&EncoderConfig { vocab_size: 16, dim: 3, feature_dim: 2, ..Default::default() }).unwrap();
        let tok = p.tokenize("word")[0];
        p.row_mut(tok).copy_from_slice(&[1.0, 0.0, 0.0]);
        let m = p.forward("word", None).unwrap();
        assert_eq!(m.rows(), &[vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn image_row_is_projected() {
        // 3 features -> 2 dims. projector rows: (1,2), (3,4), (5,6).
        let p = tiny(vec![0.0; 8 * 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 8, 2, 3);
        let m = p.forward("<|image_1|>\n", Some(&[1.0, 0.5, -1.0])).unwrap();
        // (1*1 + 0.5*3 - 1*5, 1*2 + 0.5*4 - 1*6) = (-2.5, -2)
        assert_eq!(m.rows(), &[vec![-2.5, -2.0]]);
        assert_eq!(m.image_span(), Some(0..1));
        let z = p.forward("<|image_1|>\nx", Some(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(z.rows()[0], vec![0.0, 0.0]);
        assert_eq!(z.len(), 2);
    }

    #[test]
    fn placeholder_image_mismatch_errors() {
        let p = EncoderParams::<f64>::init(&EncoderConfig { vocab_size: 16, dim: 2, feature_dim: 2, ..Default::default() }).unwrap();
        assert!(p.forward("<|image_1|>\nx", None).is_err());
        assert!(p.forward("x", Some(&[0.0, 0.0])).is_err());
        assert!(p.forward("<|image_1|>\nx", Some(&[0.0])).is_err());
    }

    #[test]
    fn pooling_modes() {
        let m = EmbeddingMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        assert_eq!(m.pool(Pooling::LastToken).values, vec![0.0, 1.0]);
        assert_eq!(m.pool(Pooling::Mean).values, vec![0.5, 0.5]);
        let one = EmbeddingMatrix::new(vec![vec![3.0, -1.0]], None).unwrap();
        assert_eq!(one.pool(Pooling::LastToken).values, one.pool(Pooling::Mean).values);
        assert!(m.pool_image().is_err());
        assert!(m.mean_over(1..1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = EncoderParams::<f64>::init(&EncoderConfig { vocab_size: 40, dim: 5, feature_dim: 3, seed: 9, ..Default::default() }).unwrap();
        let back = EncoderParams::<f64>::parse_checkpoint(&p.to_checkpoint_string()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.checksum(), p.checksum());
        let p32 = EncoderParams::<f32>::init(&EncoderConfig { vocab_size: 40, dim: 5, feature_dim: 3, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(EncoderParams::<f32>::parse_checkpoint(&p32.to_checkpoint_string()).unwrap(), p32);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let p = EncoderParams::<f64>::init(&EncoderConfig { vocab_size: 4, dim: 2, feature_dim: 1, ..Default::default() }).unwrap();
        let s = p.to_checkpoint_string();
        let cut: String = s.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(EncoderParams::<f64>::parse_checkpoint(&cut).is_err());
    }

    #[test]
    fn frozen_clone_is_independent() {
        let mut p = EncoderParams::<f64>::init(&EncoderConfig { vocab_size: 8, dim: 2, feature_dim: 1, ..Default::default() }).unwrap();
        let frozen = p.clone_frozen();
        let before = frozen.checksum();
        p.row_mut(3)[0] += 1.0;
        assert_eq!(frozen.checksum(), before);
        assert_ne!(p.checksum(), before);
        assert_eq!(*frozen.clone_frozen(), *frozen);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = EncoderConfig { vocab_size: 64, dim: 8, feature_dim: 4, seed: 5, ..Default::default() };
        let a = EncoderParams::<f64>::init(&cfg).unwrap();
        assert_eq!(a, EncoderParams::<f64>::init(&cfg).unwrap());
        assert!(a.table.iter().chain(&a.projector).all(|v| v.abs() <= 0.1));
    }
}
