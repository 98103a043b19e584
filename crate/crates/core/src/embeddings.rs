//! Word-embedding tables and orthogonal Procrustes alignment between them.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{svd_small, Tensor};

pub const SS_TOKEN: &str = "[ss]";
pub const PAD_TOKEN: &str = "[pad]";
pub const OOV_TOKEN: &str = "[unk]";

/// Vocabulary with fixed word vectors.
///
/// Rows `0..loaded_len()` come from the source file. The sentence-start,
/// pad and OOV rows follow unless the file already provided them. The
/// pad row is all zeros and the OOV row is the mean of the loaded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    loaded: usize,
    ss_id: usize,
    pad_id: usize,
    oov_id: usize,
    duplicates: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` entries; the first occurrence of a word wins.
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            loaded: 0,
            ss_id: 0,
            pad_id: 0,
            oov_id: 0,
            duplicates: 0,
        };
        for (word, vector) in entries {
            if vector.len() != dim {
                return Err(Error::Config(format!(
                    "vector for {word:?} has {} components, expected {dim}",
                    vector.len()
                )));
            }
            if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
                return Err(Error::Config(format!("vector for {word:?} has non-finite value {bad}")));
            }
            if table.index.contains_key(&word) {
                table.duplicates += 1;
                continue;
            }
            table.push_row(word, &vector);
        }
        table.loaded = table.words.len();
        table.add_specials();
        Ok(table)
    }

    fn push_row(&mut self, word: String, vector: &[f32]) -> usize {
        let id = self.words.len();
        self.index.insert(word.clone(), id);
        self.words.push(word);
        self.vectors.extend_from_slice(vector);
        id
    }

    fn add_specials(&mut self) {
        let mut mean = vec![0f64; self.dim];
        for row in self.vectors.chunks_exact(self.dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let n = self.loaded.max(1) as f64;
        let mean: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();

        let zeros = vec![0f32; self.dim];
        self.ss_id = match self.index.get(SS_TOKEN) {
            Some(&id) => id,
            None => self.push_row(SS_TOKEN.into(), &zeros),
        };
        self.pad_id = match self.index.get(PAD_TOKEN) {
            Some(&id) => {
                self.vectors[id * self.dim..(id + 1) * self.dim].fill(0.0);
                id
            }
            None => self.push_row(PAD_TOKEN.into(), &zeros),
        };
        // The OOV row never shadows a real word, so it is not indexed.
        self.oov_id = self.words.len();
        self.words.push(OOV_TOKEN.into());
        self.vectors.extend_from_slice(&mean);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total rows, including the special rows.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loaded == 0
    }

    /// Number of rows read from the source.
    pub fn loaded_len(&self) -> usize {
        self.loaded
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn ss_id(&self) -> usize {
        self.ss_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn oov_id(&self) -> usize {
        self.oov_id
    }

    pub fn oov_vector(&self) -> &[f32] {
        self.row(self.oov_id)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// The loaded words in file order.
    pub fn words(&self) -> &[String] {
        &self.words[..self.loaded]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Row id and vector of `word`, falling back to the OOV row.
    pub fn lookup(&self, word: &str) -> (usize, &[f32]) {
        let id = self.id(word).unwrap_or(self.oov_id);
        (id, self.row(id))
    }

    /// The loaded rows as an `n × dim` matrix.
    pub fn loaded_matrix(&self) -> Tensor<f64> {
        let data = self.vectors[..self.loaded * self.dim].iter().map(|&v| v as f64).collect();
        Tensor::new([self.loaded.max(1), self.dim], data).unwrap_or_else(|_| Tensor::zeros([1, self.dim]))
    }

    /// Writes the loaded rows in word2vec text format.
    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {}", self.loaded, self.dim)?;
        for (id, word) in self.words().iter().enumerate() {
            write!(out, "{word}")?;
            for v in self.row(id) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a word2vec-style text file: a `count dim` header, then `word v1 … v_dim` lines.
pub fn load_embeddings_text(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields[..] {
        [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
            (Ok(c), Ok(d)) if d > 0 => (c, d),
            _ => return Err(Error::parse(path, 1, format!("malformed header {header:?}"))),
        },
        _ => return Err(Error::parse(path, 1, format!("malformed header {header:?}"))),
    };

    let mut entries = Vec::with_capacity(count);
    for (i, line) in lines {
        if entries.len() == count {
            break;
        }
        let lineno = i + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            return Err(Error::parse(path, lineno, "empty line"));
        };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} values for {word:?}, found {}", values.len()),
            ));
        }
        let mut vector = Vec::with_capacity(dim);
        for v in values {
            match v.parse::<f32>() {
                Ok(x) if x.is_finite() => vector.push(x),
                _ => return Err(Error::parse(path, lineno, format!("bad value {v:?}"))),
            }
        }
        entries.push((word.to_string(), vector));
    }
    let table = EmbeddingTable::from_entries(dim, entries)?;
    if table.duplicates() > 0 {
        warn!("{}: {} duplicate word(s) ignored", path.display(), table.duplicates());
    }
    Ok(table)
}

/// Word translation pairs `(source, target)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranslationDictionary {
    pub pairs: Vec<(String, String)>,
}

impl TranslationDictionary {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        TranslationDictionary { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Reads `source<TAB>target` lines; blank lines are skipped.
pub fn load_dictionary(path: impl AsRef<Path>) -> Result<TranslationDictionary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected source<TAB>target"));
        };
        let (src, tgt) = (src.trim(), tgt.trim());
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::parse(path, i + 1, "empty word in pair"));
        }
        pairs.push((src.to_string(), tgt.to_string()));
    }
    Ok(TranslationDictionary { pairs })
}

/// Orthogonal map from the target space into the source space.
#[derive(Clone, Debug)]
pub struct ProjectionMatrix {
    pub w: Tensor<f64>,
    pub pairs_used: usize,
    /// `‖X_T·w − X_S‖_F` on the dictionary rows.
    pub residual: f64,
    /// `‖X_T − X_S‖_F`, the residual of the identity map.
    pub identity_residual: f64,
}

impl ProjectionMatrix {
    /// `‖wᵀw − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.w.shape()[0];
        let wtw = self.w.transpose().unwrap().matmul(&self.w).unwrap();
        wtw.sub(&Tensor::eye(d)).unwrap().norm()
    }

    /// Projects `x[n×d]` row-wise: `x · w`.
    pub fn project(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        x.matmul(&self.w)
    }

    /// Projects every loaded row of `table` into the source space.
    pub fn project_table(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        if table.dim() != self.w.shape()[0] {
            return Err(Error::shape("project_table", &[table.dim()], self.w.shape()));
        }
        let projected = self.project(&table.loaded_matrix())?;
        let d = table.dim();
        let entries = table.words().iter().enumerate().map(|(i, word)| {
            let row = projected.data()[i * d..(i + 1) * d].iter().map(|&v| v as f32).collect();
            (word.clone(), row)
        });
        EmbeddingTable::from_entries(d, entries.collect::<Vec<_>>())
    }
}

/// Solves `min ‖X_T·w − X_S‖_F` over orthogonal `w` for row-aligned matrices.
pub fn procrustes(source: &Tensor<f64>, target: &Tensor<f64>) -> Result<ProjectionMatrix> {
    if source.shape() != target.shape() || source.rank() != 2 {
        return Err(Error::shape("procrustes", source.shape(), target.shape()));
    }
    let cross = target.transpose()?.matmul(source)?;
    let svd = svd_small(&cross)?;
    let w = svd.u.matmul(&svd.v.transpose()?)?;
    let residual = target.matmul(&w)?.sub(source)?.norm();
    let identity_residual = target.sub(source)?.norm();
    Ok(ProjectionMatrix {
        w,
        pairs_used: source.shape()[0],
        residual,
        identity_residual,
    })
}

/// Learns the projection of `target` into `source` from dictionary pairs.
///
/// Pairs with a word missing from either vocabulary are dropped; at least
/// `dim` usable pairs must remain.
pub fn procrustes_align(
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    dict: &TranslationDictionary,
) -> Result<ProjectionMatrix> {
    if source.dim() != target.dim() {
        return Err(Error::shape("procrustes_align", &[source.dim()], &[target.dim()]));
    }
    let d = source.dim();
    let usable: Vec<(usize, usize)> = dict
        .pairs
        .iter()
        .filter_map(|(s, t)| Some((source.id(s)?, target.id(t)?)))
        .filter(|&(s, t)| s < source.loaded_len() && t < target.loaded_len())
        .collect();
    if usable.len() < d {
        return Err(Error::TooFewPairs {
            usable: usable.len(),
            required: d,
        });
    }
    let gather = |table: &EmbeddingTable, ids: &mut dyn Iterator<Item = usize>| {
        let data: Vec<f64> = ids.flat_map(|id| table.row(id).iter().map(|&v| v as f64)).collect();
        Tensor::new([usable.len(), d], data)
    };
    let xs = gather(source, &mut usable.iter().map(|p| p.0))?;
    let xt = gather(target, &mut usable.iter().map(|p| p.1))?;
    procrustes(&xs, &xt)
}
