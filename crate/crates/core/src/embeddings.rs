//! Pre-trained word vectors and term composition.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Vec<f64>,
    oov_seed: u64,
    oov_norm: f64,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` rows. Later duplicates win.
    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f64>)>, oov_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        let mut table = EmbeddingTable {
            dim,
            index: HashMap::with_capacity(rows.len()),
            tokens: Vec::with_capacity(rows.len()),
            vectors: Vec::with_capacity(rows.len() * dim),
            oov_seed,
            oov_norm: 1.0,
        };
        for (token, vector) in rows {
            if vector.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "vector for {token:?} has {} components, expected {dim}",
                    vector.len()
                )));
            }
            match table.index.get(&token) {
                Some(&row) => table.vectors[row * dim..(row + 1) * dim].copy_from_slice(&vector),
                None => {
                    table.index.insert(token.clone(), table.tokens.len());
                    table.tokens.push(token);
                    table.vectors.extend(vector);
                }
            }
        }
        table.oov_norm = table.median_norm().unwrap_or(1.0);
        Ok(table)
    }

    /// Reads `token f_1 ... f_D` lines. A leading `count dim` header line, as
    /// written by word2vec tools, is skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Embeddings {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut dim = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else {
                continue;
            };
            let rest: Vec<&str> = fields.collect();
            if rows.is_empty()
                && dim.is_none()
                && rest.len() == 1
                && token.parse::<usize>().is_ok()
                && rest[0].parse::<usize>().is_ok()
            {
                dim = rest[0].parse::<usize>().ok();
                continue;
            }
            let vector = rest
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(lineno, format!("bad number: {e}")))?;
            match dim {
                None => {
                    if vector.is_empty() {
                        return Err(err(lineno, format!("token {token:?} has no components")));
                    }
                    dim = Some(vector.len());
                }
                Some(d) if d != vector.len() => {
                    return Err(err(
                        lineno,
                        format!("expected {d} components, found {}", vector.len()),
                    ));
                }
                _ => {}
            }
            rows.push((token.to_string(), vector));
        }
        let Some(dim) = dim.filter(|_| !rows.is_empty()) else {
            return Err(err(0, "no embedding rows".into()));
        };
        Self::from_rows(dim, rows, 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for (row, token) in self.tokens.iter().enumerate() {
            write!(out, "{token}").unwrap();
            for v in &self.vectors[row * self.dim..(row + 1) * self.dim] {
                write!(out, " {v}").unwrap();
            }
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn with_oov_seed(mut self, seed: u64) -> Self {
        self.oov_seed = seed;
        self
    }

    fn row(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&r| &self.vectors[r * self.dim..(r + 1) * self.dim])
    }

    /// Median Euclidean norm over the stored rows.
    pub fn median_norm(&self) -> Option<f64> {
        let mut norms: Vec<f64> = self
            .vectors
            .chunks_exact(self.dim)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if norms.is_empty() {
            return None;
        }
        norms.sort_by(f64::total_cmp);
        let mid = norms.len() / 2;
        Some(if norms.len() % 2 == 1 {
            norms[mid]
        } else {
            0.5 * (norms[mid - 1] + norms[mid])
        })
    }

    /// Stored vector, or for unknown tokens a Gaussian direction seeded by a
    /// hash of the token, rescaled to the median in-vocabulary norm.
    pub fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        if token.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty token".into()));
        }
        if let Some(row) = self.row(token) {
            return Ok(row.to_vec());
        }
        let digest = Sha256::new()
            .chain_update(self.oov_seed.to_le_bytes())
            .chain_update(token.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let k = self.oov_norm / norm;
        v.iter_mut().for_each(|x| *x *= k);
        Ok(v)
    }

    /// Sum of the token vectors of a (possibly multi-word) term.
    pub fn embed_term(&self, term: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(term);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "term {term:?} has no tokens"
            )));
        }
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            for (s, x) in sum.iter_mut().zip(self.embed_token(t)?) {
                *s += x;
            }
        }
        Ok(sum)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn loads_rows_and_infers_dim() {
        let f = write("centre 0.1 0.2 0.3\nnorth -1 0 2.5\n");
        let t = EmbeddingTable::load(f.path()).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert_eq!(t.embed_token("centre").unwrap(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn skips_word2vec_header() {
        let f = write("2 2\na 1 0\nb 0 1\n");
        let t = EmbeddingTable::load(f.path()).unwrap();
        assert_eq!((t.len(), t.dim()), (2, 2));
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        let f = write("a 1 2 3\nb 1 2\n");
        match EmbeddingTable::load(f.path()) {
            Err(Error::Embeddings { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write("");
        assert!(EmbeddingTable::load(f.path()).is_err());
        let f = write("\n\n");
        assert!(EmbeddingTable::load(f.path()).is_err());
    }

    #[test]
    fn oov_is_deterministic_and_norm_matched() {
        let rows = vec![
            ("a".to_string(), vec![3.0, 4.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0, 0.0]),
            ("c".to_string(), vec![2.0, 0.0, 0.0]),
        ];
        let t = EmbeddingTable::from_rows(3, rows, 11).unwrap();
        let m = t.median_norm().unwrap();
        assert_eq!(m, 2.0);
        let a = t.embed_token("zzzqx").unwrap();
        let b = t.embed_token("zzzqx").unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm >= 0.5 * m && norm <= 2.0 * m);
        assert_ne!(a, t.embed_token("zzzqy").unwrap());
        // a different OOV seed moves unknown tokens only
        let t2 = t.clone().with_oov_seed(12);
        assert_ne!(a, t2.embed_token("zzzqx").unwrap());
        assert_eq!(t2.embed_token("a").unwrap(), vec![3.0, 4.0, 0.0]);
    }

    #[test]
    fn term_is_token_sum() {
        let rows = vec![
            ("price".to_string(), vec![0.5, -1.0]),
            ("range".to_string(), vec![0.25, 2.0]),
        ];
        let t = EmbeddingTable::from_rows(2, rows, 0).unwrap();
        assert_eq!(t.embed_term("price range").unwrap(), vec![0.75, 1.0]);
        assert_eq!(
            t.embed_term("price").unwrap(),
            t.embed_token("price").unwrap()
        );
        assert!(t.embed_term("").is_err());
        assert!(t.embed_token("").is_err());
    }
}
