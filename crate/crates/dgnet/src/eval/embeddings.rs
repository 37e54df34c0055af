//! Retrieval embeddings: the two appearance-head features joined into one
//! vector, with the fine half scaled by the test-time weight.

use std::io::{Read, Write};
use std::path::Path;

use autograd::Tape;
use ndarray::{Array2, Axis};

use crate::data::{Item, Preprocess};
use crate::error::{DgError, Result};
use crate::nets::AppearanceEncoder;

/// Embeddings for a set of samples plus the manifest fields that the
/// ranking protocol needs.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    /// One row per sample: `concat(f_prim, beta * f_fine)`.
    pub vecs: Array2<f64>,
    pub pids: Vec<i64>,
    pub cams: Vec<u32>,
    pub paths: Vec<String>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vecs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binary matrix plus a TSV manifest (`path<TAB>pid<TAB>cam`). The two
    /// files describe the same rows in the same order.
    pub fn save(&self, matrix: &Path, manifest: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(matrix)?);
        f.write_all(b"EMBMAT1\n")?;
        f.write_all(&(self.vecs.nrows() as u64).to_le_bytes())?;
        f.write_all(&(self.vecs.ncols() as u64).to_le_bytes())?;
        for v in self.vecs.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let mut m = std::io::BufWriter::new(std::fs::File::create(manifest)?);
        for i in 0..self.len() {
            writeln!(m, "{}\t{}\t{}", self.paths[i], self.pids[i], self.cams[i])?;
        }
        m.flush()?;
        Ok(())
    }

    pub fn load(matrix: &Path, manifest: &Path) -> Result<EmbeddingSet> {
        let mut f = std::io::BufReader::new(std::fs::File::open(matrix)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"EMBMAT1\n" {
            return Err(DgError::Data(format!("{}: not an embedding matrix", matrix.display())));
        }
        let mut u = [0u8; 8];
        f.read_exact(&mut u)?;
        let rows = u64::from_le_bytes(u) as usize;
        f.read_exact(&mut u)?;
        let cols = u64::from_le_bytes(u) as usize;
        let mut data = vec![0f64; rows * cols];
        for v in data.iter_mut() {
            f.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        let vecs = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| DgError::Data(format!("{}: {}", matrix.display(), e)))?;

        let text = std::fs::read_to_string(manifest)?;
        let mut pids = Vec::new();
        let mut cams = Vec::new();
        let mut paths = Vec::new();
        for line in text.lines() {
            let mut parts = line.split('\t');
            let (p, pid, cam) = (parts.next(), parts.next(), parts.next());
            match (p, pid.and_then(|s| s.parse().ok()), cam.and_then(|s| s.parse().ok())) {
                (Some(p), Some(pid), Some(cam)) => {
                    paths.push(p.to_string());
                    pids.push(pid);
                    cams.push(cam);
                }
                _ => {
                    return Err(DgError::Data(format!(
                        "{}: malformed manifest line {:?}",
                        manifest.display(),
                        line
                    )))
                }
            }
        }
        if paths.len() != rows {
            return Err(DgError::Data(format!(
                "manifest rows {} do not match matrix rows {}",
                paths.len(),
                rows
            )));
        }
        Ok(EmbeddingSet { vecs, pids, cams, paths })
    }
}

/// Run the appearance encoder in eval mode over `items` and build the
/// joined embedding rows. `chunk` bounds the batch size per forward pass.
pub fn extract(
    ea: &AppearanceEncoder,
    pre: &Preprocess,
    items: &[&Item],
    beta: f64,
    chunk: usize,
) -> Result<EmbeddingSet> {
    assert!(chunk > 0);
    let dim = 2 * ea.head_dim;
    let mut vecs = Array2::<f64>::zeros((items.len(), dim));
    let mut row = 0;
    for group in items.chunks(chunk) {
        let x = pre.batch(group)?;
        let mut t = Tape::new();
        let xn = t.constant(x.into_dyn());
        let code = ea.encode(&mut t, xn, false);
        let (fp, ff) = ea.project(&mut t, code);
        let fpd = t.data(fp);
        let ffd = t.data(ff);
        for n in 0..group.len() {
            for j in 0..ea.head_dim {
                vecs[[row, j]] = fpd[[n, j]];
                vecs[[row, ea.head_dim + j]] = beta * ffd[[n, j]];
            }
            row += 1;
        }
    }
    Ok(EmbeddingSet {
        vecs,
        pids: items.iter().map(|it| it.pid).collect(),
        cams: items.iter().map(|it| it.cam).collect(),
        paths: items.iter().map(|it| it.path.display().to_string()).collect(),
    })
}

/// Scale every row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}
