//! Test-time paths: embedding extraction, retrieval ranking, generative
//! metrics, and generation utilities. Everything here runs the networks in
//! eval mode with fixed reduction orders, so repeated calls agree bitwise.

pub mod embeddings;
pub mod fid;
pub mod generate;
pub mod rank;
pub mod ssim;

pub use embeddings::{extract, EmbeddingSet};
pub use fid::{fid, teacher_features};
pub use generate::{interpolate, swap_grid, InterpMode, SwapGrid};
pub use rank::{rank_queries, RetrievalResult};
pub use ssim::{ssim_images, ssim_intra_class, ssim_luma};

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Write a machine-readable key-value report: one `key<TAB>value` line per
/// entry, in the given order.
pub fn write_report(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in pairs {
        writeln!(f, "{}\t{}", k, v)?;
    }
    f.flush()?;
    Ok(())
}

/// Human-readable two-column table for terminal output.
pub fn render_table(pairs: &[(String, String)]) -> String {
    let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{:width$}  {}\n", k, v, width = width));
    }
    out
}
