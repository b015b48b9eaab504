//! Pattern analysis: row/column structure of pruned matrices, PGM export and
//! embedding-neighbourhood overlap.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::pattern::SparsePattern;
use crate::report::{csv_field, write_text};
use crate::tensor::Tensor;

/// Density a row or column needs to count as structured.
pub const STRUCTURE_THRESHOLD: f64 = 0.9;

/// Nonzero layout of one `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureProfile {
    pub rows: usize,
    pub cols: usize,
    pub row_density: Vec<f64>,
    pub col_density: Vec<f64>,
    /// Fraction of nonzeros lying in columns at or above the threshold.
    pub column_score: f64,
    /// Fraction of nonzeros lying in rows at or above the threshold.
    pub row_score: f64,
    pub density: f64,
}

/// Profiles the complement of `zeros` (row-major flat indices) in a
/// `rows × cols` matrix. A matrix with no nonzeros scores 0 on both axes.
pub fn structure_profile(zeros: &[usize], rows: usize, cols: usize) -> Result<StructureProfile> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("structure profile of a {rows}×{cols} matrix")));
    }
    let n = rows * cols;
    let mut kept = vec![true; n];
    for &i in zeros {
        if i >= n {
            return Err(Error::InvalidArgument(format!("zero index {i} outside {rows}×{cols}")));
        }
        kept[i] = false;
    }
    let mut row_nz = vec![0usize; rows];
    let mut col_nz = vec![0usize; cols];
    for (i, _) in kept.iter().enumerate().filter(|(_, &k)| k) {
        row_nz[i / cols] += 1;
        col_nz[i % cols] += 1;
    }
    let total: usize = row_nz.iter().sum();
    let row_density: Vec<f64> = row_nz.iter().map(|&c| c as f64 / cols as f64).collect();
    let col_density: Vec<f64> = col_nz.iter().map(|&c| c as f64 / rows as f64).collect();
    let score = |counts: &[usize], dens: &[f64]| {
        if total == 0 {
            return 0.0;
        }
        let inside: usize = counts.iter().zip(dens).filter(|(_, &d)| d >= STRUCTURE_THRESHOLD).map(|(&c, _)| c).sum();
        inside as f64 / total as f64
    };
    Ok(StructureProfile {
        rows,
        cols,
        column_score: score(&col_nz, &col_density),
        row_score: score(&row_nz, &row_density),
        row_density,
        col_density,
        density: total as f64 / n as f64,
    })
}

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidArgument(format!("`{name}` is not a matrix (shape {s:?})"))),
    }
}

/// Profiles every attention query and key matrix named in `pattern`.
pub fn query_key_profiles(params: &ParamSet, pattern: &SparsePattern) -> Result<Vec<(String, StructureProfile)>> {
    let mut out = Vec::new();
    for (name, zeros) in &pattern.zeros {
        if !(name.ends_with("attn.query.w") || name.ends_with("attn.key.w")) {
            continue;
        }
        let (r, c) = matrix_dims(params.tensor(name)?, name)?;
        out.push((name.clone(), structure_profile(zeros, r, c)?));
    }
    Ok(out)
}

pub const STRUCTURE_COLUMNS: [&str; 7] = ["matrix", "rows", "cols", "density", "column_score", "row_score", "label"];

/// One CSV line per profile. `label` tags the model the profiles belong to.
pub fn structure_csv(profiles: &[(String, StructureProfile)], label: &str) -> String {
    let mut out = STRUCTURE_COLUMNS.join(",");
    out.push('\n');
    for (name, p) in profiles {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(name),
            p.rows,
            p.cols,
            p.density,
            p.column_score,
            p.row_score,
            csv_field(label)
        ));
    }
    out
}

/// Binary greyscale image of a mask: 0 for pruned, 255 for kept, one pixel
/// per weight, rows top to bottom.
pub fn pgm_bytes(zeros: &[usize], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("cannot render a {rows}×{cols} mask")));
    }
    let header = format!("P5\n{cols} {rows}\n255\n");
    let mut out = Vec::with_capacity(header.len() + rows * cols);
    out.extend_from_slice(header.as_bytes());
    let start = out.len();
    out.resize(start + rows * cols, 255);
    for &i in zeros {
        if i >= rows * cols {
            return Err(Error::InvalidArgument(format!("zero index {i} outside {rows}×{cols}")));
        }
        out[start + i] = 0;
    }
    Ok(out)
}

pub fn export_pattern_pgm(zeros: &[usize], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = pgm_bytes(zeros, rows, cols)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a mask image back into `(rows, cols, zeros)`. Accepts only the
/// layout written by [`pgm_bytes`].
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<usize>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..].iter().position(|b| b.is_ascii_whitespace()).ok_or("truncated header")? + pos;
        fields.push(std::str::from_utf8(&bytes[pos..end]).map_err(|_| "header is not ASCII")?.to_string());
        pos = end + 1;
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {:?}", fields[0]));
    }
    let cols: usize = fields[1].parse().map_err(|_| "bad width")?;
    let rows: usize = fields[2].parse().map_err(|_| "bad height")?;
    if fields[3] != "255" {
        return Err(format!("expected maxval 255, found {}", fields[3]));
    }
    let body = &bytes[pos..];
    if body.len() != rows * cols {
        return Err(format!("expected {} pixels, found {}", rows * cols, body.len()));
    }
    let mut zeros = Vec::new();
    for (i, &b) in body.iter().enumerate() {
        match b {
            0 => zeros.push(i),
            255 => {}
            v => return Err(format!("pixel {i} has value {v}")),
        }
    }
    Ok((rows, cols, zeros))
}

/// Mean k-nearest-neighbour agreement between two embedding tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborOverlap {
    pub mean: f64,
    /// Tokens skipped because their row has zero norm in either table.
    pub excluded: usize,
}

/// Cosine k-nearest neighbours of every row of `table`, skipping the row
/// itself and rows in `skip`. Ties go to the lower id.
fn knn(table: &Tensor, k: usize, skip: &[bool]) -> Vec<Vec<usize>> {
    let (n, d) = (table.shape()[0], table.shape()[1]);
    let rows: Vec<&[f64]> = table.data().chunks(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    (0..n)
        .map(|i| {
            if skip[i] {
                return Vec::new();
            }
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && !skip[j])
                .map(|j| {
                    let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j]), j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut ids: Vec<usize> = sims.into_iter().take(k).map(|s| s.1).collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

/// Overlap of cosine neighbourhoods between two `[vocab, dim]` tables.
pub fn neighbor_overlap_tables(a: &Tensor, b: &Tensor, k: usize) -> Result<NeighborOverlap> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!("neighbor overlap: tables {:?} and {:?}", a.shape(), b.shape())));
    }
    let vocab = a.shape()[0];
    if k == 0 || k >= vocab {
        return Err(Error::InvalidArgument(format!("k must lie in 1..{vocab}, got {k}")));
    }
    let zero_row = |t: &Tensor, i: usize| {
        let d = t.shape()[1];
        t.data()[i * d..(i + 1) * d].iter().all(|&v| v == 0.0)
    };
    let skip: Vec<bool> = (0..vocab).map(|i| zero_row(a, i) || zero_row(b, i)).collect();
    let excluded = skip.iter().filter(|&&s| s).count();
    if vocab - excluded <= k {
        return Err(Error::InvalidArgument(format!("only {} non-degenerate rows for k={k}", vocab - excluded)));
    }
    let (na, nb) = (knn(a, k, &skip), knn(b, k, &skip));
    let mut total = 0.0;
    for i in (0..vocab).filter(|&i| !skip[i]) {
        let shared = na[i].iter().filter(|j| nb[i].binary_search(j).is_ok()).count();
        total += shared as f64 / k as f64;
    }
    Ok(NeighborOverlap { mean: total / (vocab - excluded) as f64, excluded })
}

/// Overlap between the token-embedding tables of two models.
pub fn neighbor_overlap(a: &ParamSet, b: &ParamSet, k: usize) -> Result<NeighborOverlap> {
    neighbor_overlap_tables(a.tensor("embed.token")?, b.tensor("embed.token")?, k)
}

/// Expected overlap between unrelated neighbourhoods.
pub fn random_overlap_baseline(vocab: usize, k: usize) -> f64 {
    k as f64 / (vocab as f64 - 1.0)
}

/// Writes the analysis CSV and one PGM per query/key matrix into `dir`.
pub fn write_analysis(params: &ParamSet, pattern: &SparsePattern, label: &str, dir: &Path) -> Result<Vec<(String, StructureProfile)>> {
    let profiles = query_key_profiles(params, pattern)?;
    write_text(&dir.join("structure.csv"), &structure_csv(&profiles, label))?;
    for (name, p) in &profiles {
        export_pattern_pgm(&pattern.zeros[name], p.rows, p.cols, &dir.join(format!("{name}.pgm")))?;
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_format() {
        let bytes = pgm_bytes(&[0], 2, 2).unwrap();
        let mut want = b"P5\n2 2\n255\n".to_vec();
        want.extend([0, 255, 255, 255]);
        assert_eq!(bytes, want);
        assert_eq!(parse_pgm(&bytes).unwrap(), (2, 2, vec![0]));
        assert!(parse_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn three_full_columns() {
        let (r, c) = (8, 10);
        let zeros: Vec<usize> = (0..r * c).filter(|i| i % c >= 3).collect();
        let p = structure_profile(&zeros, r, c).unwrap();
        assert_eq!(p.column_score, 1.0);
        assert_eq!(p.row_score, 0.0);
        assert!((p.density - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dense_and_empty() {
        let p = structure_profile(&[], 4, 5).unwrap();
        assert_eq!((p.column_score, p.row_score, p.density), (1.0, 1.0, 1.0));
        let all: Vec<usize> = (0..20).collect();
        let p = structure_profile(&all, 4, 5).unwrap();
        assert_eq!((p.column_score, p.row_score, p.density), (0.0, 0.0, 0.0));
    }

    #[test]
    fn overlap_rejects_bad_k() {
        let t = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(neighbor_overlap_tables(&t, &t, 3).is_err());
        assert_eq!(neighbor_overlap_tables(&t, &t, 1).unwrap().mean, 1.0);
    }

    #[test]
    fn zero_rows_are_excluded() {
        let t = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let o = neighbor_overlap_tables(&t, &t, 1).unwrap();
        assert_eq!(o, NeighborOverlap { mean: 1.0, excluded: 1 });
    }
}
