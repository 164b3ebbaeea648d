//! Persistent retrieval index over pyramid cell embeddings.
//!
//! An image's score against a query is the maximum cosine similarity over
//! all of its stored cells (the crop matches *somewhere* in the image);
//! results are ranked by descending score with ties broken by ascending
//! image id.
//!
//! Binary layout (integers little-endian):
//!
//! ```text
//! magic  b"GSKI", version u32, dim u32, image_count u64
//! per image:
//!   id_len u32, id bytes; path_len u32, path bytes
//!   cell_count u32
//!   per cell: level u8, row u16, col u16, dim * f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imops::{decode_image, encode_png, resize, Image, Interpolation};
use crate::net::Model;

pub const INDEX_MAGIC: &[u8; 4] = b"GSKI";
pub const INDEX_VERSION: u32 = 1;

/// `(level, row, col)` address of a stored cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub level: u8,
    pub row: u16,
    pub col: u16,
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub image_id: String,
    pub path: String,
    cells: Vec<CellKey>,
    /// Flat `[cells.len() * dim]` unit-norm vectors.
    vectors: Vec<f32>,
}

impl IndexEntry {
    pub fn cells(&self) -> &[CellKey] {
        &self.cells
    }

    pub fn vector(&self, i: usize, dim: usize) -> &[f32] {
        &self.vectors[i * dim..(i + 1) * dim]
    }
}

/// One ranked search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub image_id: String,
    pub score: f32,
    pub best_cell: CellKey,
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.iter().any(|e| e.image_id == image_id)
    }

    /// Encodes every dataset image through Pipeline 2 and stores all cell
    /// embeddings. Unreadable files are reported back and skipped; zero
    /// successes is a hard error. Deterministic given weights and dataset
    /// order.
    pub fn build(
        model: &Model<f32>,
        data: &Dataset,
    ) -> Result<(Self, Vec<(String, String)>)> {
        let dim = model.cfg.embed_dim;
        let results: Vec<std::result::Result<IndexEntry, (String, String)>> = data
            .entries()
            .par_iter()
            .map(|(id, path)| {
                let build_one = || -> Result<IndexEntry> {
                    let img = decode_image(path)?;
                    let full = resize(
                        &img,
                        model.cfg.image_size,
                        model.cfg.image_size,
                        Interpolation::Bilinear,
                    )?;
                    let pyr = model.encode_image(&full)?;
                    let mut cells = Vec::new();
                    let mut vectors = Vec::new();
                    for grid in &pyr.grids {
                        for r in 0..grid.rows {
                            for c in 0..grid.cols {
                                cells.push(CellKey {
                                    level: grid.level as u8,
                                    row: r as u16,
                                    col: c as u16,
                                });
                                vectors.extend_from_slice(grid.cell_slice(r, c));
                            }
                        }
                    }
                    Ok(IndexEntry {
                        image_id: id.clone(),
                        path: path.to_string_lossy().into_owned(),
                        cells,
                        vectors,
                    })
                };
                build_one().map_err(|e| (path.to_string_lossy().into_owned(), e.to_string()))
            })
            .collect();

        let mut entries = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(e) => entries.push(e),
                Err(f) => failures.push(f),
            }
        }
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "indexing failed for all {} images",
                data.len()
            )));
        }
        Ok((RetrievalIndex { dim, entries }, failures))
    }

    /// Top-k images by max-over-cells cosine similarity. Ties break by
    /// ascending image id; within an image, the earliest stored cell wins.
    pub fn query(&self, z_query: &[f32], k: usize) -> Result<Vec<RankedResult>> {
        if z_query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "index_query",
                detail: format!("query dim {} vs index dim {}", z_query.len(), self.dim),
            });
        }
        if k == 0 {
            return Err(Error::Data("k must be at least 1".into()));
        }
        let mut scored: Vec<RankedResult> = self
            .entries
            .iter()
            .map(|e| {
                let mut best = f64::NEG_INFINITY;
                let mut best_cell = 0usize;
                for (i, cell) in e.vectors.chunks_exact(self.dim).enumerate() {
                    let dot: f64 = z_query
                        .iter()
                        .zip(cell)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    if dot > best {
                        best = dot;
                        best_cell = i;
                    }
                }
                RankedResult {
                    image_id: e.image_id.clone(),
                    score: best as f32,
                    best_cell: e.cells[best_cell],
                }
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let werr = |e| Error::io(path, e);

        w.write_all(INDEX_MAGIC).map_err(werr)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(werr)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())
            .map_err(werr)?;
        for e in &self.entries {
            for s in [&e.image_id, &e.path] {
                w.write_all(&(s.len() as u32).to_le_bytes()).map_err(werr)?;
                w.write_all(s.as_bytes()).map_err(werr)?;
            }
            w.write_all(&(e.cells.len() as u32).to_le_bytes())
                .map_err(werr)?;
            for (i, cell) in e.cells.iter().enumerate() {
                w.write_all(&[cell.level]).map_err(werr)?;
                w.write_all(&cell.row.to_le_bytes()).map_err(werr)?;
                w.write_all(&cell.col.to_le_bytes()).map_err(werr)?;
                for v in e.vector(i, self.dim) {
                    w.write_all(&v.to_le_bytes()).map_err(werr)?;
                }
            }
        }
        w.flush().map_err(werr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::CorruptFile {
            path: path.to_path_buf(),
            detail,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut read = |n: usize, what: &str| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
            Ok(buf)
        };
        let magic = read(4, "magic")?;
        if magic != INDEX_MAGIC {
            return Err(corrupt("bad magic (not an index file)".into()));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_of(read(4, "version")?);
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let dim = u32_of(read(4, "dim")?) as usize;
        if dim == 0 || dim > 1 << 16 {
            return Err(corrupt(format!("implausible dim {dim}")));
        }
        let count_bytes = read(8, "image count")?;
        let count = u64::from_le_bytes(count_bytes.try_into().expect("8 bytes")) as usize;
        if count > 10_000_000 {
            return Err(corrupt(format!("implausible image count {count}")));
        }

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = u32_of(read(4, "id length")?) as usize;
            if id_len > 1 << 16 {
                return Err(corrupt(format!("implausible id length {id_len}")));
            }
            let image_id = String::from_utf8(read(id_len, "image id")?)
                .map_err(|_| corrupt("image id is not UTF-8".into()))?;
            let path_len = u32_of(read(4, "path length")?) as usize;
            if path_len > 1 << 16 {
                return Err(corrupt(format!("implausible path length {path_len}")));
            }
            let src_path = String::from_utf8(read(path_len, "path")?)
                .map_err(|_| corrupt("path is not UTF-8".into()))?;
            let cell_count = u32_of(read(4, "cell count")?) as usize;
            if cell_count > 1 << 24 {
                return Err(corrupt(format!("implausible cell count {cell_count}")));
            }
            let mut cells = Vec::with_capacity(cell_count);
            let mut vectors = Vec::with_capacity(cell_count * dim);
            for _ in 0..cell_count {
                let head = read(5, "cell header")?;
                cells.push(CellKey {
                    level: head[0],
                    row: u16::from_le_bytes([head[1], head[2]]),
                    col: u16::from_le_bytes([head[3], head[4]]),
                });
                let raw = read(dim * 4, "cell vector")?;
                vectors.extend(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                );
            }
            entries.push(IndexEntry {
                image_id,
                path: src_path,
                cells,
                vectors,
            });
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(corrupt("trailing bytes after last entry".into())),
            Err(e) => return Err(Error::io(path, e)),
        }

        let ids: std::collections::HashSet<&String> =
            entries.iter().map(|e| &e.image_id).collect();
        if ids.len() != entries.len() {
            return Err(corrupt("duplicate image ids".into()));
        }
        Ok(RetrievalIndex { dim, entries })
    }
}

/// Border color for rank `r` (1-based) of `k`: channelwise-linear gradient
/// from red (`#FF0000`, rank 1) to blue (`#0000FF`, rank k).
pub fn rank_border_color(rank: usize, k: usize) -> (u8, u8, u8) {
    assert!(rank >= 1 && rank <= k.max(1));
    let t = if k <= 1 {
        0.0
    } else {
        (rank - 1) as f64 / (k - 1) as f64
    };
    (
        (255.0 * (1.0 - t)).round() as u8,
        0,
        (255.0 * t).round() as u8,
    )
}

pub fn css_hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02X}{g:02X}{b:02X}")
}

fn thumbnail_b64(img: &Image, max_side: usize) -> Result<String> {
    let (w, h) = (img.width(), img.height());
    let scale = max_side as f64 / w.max(h) as f64;
    let thumb = if scale < 1.0 {
        resize(
            img,
            ((w as f64 * scale).round() as usize).max(1),
            ((h as f64 * scale).round() as usize).max(1),
            Interpolation::Bilinear,
        )?
    } else {
        img.clone()
    };
    Ok(BASE64.encode(encode_png(&thumb)?))
}

/// Writes a single self-contained HTML report: the query crop, then the
/// ranked thumbnails framed red (rank 1) through blue (rank k), annotated
/// with score and best cell.
pub fn emit_report(
    query_crop: &Image,
    results: &[RankedResult],
    index: &RetrievalIndex,
    out_path: &Path,
) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Data("cannot report zero results".into()));
    }
    let k = results.len();
    let mut html = String::new();
    html.push_str(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>search report</title>\n\
         <style>body{font-family:sans-serif;background:#111;color:#eee}\
         .row{display:flex;flex-wrap:wrap;gap:12px}\
         .hit{text-align:center;font-size:12px}\
         img{display:block}</style></head><body>\n",
    );
    html.push_str("<h2>Query crop</h2>\n");
    html.push_str(&format!(
        "<img src=\"data:image/png;base64,{}\" style=\"border:4px solid #888\">\n",
        thumbnail_b64(query_crop, 128)?
    ));
    html.push_str(&format!("<h2>Top {k} matches</h2>\n<div class=\"row\">\n"));
    for (i, res) in results.iter().enumerate() {
        let rank = i + 1;
        let color = css_hex(rank_border_color(rank, k));
        let thumb = match index
            .entries()
            .iter()
            .find(|e| e.image_id == res.image_id)
            .map(|e| decode_image(Path::new(&e.path)))
        {
            Some(Ok(img)) => thumbnail_b64(&img, 128)?,
            // Missing source file: embed a gray placeholder.
            _ => thumbnail_b64(&Image::filled(64, 64, [0.5, 0.5, 0.5]), 128)?,
        };
        html.push_str(&format!(
            "<div class=\"hit\"><img src=\"data:image/png;base64,{thumb}\" \
             style=\"border:6px solid {color}\">\
             <div>#{rank} {} score {:.4}<br>cell L{} ({}, {})</div></div>\n",
            res.image_id, res.score, res.best_cell.level, res.best_cell.row, res.best_cell.col
        ));
    }
    html.push_str("</div></body></html>\n");
    std::fs::write(out_path, html).map_err(|e| Error::io(out_path, e))
}
