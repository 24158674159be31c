//! Identity retrieval: embed swapped faces and source faces, rank sources
//! by cosine similarity, report Top-1 / Top-5 accuracy.
//!
//! Files pair up by name: `swapped/NAME.png` was produced from
//! `sources/NAME.png`. The identity of a file is the part of its stem
//! before the first `_` (the whole stem when there is none).

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::FloatImage;
use crate::swap::run_command;

pub trait Embedder {
    fn embed(&self, image: &Path) -> Result<Vec<f64>>;
}

/// External program invoked as `COMMAND IMAGE.png`, printing a JSON array.
#[derive(Debug, Clone)]
pub struct CommandEmbedder {
    pub command: String,
}

impl Embedder for CommandEmbedder {
    fn embed(&self, image: &Path) -> Result<Vec<f64>> {
        let out = run_command(&self.command, &[image])?;
        serde_json::from_slice(&out.stdout).map_err(|e| Error::Hook {
            command: self.command.clone(),
            message: format!("embedding is not a JSON array of numbers: {e}"),
        })
    }
}

/// Flattened pixels; injective on images of one size. Useful for plumbing
/// checks only.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, image: &Path) -> Result<Vec<f64>> {
        Ok(FloatImage::load_png(image)?.data().iter().map(|&v| v as f64 - 0.5).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Every source image is in the gallery; a hit is the paired source.
    AllImages,
    /// One gallery image per identity; a hit is any image of the identity.
    OnePerIdentity,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub queries: Vec<String>,
    pub gallery: Vec<String>,
    /// queries x gallery cosine similarities.
    pub similarity: Vec<Vec<f64>>,
    /// 0-based rank of the correct gallery entry per query.
    pub ranks: Vec<usize>,
    pub top1: f64,
    pub top5: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    dot / (na * nb).sqrt().max(1e-12)
}

pub fn cosine_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    queries.iter().map(|q| gallery.iter().map(|g| cosine_similarity(q, g)).collect()).collect()
}

/// Rank of the best-scoring correct entry: the number of gallery entries
/// scoring strictly higher.
pub fn rank_of(row: &[f64], correct: impl Fn(usize) -> bool) -> usize {
    let best = (0..row.len()).filter(|&j| correct(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    row.iter().filter(|&&s| s > best).count()
}

pub fn identity_of(stem: &str) -> &str {
    stem.split('_').next().unwrap_or(stem)
}

fn pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.ends_with(".png") && !name.ends_with(".mask.png") {
            out.push((name.trim_end_matches(".png").to_string(), p));
        }
    }
    out.sort();
    Ok(out)
}

/// Runs retrieval of `swapped_dir` faces against `sources_dir`.
pub fn identity_harness(
    swapped_dir: &Path,
    sources_dir: &Path,
    embedder: Option<&dyn Embedder>,
    protocol: Protocol,
) -> Result<RetrievalReport> {
    let embedder = embedder.ok_or_else(|| Error::Unsupported("identity retrieval needs an embedder hook".into()))?;
    let queries = pngs(swapped_dir)?;
    if queries.is_empty() {
        return Err(Error::Precondition(format!("no swapped images in {}", swapped_dir.display())));
    }
    let mut sources = pngs(sources_dir)?;
    if protocol == Protocol::OnePerIdentity {
        let mut seen = std::collections::BTreeSet::new();
        sources.retain(|(stem, _)| seen.insert(identity_of(stem).to_string()));
    }
    if sources.is_empty() {
        return Err(Error::Precondition(format!("no source images in {}", sources_dir.display())));
    }
    let q: Vec<Vec<f64>> = queries.iter().map(|(_, p)| embedder.embed(p)).collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = sources.iter().map(|(_, p)| embedder.embed(p)).collect::<Result<_>>()?;
    let similarity = cosine_matrix(&q, &g);
    let mut ranks = Vec::with_capacity(queries.len());
    for (i, (stem, _)) in queries.iter().enumerate() {
        let correct = |j: usize| match protocol {
            Protocol::AllImages => &sources[j].0 == stem,
            Protocol::OnePerIdentity => identity_of(&sources[j].0) == identity_of(stem),
        };
        if !(0..sources.len()).any(correct) {
            return Err(Error::Precondition(format!("no source for swapped image `{stem}`")));
        }
        ranks.push(rank_of(&similarity[i], correct));
    }
    let n = ranks.len() as f64;
    Ok(RetrievalReport {
        protocol,
        top1: ranks.iter().filter(|&&r| r < 1).count() as f64 / n,
        top5: ranks.iter().filter(|&&r| r < 5).count() as f64 / n,
        queries: queries.into_iter().map(|(s, _)| s).collect(),
        gallery: sources.into_iter().map(|(s, _)| s).collect(),
        similarity,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::toy_faces;

    #[test]
    fn hand_vectors_rank_by_argmax() {
        let g = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0]];
        let q = vec![vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.3], vec![0.5, 0.5, 0.0]];
        let m = cosine_matrix(&q, &g);
        for row in &m {
            let argmax = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(rank_of(row, |j| j == argmax), 0);
        }
        // (0.5, 0.5) scores 0.7071 / 0.7071 / 0.9899 against the gallery.
        assert_eq!(rank_of(&m[2], |j| j == 0), 1);
        assert!((m[2][2] - 1.4 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn self_retrieval_and_preconditions() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for (i, s) in toy_faces(4, 16, 2).unwrap().iter().enumerate() {
            s.image.save_png(&a.path().join(format!("p{i}_0.png"))).unwrap();
            s.image.save_png(&b.path().join(format!("p{i}_0.png"))).unwrap();
        }
        for protocol in [Protocol::AllImages, Protocol::OnePerIdentity] {
            let r = identity_harness(a.path(), b.path(), Some(&PixelEmbedder), protocol).unwrap();
            assert_eq!((r.top1, r.top5), (1.0, 1.0));
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(identity_harness(empty.path(), b.path(), Some(&PixelEmbedder), Protocol::AllImages), Err(Error::Precondition(_))));
        assert!(matches!(identity_harness(a.path(), b.path(), None, Protocol::AllImages), Err(Error::Unsupported(_))));
    }
}
