//! Retrieval metrics (CMC, mAP, mINP) and the feature bank file format.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::Modality;
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"MSFB";
pub const BANK_VERSION: u32 = 1;

/// Embeddings with identity, camera and modality labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    /// Row-major `[N, dim]`.
    pub embeddings: Vec<f32>,
    pub ids: Vec<i32>,
    pub cams: Vec<i32>,
    pub modality: Vec<Modality>,
}

impl FeatureBank {
    pub fn new(dim: usize, embeddings: Vec<f32>, ids: Vec<i32>, cams: Vec<i32>, modality: Vec<Modality>) -> Result<Self> {
        let n = ids.len();
        if dim == 0 || embeddings.len() != n * dim || cams.len() != n || modality.len() != n {
            return Err(Error::Shape(format!(
                "feature bank rows are inconsistent: {} values for dim {dim}, {} ids, {} cams, {} modalities",
                embeddings.len(),
                n,
                cams.len(),
                modality.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("feature bank contains non-finite embeddings".into()));
        }
        Ok(FeatureBank {
            dim,
            embeddings,
            ids,
            cams,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureBank {
        FeatureBank {
            dim: self.dim,
            embeddings: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            cams: idx.iter().map(|&i| self.cams[i]).collect(),
            modality: idx.iter().map(|&i| self.modality[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (9 + 4 * self.dim));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&self.cams[i].to_le_bytes());
            out.push(self.modality[i].code());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "feature bank";
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::format(what, "truncated"));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(4)? != BANK_MAGIC {
            return Err(Error::format(what, "bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != BANK_VERSION {
            return Err(Error::VersionMismatch {
                what: "feature bank",
                found: version,
                expected: BANK_VERSION,
            });
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let row_bytes = 9usize
            .checked_add(dim.checked_mul(4).ok_or_else(|| Error::format(what, "dim overflow"))?)
            .ok_or_else(|| Error::format(what, "dim overflow"))?;
        if n.checked_mul(row_bytes).map_or(true, |total| total > bytes.len()) {
            return Err(Error::format(what, "truncated"));
        }
        let (mut ids, mut cams, mut modality) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut embeddings = Vec::with_capacity(n * dim);
        for row in 0..n {
            ids.push(i32::from_le_bytes(take(4)?.try_into().unwrap()));
            cams.push(i32::from_le_bytes(take(4)?.try_into().unwrap()));
            let code = take(1)?[0];
            modality.push(
                Modality::from_code(code)
                    .ok_or_else(|| Error::format(what, format!("row {row} has modality code {code}")))?,
            );
            for c in take(4 * dim)?.chunks_exact(4) {
                embeddings.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
        }
        if !r.is_empty() {
            return Err(Error::format(what, "trailing bytes"));
        }
        FeatureBank::new(dim, embeddings, ids, cams, modality)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Euclidean distance matrix `[Nq, Ng]`, accumulated in `f64`.
pub fn pairwise_distance(query: &FeatureBank, gallery: &FeatureBank) -> Result<Vec<f64>> {
    if query.dim != gallery.dim {
        return Err(Error::Shape(format!(
            "query dim {} differs from gallery dim {}",
            query.dim, gallery.dim
        )));
    }
    let mut out = Vec::with_capacity(query.len() * gallery.len());
    for i in 0..query.len() {
        let q = query.row(i);
        for j in 0..gallery.len() {
            let s: f64 = q
                .iter()
                .zip(gallery.row(j))
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            out.push(s.sqrt());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// `cmc[k]` is the fraction of queries whose first correct match has
    /// rank `<= k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
    pub num_valid_queries: usize,
    /// Queries without any correct match after filtering.
    pub num_dropped_queries: usize,
}

/// Labels of the rows being ranked.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub ids: &'a [i32],
    pub cams: &'a [i32],
}

/// Rank every query against the gallery given a row-major `[Nq, Ng]`
/// distance matrix. Ties are broken by gallery index; gallery rows sharing
/// the query's identity and camera are ignored.
pub fn evaluate_distances(dist: &[f64], query: Labels, gallery: Labels, max_rank: usize) -> Result<RetrievalReport> {
    let (nq, ng) = (query.ids.len(), gallery.ids.len());
    if dist.len() != nq * ng || query.cams.len() != nq || gallery.cams.len() != ng {
        return Err(Error::Shape(format!("distance matrix of {} entries does not match {nq}x{ng}", dist.len())));
    }
    if max_rank == 0 {
        return Err(Error::Param("max_rank must be positive".into()));
    }
    let mut cmc = vec![0.0; max_rank];
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    let mut valid = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let row = &dist[q * ng..(q + 1) * ng];
        order.clear();
        order.extend(0..ng);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let (qid, qcam) = (query.ids[q], query.cams[q]);
        let mut rank = 0usize;
        let mut hits = 0usize;
        let mut first = None;
        let mut last = 0usize;
        let mut precision_sum = 0.0;
        for &j in &order {
            let same_id = gallery.ids[j] == qid;
            if same_id && gallery.cams[j] == qcam {
                continue;
            }
            rank += 1;
            if same_id {
                hits += 1;
                first.get_or_insert(rank);
                last = rank;
                precision_sum += hits as f64 / rank as f64;
            }
        }
        let Some(first) = first else { continue };
        valid += 1;
        for c in cmc.iter_mut().skip(first - 1) {
            *c += 1.0;
        }
        ap_sum += precision_sum / hits as f64;
        inp_sum += hits as f64 / last as f64;
    }
    if valid == 0 {
        return Err(Error::Evaluation("no query has a valid gallery match".into()));
    }
    let v = valid as f64;
    Ok(RetrievalReport {
        cmc: cmc.into_iter().map(|c| c / v).collect(),
        map: ap_sum / v,
        minp: inp_sum / v,
        num_valid_queries: valid,
        num_dropped_queries: nq - valid,
    })
}

pub fn evaluate(query: &FeatureBank, gallery: &FeatureBank, max_rank: usize) -> Result<RetrievalReport> {
    let dist = pairwise_distance(query, gallery)?;
    evaluate_distances(
        &dist,
        Labels {
            ids: &query.ids,
            cams: &query.cams,
        },
        Labels {
            ids: &gallery.ids,
            cams: &gallery.cams,
        },
        max_rank,
    )
}

impl RetrievalReport {
    /// `cmc[k - 1]`, clamped to the curve length.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    /// Elementwise mean of the metrics; query counts are summed.
    pub fn mean(reports: &[RetrievalReport]) -> Result<RetrievalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Evaluation("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut cmc = vec![0.0; first.cmc.len()];
        for r in reports {
            if r.cmc.len() != cmc.len() {
                return Err(Error::Shape("cannot average CMC curves of different lengths".into()));
            }
            cmc.iter_mut().zip(&r.cmc).for_each(|(a, b)| *a += b);
        }
        Ok(RetrievalReport {
            cmc: cmc.into_iter().map(|c| c / n).collect(),
            map: reports.iter().map(|r| r.map).sum::<f64>() / n,
            minp: reports.iter().map(|r| r.minp).sum::<f64>() / n,
            num_valid_queries: reports.iter().map(|r| r.num_valid_queries).sum(),
            num_dropped_queries: reports.iter().map(|r| r.num_dropped_queries).sum(),
        })
    }

    /// `key = value` lines: `direction`, `rank1`, `rank5`, `rank10`, `rank20`,
    /// `map`, `minp`, `queries`, `dropped_queries`.
    pub fn to_kv(&self, direction: &str) -> String {
        let mut s = String::new();
        writeln!(s, "direction = {direction}").unwrap();
        for k in [1, 5, 10, 20] {
            writeln!(s, "rank{k} = {:.6}", self.rank(k)).unwrap();
        }
        writeln!(s, "map = {:.6}", self.map).unwrap();
        writeln!(s, "minp = {:.6}", self.minp).unwrap();
        writeln!(s, "queries = {}", self.num_valid_queries).unwrap();
        writeln!(s, "dropped_queries = {}", self.num_dropped_queries).unwrap();
        s
    }

    /// `rank,cmc` rows for plotting.
    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (k, c) in self.cmc.iter().enumerate() {
            writeln!(s, "{},{c:.6}", k + 1).unwrap();
        }
        s
    }
}
