//! Descriptor store, brute-force nearest-neighbor search, Recall@N
//! evaluation, dimensionality sweeps, encoding benchmarks, and the
//! deployment storage estimator.
//!
//! Search is exact by design: desk-scale stores need no approximate index,
//! and exactness plus id-ordered tie-breaking makes every recall number
//! reproducible across platforms.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::aggregation::reduce_dim;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STORE_MAGIC: &[u8; 4] = b"EPD1";

// ---------------------------------------------------------------------------
// Descriptor store
// ---------------------------------------------------------------------------

/// An immutable collection of unit-norm f32 descriptor rows with parallel
/// ids and free-form metadata (model checksum, dataset id, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorStore {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    metadata: String,
}

impl DescriptorStore {
    /// Build from rows; ids must be unique, rows unit-norm within 1e-5.
    pub fn build(dim: usize, ids: Vec<u64>, data: Vec<f32>, metadata: String) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("descriptor dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids with dim {dim} wants {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate id {id} in store")));
            }
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            let norm: f64 = chunk.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Numeric(format!(
                    "row {row} (id {}) has norm {norm}, expected unit",
                    ids[row]
                )));
            }
        }
        Ok(DescriptorStore {
            dim,
            ids,
            data,
            metadata,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Truncate every row to `target_dim` and re-normalize.
    pub fn reduced(&self, target_dim: usize) -> Result<DescriptorStore> {
        let mut data = Vec::with_capacity(self.len() * target_dim);
        for i in 0..self.len() {
            let row = Tensor::<f32>::from_vec(&[self.dim], self.row(i).to_vec())?;
            let cut = reduce_dim(&row, target_dim)?;
            data.extend_from_slice(cut.data());
        }
        DescriptorStore::build(
            target_dim,
            self.ids.clone(),
            data,
            format!(
                "{}; truncate_renorm {} -> {target_dim} (post-hoc approximation)",
                self.metadata, self.dim
            ),
        )
    }

    /// Exact top-k by dot product, descending; ties break by ascending id.
    pub fn query(&self, q: &[f32], k: usize) -> Result<Vec<(u64, f32)>> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query dim {} does not match store dim {}",
                q.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let norm: f64 = q.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Numeric(format!(
                "query norm {norm}, expected unit"
            )));
        }
        let k = k.min(self.len());
        // bounded worst-candidate selection; orders as (score desc, id asc)
        let better = |a: &(u64, f32), b: &(u64, f32)| -> std::cmp::Ordering {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then(a.0.cmp(&b.0))
        };
        let mut top: Vec<(u64, f32)> = Vec::with_capacity(k + 1);
        for i in 0..self.len() {
            let row = self.row(i);
            let mut score = 0.0f32;
            for (a, b) in row.iter().zip(q) {
                score += a * b;
            }
            let cand = (self.ids[i], score);
            let pos = top.partition_point(|e| better(e, &cand) != std::cmp::Ordering::Greater);
            if pos < k {
                top.insert(pos, cand);
                top.truncate(k);
            }
        }
        Ok(top)
    }

    // -- persistence -----------------------------------------------------------

    /// Format: magic `EPD1`, u32 dim, u64 count, u32 metadata length +
    /// UTF-8 bytes, then per row: u64 id + dim little-endian f32 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        for i in 0..self.len() {
            w.write_all(&self.ids[i].to_le_bytes())?;
            for &v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("store header: {e}")))?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format(format!(
                "bad store magic {magic:?}, expected {STORE_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)
            .map_err(|e| Error::Format(format!("store dim: {e}")))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf)
            .map_err(|e| Error::Format(format!("store count: {e}")))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|e| Error::Format(format!("store metadata: {e}")))?;
        let mut meta = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut meta)
            .map_err(|e| Error::Format(format!("store metadata: {e}")))?;
        let metadata = String::from_utf8(meta)
            .map_err(|e| Error::Format(format!("metadata not UTF-8: {e}")))?;
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for row in 0..count {
            r.read_exact(&mut u64buf)
                .map_err(|e| Error::Format(format!("row {row} id truncated: {e}")))?;
            ids.push(u64::from_le_bytes(u64buf));
            for c in 0..dim {
                r.read_exact(&mut u32buf).map_err(|e| {
                    Error::Format(format!("row {row} value {c} truncated: {e}"))
                })?;
                data.push(f32::from_le_bytes(u32buf));
            }
        }
        DescriptorStore::build(dim, ids, data, metadata)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

// ---------------------------------------------------------------------------
// Recall@N
// ---------------------------------------------------------------------------

/// What counts as a correct retrieval for a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PositiveCriterion {
    /// Database id equals the query id (disjoint-places datasets).
    SamePlaceId,
    /// Database item lies within `r` meters of the query (needs geo).
    RadiusMeters(f64),
    /// Database index within `w` of the query index (sequence datasets).
    IndexWindow(u64),
}

impl PositiveCriterion {
    pub fn validate(&self) -> Result<()> {
        match self {
            PositiveCriterion::RadiusMeters(r) if *r <= 0.0 => {
                Err(Error::Config("radius must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            PositiveCriterion::SamePlaceId => "same-place".into(),
            PositiveCriterion::RadiusMeters(r) => format!("radius:{r}"),
            PositiveCriterion::IndexWindow(w) => format!("window:{w}"),
        }
    }

    /// Parse `same-place`, `radius:<m>` or `window:<n>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "same-place" {
            return Ok(PositiveCriterion::SamePlaceId);
        }
        if let Some(r) = s.strip_prefix("radius:") {
            let r: f64 = r
                .parse()
                .map_err(|_| Error::Config(format!("bad radius '{s}'")))?;
            let c = PositiveCriterion::RadiusMeters(r);
            c.validate()?;
            return Ok(c);
        }
        if let Some(w) = s.strip_prefix("window:") {
            let w: u64 = w
                .parse()
                .map_err(|_| Error::Config(format!("bad window '{s}'")))?;
            return Ok(PositiveCriterion::IndexWindow(w));
        }
        Err(Error::Config(format!(
            "unknown criterion '{s}' (same-place | radius:<m> | window:<n>)"
        )))
    }
}

/// Geo coordinates per id, required by the radius criterion.
pub type GeoTable = BTreeMap<u64, (f64, f64)>;

fn is_positive(
    criterion: &PositiveCriterion,
    query_id: u64,
    db_id: u64,
    geo: Option<&GeoTable>,
) -> Result<bool> {
    match criterion {
        PositiveCriterion::SamePlaceId => Ok(query_id == db_id),
        PositiveCriterion::IndexWindow(w) => Ok(query_id.abs_diff(db_id) <= *w),
        PositiveCriterion::RadiusMeters(r) => {
            let table = geo.ok_or_else(|| {
                Error::Config("radius criterion requires geo metadata".into())
            })?;
            let a = table
                .get(&query_id)
                .ok_or_else(|| Error::Data(format!("no geo entry for query id {query_id}")))?;
            let b = table
                .get(&db_id)
                .ok_or_else(|| Error::Data(format!("no geo entry for db id {db_id}")))?;
            let (dx, dy) = (a.0 - b.0, a.1 - b.1);
            Ok((dx * dx + dy * dy).sqrt() <= *r)
        }
    }
}

/// Per-query retrieval record.
#[derive(Clone, Debug, Serialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub top: Vec<(u64, f32)>,
    pub correct: Vec<bool>,
}

/// Recall percentages at each N plus per-query records.
#[derive(Clone, Debug, Serialize)]
pub struct RecallReport {
    pub criterion: String,
    pub ns: Vec<usize>,
    pub recall_pct: Vec<f64>,
    pub query_count: usize,
    pub db_count: usize,
    /// Queries with no positive in the database, excluded from the
    /// denominator.
    pub excluded_queries: usize,
    pub per_query: Vec<QueryResult>,
}

impl RecallReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.ns
            .iter()
            .position(|&m| m == n)
            .map(|i| self.recall_pct[i])
    }

    /// CSV with one row per N: `n,recall_pct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,recall_pct\n");
        for (n, r) in self.ns.iter().zip(&self.recall_pct) {
            out.push_str(&format!("{n},{r:.4}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Recall@N of queries against a database store under a positive
/// criterion. Queries with no positive in the database are excluded from
/// the denominator and counted in the report.
pub fn recall_at_n(
    queries: &DescriptorStore,
    db: &DescriptorStore,
    criterion: &PositiveCriterion,
    ns: &[usize],
    geo: Option<&GeoTable>,
) -> Result<RecallReport> {
    criterion.validate()?;
    if queries.dim() != db.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs db dim {}",
            queries.dim(),
            db.dim()
        )));
    }
    if ns.is_empty() || ns.iter().any(|&n| n == 0) {
        return Err(Error::Config("ns must be non-empty positive".into()));
    }
    let max_n = *ns.iter().max().unwrap();
    let mut hits = vec![0usize; ns.len()];
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    let mut per_query = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let qid = queries.ids()[qi];
        let has_positive = {
            let mut any = false;
            for &db_id in db.ids() {
                if is_positive(criterion, qid, db_id, geo)? {
                    any = true;
                    break;
                }
            }
            any
        };
        if !has_positive {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let top = db.query(queries.row(qi), max_n)?;
        let correct: Vec<bool> = top
            .iter()
            .map(|&(id, _)| is_positive(criterion, qid, id, geo))
            .collect::<Result<_>>()?;
        for (slot, &n) in ns.iter().enumerate() {
            if correct.iter().take(n).any(|&c| c) {
                hits[slot] += 1;
            }
        }
        per_query.push(QueryResult {
            query_id: qid,
            top,
            correct,
        });
    }
    let recall_pct: Vec<f64> = hits
        .iter()
        .map(|&h| {
            if evaluated == 0 {
                0.0
            } else {
                100.0 * h as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(RecallReport {
        criterion: criterion.name(),
        ns: ns.to_vec(),
        recall_pct,
        query_count: evaluated,
        db_count: db.len(),
        excluded_queries: excluded,
        per_query,
    })
}

// ---------------------------------------------------------------------------
// Dimensionality sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub dim: usize,
    pub recall1: f64,
    pub recall5: f64,
    pub recall10: f64,
    /// Difference of recall@1 to the previous (higher) dim; 0 for the first.
    pub delta_recall1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub criterion: String,
    pub mode: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,recall1,recall5,recall10,delta_recall1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.dim, r.recall1, r.recall5, r.recall10, r.delta_recall1
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluate recall across descending descriptor dimensionalities by
/// truncating and re-normalizing both stores (a post-hoc approximation of
/// retraining at each dim), with the discrete recall@1 gradient.
pub fn sweep_dims(
    queries: &DescriptorStore,
    db: &DescriptorStore,
    dims: &[usize],
    criterion: &PositiveCriterion,
    geo: Option<&GeoTable>,
) -> Result<SweepReport> {
    if dims.is_empty() {
        return Err(Error::Config("sweep needs at least one dim".into()));
    }
    let mut seen = HashSet::new();
    for &d in dims {
        if !seen.insert(d) {
            return Err(Error::Config(format!("duplicate dim {d} in sweep")));
        }
        if d > queries.dim() {
            return Err(Error::Config(format!(
                "sweep dim {d} exceeds native dim {}",
                queries.dim()
            )));
        }
    }
    if dims.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("sweep dims must be strictly descending".into()));
    }
    let ns = [1usize, 5, 10];
    let mut rows: Vec<SweepRow> = Vec::with_capacity(dims.len());
    for &dim in dims {
        let (q, d) = if dim == queries.dim() {
            (queries.clone(), db.clone())
        } else {
            (queries.reduced(dim)?, db.reduced(dim)?)
        };
        let report = recall_at_n(&q, &d, criterion, &ns, geo)?;
        let recall1 = report.recall_pct[0];
        let delta = rows
            .last()
            .map(|prev: &SweepRow| recall1 - prev.recall1)
            .unwrap_or(0.0);
        rows.push(SweepRow {
            dim,
            recall1,
            recall5: report.recall_pct[1],
            recall10: report.recall_pct[2],
            delta_recall1: delta,
        });
    }
    Ok(SweepReport {
        criterion: criterion.name(),
        mode: "truncate_renorm (post-hoc approximation)".into(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Encoding benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
    pub warmup: usize,
    pub machine: String,
}

/// Wall-clock per-image encoding statistics at batch size 1.
pub fn bench_encode<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    warmup: usize,
    reps: usize,
) -> Result<BenchReport> {
    if reps < 10 {
        return Err(Error::Config("bench needs reps >= 10".into()));
    }
    if warmup < 3 {
        return Err(Error::Config("bench needs warmup >= 3".into()));
    }
    if images.is_empty() {
        return Err(Error::Data("bench needs at least one image".into()));
    }
    for i in 0..warmup {
        model.encode(&images[i % images.len()])?;
    }
    let mut times_ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let img = &images[i % images.len()];
        let t0 = Instant::now();
        model.encode(img)?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times_ms.iter().sum::<f64>() / reps as f64;
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
    Ok(BenchReport {
        mean_ms: mean,
        std_ms: var.sqrt(),
        reps,
        warmup,
        machine: machine_description(),
    })
}

pub fn machine_description() -> String {
    format!(
        "{} {} ({} cores)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    )
}

// ---------------------------------------------------------------------------
// Storage estimator
// ---------------------------------------------------------------------------

/// Descriptor storage needed to cover an area: image count (ceil of
/// area / per-image coverage) and total bytes at the given dimensionality
/// and bytes per value.
pub fn estimate_storage(
    area_km2: f64,
    km2_per_image: f64,
    dim: usize,
    bytes_per_value: usize,
) -> Result<(u64, u64)> {
    if area_km2 <= 0.0 || km2_per_image <= 0.0 || dim == 0 || bytes_per_value == 0 {
        return Err(Error::Config("all storage-estimate inputs must be positive".into()));
    }
    let num_images = (area_km2 / km2_per_image).ceil() as u64;
    let total_bytes = num_images * dim as u64 * bytes_per_value as u64;
    Ok((num_images, total_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::l2_normalize;
    use crate::rng::Rng;

    fn random_store(n: usize, dim: usize, seed: u64) -> DescriptorStore {
        let mut rng = Rng::new(seed);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v = l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng)).unwrap();
            data.extend_from_slice(v.data());
        }
        DescriptorStore::build(dim, (0..n as u64).collect(), data, "test".into()).unwrap()
    }

    #[test]
    fn empty_store_is_valid() {
        let store = DescriptorStore::build(8, vec![], vec![], "empty".into()).unwrap();
        assert!(store.is_empty());
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = DescriptorStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn build_rejects_duplicates_and_bad_norms() {
        let v = [1.0f32, 0.0, 0.0];
        assert!(DescriptorStore::build(
            3,
            vec![1, 1],
            [v, v].concat(),
            String::new()
        )
        .is_err());
        assert!(DescriptorStore::build(3, vec![1], vec![2.0, 0.0, 0.0], String::new()).is_err());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let store = random_store(20, 16, 1);
        let mut a = Vec::new();
        store.write_to(&mut a).unwrap();
        let back = DescriptorStore::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        // header: 4 magic + 4 dim + 8 count + 4 metadata len = 20; a
        // 44-byte metadata string pads the header to 64 bytes total.
        let metadata = "model=epm-checksum-001122334455667;ds=world7".to_string();
        assert_eq!(metadata.len(), 44);
        let n = 100;
        let dim = 512;
        let mut rng = Rng::new(2);
        let mut data = Vec::new();
        for _ in 0..n {
            let v = l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng)).unwrap();
            data.extend_from_slice(v.data());
        }
        let store =
            DescriptorStore::build(dim, (0..n as u64).collect(), data, metadata).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 64 + n * (8 + dim * 4));
    }

    #[test]
    fn query_self_row_scores_one() {
        let store = random_store(10, 8, 3);
        let q: Vec<f32> = store.row(4).to_vec();
        let top = store.query(&q, 3).unwrap();
        assert_eq!(top[0].0, 4);
        assert!((top[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn query_k_larger_than_store_returns_all() {
        let store = random_store(5, 8, 4);
        let q: Vec<f32> = store.row(0).to_vec();
        let top = store.query(&q, 50).unwrap();
        assert_eq!(top.len(), 5);
    }

    #[test]
    fn query_matches_exhaustive_sort_oracle_with_ties() {
        for trial in 0..100u64 {
            let mut rng = Rng::new(1000 + trial);
            let n = 3 + rng.index(30);
            let dim = 4 + rng.index(12);
            let mut data = Vec::with_capacity(n * dim);
            let mut base_rows: Vec<Vec<f32>> = Vec::new();
            for i in 0..n {
                // duplicate some rows to force score ties
                let row = if i > 0 && rng.next_f64() < 0.3 {
                    base_rows[rng.index(base_rows.len())].clone()
                } else {
                    l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng))
                        .unwrap()
                        .data()
                        .to_vec()
                };
                data.extend_from_slice(&row);
                base_rows.push(row);
            }
            let store = DescriptorStore::build(
                dim,
                (0..n as u64).collect(),
                data,
                String::new(),
            )
            .unwrap();
            let q = l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng)).unwrap();
            let k = 1 + rng.index(n);
            let got = store.query(q.data(), k).unwrap();
            // oracle: full scored list, sorted by (score desc, id asc)
            let mut all: Vec<(u64, f32)> = (0..n)
                .map(|i| {
                    let mut s = 0.0f32;
                    for (a, b) in store.row(i).iter().zip(q.data()) {
                        s += a * b;
                    }
                    (i as u64, s)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            assert_eq!(got, all, "trial {trial}");
        }
    }

    #[test]
    fn query_rejects_dim_mismatch_and_zero_k() {
        let store = random_store(4, 8, 5);
        assert!(store.query(&[1.0; 4], 1).is_err());
        assert!(store.query(store.row(0), 0).is_err());
    }

    #[test]
    fn self_retrieval_gives_perfect_recall() {
        let store = random_store(12, 16, 6);
        let report = recall_at_n(
            &store,
            &store,
            &PositiveCriterion::SamePlaceId,
            &[1, 5, 10],
            None,
        )
        .unwrap();
        assert_eq!(report.recall_pct, vec![100.0, 100.0, 100.0]);
        assert_eq!(report.excluded_queries, 0);
    }

    #[test]
    fn constructed_rank_six_case() {
        // db rows engineered so the true match always lands at rank 6:
        // query q_i matches db id i (same place), but five decoys with ids
        // 1000+ score strictly higher.
        let dim = 8;
        let n_q = 4;
        let mut rng = Rng::new(7);
        let mut db_ids = Vec::new();
        let mut db_data: Vec<f32> = Vec::new();
        let mut q_data: Vec<f32> = Vec::new();
        for i in 0..n_q {
            let q = l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng)).unwrap();
            q_data.extend_from_slice(q.data());
            // true positive: moderately similar (cos ~ 0.80)
            let mut true_row = q.clone().scale(0.80);
            true_row.data_mut()[(i + 1) % dim] += 0.6;
            let true_row = l2_normalize(&true_row).unwrap();
            db_ids.push(i as u64);
            db_data.extend_from_slice(true_row.data());
            // five decoys: nearly identical to the query (cos ~ 0.99)
            for d in 0..5 {
                let mut decoy = q.clone().scale(0.99);
                decoy.data_mut()[(i + d) % dim] += 0.05;
                let decoy = l2_normalize(&decoy).unwrap();
                db_ids.push(1000 + (i * 5 + d) as u64);
                db_data.extend_from_slice(decoy.data());
            }
        }
        let db = DescriptorStore::build(dim, db_ids, db_data, String::new()).unwrap();
        let queries = DescriptorStore::build(
            dim,
            (0..n_q as u64).collect(),
            q_data,
            String::new(),
        )
        .unwrap();
        let report = recall_at_n(
            &queries,
            &db,
            &PositiveCriterion::SamePlaceId,
            &[1, 5, 10],
            None,
        )
        .unwrap();
        // positive at rank 6: misses top-1 and top-5, hits top-10
        assert_eq!(report.recall_pct, vec![0.0, 0.0, 100.0]);
        for q in &report.per_query {
            assert!(q.correct[5], "true match must sit at rank 6");
            assert!(!q.correct[..5].iter().any(|&c| c));
        }
    }

    #[test]
    fn twenty_item_case_matches_enumeration_under_all_criteria() {
        let dim = 6;
        let n = 20usize;
        let mut rng = Rng::new(8);
        let mut data = Vec::new();
        for _ in 0..n {
            let v = l2_normalize(&Tensor::<f32>::random_normal(&[dim], 1.0, &mut rng)).unwrap();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<u64> = (0..n as u64).collect();
        let db = DescriptorStore::build(dim, ids.clone(), data.clone(), String::new()).unwrap();
        // queries: perturbed copies of each db row
        let mut q_data = Vec::new();
        for i in 0..n {
            let mut v = Tensor::<f32>::from_vec(&[dim], db.row(i).to_vec()).unwrap();
            for x in v.data_mut() {
                *x += rng.normal() as f32 * 0.25;
            }
            q_data.extend_from_slice(l2_normalize(&v).unwrap().data());
        }
        let queries = DescriptorStore::build(dim, ids.clone(), q_data, String::new()).unwrap();
        // geo: 5x4 grid with 40 m spacing -> radius 50 covers axis neighbors
        let mut geo = GeoTable::new();
        for &id in &ids {
            let (gx, gy) = ((id % 5) as f64 * 40.0, (id / 5) as f64 * 40.0);
            geo.insert(id, (gx, gy));
        }
        let criteria = [
            PositiveCriterion::SamePlaceId,
            PositiveCriterion::RadiusMeters(50.0),
            PositiveCriterion::IndexWindow(3),
        ];
        for criterion in criteria {
            let ns = [1usize, 5, 10];
            let report = recall_at_n(&queries, &db, &criterion, &ns, Some(&geo)).unwrap();
            // exhaustive enumeration oracle
            let mut hits = [0usize; 3];
            for qi in 0..n {
                let q = queries.row(qi);
                let mut scored: Vec<(u64, f32)> = (0..n)
                    .map(|di| {
                        let mut s = 0.0f32;
                        for (a, b) in db.row(di).iter().zip(q) {
                            s += a * b;
                        }
                        (di as u64, s)
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                for (slot, &nn) in ns.iter().enumerate() {
                    let hit = scored.iter().take(nn).any(|&(id, _)| {
                        is_positive(&criterion, qi as u64, id, Some(&geo)).unwrap()
                    });
                    if hit {
                        hits[slot] += 1;
                    }
                }
            }
            for (slot, &nn) in ns.iter().enumerate() {
                let expect = 100.0 * hits[slot] as f64 / n as f64;
                assert!(
                    (report.recall_pct[slot] - expect).abs() < 1e-9,
                    "{criterion:?} R@{nn}: {} vs {expect}",
                    report.recall_pct[slot]
                );
            }
            // recall is monotone in N
            assert!(report.recall_pct[0] <= report.recall_pct[1]);
            assert!(report.recall_pct[1] <= report.recall_pct[2]);
        }
    }

    #[test]
    fn recall_invariant_to_db_row_order() {
        let mut rng = Rng::new(9);
        let store = random_store(15, 8, 10);
        let queries = random_store(6, 8, 11);
        // shuffled copy of the db
        let mut order: Vec<usize> = (0..store.len()).collect();
        rng.shuffle(&mut order);
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for &i in &order {
            ids.push(store.ids()[i]);
            data.extend_from_slice(store.row(i));
        }
        let shuffled = DescriptorStore::build(8, ids, data, String::new()).unwrap();
        for criterion in [
            PositiveCriterion::SamePlaceId,
            PositiveCriterion::IndexWindow(2),
        ] {
            let a = recall_at_n(&queries, &store, &criterion, &[1, 5, 10], None).unwrap();
            let b = recall_at_n(&queries, &shuffled, &criterion, &[1, 5, 10], None).unwrap();
            assert_eq!(a.recall_pct, b.recall_pct);
        }
    }

    #[test]
    fn radius_criterion_requires_geo() {
        let store = random_store(4, 8, 12);
        assert!(recall_at_n(
            &store,
            &store,
            &PositiveCriterion::RadiusMeters(50.0),
            &[1],
            None
        )
        .is_err());
    }

    #[test]
    fn queries_without_positives_are_excluded() {
        let db = random_store(4, 8, 13);
        // query ids far outside the db id range under SamePlaceId
        let mut rng = Rng::new(14);
        let mut data = Vec::new();
        for _ in 0..3 {
            let v = l2_normalize(&Tensor::<f32>::random_normal(&[8], 1.0, &mut rng)).unwrap();
            data.extend_from_slice(v.data());
        }
        let queries =
            DescriptorStore::build(8, vec![100, 101, 1], data, String::new()).unwrap();
        let report = recall_at_n(
            &queries,
            &db,
            &PositiveCriterion::SamePlaceId,
            &[1],
            None,
        )
        .unwrap();
        assert_eq!(report.excluded_queries, 2);
        assert_eq!(report.query_count, 1);
    }

    #[test]
    fn sweep_validates_dims_and_tracks_deltas() {
        let db = random_store(30, 32, 15);
        let queries = random_store(10, 32, 16);
        assert!(sweep_dims(
            &queries,
            &db,
            &[32, 32],
            &PositiveCriterion::SamePlaceId,
            None
        )
        .is_err());
        assert!(sweep_dims(
            &queries,
            &db,
            &[16, 32],
            &PositiveCriterion::SamePlaceId,
            None
        )
        .is_err());
        assert!(sweep_dims(
            &queries,
            &db,
            &[64],
            &PositiveCriterion::SamePlaceId,
            None
        )
        .is_err());
        let report = sweep_dims(
            &queries,
            &db,
            &[32, 16, 8],
            &PositiveCriterion::IndexWindow(1),
            None,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].delta_recall1, 0.0);
        for w in report.rows.windows(2) {
            assert!(
                (w[1].delta_recall1 - (w[1].recall1 - w[0].recall1)).abs() < 1e-9
            );
        }
        // single native dim equals plain recall
        let single = sweep_dims(
            &queries,
            &db,
            &[32],
            &PositiveCriterion::IndexWindow(1),
            None,
        )
        .unwrap();
        let plain = recall_at_n(
            &queries,
            &db,
            &PositiveCriterion::IndexWindow(1),
            &[1, 5, 10],
            None,
        )
        .unwrap();
        assert_eq!(single.rows[0].recall1, plain.recall_pct[0]);
    }

    #[test]
    fn storage_estimator_reproduces_reference_numbers() {
        let (images, bytes) = estimate_storage(357_000.0, 0.08, 512, 2).unwrap();
        assert_eq!(images, 4_462_500);
        assert_eq!(bytes, 4_569_600_000);
        let gb = bytes as f64 / 1e9;
        assert!((gb - 4.57).abs() < 0.005, "{gb}");

        let (one, _) = estimate_storage(0.08, 0.08, 512, 2).unwrap();
        assert_eq!(one, 1);
        assert!(estimate_storage(0.0, 0.08, 512, 2).is_err());
    }

    #[test]
    fn criterion_parsing() {
        assert_eq!(
            PositiveCriterion::parse("same-place").unwrap(),
            PositiveCriterion::SamePlaceId
        );
        assert_eq!(
            PositiveCriterion::parse("radius:50").unwrap(),
            PositiveCriterion::RadiusMeters(50.0)
        );
        assert_eq!(
            PositiveCriterion::parse("window:3").unwrap(),
            PositiveCriterion::IndexWindow(3)
        );
        assert!(PositiveCriterion::parse("radius:-1").is_err());
        assert!(PositiveCriterion::parse("nearest").is_err());
    }
}
