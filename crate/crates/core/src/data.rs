//! Samples, datasets, per-domain statistics and CSV ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Index reserved in every field vocabulary for values never seen during encoding.
pub const OOV: usize = 0;

/// Default sample-share threshold below which a domain counts as minor.
pub const DEFAULT_MINOR_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<usize>,
    pub domain: usize,
    pub label: u8,
}

impl Sample {
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

/// One categorical field. `values[0]` is the OOV slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub values: Vec<String>,
}

impl Field {
    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<Field>,
    /// Position of the item field within `fields`.
    pub item_field: usize,
    pub domain_names: Vec<String>,
}

impl Schema {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(Field::vocab_size).collect()
    }

    /// Schema with integer-valued fields `1..=size` plus the OOV slot.
    pub fn integer(fields: &[(&str, usize)], item_field: usize, num_domains: usize) -> Schema {
        Schema {
            fields: fields
                .iter()
                .map(|&(name, size)| Field {
                    name: name.to_string(),
                    values: std::iter::once("<oov>".to_string())
                        .chain((1..=size).map(|v| v.to_string()))
                        .collect(),
                })
                .collect(),
            item_field,
            domain_names: (0..num_domains).map(|d| d.to_string()).collect(),
        }
    }

    pub fn check(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.fields.len() {
            return Err(Error::Schema(format!(
                "sample has {} features, schema has {}",
                s.features.len(),
                self.fields.len()
            )));
        }
        if s.domain >= self.num_domains() {
            return Err(Error::Schema(format!(
                "domain {} >= {}",
                s.domain,
                self.num_domains()
            )));
        }
        for (f, (&v, field)) in s.features.iter().zip(&self.fields).enumerate() {
            if v >= field.vocab_size() {
                return Err(Error::Schema(format!(
                    "field {f} (`{}`) value {v} >= vocab {}",
                    field.name,
                    field.vocab_size()
                )));
            }
        }
        if s.label > 1 {
            return Err(Error::Schema("label must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Arc<Schema>,
    pub samples: Vec<Sample>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(schema: Arc<Schema>, samples: Vec<Sample>, split: SplitTag) -> Result<Dataset> {
        for s in &samples {
            schema.check(s)?;
        }
        Ok(Dataset {
            schema,
            samples,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.schema.num_domains()
    }

    pub fn domain_samples(&self, d: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.domain == d)
    }

    pub fn item(&self, s: &Sample) -> usize {
        s.features[self.schema.item_field]
    }

    /// Writes the standard CSV layout: one column per field, then `domain`, `label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.schema.fields.iter().map(|f| f.name.as_str()).collect();
        header.extend(["domain", "label"]);
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<&str> = s
                .features
                .iter()
                .zip(&self.schema.fields)
                .map(|(&v, f)| f.values[v].as_str())
                .collect();
            rec.push(&self.schema.domain_names[s.domain]);
            rec.push(if s.label == 1 { "1" } else { "0" });
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// How to read a CSV file: which columns are features, which one is the item.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSpec {
    /// Feature columns in order. Empty means "every column except `domain`/`label`".
    pub fields: Vec<String>,
    /// Item column name; defaults to `item`, else the last feature column.
    pub item_field: Option<String>,
    /// Fixed encoding from an earlier load. Unseen values map to [`OOV`].
    pub frozen: Option<Arc<Schema>>,
}

impl CsvSpec {
    pub fn infer() -> Self {
        CsvSpec {
            fields: Vec::new(),
            item_field: None,
            frozen: None,
        }
    }

    pub fn frozen(schema: Arc<Schema>) -> Self {
        CsvSpec {
            fields: schema.fields.iter().map(|f| f.name.clone()).collect(),
            item_field: Some(schema.fields[schema.item_field].name.clone()),
            frozen: Some(schema),
        }
    }
}

/// Loads a CSV with header row. Features are encoded in first-seen order starting
/// at 1; index 0 is reserved for out-of-vocabulary values. If every domain value is
/// a non-negative integer those integers are used as ids directly.
pub fn load_csv(path: &Path, spec: &CsvSpec) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);

    let domain_col = col("domain").ok_or_else(|| Error::Schema("missing column `domain`".into()))?;
    let label_col = col("label").ok_or_else(|| Error::Schema("missing column `label`".into()))?;
    let field_names: Vec<String> = if spec.fields.is_empty() {
        header
            .iter()
            .filter(|h| *h != "domain" && *h != "label")
            .cloned()
            .collect()
    } else {
        spec.fields.clone()
    };
    if field_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let field_cols = field_names
        .iter()
        .map(|n| col(n).ok_or_else(|| Error::Schema(format!("missing column `{n}`"))))
        .collect::<Result<Vec<_>>>()?;
    let item_field = match &spec.item_field {
        Some(name) => field_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Schema(format!("item field `{name}` is not a feature column")))?,
        None => field_names
            .iter()
            .position(|f| f == "item")
            .unwrap_or(field_names.len() - 1),
    };

    let mut encoders: Vec<HashMap<String, usize>> = match &spec.frozen {
        Some(schema) => {
            if schema.fields.len() != field_names.len() {
                return Err(Error::Schema("frozen schema field count differs".into()));
            }
            schema
                .fields
                .iter()
                .map(|f| f.values.iter().enumerate().skip(1).map(|(i, v)| (v.clone(), i)).collect())
                .collect()
        }
        None => vec![HashMap::new(); field_names.len()],
    };
    let mut values: Vec<Vec<String>> = match &spec.frozen {
        Some(schema) => schema.fields.iter().map(|f| f.values.clone()).collect(),
        None => vec![vec!["<oov>".to_string()]; field_names.len()],
    };

    let mut raw_domains = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Row {
                row,
                msg: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        let label = match rec[label_col].trim() {
            "0" => 0u8,
            "1" => 1u8,
            _ => {
                return Err(Error::Row {
                    row,
                    msg: "label must be 0 or 1".into(),
                })
            }
        };
        let mut features = Vec::with_capacity(field_cols.len());
        for (f, &c) in field_cols.iter().enumerate() {
            let v = rec[c].trim();
            let id = match encoders[f].get(v) {
                Some(&id) => id,
                None if spec.frozen.is_some() => OOV,
                None => {
                    let id = values[f].len();
                    values[f].push(v.to_string());
                    encoders[f].insert(v.to_string(), id);
                    id
                }
            };
            features.push(id);
        }
        raw_domains.push(rec[domain_col].trim().to_string());
        rows.push((features, label));
    }

    let domain_names = match &spec.frozen {
        Some(schema) => schema.domain_names.clone(),
        None => infer_domain_names(&raw_domains),
    };
    let domain_ids: HashMap<&str, usize> = domain_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut samples = Vec::with_capacity(rows.len());
    for (i, ((features, label), raw)) in rows.into_iter().zip(&raw_domains).enumerate() {
        let domain = *domain_ids.get(raw.as_str()).ok_or_else(|| Error::Row {
            row: i + 2,
            msg: format!("unknown domain `{raw}`"),
        })?;
        samples.push(Sample {
            features,
            domain,
            label,
        });
    }

    let schema = match &spec.frozen {
        Some(s) => Arc::clone(s),
        None => Arc::new(Schema {
            fields: field_names
                .into_iter()
                .zip(values)
                .map(|(name, values)| Field { name, values })
                .collect(),
            item_field,
            domain_names,
        }),
    };
    Ok(Dataset {
        schema,
        samples,
        split: SplitTag::Train,
    })
}

fn infer_domain_names(raw: &[String]) -> Vec<String> {
    let numeric: Option<Vec<usize>> = raw.iter().map(|r| r.parse::<usize>().ok()).collect();
    match numeric {
        Some(ids) => {
            let d = ids.iter().max().map_or(0, |m| m + 1);
            (0..d).map(|i| i.to_string()).collect()
        }
        None => {
            let mut names: Vec<String> = Vec::new();
            for r in raw {
                if !names.contains(r) {
                    names.push(r.clone());
                }
            }
            names
        }
    }
}

/// Per-domain sample counts and the major/minor partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub major: Vec<usize>,
    pub minor: Vec<usize>,
    pub minor_threshold: f64,
}

impl DomainStats {
    pub fn from_counts(counts: Vec<usize>, minor_threshold: f64) -> Result<DomainStats> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let (minor, major): (Vec<usize>, Vec<usize>) =
            (0..counts.len()).partition(|&d| fractions[d] < minor_threshold);
        Ok(DomainStats {
            counts,
            fractions,
            major,
            minor,
            minor_threshold,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.counts.len()
    }

    pub fn is_minor(&self, d: usize) -> bool {
        self.minor.contains(&d)
    }

    /// Domains ordered by count, largest first; ties by id.
    pub fn by_size_desc(&self) -> Vec<usize> {
        let mut ds: Vec<usize> = (0..self.counts.len()).collect();
        ds.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        ds
    }
}

pub fn compute_stats(ds: &Dataset, minor_threshold: f64) -> Result<DomainStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; ds.num_domains()];
    for s in &ds.samples {
        counts[s.domain] += 1;
    }
    DomainStats::from_counts(counts, minor_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Stratified split: each domain is cut at the given ratios, with positives and
/// negatives interleaved so every part keeps the domain's label balance.
/// A domain with fewer samples than parts goes entirely to train.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for d in 0..ds.num_domains() {
        let mut rng = substream(seed, &format!("split/{d}"));
        let mut by_label: [Vec<usize>; 2] = Default::default();
        for (i, s) in ds.samples.iter().enumerate() {
            if s.domain == d {
                by_label[s.label as usize].push(i);
            }
        }
        let n = by_label[0].len() + by_label[1].len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            warn!("domain {d} has {n} samples; all assigned to train");
            parts[0].extend(by_label.iter().flatten());
            continue;
        }
        for group in &mut by_label {
            group.shuffle(&mut rng);
        }
        // Interleave labels by relative rank so any contiguous cut is balanced.
        let mut order: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
        for (label, group) in by_label.iter().enumerate() {
            let m = group.len() as f64;
            for (rank, &idx) in group.iter().enumerate() {
                order.push(((rank as f64 + 0.5) / m, label as u8, idx));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let n_valid = ((n as f64 * rv).round() as usize).max(1);
        let n_test = ((n as f64 * rs).round() as usize).max(1);
        let n_train = n - n_valid - n_test;
        let ids: Vec<usize> = order.into_iter().map(|(_, _, i)| i).collect();
        parts[0].extend_from_slice(&ids[..n_train]);
        parts[1].extend_from_slice(&ids[n_train..n_train + n_valid]);
        parts[2].extend_from_slice(&ids[n_train + n_valid..]);
    }
    let make = |mut idx: Vec<usize>, tag| {
        idx.sort_unstable();
        Dataset {
            schema: Arc::clone(&ds.schema),
            samples: idx.into_iter().map(|i| ds.samples[i].clone()).collect(),
            split: tag,
        }
    };
    let [tr, va, te] = parts;
    Ok(Splits {
        train: make(tr, SplitTag::Train),
        valid: make(va, SplitTag::Valid),
        test: make(te, SplitTag::Test),
    })
}

/// Writes rows with an extra provenance column.
pub fn write_csv_with_source(
    path: &Path,
    schema: &Schema,
    rows: &[(Sample, Option<usize>)],
) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
    header.extend(["domain", "label", "source_domain"]);
    w.write_record(&header)?;
    for (s, src) in rows {
        let mut rec: Vec<String> = s
            .features
            .iter()
            .zip(&schema.fields)
            .map(|(&v, f)| f.values[v].clone())
            .collect();
        rec.push(schema.domain_names[s.domain].clone());
        rec.push(s.label.to_string());
        rec.push(src.map(|d| schema.domain_names[d].clone()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn toy(domains: &[(usize, usize, usize)]) -> Dataset {
        // (domain, positives, negatives)
        let nd = domains.iter().map(|d| d.0).max().unwrap() + 1;
        let schema = Arc::new(Schema::integer(&[("user", 1000), ("item", 10)], 1, nd));
        let mut samples = Vec::new();
        let mut u = 1;
        for &(d, pos, neg) in domains {
            for k in 0..pos + neg {
                samples.push(Sample {
                    features: vec![u % 1000 + 1, k % 10 + 1],
                    domain: d,
                    label: u8::from(k < pos),
                });
                u += 1;
            }
        }
        Dataset::new(schema, samples, SplitTag::Train).unwrap()
    }

    #[test]
    fn load_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "user,item,domain,label\nu1,i1,0,1\nu2,i1,1,0\nu1,i2,0,0\n",
        );
        let ds = load_csv(&p, &CsvSpec::infer()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.schema.vocab_sizes(), vec![3, 3]);
        assert_eq!(ds.schema.item_field, 1);
        assert_eq!(ds.samples[0].features, vec![1, 1]);
        assert_eq!(ds.samples[2].features, vec![1, 2]);
        assert_eq!(ds.samples[1].domain, 1);

        let again = load_csv(&p, &CsvSpec::infer()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn bad_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "b.csv", "user,item,domain,label\nu,i,0,1\nu,i,0,2\n");
        let err = load_csv(&p, &CsvSpec::infer()).unwrap_err().to_string();
        assert!(err.contains("label must be 0 or 1"), "{err}");
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "user,item,label\nu,i,1\n");
        assert!(matches!(load_csv(&p, &CsvSpec::infer()), Err(Error::Schema(_))));
    }

    #[test]
    fn frozen_schema_maps_unseen_to_oov() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "user,item,domain,label\nu1,i1,a,1\nu2,i2,b,0\n");
        let ds = load_csv(&p, &CsvSpec::infer()).unwrap();
        assert_eq!(ds.schema.domain_names, vec!["a", "b"]);
        let q = write(dir.path(), "e.csv", "user,item,domain,label\nu9,i2,b,1\n");
        let t = load_csv(&q, &CsvSpec::frozen(Arc::clone(&ds.schema))).unwrap();
        assert_eq!(t.samples[0].features, vec![OOV, 2]);
        assert_eq!(t.samples[0].domain, 1);
    }

    #[test]
    fn stats_examples() {
        let s = DomainStats::from_counts(vec![60, 30, 10], 0.02).unwrap();
        assert!(s.minor.is_empty());
        let s = DomainStats::from_counts(vec![98, 1, 1], 0.02).unwrap();
        assert_eq!(s.minor, vec![1, 2]);
        assert_eq!(s.major, vec![0]);
        assert!(matches!(DomainStats::from_counts(vec![0, 0], 0.02), Err(Error::EmptyDataset)));
    }

    #[test]
    fn amazon_shaped_counts_have_twelve_minor_domains() {
        // 25 domains, largest holding 17% of samples, 12 of them under 2%.
        let counts = vec![
            1700, 1370, 1100, 950, 800, 700, 600, 500, 450, 400, 350, 300, 250, // 13 major
            190, 180, 160, 140, 120, 100, 80, 60, 40, 30, 20, 10, // 12 minor
        ];
        let total: usize = counts.iter().sum();
        assert_eq!(counts.len(), 25);
        let s = DomainStats::from_counts(counts, DEFAULT_MINOR_THRESHOLD).unwrap();
        assert_eq!(s.minor.len(), 12, "total {total}");
    }

    #[test]
    fn split_sizes() {
        let ds = toy(&[(0, 50, 50)]);
        let sp = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((sp.train.len(), sp.valid.len(), sp.test.len()), (80, 10, 10));

        let ds = toy(&[(0, 45, 45), (1, 5, 5)]);
        let sp = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        let per = |d: &Dataset, dom| d.domain_samples(dom).count();
        assert_eq!((per(&sp.train, 0), per(&sp.valid, 0), per(&sp.test, 0)), (72, 9, 9));
        assert_eq!((per(&sp.train, 1), per(&sp.valid, 1), per(&sp.test, 1)), (8, 1, 1));
        assert_eq!(split(&ds, (0.8, 0.1, 0.1), 3).unwrap(), sp);
        assert_ne!(split(&ds, (0.8, 0.1, 0.1), 4).unwrap().train.samples, sp.train.samples);
    }

    #[test]
    fn tiny_domain_goes_to_train() {
        let ds = toy(&[(0, 10, 10), (1, 1, 1)]);
        let sp = split(&ds, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(sp.train.domain_samples(1).count(), 2);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let ds = toy(&[(0, 5, 5)]);
        assert!(split(&ds, (0.8, 0.3, 0.1), 0).is_err());
        assert!(split(&ds, (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(&[(0, 3, 2), (1, 1, 2)]);
        let p = dir.path().join("rt.csv");
        ds.write_csv(&p).unwrap();
        let back = load_csv(&p, &CsvSpec::frozen(Arc::clone(&ds.schema))).unwrap();
        assert_eq!(back.samples, ds.samples);
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one(counts in proptest::collection::vec(0usize..10_000, 1..30)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let s = DomainStats::from_counts(counts.clone(), 0.02).unwrap();
            prop_assert!((s.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut all: Vec<usize> = s.major.iter().chain(&s.minor).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
        }

        #[test]
        fn split_keeps_label_balance(
            doms in proptest::collection::vec((0usize..60, 0usize..60), 1..5),
            seed in 0u64..1000,
        ) {
            let rows: Vec<(usize, usize, usize)> =
                doms.iter().enumerate().map(|(d, &(p, n))| (d, p, n)).collect();
            prop_assume!(rows.iter().any(|s| s.1 + s.2 > 0));
            let ds = toy(&rows);
            let sp = split(&ds, (0.8, 0.1, 0.1), seed).unwrap();
            for &(d, pos, neg) in &rows {
                let n = pos + neg;
                if n < 3 { continue; }
                for part in [&sp.train, &sp.valid, &sp.test] {
                    let size = part.domain_samples(d).count() as f64;
                    let got = part.domain_samples(d).filter(|s| s.label == 1).count() as f64;
                    let want = size * pos as f64 / n as f64;
                    prop_assert!((got - want).abs() <= 1.0, "d{} got {} want {}", d, got, want);
                }
            }
        }
    }
}
