//! CSV ingestion, vertical and horizontal partitioning, and the fixed
//! mini-batch plan shared by every epoch.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::paillier::seeded_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: {value:?} is not a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: id {value:?} is not a non-negative integer")]
    BadId { row: usize, value: String },
    #[error("row {row}: label {value:?} is not one of 0, 1, -1")]
    BadLabel { row: usize, value: String },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("parties share no instance ids")]
    EmptyJoin,
    #[error("feature schemas differ between parties")]
    SchemaMismatch,
    #[error("dataset has no rows")]
    Empty,
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("invalid partition: {0}")]
    Partition(&'static str),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Column names used when reading a CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSpec {
    pub id_column: String,
    /// `None` for feature-only parties.
    pub label_column: Option<String>,
    /// `None` takes every remaining column, in file order.
    pub feature_columns: Option<Vec<String>>,
}

impl Default for CsvSpec {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            label_column: Some("y".into()),
            feature_columns: None,
        }
    }
}

impl CsvSpec {
    pub fn features_only() -> Self {
        Self {
            label_column: None,
            ..Self::default()
        }
    }
}

/// Rows of one party. Labels, when present, are in {−1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<u64>,
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.iter().map(Vec::as_slice).collect()
    }

    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Appends a constant-1 feature named `bias`.
    pub fn with_bias(mut self) -> Self {
        self.feature_names.push("bias".into());
        self.features.iter_mut().for_each(|r| r.push(1.0));
        self
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            feature_names: self.feature_names.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        match self.ids.iter().find(|id| !seen.insert(**id)) {
            Some(&id) => Err(DatasetError::DuplicateId(id)),
            None => Ok(()),
        }
    }
}

pub fn read_csv(path: impl AsRef<Path>, spec: &CsvSpec) -> Result<Dataset> {
    read_csv_from(std::fs::File::open(path)?, spec)
}

pub fn read_csv_from(reader: impl Read, spec: &CsvSpec) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| DatasetError::MissingColumn(name.to_owned()));
    let id_col = col(&spec.id_column)?;
    let label_col = spec.label_column.as_deref().map(col).transpose()?;
    let feature_cols: Vec<usize> = match &spec.feature_columns {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != id_col && Some(i) != label_col).collect(),
    };

    let mut ds = Dataset {
        ids: Vec::new(),
        feature_names: feature_cols.iter().map(|&i| headers[i].clone()).collect(),
        features: Vec::new(),
        labels: label_col.map(|_| Vec::new()),
    };
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(id_col).parse::<u64>().map_err(|_| DatasetError::BadId {
            row,
            value: field(id_col).to_owned(),
        })?;
        let features = feature_cols
            .iter()
            .map(|&i| {
                field(i)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DatasetError::NonNumeric {
                        row,
                        column: headers[i].clone(),
                        value: field(i).to_owned(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let (Some(i), Some(labels)) = (label_col, ds.labels.as_mut()) {
            let raw = field(i);
            let y = match raw.parse::<f64>() {
                Ok(1.0) => 1.0,
                Ok(0.0 | -1.0) => -1.0,
                _ => {
                    return Err(DatasetError::BadLabel {
                        row,
                        value: raw.to_owned(),
                    })
                }
            };
            labels.push(y);
        }
        ds.ids.push(id);
        ds.features.push(features);
    }
    ds.check_unique_ids()?;
    Ok(ds)
}

/// Writes `id`, the label column (as 0/1) when present, then the features.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset, label_column: &str) -> Result<()> {
    write_csv_to(std::fs::File::create(path)?, ds, label_column)
}

pub fn write_csv_to(writer: impl Write, ds: &Dataset, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_owned()];
    if ds.labels.is_some() {
        header.push(label_column.to_owned());
    }
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ds.ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        if let Some(labels) = &ds.labels {
            rec.push(if labels[i] > 0.0 { "1" } else { "0" }.to_owned());
        }
        rec.extend(ds.features[i].iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits columns into consecutive groups of the given widths. The first
/// party keeps the labels.
pub fn vertical_split(ds: &Dataset, widths: &[usize]) -> Result<Vec<Dataset>> {
    if widths.iter().sum::<usize>() != ds.width() || widths.is_empty() {
        return Err(DatasetError::Partition("column widths must cover every feature"));
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let range = start..start + w;
            start += w;
            Dataset {
                ids: ds.ids.clone(),
                feature_names: ds.feature_names[range.clone()].to_vec(),
                features: ds.features.iter().map(|r| r[range.clone()].to_vec()).collect(),
                labels: if k == 0 { ds.labels.clone() } else { None },
            }
        })
        .collect())
}

/// Inner join on id, in the first party's row order, concatenating columns.
pub fn join_vertical(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or(DatasetError::Partition("no parties"))?;
    let indexes: Vec<HashMap<u64, usize>> = parts.iter().map(Dataset::id_index).collect();
    let kept: Vec<u64> = first.ids.iter().copied().filter(|id| indexes.iter().all(|ix| ix.contains_key(id))).collect();
    if kept.is_empty() {
        return Err(DatasetError::EmptyJoin);
    }
    let label_owner = parts.iter().position(|p| p.labels.is_some());
    Ok(Dataset {
        feature_names: parts.iter().flat_map(|p| p.feature_names.iter().cloned()).collect(),
        features: kept
            .iter()
            .map(|id| {
                parts
                    .iter()
                    .zip(&indexes)
                    .flat_map(|(p, ix)| p.features[ix[id]].iter().copied())
                    .collect()
            })
            .collect(),
        labels: label_owner.map(|k| kept.iter().map(|id| parts[k].labels.as_ref().expect("owner")[indexes[k][id]]).collect()),
        ids: kept,
    })
}

/// Splits rows into `parties` contiguous blocks of near-equal size.
pub fn horizontal_split(ds: &Dataset, parties: usize) -> Result<Vec<Dataset>> {
    if parties == 0 || parties > ds.len() {
        return Err(DatasetError::Partition("party count must be between 1 and the row count"));
    }
    let base = ds.len() / parties;
    let extra = ds.len() % parties;
    let mut start = 0;
    Ok((0..parties)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let idx: Vec<usize> = (start..start + len).collect();
            start += len;
            ds.select(&idx)
        })
        .collect())
}

/// Concatenates horizontally partitioned parties.
pub fn join_horizontal(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or(DatasetError::Partition("no parties"))?;
    if parts.iter().any(|p| p.feature_names != first.feature_names || p.labels.is_some() != first.labels.is_some()) {
        return Err(DatasetError::SchemaMismatch);
    }
    let out = Dataset {
        ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
        feature_names: first.feature_names.clone(),
        features: parts.iter().flat_map(|p| p.features.iter().cloned()).collect(),
        labels: first.labels.as_ref().map(|_| parts.iter().flat_map(|p| p.labels.as_ref().expect("checked").iter().copied()).collect()),
    };
    out.check_unique_ids()?;
    Ok(out)
}

/// Mini-batches as lists of instance ids. The same plan is replayed every
/// epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<u64>>,
}

impl BatchPlan {
    /// Shuffles `ids` with `seed`, then cuts consecutive batches of
    /// `batch_size`; the last batch holds the remainder.
    pub fn new(ids: &[u64], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(DatasetError::ZeroBatchSize);
        }
        if ids.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut seeded_rng(seed));
        Ok(Self {
            batches: order.chunks(batch_size).map(<[u64]>::to_vec).collect(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Vec::len).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Row indices of each batch in `ds`; fails on an id `ds` lacks.
    pub fn indices_in(&self, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
        let ix = ds.id_index();
        self.batches
            .iter()
            .map(|b| b.iter().map(|id| ix.get(id).copied().ok_or(DatasetError::EmptyJoin)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "id,y,a,b,c\n1,1,0.5,2,-1\n2,0,1.5,-3,0\n3,1,0,0,4.25\n";

    #[test]
    fn reads_and_maps_labels() {
        let ds = read_csv_from(SAMPLE.as_bytes(), &CsvSpec::default()).unwrap();
        assert_eq!(ds.ids, vec![1, 2, 3]);
        assert_eq!(ds.feature_names, vec!["a", "b", "c"]);
        assert_eq!(ds.labels, Some(vec![1.0, -1.0, 1.0]));
        assert_eq!(ds.features[2], vec![0.0, 0.0, 4.25]);
        let picked = CsvSpec {
            feature_columns: Some(vec!["c".into(), "a".into()]),
            ..CsvSpec::default()
        };
        let ds = read_csv_from(SAMPLE.as_bytes(), &picked).unwrap();
        assert_eq!(ds.features[0], vec![-1.0, 0.5]);
    }

    #[test]
    fn ingestion_errors() {
        let spec = CsvSpec::default();
        assert!(matches!(read_csv_from("id,a\n1,2\n".as_bytes(), &spec), Err(DatasetError::MissingColumn(c)) if c == "y"));
        assert!(matches!(read_csv_from("id,y,a\n1,1,x\n".as_bytes(), &spec), Err(DatasetError::NonNumeric { .. })));
        assert!(matches!(read_csv_from("id,y,a\n1,2,0\n".as_bytes(), &spec), Err(DatasetError::BadLabel { .. })));
        assert!(matches!(read_csv_from("id,y,a\n1,1,0\n1,0,1\n".as_bytes(), &spec), Err(DatasetError::DuplicateId(1))));
        assert!(matches!(read_csv_from("id,y,a\nq,1,0\n".as_bytes(), &spec), Err(DatasetError::BadId { .. })));
        let no_label = read_csv_from("id,a\n1,2\n".as_bytes(), &CsvSpec::features_only()).unwrap();
        assert!(no_label.labels.is_none());
    }

    #[test]
    fn csv_round_trip() {
        let ds = read_csv_from(SAMPLE.as_bytes(), &CsvSpec::default()).unwrap();
        let mut out = Vec::new();
        write_csv_to(&mut out, &ds, "y").unwrap();
        assert_eq!(read_csv_from(out.as_slice(), &CsvSpec::default()).unwrap(), ds);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ids: Vec<u64> = (0..10).collect();
        let plan = BatchPlan::new(&ids, 4, 7).unwrap();
        assert_eq!(plan.sizes(), vec![4, 4, 2]);
        assert_eq!(plan, BatchPlan::new(&ids, 4, 7).unwrap());
        let mut all: Vec<u64> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert!(BatchPlan::new(&ids, 0, 7).is_err());
    }

    #[test]
    fn vertical_split_then_join_restores_table() {
        let ds = read_csv_from(SAMPLE.as_bytes(), &CsvSpec::default()).unwrap();
        let parts = vertical_split(&ds, &[1, 2]).unwrap();
        assert!(parts[1].labels.is_none());
        assert_eq!(parts[1].feature_names, vec!["b", "c"]);
        // the host's rows arrive in a different order
        let host = parts[1].select(&[2, 0, 1]);
        let joined = join_vertical(&[parts[0].clone(), host]).unwrap();
        assert_eq!(joined, ds);
    }

    #[test]
    fn join_drops_unmatched_ids_and_rejects_empty() {
        let ds = read_csv_from(SAMPLE.as_bytes(), &CsvSpec::default()).unwrap();
        let parts = vertical_split(&ds, &[2, 1]).unwrap();
        let joined = join_vertical(&[parts[0].clone(), parts[1].select(&[1, 2])]).unwrap();
        assert_eq!(joined.ids, vec![2, 3]);
        let mut stranger = parts[1].clone();
        stranger.ids = vec![10, 11, 12];
        assert!(matches!(join_vertical(&[parts[0].clone(), stranger]), Err(DatasetError::EmptyJoin)));
    }

    #[test]
    fn horizontal_split_round_trip() {
        let ds = read_csv_from(SAMPLE.as_bytes(), &CsvSpec::default()).unwrap();
        let parts = horizontal_split(&ds, 2).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(join_horizontal(&parts).unwrap(), ds);
        let mut odd = parts.clone();
        odd[1].feature_names[0] = "z".into();
        assert!(matches!(join_horizontal(&odd), Err(DatasetError::SchemaMismatch)));
    }
}
