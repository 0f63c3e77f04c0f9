//! Stream sources: CSV ingestion with optional online standardization and a
//! seeded synthetic generator with a tunable label/group correlation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stream element: features plus the feedback revealed after prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    pub y: usize,
    pub a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Standardize with running statistics of the rows read so far.
    Online,
    /// Standardize with fixed per-feature mean and scale.
    Fixed {
        mean: Vec<f64>,
        scale: Vec<f64>,
    },
}

/// Column layout of a CSV stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub features: Vec<String>,
    pub label: String,
    pub group: String,
    pub classes: usize,
    pub groups: usize,
    pub normalization: Normalization,
}

impl DatasetSchema {
    /// Schema whose features are every header column except `label` and `group`.
    pub fn from_header(
        path: impl AsRef<Path>,
        label: &str,
        group: &str,
        classes: usize,
        groups: usize,
    ) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let features = reader.headers()?.iter().filter(|h| *h != label && *h != group).map(str::to_owned).collect();
        let schema = DatasetSchema {
            features,
            label: label.to_owned(),
            group: group.to_owned(),
            classes,
            groups,
            normalization: Normalization::None,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("schema needs at least one feature column".into()));
        }
        if self.label == self.group {
            return Err(Error::Config("label and group columns must differ".into()));
        }
        if self.features.iter().any(|f| *f == self.label || *f == self.group) {
            return Err(Error::Config("label/group columns overlap the features".into()));
        }
        if self.classes < 2 || self.groups < 2 {
            return Err(Error::Config("need at least two classes and two groups".into()));
        }
        if let Normalization::Fixed { mean, scale } = &self.normalization {
            if mean.len() != self.dim() || scale.len() != self.dim() {
                return Err(Error::Config("normalization statistics do not match the feature count".into()));
            }
        }
        Ok(())
    }
}

/// Per-feature running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineStandardizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl OnlineStandardizer {
    pub fn new(dim: usize) -> Self {
        OnlineStandardizer { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    /// Folds `x` into the statistics, then standardizes it in place.
    pub fn standardize(&mut self, x: &mut [f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((v, m), s) in x.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.m2) {
            let sd = (s / n).sqrt();
            *v = if sd > 1e-12 { (*v - m) / sd } else { *v - m };
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| s / n).collect()
    }
}

/// Row-at-a-time reader over a CSV file.
pub struct CsvStream {
    reader: csv::Reader<File>,
    record: csv::StringRecord,
    feature_idx: Vec<usize>,
    label_idx: usize,
    group_idx: usize,
    schema: DatasetSchema,
    standardizer: Option<OnlineStandardizer>,
    row: usize,
    done: bool,
}

/// Opens a CSV stream; data rows are numbered from 1.
pub fn read_stream(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<CsvStream> {
    schema.validate()?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data { row: 0, msg: format!("header has no column {name:?}") })
    };
    let feature_idx = schema.features.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let label_idx = find(&schema.label)?;
    let group_idx = find(&schema.group)?;
    let standardizer = match schema.normalization {
        Normalization::Online => Some(OnlineStandardizer::new(schema.dim())),
        _ => None,
    };
    Ok(CsvStream {
        reader,
        record: csv::StringRecord::new(),
        feature_idx,
        label_idx,
        group_idx,
        schema: schema.clone(),
        standardizer,
        row: 0,
        done: false,
    })
}

impl CsvStream {
    fn parse_current(&mut self) -> Result<Instance> {
        let row = self.row;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let v = self.record.get(idx).map(str::trim).unwrap_or("");
            if v.is_empty() {
                return Err(Error::Data { row, msg: format!("missing value in column {name:?}") });
            }
            Ok(v)
        };
        let mut x = Vec::with_capacity(self.feature_idx.len());
        for (idx, name) in self.feature_idx.iter().zip(&self.schema.features) {
            let raw = cell(*idx, name)?;
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Data { row, msg: format!("column {name:?}: {raw:?} is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Data { row, msg: format!("column {name:?}: non-finite value") });
            }
            x.push(v);
        }
        let int = |idx: usize, name: &str, bound: usize| -> Result<usize> {
            let raw = cell(idx, name)?;
            let v: usize = raw.parse().map_err(|_| Error::Data {
                row,
                msg: format!("column {name:?}: {raw:?} is not a non-negative integer"),
            })?;
            if v >= bound {
                return Err(Error::Domain(format!("row {row}: column {name:?} value {v} outside [0, {bound})")));
            }
            Ok(v)
        };
        let y = int(self.label_idx, &self.schema.label, self.schema.classes)?;
        let a = int(self.group_idx, &self.schema.group, self.schema.groups)?;
        match (&self.schema.normalization, &mut self.standardizer) {
            (Normalization::Online, Some(st)) => st.standardize(&mut x),
            (Normalization::Fixed { mean, scale }, _) => {
                for ((v, m), s) in x.iter_mut().zip(mean).zip(scale) {
                    *v = (*v - m) / s;
                }
            }
            _ => {}
        }
        Ok(Instance { x, y, a })
    }
}

impl Iterator for CsvStream {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.reader.read_record(&mut self.record) {
            Ok(false) => {
                self.done = true;
                None
            }
            Ok(true) => {
                self.row += 1;
                let parsed = self.parse_current();
                if parsed.is_err() {
                    self.done = true;
                }
                Some(parsed)
            }
            Err(e) => {
                self.done = true;
                self.row += 1;
                Some(Err(Error::Data { row: self.row, msg: e.to_string() }))
            }
        }
    }
}

/// Parameters of the synthetic biased stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dim: usize,
    /// Label/group correlation: `y = a` with probability `(1 + bias) / 2`.
    pub bias: f64,
    /// Distance between the class means along the label coordinates.
    pub separation: f64,
    /// Distance between the group means along the remaining coordinates.
    pub group_shift: f64,
    /// Probability of flipping the label after it is drawn.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n: 5000, dim: 10, bias: 0.6, separation: 0.4, group_shift: 2.0, noise: 0.1, seed: 7 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic stream needs n >= 1 and dim >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!("bias must be in [0, 1], got {}", self.bias)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("label noise must be in [0, 0.5], got {}", self.noise)));
        }
        if !self.separation.is_finite() || !self.group_shift.is_finite() {
            return Err(Error::Config("separation and group shift must be finite".into()));
        }
        Ok(())
    }
}

/// Seeded generator: `a ~ Bernoulli(1/2)`; `y = a` w.p. `(1 + bias)/2`, then
/// flipped w.p. `noise`; the first `ceil(d/2)` features are unit Gaussians
/// centered at `±separation/2` by label, the rest at `±group_shift/2` by group.
pub struct SyntheticStream {
    config: SyntheticConfig,
    rng: ChaCha8Rng,
    produced: usize,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticStream> {
    config.validate()?;
    Ok(SyntheticStream { config: config.clone(), rng: ChaCha8Rng::seed_from_u64(config.seed), produced: 0 })
}

impl Iterator for SyntheticStream {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.produced >= self.config.n {
            return None;
        }
        self.produced += 1;
        let cfg = &self.config;
        let rng = &mut self.rng;
        let a = usize::from(rng.gen_bool(0.5));
        let mut y = if rng.gen_bool((1.0 + cfg.bias) / 2.0) { a } else { 1 - a };
        if rng.gen_bool(cfg.noise) {
            y = 1 - y;
        }
        let label_dims = cfg.dim.div_ceil(2);
        let sign = |v: usize| if v == 1 { 0.5 } else { -0.5 };
        let x = (0..cfg.dim)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                if k < label_dims {
                    z + sign(y) * cfg.separation
                } else {
                    z + sign(a) * cfg.group_shift
                }
            })
            .collect();
        Some(Ok(Instance { x, y, a }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.n - self.produced;
        (left, Some(left))
    }
}

/// Writes instances as `x0,...,x{d-1},y,a` with round-trip float formatting.
pub fn write_csv<W: Write>(out: W, dim: usize, instances: impl IntoIterator<Item = Result<Instance>>) -> Result<usize> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    header.push("a".into());
    writer.write_record(&header)?;
    let mut rows = 0;
    for inst in instances {
        let inst = inst?;
        let mut rec: Vec<String> = inst.x.iter().map(|v| v.to_string()).collect();
        rec.push(inst.y.to_string());
        rec.push(inst.a.to_string());
        writer.write_record(&rec)?;
        rows += 1;
    }
    writer.flush()?;
    Ok(rows)
}

/// Divides every input by `max_norm / bound` so that `||x|| <= bound`.
/// Returns the divisor applied.
pub fn rescale_to_bound(instances: &mut [Instance], bound: f64) -> f64 {
    let max_norm = instances.iter().map(|i| i.x.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return 1.0;
    }
    let divisor = max_norm / bound;
    for inst in instances {
        inst.x.iter_mut().for_each(|v| *v /= divisor);
    }
    divisor
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(features: &[&str]) -> DatasetSchema {
        DatasetSchema {
            features: features.iter().map(|s| s.to_string()).collect(),
            label: "y".into(),
            group: "a".into(),
            classes: 2,
            groups: 2,
            normalization: Normalization::None,
        }
    }

    #[test]
    fn echo_two_rows() {
        let f = write_file("f1,f2,y,a\n1.5,-2,1,0\n0.25,3e2,0,1\n");
        let rows: Vec<Instance> = read_stream(f.path(), &schema(&["f1", "f2"])).unwrap().map(Result::unwrap).collect();
        assert_eq!(
            rows,
            vec![Instance { x: vec![1.5, -2.0], y: 1, a: 0 }, Instance { x: vec![0.25, 300.0], y: 0, a: 1 },]
        );
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let f = write_file("f1,f2,y,a\n1,2,0,0\n1,abc,0,1\n");
        let mut stream = read_stream(f.path(), &schema(&["f1", "f2"])).unwrap();
        assert!(stream.next().unwrap().is_ok());
        let err = stream.next().unwrap().unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Data { row: 2, .. }), "{msg}");
        assert!(msg.contains("f2"), "{msg}");
        assert!(stream.next().is_none());
    }

    #[test]
    fn unknown_group_is_domain_error() {
        let f = write_file("f1,y,a\n1,0,2\n");
        let err = read_stream(f.path(), &schema(&["f1"])).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn missing_value_is_error() {
        let f = write_file("f1,y,a\n,0,1\n");
        let err = read_stream(f.path(), &schema(&["f1"])).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::Data { row: 1, .. }));
    }

    #[test]
    fn missing_column_in_header() {
        let f = write_file("f1,y\n1,0\n");
        assert!(read_stream(f.path(), &schema(&["f1"])).is_err());
    }

    #[test]
    fn schema_from_header_skips_label_and_group() {
        let f = write_file("a,u,y,v\n0,1,0,2\n");
        let s = DatasetSchema::from_header(f.path(), "y", "a", 2, 2).unwrap();
        assert_eq!(s.features, vec!["u".to_string(), "v".to_string()]);
    }

    #[test]
    fn independence_at_zero_bias() {
        let cfg = SyntheticConfig { bias: 0.0, noise: 0.0, ..SyntheticConfig::default() };
        let rows: Vec<Instance> = generate_synthetic(&cfg).unwrap().map(Result::unwrap).collect();
        let n = rows.len() as f64;
        let my = rows.iter().map(|r| r.y as f64).sum::<f64>() / n;
        let ma = rows.iter().map(|r| r.a as f64).sum::<f64>() / n;
        let cov = rows.iter().map(|r| (r.y as f64 - my) * (r.a as f64 - ma)).sum::<f64>() / n;
        let corr = cov / ((my * (1.0 - my)) * (ma * (1.0 - ma))).sqrt();
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn full_bias_copies_group() {
        let cfg = SyntheticConfig { bias: 1.0, noise: 0.0, n: 500, ..SyntheticConfig::default() };
        assert!(generate_synthetic(&cfg).unwrap().map(Result::unwrap).all(|r| r.y == r.a));
    }

    #[test]
    fn agreement_rate_tally() {
        let cfg = SyntheticConfig { bias: 0.6, noise: 0.0, n: 5000, seed: 7, ..SyntheticConfig::default() };
        let agree = generate_synthetic(&cfg).unwrap().map(Result::unwrap).filter(|r| r.y == r.a).count();
        let rate = agree as f64 / 5000.0;
        assert!((rate - 0.8).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticConfig { n: 200, ..SyntheticConfig::default() };
        let a: Vec<_> = generate_synthetic(&cfg).unwrap().map(Result::unwrap).collect();
        let b: Vec<_> = generate_synthetic(&cfg).unwrap().map(Result::unwrap).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_validation() {
        assert!(generate_synthetic(&SyntheticConfig { noise: 0.6, ..SyntheticConfig::default() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { n: 0, ..SyntheticConfig::default() }).is_err());
    }

    #[test]
    fn online_standardization_converges() {
        let cfg = SyntheticConfig { n: 1000, dim: 3, ..SyntheticConfig::default() };
        let mut buf = Vec::new();
        write_csv(&mut buf, 3, generate_synthetic(&cfg).unwrap()).unwrap();
        let f = write_file(std::str::from_utf8(&buf).unwrap());
        let mut s = schema(&["x0", "x1", "x2"]);
        let raw: Vec<Instance> = read_stream(f.path(), &s).unwrap().map(Result::unwrap).collect();
        s.normalization = Normalization::Online;
        let std_rows: Vec<Instance> = read_stream(f.path(), &s).unwrap().map(Result::unwrap).collect();

        // Two-pass batch statistics of the raw data.
        let n = raw.len() as f64;
        for k in 0..3 {
            let mean = raw.iter().map(|r| r.x[k]).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r.x[k] - mean).powi(2)).sum::<f64>() / n;
            // Standardized values of the final rows use near-batch statistics.
            let last = &std_rows[500..];
            let zm = last.iter().map(|r| r.x[k]).sum::<f64>() / last.len() as f64;
            let zv = last.iter().map(|r| (r.x[k] - zm).powi(2)).sum::<f64>() / last.len() as f64;
            assert!(zm.abs() < 0.1, "feature {k}: mean {zm}");
            assert!((zv - 1.0).abs() < 0.1, "feature {k}: var {zv}");
            // Final standardized row equals batch standardization of that row.
            let lr = raw.last().unwrap().x[k];
            let expect = (lr - mean) / var.sqrt();
            assert!((std_rows.last().unwrap().x[k] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn standardizer_prefix_property() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin() * 3.0, i as f64]).collect();
        let mut full = OnlineStandardizer::new(2);
        let out_full: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut v = r.clone();
                full.standardize(&mut v);
                v
            })
            .collect();
        let mut part = OnlineStandardizer::new(2);
        let out_part: Vec<Vec<f64>> = rows[..20]
            .iter()
            .map(|r| {
                let mut v = r.clone();
                part.standardize(&mut v);
                v
            })
            .collect();
        assert_eq!(&out_full[..20], &out_part[..]);
    }

    #[test]
    fn rescale_bounds_norm() {
        let mut rows = vec![Instance { x: vec![3.0, 4.0], y: 0, a: 0 }, Instance { x: vec![1.0, 0.0], y: 1, a: 1 }];
        let div = rescale_to_bound(&mut rows, 1.0);
        assert_eq!(div, 5.0);
        assert!((rows[0].x[0] - 0.6).abs() < 1e-15);
    }
}
