//! Multisite two-phase trial data: records, per-site storage, CSV ingestion and
//! descriptive summaries.
//!
//! Records are grouped by site on construction. Site ids are opaque strings;
//! sites keep the order in which they first appear, and every estimator reports
//! per-site results in that order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual: site membership, Phase-I assignment `z`, Phase-II receipt `d`,
/// intermediate outcome `v` (absent for naive-only analyses), final outcome `y`
/// and baseline covariates `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub site_id: String,
    pub z: bool,
    pub d: bool,
    pub v: Option<f64>,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Column-oriented storage for the individuals of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteData {
    id: String,
    z: Vec<bool>,
    d: Vec<bool>,
    v: Option<Vec<f64>>,
    y: Vec<f64>,
    /// Row-major `len × p`.
    x: Vec<f64>,
    p: usize,
    n_treated: usize,
}

impl SiteData {
    pub fn new(
        id: impl Into<String>,
        z: Vec<bool>,
        d: Vec<bool>,
        v: Option<Vec<f64>>,
        y: Vec<f64>,
        x: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        let n = z.len();
        let same = d.len() == n && y.len() == n && v.as_ref().is_none_or(|v| v.len() == n) && x.len() == n * p;
        if !same {
            return Err(Error::DimensionMismatch(format!(
                "site columns disagree in length (n = {n}, p = {p})"
            )));
        }
        let finite = y.iter().chain(x.iter()).all(|a| a.is_finite())
            && v.as_ref().is_none_or(|v| v.iter().all(|a| a.is_finite()));
        if !finite {
            return Err(Error::NonFiniteInput);
        }
        let n_treated = z.iter().filter(|&&t| t).count();
        Ok(Self {
            id: id.into(),
            z,
            d,
            v,
            y,
            x,
            p,
            n_treated,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn d(&self) -> &[bool] {
        &self.d
    }

    pub fn v(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Covariates, row-major `len × p`.
    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated
    }

    /// Per-covariate mean over both arms.
    pub fn covariate_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.p];
        if self.is_empty() {
            return means;
        }
        for i in 0..self.len() {
            for (m, &x) in means.iter_mut().zip(self.x_row(i)) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// A new site made of the rows at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize], id: impl Into<String>) -> SiteData {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            x.extend_from_slice(self.x_row(i));
        }
        let z: Vec<bool> = indices.iter().map(|&i| self.z[i]).collect();
        let n_treated = z.iter().filter(|&&t| t).count();
        SiteData {
            id: id.into(),
            d: indices.iter().map(|&i| self.d[i]).collect(),
            v: self.v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z,
            x,
            p: self.p,
            n_treated,
        }
    }

    /// Same individuals with every outcome shifted by `delta`.
    pub fn with_outcome_shift(&self, delta: f64) -> SiteData {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|y| *y += delta);
        out
    }

    pub fn record(&self, i: usize) -> IndividualRecord {
        IndividualRecord {
            site_id: self.id.clone(),
            z: self.z[i],
            d: self.d[i],
            v: self.v.as_ref().map(|v| v[i]),
            y: self.y[i],
            x: self.x_row(i).to_vec(),
        }
    }
}

/// A validated multisite dataset. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct MultisiteDataset {
    sites: Vec<SiteData>,
    p: usize,
    has_v: bool,
}

impl MultisiteDataset {
    /// Smallest arm size accepted in any site.
    pub const MIN_ARM_SIZE: usize = 2;

    pub fn from_sites(sites: Vec<SiteData>) -> Result<Self> {
        let first = sites.first().ok_or(Error::EmptyDataset)?;
        let p = first.p;
        let has_v = first.v.is_some();
        for site in &sites {
            if site.p != p {
                return Err(Error::CovariateDimension {
                    expected: p,
                    found: site.p,
                });
            }
            if site.v.is_some() != has_v {
                return Err(Error::DimensionMismatch(
                    "intermediate outcome present in some sites but not others".into(),
                ));
            }
            for (z, count) in [(false, site.n_control()), (true, site.n_treated())] {
                if count < Self::MIN_ARM_SIZE {
                    return Err(Error::SiteTooSmall {
                        site_id: site.id.clone(),
                        z,
                        count,
                        required: Self::MIN_ARM_SIZE,
                    });
                }
            }
        }
        Ok(Self { sites, p, has_v })
    }

    /// Groups records by site id, keeping first-appearance order of sites.
    pub fn from_records<I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = IndividualRecord>,
    {
        struct Builder {
            z: Vec<bool>,
            d: Vec<bool>,
            v: Vec<f64>,
            y: Vec<f64>,
            x: Vec<f64>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut builders: HashMap<String, Builder> = HashMap::new();
        let mut p = None;
        let mut has_v = None;
        for rec in records {
            let expected = *p.get_or_insert(rec.x.len());
            if rec.x.len() != expected {
                return Err(Error::CovariateDimension {
                    expected,
                    found: rec.x.len(),
                });
            }
            if *has_v.get_or_insert(rec.v.is_some()) != rec.v.is_some() {
                return Err(Error::DimensionMismatch(
                    "intermediate outcome present in some records but not others".into(),
                ));
            }
            let b = builders.entry(rec.site_id.clone()).or_insert_with(|| {
                order.push(rec.site_id.clone());
                Builder {
                    z: Vec::new(),
                    d: Vec::new(),
                    v: Vec::new(),
                    y: Vec::new(),
                    x: Vec::new(),
                }
            });
            b.z.push(rec.z);
            b.d.push(rec.d);
            if let Some(v) = rec.v {
                b.v.push(v);
            }
            b.y.push(rec.y);
            b.x.extend_from_slice(&rec.x);
        }
        let p = p.unwrap_or(0);
        let has_v = has_v.unwrap_or(false);
        let sites = order
            .into_iter()
            .map(|id| {
                let b = builders.remove(&id).expect("site registered");
                SiteData::new(id, b.z, b.d, has_v.then_some(b.v), b.y, b.x, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_sites(sites)
    }

    pub fn sites(&self) -> &[SiteData] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// Total number of individuals.
    pub fn len(&self) -> usize {
        self.sites.iter().map(SiteData::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn has_v(&self) -> bool {
        self.has_v
    }

    pub fn records(&self) -> impl Iterator<Item = IndividualRecord> + '_ {
        self.sites.iter().flat_map(|s| (0..s.len()).map(move |i| s.record(i)))
    }

    /// The dataset with site `index` removed (delete-one-site jackknife).
    pub fn without_site(&self, index: usize) -> Result<Self> {
        let sites: Vec<SiteData> = self
            .sites
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != index)
            .map(|(_, s)| s.clone())
            .collect();
        if sites.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            sites,
            p: self.p,
            has_v: self.has_v,
        })
    }

    /// Builds a dataset from sites already known to satisfy the invariants
    /// (e.g. arm-preserving resamples of a validated dataset).
    pub(crate) fn from_validated_sites(sites: Vec<SiteData>, p: usize, has_v: bool) -> Self {
        debug_assert!(sites.iter().all(|s| s.p == p
            && s.v.is_some() == has_v
            && s.n_treated() >= Self::MIN_ARM_SIZE
            && s.n_control() >= Self::MIN_ARM_SIZE));
        Self { sites, p, has_v }
    }

    /// Adds `delta` to every final outcome.
    pub fn with_outcome_shift(&self, delta: f64) -> Self {
        Self {
            sites: self.sites.iter().map(|s| s.with_outcome_shift(delta)).collect(),
            p: self.p,
            has_v: self.has_v,
        }
    }
}

/// Maps CSV header names onto record fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub site: String,
    pub z: String,
    pub d: String,
    #[serde(default)]
    pub v: Option<String>,
    pub y: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            site: "site".into(),
            z: "z".into(),
            d: "d".into(),
            v: Some("v".into()),
            y: "y".into(),
            covariates: Vec::new(),
        }
    }
}

impl ColumnMapping {
    /// Default names with covariates `x1..xp`.
    pub fn with_covariates(p: usize) -> Self {
        Self {
            covariates: (1..=p).map(|j| format!("x{j}")).collect(),
            ..Self::default()
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<MultisiteDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, mapping)
}

/// Parses comma-delimited UTF-8 CSV with a header row. Row numbers in errors
/// count data rows from 1 (the header is not counted).
pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<MultisiteDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let site_col = col(&mapping.site)?;
    let z_col = col(&mapping.z)?;
    let d_col = col(&mapping.d)?;
    let v_col = mapping.v.as_deref().map(col).transpose()?;
    let y_col = col(&mapping.y)?;
    let x_cols = mapping.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let n = i + 1;
        let field = |c: usize| row.get(c).unwrap_or("");
        let binary = |c: usize, name: &str| -> Result<bool> {
            let raw = field(c);
            match raw.parse::<f64>() {
                Ok(0.0) => Ok(false),
                Ok(1.0) => Ok(true),
                _ => Err(Error::NonBinaryTreatment {
                    row: n,
                    column: name.to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        let real = |c: usize, name: &str| -> Result<f64> {
            let raw = field(c);
            match raw.parse::<f64>() {
                Ok(a) if a.is_finite() => Ok(a),
                _ => Err(Error::NonFiniteValue {
                    row: n,
                    column: name.to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        records.push(IndividualRecord {
            site_id: field(site_col).to_string(),
            z: binary(z_col, &mapping.z)?,
            d: binary(d_col, &mapping.d)?,
            v: match (v_col, mapping.v.as_deref()) {
                (Some(c), Some(name)) => Some(real(c, name)?),
                _ => None,
            },
            y: real(y_col, &mapping.y)?,
            x: x_cols
                .iter()
                .zip(&mapping.covariates)
                .map(|(&c, name)| real(c, name))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    MultisiteDataset::from_records(records)
}

/// Writes the dataset in the schema `read_csv` ingests. The mapping must name
/// exactly `dataset.p()` covariates, and a V column iff the dataset has V.
pub fn write_csv<W: Write>(dataset: &MultisiteDataset, writer: W, mapping: &ColumnMapping) -> Result<()> {
    if mapping.covariates.len() != dataset.p() {
        return Err(Error::CovariateDimension {
            expected: dataset.p(),
            found: mapping.covariates.len(),
        });
    }
    if mapping.v.is_some() != dataset.has_v() {
        return Err(Error::DimensionMismatch(
            "column mapping and dataset disagree on the presence of V".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![mapping.site.clone(), mapping.z.clone(), mapping.d.clone()];
    header.extend(mapping.v.clone());
    header.push(mapping.y.clone());
    header.extend(mapping.covariates.iter().cloned());
    w.write_record(&header)?;
    let b = |t: bool| if t { "1" } else { "0" };
    for rec in dataset.records() {
        let mut row = vec![rec.site_id, b(rec.z).into(), b(rec.d).into()];
        row.extend(rec.v.map(|v| v.to_string()));
        row.push(rec.y.to_string());
        row.extend(rec.x.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site_id: String,
    pub n: usize,
    pub n_control: usize,
    pub n_treated: usize,
    /// Fraction of z=0 individuals with d=1.
    pub noncompliance_control: f64,
    /// Fraction of z=1 individuals with d=0.
    pub noncompliance_treated: f64,
    pub treated_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub k: usize,
    pub n_total: usize,
    pub n_control: usize,
    pub n_treated: usize,
    /// Pooled over sites: among z=0, fraction with d=1.
    pub noncompliance_control: f64,
    /// Pooled over sites: among z=1, fraction with d=0.
    pub noncompliance_treated: f64,
    pub min_treated_fraction: f64,
    pub max_treated_fraction: f64,
    /// Sorted by site id.
    pub sites: Vec<SiteReport>,
}

pub fn describe(dataset: &MultisiteDataset) -> DatasetReport {
    let mut rows: Vec<(SiteReport, usize, usize)> = dataset
        .sites()
        .iter()
        .map(|s| {
            let mut switched_in = 0usize;
            let mut switched_out = 0usize;
            for (&z, &d) in s.z().iter().zip(s.d()) {
                match (z, d) {
                    (false, true) => switched_in += 1,
                    (true, false) => switched_out += 1,
                    _ => {}
                }
            }
            let report = SiteReport {
                site_id: s.id().to_string(),
                n: s.len(),
                n_control: s.n_control(),
                n_treated: s.n_treated(),
                noncompliance_control: switched_in as f64 / s.n_control() as f64,
                noncompliance_treated: switched_out as f64 / s.n_treated() as f64,
                treated_fraction: s.n_treated() as f64 / s.len() as f64,
            };
            (report, switched_in, switched_out)
        })
        .collect();
    rows.sort_by(|a, b| a.0.site_id.cmp(&b.0.site_id));

    let n_control: usize = rows.iter().map(|r| r.0.n_control).sum();
    let n_treated: usize = rows.iter().map(|r| r.0.n_treated).sum();
    let switched_in: usize = rows.iter().map(|r| r.1).sum();
    let switched_out: usize = rows.iter().map(|r| r.2).sum();
    let sites: Vec<SiteReport> = rows.into_iter().map(|r| r.0).collect();
    let fractions = sites.iter().map(|s| s.treated_fraction);
    DatasetReport {
        k: sites.len(),
        n_total: n_control + n_treated,
        n_control,
        n_treated,
        noncompliance_control: switched_in as f64 / n_control as f64,
        noncompliance_treated: switched_out as f64 / n_treated as f64,
        min_treated_fraction: fractions.clone().fold(f64::INFINITY, f64::min),
        max_treated_fraction: fractions.fold(f64::NEG_INFINITY, f64::max),
        sites,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> ColumnMapping {
        ColumnMapping::with_covariates(1)
    }

    #[test]
    fn minimal_csv_loads() {
        let csv = "site,z,d,v,y,x1\n\
                   a,0,0,1.0,2.0,0.5\n\
                   a,0,1,1.5,2.5,0.1\n\
                   a,1,1,3.0,4.0,0.2\n\
                   a,1,0,3.5,4.5,0.9\n";
        let ds = read_csv(csv.as_bytes(), &mapping()).unwrap();
        assert_eq!(ds.site_count(), 1);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.p(), 1);
        assert!(ds.has_v());
    }

    #[test]
    fn non_binary_treatment_reports_row() {
        let mut csv = String::from("site,z,d,v,y,x1\n");
        for i in 0..8 {
            let z = if i == 6 { "2" } else { ["0", "1"][i % 2] };
            csv.push_str(&format!("a,{z},0,1,1,0\n"));
        }
        match read_csv(csv.as_bytes(), &mapping()) {
            Err(Error::NonBinaryTreatment { row, .. }) => assert_eq!(row, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_treated_row_is_too_small() {
        let csv = "site,z,d,v,y,x1\na,0,0,1,1,0\na,0,0,1,1,0\na,1,1,1,1,0\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &mapping()),
            Err(Error::SiteTooSmall { z: true, count: 1, .. })
        ));
    }

    #[test]
    fn missing_column_and_bad_number() {
        let csv = "site,z,d,y\na,0,0,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &mapping()),
            Err(Error::MissingColumn(c)) if c == "v"
        ));
        let csv = "site,z,d,v,y,x1\na,0,0,1,NaN,0\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &mapping()),
            Err(Error::NonFiniteValue { row: 1, .. })
        ));
        let csv = "site,z,d,v,y,x1\na,0,0,1,3,\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &mapping()),
            Err(Error::NonFiniteValue { row: 1, .. })
        ));
    }

    fn rec(site: &str, z: bool, d: bool) -> IndividualRecord {
        IndividualRecord {
            site_id: site.into(),
            z,
            d,
            v: None,
            y: 0.0,
            x: vec![],
        }
    }

    #[test]
    fn full_compliance_has_zero_noncompliance() {
        let recs = (0..10).map(|i| rec("s", i % 2 == 0, i % 2 == 0));
        let report = describe(&MultisiteDataset::from_records(recs).unwrap());
        assert_eq!(report.noncompliance_control, 0.0);
        assert_eq!(report.noncompliance_treated, 0.0);
    }

    #[test]
    fn treated_arm_noncompliance_is_counted() {
        let mut recs: Vec<_> = (0..10).map(|i| rec("s", true, i >= 2)).collect();
        recs.extend((0..5).map(|_| rec("s", false, false)));
        let report = describe(&MultisiteDataset::from_records(recs).unwrap());
        assert_eq!(report.noncompliance_treated, 0.2);
        assert_eq!(report.n_total, 15);
    }

    #[test]
    fn star_shaped_rates() {
        let mut recs = Vec::new();
        recs.extend((0..1400).map(|i| rec("k", true, i >= 108)));
        recs.extend((0..3115).map(|i| rec("k", false, i < 248)));
        let report = describe(&MultisiteDataset::from_records(recs).unwrap());
        assert!((report.noncompliance_treated - 0.077).abs() < 5e-4);
        assert!((report.noncompliance_control - 0.080).abs() < 5e-4);
    }

    #[test]
    fn mixed_v_presence_rejected() {
        let mut a = rec("s", true, true);
        a.v = Some(1.0);
        let b = rec("s", false, false);
        assert!(MultisiteDataset::from_records([a, b]).is_err());
    }
}
