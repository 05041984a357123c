//! Site-by-year count panels with an explicit observation mask.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// How a missing cell is spelled in a counts CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MaskConvention {
    /// An empty field marks an unvisited site-year.
    #[default]
    EmptyCell,
    /// A sentinel token (or an empty field) marks an unvisited site-year.
    Sentinel(String),
}

impl MaskConvention {
    fn is_missing(&self, field: &str) -> bool {
        match self {
            MaskConvention::EmptyCell => field.is_empty(),
            MaskConvention::Sentinel(token) => field.is_empty() || field == token,
        }
    }

    fn missing_token(&self) -> &str {
        match self {
            MaskConvention::EmptyCell => "",
            MaskConvention::Sentinel(token) => token,
        }
    }
}

/// Counts for `n` sites over `p` years together with the visit mask.
///
/// Counts at unvisited cells are stored as zero and never read; every
/// computation weights by the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedPanel {
    n: usize,
    p: usize,
    counts: Vec<u64>,
    mask: Vec<bool>,
    site_ids: Vec<String>,
    year_labels: Vec<String>,
}

impl ObservedPanel {
    /// Builds a panel from row-major optional counts; `None` marks a missing cell.
    pub fn from_rows(rows: &[Vec<Option<u64>>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("panel has no sites".into()));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::Validation("panel has no years".into()));
        }
        let mut counts = Vec::with_capacity(n * p);
        let mut mask = Vec::with_capacity(n * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Dimension {
                    block: "counts".into(),
                    message: format!("row {} has {} entries, expected {}", i, row.len(), p),
                });
            }
            for v in row {
                counts.push(v.unwrap_or(0));
                mask.push(v.is_some());
            }
        }
        let site_ids = (1..=n).map(|i| format!("site{i}")).collect();
        let year_labels = (1..=p).map(|j| j.to_string()).collect();
        let panel = ObservedPanel { n, p, counts, mask, site_ids, year_labels };
        panel.validate()?;
        Ok(panel)
    }

    /// A fully observed panel from a row-major count matrix.
    pub fn complete(n: usize, p: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * p {
            return Err(Error::Dimension {
                block: "counts".into(),
                message: format!("{} values for a {}x{} panel", counts.len(), n, p),
            });
        }
        Self::with_mask(n, p, counts, vec![true; n * p])
    }

    /// A panel from row-major counts and mask.
    pub fn with_mask(n: usize, p: usize, mut counts: Vec<u64>, mask: Vec<bool>) -> Result<Self> {
        if counts.len() != n * p || mask.len() != n * p {
            return Err(Error::Dimension {
                block: "counts".into(),
                message: format!("expected {} cells", n * p),
            });
        }
        for (c, &m) in counts.iter_mut().zip(&mask) {
            if !m {
                *c = 0;
            }
        }
        let panel = ObservedPanel {
            n,
            p,
            counts,
            mask,
            site_ids: (1..=n).map(|i| format!("site{i}")).collect(),
            year_labels: (1..=p).map(|j| j.to_string()).collect(),
        };
        panel.validate()?;
        Ok(panel)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if !(0..self.p).any(|j| self.observed(i, j)) {
                return Err(Error::Validation(format!(
                    "site '{}' has no observed year",
                    self.site_ids[i]
                )));
            }
        }
        Ok(())
    }

    pub fn with_labels(mut self, site_ids: Vec<String>, year_labels: Vec<String>) -> Result<Self> {
        if site_ids.len() != self.n || year_labels.len() != self.p {
            return Err(Error::Dimension {
                block: "labels".into(),
                message: "label counts do not match panel shape".into(),
            });
        }
        self.site_ids = site_ids;
        self.year_labels = year_labels;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn year_labels(&self) -> &[String] {
        &self.year_labels
    }

    #[inline]
    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.p + j]
    }

    /// Count at a cell; `None` when the cell is missing.
    #[inline]
    pub fn count(&self, i: usize, j: usize) -> Option<u64> {
        let k = i * self.p + j;
        self.mask[k].then_some(self.counts[k])
    }

    /// Raw stored count, zero at missing cells.
    #[inline]
    pub fn raw_count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.p + j]
    }

    /// Mask weight as 0.0 / 1.0.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if self.observed(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Years observed at site `i` (the set O_i).
    pub fn observed_years(&self, i: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| self.observed(i, j)).collect()
    }

    /// Years missing at site `i` (the set M_i).
    pub fn missing_years(&self, i: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| !self.observed(i, j)).collect()
    }

    /// All missing cells in row-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.p {
                if !self.observed(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.n_observed() as f64 / (self.n * self.p) as f64
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// log(Y!) at a cell (zero for missing cells).
    pub fn log_factorial(&self, i: usize, j: usize) -> f64 {
        match self.count(i, j) {
            Some(y) if y > 1 => ln_factorial(y),
            _ => 0.0,
        }
    }

    /// Replaces the mask, keeping the underlying counts of cells still observed.
    pub fn restrict(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::Dimension {
                block: "mask".into(),
                message: "mask shape differs from panel".into(),
            });
        }
        for (k, (&new, &old)) in mask.iter().zip(&self.mask).enumerate() {
            if new && !old {
                return Err(Error::Validation(format!(
                    "cell ({}, {}) is missing in the source panel",
                    k / self.p,
                    k % self.p
                )));
            }
        }
        let counts = self.counts.clone();
        let mut out = ObservedPanel::with_mask(self.n, self.p, counts, mask)?;
        out.site_ids = self.site_ids.clone();
        out.year_labels = self.year_labels.clone();
        Ok(out)
    }

    /// Reads a counts CSV: header of year labels after a site-id column.
    pub fn read_csv<R: Read>(reader: R, convention: &MaskConvention) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(Error::Parse {
                location: "header".into(),
                message: "expected a site column followed by at least one year".into(),
            });
        }
        let year_labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let p = year_labels.len();
        let mut site_ids = Vec::new();
        let mut counts = Vec::new();
        let mut mask = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let site = record.get(0).unwrap_or_default().to_string();
            for j in 0..p {
                let field = record.get(j + 1).unwrap_or_default();
                if convention.is_missing(field) {
                    counts.push(0);
                    mask.push(false);
                } else {
                    let v: u64 = field.parse().map_err(|_| Error::Parse {
                        location: format!("row {} (site '{}'), year '{}'", r + 2, site, year_labels[j]),
                        message: format!("'{field}' is not a non-negative integer count"),
                    })?;
                    counts.push(v);
                    mask.push(true);
                }
            }
            site_ids.push(site);
        }
        let n = site_ids.len();
        if n == 0 {
            return Err(Error::Validation("counts file has no sites".into()));
        }
        let panel = ObservedPanel { n, p, counts, mask, site_ids, year_labels };
        panel.validate()?;
        Ok(panel)
    }

    pub fn load(path: &Path, convention: &MaskConvention) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, convention)
    }

    /// Writes the panel in the same CSV layout `read_csv` accepts.
    pub fn write_csv<W: Write>(&self, writer: W, convention: &MaskConvention) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        let mut header = vec!["site".to_string()];
        header.extend(self.year_labels.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n {
            let mut row = vec![self.site_ids[i].clone()];
            for j in 0..self.p {
                row.push(match self.count(i, j) {
                    Some(v) => v.to_string(),
                    None => convention.missing_token().to_string(),
                });
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Loads and validates a counts CSV.
pub fn load_panel(path: &Path, convention: &MaskConvention) -> Result<ObservedPanel> {
    ObservedPanel::load(path, convention)
}
