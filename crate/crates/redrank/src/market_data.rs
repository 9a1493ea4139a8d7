//! Price panel ingestion, log returns and window grids.
//!
//! A price panel is a dense K x (T+1) matrix of adjusted closing prices over
//! a common date axis. Returns are daily logarithmic returns, and analysis
//! runs over fixed-length index intervals of the return axis: stride-1
//! sliding windows for indicator series and disjoint epochs for market-state
//! clustering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-name mapping for the price CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSchema {
    pub date: String,
    pub ticker: String,
    pub adj_close: String,
}

impl Default for PriceSchema {
    fn default() -> Self {
        PriceSchema {
            date: "date".into(),
            ticker: "ticker".into(),
            adj_close: "adj_close".into(),
        }
    }
}

/// Column-name mapping for the sector CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorSchema {
    pub ticker: String,
    pub sector_code: String,
    pub sub_industry: String,
}

impl Default for SectorSchema {
    fn default() -> Self {
        SectorSchema {
            ticker: "ticker".into(),
            sector_code: "sector_code".into(),
            sub_industry: "sub_industry".into(),
        }
    }
}

/// Dense panel of adjusted closing prices, one row per ticker.
#[derive(Debug, Clone)]
pub struct PricePanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// K x (T_tot + 1), strictly positive.
    pub prices: DMatrix<f64>,
}

/// Dates and tickers removed while aligning the input to a dense panel.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DropReport {
    /// Dates excluded because at least one ticker had no price, with the
    /// tickers that were missing there.
    pub dropped_dates: Vec<(NaiveDate, Vec<String>)>,
    /// Tickers responsible for at least one dropped date.
    pub dropped_tickers: Vec<String>,
}

impl PricePanel {
    pub fn new(tickers: Vec<String>, dates: Vec<NaiveDate>, prices: DMatrix<f64>) -> Result<Self> {
        if tickers.len() != prices.nrows() || dates.len() != prices.ncols() {
            return Err(Error::ingest(format!(
                "shape mismatch: {} tickers, {} dates, {}x{} matrix",
                tickers.len(),
                dates.len(),
                prices.nrows(),
                prices.ncols()
            )));
        }
        let mut seen = BTreeSet::new();
        for t in &tickers {
            if !seen.insert(t.clone()) {
                return Err(Error::ingest(format!("duplicate ticker {t}")));
            }
        }
        for w in dates.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::ingest(format!(
                    "dates not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        for (i, t) in tickers.iter().enumerate() {
            for (j, d) in dates.iter().enumerate() {
                let p = prices[(i, j)];
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::ingest(format!(
                        "nonpositive or non-finite price {p} for ({d}, {t})"
                    )));
                }
            }
        }
        Ok(PricePanel {
            tickers,
            dates,
            prices,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    /// Reorder rows by sector, then sub-industry, then ticker.
    pub fn reorder_by_sector(&self, sm: &SectorMap) -> Result<PricePanel> {
        let order = sm.row_order(&self.tickers)?;
        let mut prices = DMatrix::zeros(self.prices.nrows(), self.prices.ncols());
        let mut tickers = Vec::with_capacity(self.tickers.len());
        for (new_row, &old_row) in order.iter().enumerate() {
            prices.row_mut(new_row).copy_from(&self.prices.row(old_row));
            tickers.push(self.tickers[old_row].clone());
        }
        Ok(PricePanel {
            tickers,
            dates: self.dates.clone(),
            prices,
        })
    }
}

/// GICS-style sector assignment used to order matrix rows and columns.
#[derive(Debug, Clone)]
pub struct SectorMap {
    /// ticker -> (sector code, sub-industry label)
    pub entries: BTreeMap<String, (String, String)>,
    /// Sector codes in display order.
    pub sector_order: Vec<String>,
}

impl SectorMap {
    pub fn new(entries: BTreeMap<String, (String, String)>, sector_order: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &sector_order {
            if !seen.insert(s.clone()) {
                return Err(Error::config(format!("sector {s} repeated in sector_order")));
            }
        }
        for (t, (s, _)) in &entries {
            if !seen.contains(s) {
                return Err(Error::config(format!(
                    "ticker {t} references sector {s} absent from sector_order"
                )));
            }
        }
        Ok(SectorMap {
            entries,
            sector_order,
        })
    }

    /// Row permutation sorting tickers by (sector position, sub-industry, ticker).
    pub fn row_order(&self, tickers: &[String]) -> Result<Vec<usize>> {
        let pos: BTreeMap<&str, usize> = self
            .sector_order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut keyed: Vec<(usize, &str, &str, usize)> = Vec::with_capacity(tickers.len());
        for (row, t) in tickers.iter().enumerate() {
            let (sector, sub) = self
                .entries
                .get(t)
                .ok_or_else(|| Error::config(format!("ticker {t} missing from sector map")))?;
            keyed.push((pos[sector.as_str()], sub.as_str(), t.as_str(), row));
        }
        keyed.sort();
        Ok(keyed.into_iter().map(|(_, _, _, row)| row).collect())
    }

    pub fn members_of(&self, sector: &str) -> Vec<String> {
        let mut v: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, (s, _))| s == sector)
            .map(|(t, _)| t.clone())
            .collect();
        v.sort();
        v
    }
}

/// K x T_tot matrix of daily log returns.
#[derive(Debug, Clone)]
pub struct ReturnPanel {
    pub tickers: Vec<String>,
    /// Return dates; entry t is the date of the price the return leads to,
    /// so the axis has one fewer entry than the price axis.
    pub dates: Vec<NaiveDate>,
    pub returns: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    /// Contiguous column slice for one window; no normalization applied.
    pub fn window_block(&self, w: Window) -> DMatrixView<'_, f64> {
        self.returns.view((0, w.start), (self.returns.nrows(), w.len()))
    }
}

/// Half-open index interval [start, end) on the return axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Index of the interval center (integer division for even lengths).
    pub fn center(&self) -> usize {
        self.start + self.len() / 2
    }
}

/// Family of equal-length windows over a return axis.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub t_ep: usize,
    pub stride: usize,
    pub windows: Vec<Window>,
}

impl WindowGrid {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Resolve window-center timestamps against a date axis.
    pub fn center_dates(&self, dates: &[NaiveDate]) -> Vec<NaiveDate> {
        self.windows.iter().map(|w| dates[w.center()]).collect()
    }
}

/// Build the maximal grid of t_ep-length windows over n_dates return points.
///
/// Sliding grids (stride < t_ep) exclude windows that end exactly at the
/// axis end, so a stride-1 grid over n points has n - t_ep windows. Disjoint
/// grids (stride >= t_ep) keep the final window.
pub fn build_window_grid(n_dates: usize, t_ep: usize, stride: usize) -> Result<WindowGrid> {
    if t_ep == 0 || stride == 0 {
        return Err(Error::config("t_ep and stride must be >= 1"));
    }
    if t_ep > n_dates {
        return Err(Error::config(format!(
            "window length {t_ep} exceeds axis length {n_dates}"
        )));
    }
    let drop_final = stride < t_ep;
    let mut windows = Vec::new();
    let mut start = 0usize;
    while start + t_ep <= n_dates {
        let end = start + t_ep;
        if !(drop_final && end == n_dates) {
            windows.push(Window { start, end });
        }
        start += stride;
    }
    Ok(WindowGrid {
        t_ep,
        stride,
        windows,
    })
}

/// Daily log returns G_i(t) = ln(S_i(t+1) / S_i(t)).
pub fn compute_log_returns(panel: &PricePanel) -> ReturnPanel {
    let k = panel.n_assets();
    let t_tot = panel.dates.len() - 1;
    let mut returns = DMatrix::zeros(k, t_tot);
    for i in 0..k {
        for t in 0..t_tot {
            returns[(i, t)] = (panel.prices[(i, t + 1)] / panel.prices[(i, t)]).ln();
        }
    }
    ReturnPanel {
        tickers: panel.tickers.clone(),
        dates: panel.dates[1..].to_vec(),
        returns,
    }
}

/// Load a price CSV and align it to the dense intersection of dates.
pub fn load_price_panel(path: &Path, schema: &PriceSchema) -> Result<(PricePanel, DropReport)> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::ingest(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ingest(format!("missing column {name} in {}", path.display())))
    };
    let c_date = col(&schema.date)?;
    let c_ticker = col(&schema.ticker)?;
    let c_price = col(&schema.adj_close)?;

    // ticker -> date -> price
    let mut by_ticker: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let mut all_dates: BTreeSet<NaiveDate> = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = NaiveDate::parse_from_str(&rec[c_date], "%Y-%m-%d")
            .map_err(|e| Error::ingest(format!("bad date {:?}: {e}", &rec[c_date])))?;
        let ticker = rec[c_ticker].to_string();
        let price: f64 = rec[c_price]
            .parse()
            .map_err(|e| Error::ingest(format!("bad price {:?} for ({date}, {ticker}): {e}", &rec[c_price])))?;
        if !(price.is_finite() && price > 0.0) {
            return Err(Error::ingest(format!(
                "nonpositive price {price} for ({date}, {ticker})"
            )));
        }
        let m = by_ticker.entry(ticker.clone()).or_default();
        if m.insert(date, price).is_some() {
            return Err(Error::ingest(format!("duplicate entry for ({date}, {ticker})")));
        }
        all_dates.insert(date);
    }
    if by_ticker.is_empty() {
        return Err(Error::ingest(format!("no rows in {}", path.display())));
    }

    let tickers: Vec<String> = by_ticker.keys().cloned().collect();
    let mut kept = Vec::new();
    let mut report = DropReport::default();
    let mut offenders: BTreeSet<String> = BTreeSet::new();
    for d in &all_dates {
        let missing: Vec<String> = tickers
            .iter()
            .filter(|t| !by_ticker[*t].contains_key(d))
            .cloned()
            .collect();
        if missing.is_empty() {
            kept.push(*d);
        } else {
            offenders.extend(missing.iter().cloned());
            report.dropped_dates.push((*d, missing));
        }
    }
    report.dropped_tickers = offenders.into_iter().collect();
    if kept.is_empty() {
        return Err(Error::ingest("empty intersection of dates across tickers".to_string()));
    }

    let mut prices = DMatrix::zeros(tickers.len(), kept.len());
    for (i, t) in tickers.iter().enumerate() {
        let series = &by_ticker[t];
        for (j, d) in kept.iter().enumerate() {
            prices[(i, j)] = series[d];
        }
    }
    let panel = PricePanel::new(tickers, kept, prices)?;
    Ok((panel, report))
}

/// Load a sector CSV; sector_order follows first appearance in the file.
pub fn load_sector_map(path: &Path, schema: &SectorSchema) -> Result<SectorMap> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::ingest(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ingest(format!("missing column {name} in {}", path.display())))
    };
    let c_ticker = col(&schema.ticker)?;
    let c_sector = col(&schema.sector_code)?;
    let c_sub = col(&schema.sub_industry)?;
    let mut entries = BTreeMap::new();
    let mut sector_order = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ticker = rec[c_ticker].to_string();
        let sector = rec[c_sector].to_string();
        let sub = rec[c_sub].to_string();
        if !sector_order.contains(&sector) {
            sector_order.push(sector.clone());
        }
        if entries.insert(ticker.clone(), (sector, sub)).is_some() {
            return Err(Error::ingest(format!("ticker {ticker} repeated in sector map")));
        }
    }
    SectorMap::new(entries, sector_order)
}
