//! Config-driven batch pipeline: ingest -> windows -> reduced-rank matrices
//! -> indicators -> distances/averaged distances -> epoch states and
//! snapshots -> reports, with a JSON manifest of inputs, outputs and hashes.
//!
//! Two runs with identical inputs, config and seed produce byte-identical
//! output trees; per-stage wall times go to a separate `timings.json` that
//! is excluded from the manifest's output hash.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::indicators::{
    self, averaged_distance, distance_row, distance_matrix_packed, ApproachSeries, DivisorMode,
};
use crate::market_data::{
    self, build_window_grid, compute_log_returns, PriceSchema, ReturnPanel, SectorSchema,
    Window, WindowGrid,
};
use crate::matio;
use crate::spectral::{Approach, ReducedRankCorr};
use crate::states::{self, ClusterConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputConfig {
    pub prices: PathBuf,
    pub sectors: PathBuf,
    /// Optional event calendar CSV (label, description, date).
    pub events: Option<PathBuf>,
    #[serde(default)]
    pub price_schema: Option<PriceSchema>,
    #[serde(default)]
    pub sector_schema: Option<SectorSchema>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window/epoch length in trading days.
    #[serde(default = "default_t_ep")]
    pub t_ep: usize,
    /// Sliding-window stride for the indicator series.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// First trading date of the epoch grid; defaults to the first return
    /// date. Resolves to the first trading date >= the anchor.
    pub epoch_anchor: Option<NaiveDate>,
}

fn default_t_ep() -> usize {
    42
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    /// Distance-mask threshold for the averaged distances.
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    /// Baseline end date for the averaged distances; defaults to the last
    /// trading day of the second calendar year of data.
    pub baseline_end: Option<NaiveDate>,
    #[serde(default = "default_divisor")]
    pub divisor: DivisorMode,
    /// Sector codes whose equal-weight price index should be written.
    #[serde(default)]
    pub sector_indices: Vec<String>,
}

fn default_approaches() -> Vec<Approach> {
    vec![Approach::Covariance, Approach::Correlation]
}
fn default_cutoff() -> f64 {
    0.22
}
fn default_divisor() -> DivisorMode {
    DivisorMode::Survivors
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotConfig {
    /// Epoch count of the first snapshot; clamped to [k, epochs].
    #[serde(default = "default_start_epochs")]
    pub start_epochs: usize,
}

fn default_start_epochs() -> usize {
    21
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            start_epochs: default_start_epochs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Render heatmaps of distance matrices and typical states.
    #[serde(default)]
    pub heatmaps: bool,
    /// Also export distance matrices as CSV (large; needs confirm_large
    /// above 1000 windows).
    #[serde(default)]
    pub distance_csv: bool,
    #[serde(default)]
    pub confirm_large: bool,
    /// Stream distance rows to disk instead of materializing the full
    /// matrix in memory.
    #[serde(default)]
    pub stream_distances: bool,
    /// Persist packed window matrices so later stages can resume without
    /// recomputing eigendecompositions.
    #[serde(default = "default_true")]
    pub persist_intermediates: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: InputConfig,
    #[serde(default = "default_window_config")]
    pub windows: WindowConfig,
    #[serde(default = "default_analysis_config")]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub snapshots: SnapshotConfig,
    pub output: OutputConfig,
}

fn default_window_config() -> WindowConfig {
    WindowConfig {
        t_ep: default_t_ep(),
        stride: default_stride(),
        epoch_anchor: None,
    }
}

fn default_analysis_config() -> AnalysisConfig {
    AnalysisConfig {
        approaches: default_approaches(),
        cutoff: default_cutoff(),
        baseline_end: None,
        divisor: default_divisor(),
        sector_indices: Vec::new(),
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.analysis.approaches.is_empty() {
            return Err(Error::config("approaches must not be empty"));
        }
        let mut seen = Vec::new();
        for a in &self.analysis.approaches {
            if seen.contains(a) {
                return Err(Error::config(format!("approach {a:?} repeated")));
            }
            seen.push(*a);
        }
        if !(self.analysis.cutoff >= 0.0) {
            return Err(Error::config("cutoff must be >= 0"));
        }
        if self.cluster.k == 0 || self.cluster.restarts == 0 {
            return Err(Error::config("cluster k and restarts must be >= 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Event calendar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub label: String,
    pub description: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, Default)]
pub struct EventCalendar {
    pub entries: Vec<Event>,
}

impl EventCalendar {
    pub fn load(path: &Path) -> Result<EventCalendar> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::ingest(format!("cannot open {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        let mut labels = std::collections::BTreeSet::new();
        for rec in rdr.deserialize() {
            let e: Event = rec?;
            if !labels.insert(e.label.clone()) {
                return Err(Error::config(format!("event label {} repeated", e.label)));
            }
            entries.push(e);
        }
        Ok(EventCalendar { entries })
    }
}

/// One event matched to (or skipped by) a series.
#[derive(Debug, Clone, Serialize)]
pub struct Annotation {
    pub label: String,
    pub description: String,
    pub event_date: NaiveDate,
    pub status: &'static str,
    pub nearest_timestamp: Option<NaiveDate>,
    pub offset_days: Option<i64>,
    pub value: Option<f64>,
}

/// Match each calendar entry to the nearest series timestamp. Events before
/// the first or after the last timestamp are reported as skipped.
pub fn annotate(
    timestamps: &[NaiveDate],
    values: &[Option<f64>],
    cal: &EventCalendar,
) -> Vec<Annotation> {
    cal.entries
        .iter()
        .map(|e| {
            let in_range = timestamps
                .first()
                .zip(timestamps.last())
                .map(|(a, b)| e.date >= *a && e.date <= *b)
                .unwrap_or(false);
            if !in_range {
                return Annotation {
                    label: e.label.clone(),
                    description: e.description.clone(),
                    event_date: e.date,
                    status: "skipped",
                    nearest_timestamp: None,
                    offset_days: None,
                    value: None,
                };
            }
            let (idx, ts) = timestamps
                .iter()
                .enumerate()
                .min_by_key(|(_, t)| (**t - e.date).num_days().abs())
                .expect("non-empty timestamps");
            Annotation {
                label: e.label.clone(),
                description: e.description.clone(),
                event_date: e.date,
                status: "annotated",
                nearest_timestamp: Some(*ts),
                offset_days: Some((*ts - e.date).num_days()),
                value: values[idx],
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Packed window intermediate format
// ---------------------------------------------------------------------------

const WINDOWS_MAGIC: &[u8; 4] = b"RRCW";

fn write_packed_windows(
    path: &Path,
    packed: &[Option<Vec<f64>>],
    k: usize,
    approach: Approach,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(WINDOWS_MAGIC)?;
    out.write_u32::<LittleEndian>(matio::VERSION)?;
    out.write_u32::<LittleEndian>(packed.len() as u32)?;
    out.write_u32::<LittleEndian>(k as u32)?;
    out.write_u32::<LittleEndian>(approach.tag())?;
    for p in packed {
        match p {
            Some(v) => {
                out.write_u32::<LittleEndian>(1)?;
                for &x in v {
                    out.write_f64::<LittleEndian>(x)?;
                }
            }
            None => out.write_u32::<LittleEndian>(0)?,
        }
    }
    out.flush()?;
    Ok(())
}

fn read_packed_windows(path: &Path) -> Result<(Vec<Option<Vec<f64>>>, usize, Approach)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WINDOWS_MAGIC {
        return Err(Error::Format(format!("bad windows magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != matio::VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u32::<LittleEndian>()? as usize;
    let approach = Approach::from_tag(r.read_u32::<LittleEndian>()?)?;
    let plen = k * (k + 1) / 2;
    let mut packed = Vec::with_capacity(n);
    for _ in 0..n {
        let flag = r.read_u32::<LittleEndian>()?;
        if flag == 1 {
            let mut v = vec![0.0; plen];
            for x in v.iter_mut() {
                *x = r.read_f64::<LittleEndian>()?;
            }
            packed.push(Some(v));
        } else {
            packed.push(None);
        }
    }
    Ok((packed, k, approach))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub crate_version: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub resolved: BTreeMap<String, i64>,
    pub stages: Vec<StageRecord>,
    pub outputs: BTreeMap<String, String>,
    pub output_hash: String,
    pub error: Option<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Which stages a CLI subcommand executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    Ingest,
    Indicators,
    Distances,
    States,
    Snapshots,
    Report,
    All,
}

struct ApproachData {
    series: ApproachSeries,
}

pub struct Runner {
    cfg: RunConfig,
    resume: bool,
    out: PathBuf,
    stages: Vec<StageRecord>,
    timings: Vec<(String, f64)>,
    resolved: BTreeMap<String, i64>,
    // caches
    panel: Option<market_data::PricePanel>,
    sectors: Option<market_data::SectorMap>,
    returns: Option<ReturnPanel>,
    grid: Option<WindowGrid>,
    approach_data: BTreeMap<u32, ApproachData>,
    averaged: BTreeMap<u32, indicators::AveragedDistanceSeries>,
}

impl Runner {
    pub fn new(cfg: RunConfig, resume: bool) -> Result<Runner> {
        cfg.validate()?;
        let out = cfg.output.dir.clone();
        std::fs::create_dir_all(&out)?;
        Ok(Runner {
            cfg,
            resume,
            out,
            stages: Vec::new(),
            timings: Vec::new(),
            resolved: BTreeMap::new(),
            panel: None,
            sectors: None,
            returns: None,
            grid: None,
            approach_data: BTreeMap::new(),
            averaged: BTreeMap::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str, skipped: bool, seconds: f64) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            skipped,
        });
        self.timings.push((name.to_string(), seconds));
    }

    fn outputs_exist(&self, names: &[String]) -> bool {
        names.iter().all(|n| self.path(n).exists())
    }

    // -- ingest -------------------------------------------------------------

    fn ensure_ingest(&mut self) -> Result<()> {
        if self.returns.is_some() {
            return Ok(());
        }
        let start = Instant::now();
        let price_schema = self.cfg.input.price_schema.clone().unwrap_or_default();
        let sector_schema = self.cfg.input.sector_schema.clone().unwrap_or_default();
        let (panel, report) = market_data::load_price_panel(&self.cfg.input.prices, &price_schema)?;
        let sectors = market_data::load_sector_map(&self.cfg.input.sectors, &sector_schema)?;
        let panel = panel.reorder_by_sector(&sectors)?;
        let returns = compute_log_returns(&panel);
        let grid = build_window_grid(returns.n_dates(), self.cfg.windows.t_ep, self.cfg.windows.stride)?;

        let report_path = self.path("ingest_report.json");
        serde_json::to_writer_pretty(BufWriter::new(File::create(&report_path)?), &report)?;

        self.resolved.insert("n_assets".into(), panel.n_assets() as i64);
        self.resolved.insert("n_price_dates".into(), panel.dates.len() as i64);
        self.resolved.insert("n_return_dates".into(), returns.n_dates() as i64);
        self.resolved.insert("n_windows".into(), grid.len() as i64);

        self.panel = Some(panel);
        self.sectors = Some(sectors);
        self.returns = Some(returns);
        self.grid = Some(grid);
        self.record("ingest", false, start.elapsed().as_secs_f64());
        Ok(())
    }

    // -- indicators ---------------------------------------------------------

    fn indicator_outputs(&self, approach: Approach) -> Vec<String> {
        let a = approach.as_str();
        let mut names = vec![
            format!("{}.csv", standard_series_name(approach)),
            format!("{}.csv", residual_series_name(approach)),
            format!("{}.csv", reduced_series_name(approach)),
            format!("diagnostics_{a}.json"),
        ];
        if self.cfg.output.persist_intermediates {
            names.push(format!("windows_{a}.bin"));
        }
        names
    }

    fn ensure_indicators(&mut self, approach: Approach) -> Result<()> {
        if self.approach_data.contains_key(&approach.tag()) {
            return Ok(());
        }
        self.ensure_ingest()?;
        let stage_name = format!("indicators_{}", approach.as_str());
        let outputs = self.indicator_outputs(approach);
        let start = Instant::now();

        if self.resume && self.outputs_exist(&outputs) && self.cfg.output.persist_intermediates {
            // Reload the packed matrices; mean series stay on disk.
            let (packed, _k, tag_approach) =
                read_packed_windows(&self.path(&format!("windows_{}.bin", approach.as_str())))?;
            if tag_approach != approach {
                return Err(Error::Format("approach mismatch in windows file".into()));
            }
            let n = packed.len();
            self.approach_data.insert(
                approach.tag(),
                ApproachData {
                    series: ApproachSeries {
                        approach,
                        mean_standard: vec![None; n],
                        mean_residual: vec![None; n],
                        mean_reduced: vec![None; n],
                        packed,
                        diagnostics: Vec::new(),
                    },
                },
            );
            self.record(&stage_name, true, start.elapsed().as_secs_f64());
            return Ok(());
        }

        let returns = self.returns.as_ref().expect("ingest ran");
        let grid = self.grid.as_ref().expect("ingest ran");
        let series = indicators::approach_series(returns, grid, approach);
        let centers = grid.center_dates(&returns.dates);

        matio::write_series_csv(
            &self.path(&format!("{}.csv", standard_series_name(approach))),
            &centers,
            &series.mean_standard,
            None,
        )?;
        matio::write_series_csv(
            &self.path(&format!("{}.csv", residual_series_name(approach))),
            &centers,
            &series.mean_residual,
            None,
        )?;
        matio::write_series_csv(
            &self.path(&format!("{}.csv", reduced_series_name(approach))),
            &centers,
            &series.mean_reduced,
            None,
        )?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(
                self.path(&format!("diagnostics_{}.json", approach.as_str())),
            )?),
            &series.diagnostics,
        )?;
        if self.cfg.output.persist_intermediates {
            write_packed_windows(
                &self.path(&format!("windows_{}.bin", approach.as_str())),
                &series.packed,
                returns.n_assets(),
                approach,
            )?;
        }
        self.approach_data
            .insert(approach.tag(), ApproachData { series });
        self.record(&stage_name, false, start.elapsed().as_secs_f64());
        Ok(())
    }

    fn ensure_sector_indices(&mut self) -> Result<()> {
        if self.cfg.analysis.sector_indices.is_empty() {
            return Ok(());
        }
        self.ensure_ingest()?;
        let start = Instant::now();
        let panel = self.panel.as_ref().expect("ingest ran");
        let sectors = self.sectors.as_ref().expect("ingest ran");
        for code in &self.cfg.analysis.sector_indices {
            let idx = indicators::sector_index(panel, sectors, code)?;
            let values: Vec<Option<f64>> = idx.values.iter().map(|v| Some(*v)).collect();
            matio::write_series_csv(
                &self.path(&format!("sector_index_{code}.csv")),
                &idx.timestamps,
                &values,
                None,
            )?;
        }
        self.record("sector_indices", false, start.elapsed().as_secs_f64());
        Ok(())
    }

    // -- t_c resolution -----------------------------------------------------

    fn resolve_t_c(&mut self) -> Result<usize> {
        let returns = self.returns.as_ref().expect("ingest ran");
        let grid = self.grid.as_ref().expect("ingest ran");
        let centers = grid.center_dates(&returns.dates);
        let baseline_end = match self.cfg.analysis.baseline_end {
            Some(d) => d,
            None => {
                // Last trading day of the second calendar year of data.
                let first_year = returns.dates.first().map(|d| chrono::Datelike::year(d)).ok_or_else(
                    || Error::config("empty return axis"),
                )?;
                let cut = first_year + 1;
                *returns
                    .dates
                    .iter()
                    .filter(|d| chrono::Datelike::year(*d) <= cut)
                    .next_back()
                    .ok_or_else(|| Error::config("no dates within the first two years"))?
            }
        };
        let t_c = centers.iter().filter(|c| **c <= baseline_end).count();
        if t_c == 0 {
            return Err(Error::config(format!(
                "no window center on or before baseline end {baseline_end}"
            )));
        }
        self.resolved.insert("t_c".into(), t_c as i64);
        Ok(t_c)
    }

    // -- distances ----------------------------------------------------------

    fn distance_outputs(&self, approach: Approach) -> Vec<String> {
        let a = approach.as_str();
        let mut names = vec![
            format!("distance_{a}.bin"),
            format!("averaged_distance_{a}.csv"),
        ];
        if self.cfg.output.distance_csv {
            names.push(format!("distance_{a}.csv"));
        }
        if self.cfg.output.heatmaps {
            names.push(format!("distance_{a}.png"));
        }
        names
    }

    fn ensure_distances(&mut self, approach: Approach) -> Result<()> {
        if self.averaged.contains_key(&approach.tag()) {
            return Ok(());
        }
        self.ensure_indicators(approach)?;
        let t_c = self.resolve_t_c()?;
        let stage_name = format!("distances_{}", approach.as_str());
        let outputs = self.distance_outputs(approach);
        let start = Instant::now();
        if self.resume && self.outputs_exist(&outputs) {
            // Averaged series stays on disk; nothing downstream needs it in
            // memory when the report stage can reread the CSV, but keeping
            // the struct simplifies reporting, so recompute it from disk.
            let (values, dim, _tag) =
                read_bin_distance(&self.path(&format!("distance_{}.bin", approach.as_str())))?;
            let dm = indicators::DistanceMatrix {
                approach,
                dim,
                values,
                cutoff: self.cfg.analysis.cutoff,
            };
            let avg = averaged_distance(&dm, t_c, self.cfg.analysis.cutoff, self.cfg.analysis.divisor)?;
            self.averaged.insert(approach.tag(), avg);
            self.record(&stage_name, true, start.elapsed().as_secs_f64());
            return Ok(());
        }

        let cutoff = self.cfg.analysis.cutoff;
        let divisor = self.cfg.analysis.divisor;
        let k = self.returns.as_ref().expect("ingest ran").n_assets();
        let data = &self.approach_data[&approach.tag()];
        let packed = &data.series.packed;
        let n = packed.len();
        if self.cfg.output.distance_csv && n > 1000 && !self.cfg.output.confirm_large {
            return Err(Error::config(format!(
                "distance CSV for {n} windows needs output.confirm_large = true"
            )));
        }

        let bin_path = self.path(&format!("distance_{}.bin", approach.as_str()));
        let avg = if self.cfg.output.stream_distances {
            // Row blocks straight to disk; averaged distances accumulate on
            // the fly and the full matrix never materializes.
            let mut writer = matio::BinMatrixWriter::create(&bin_path, n, approach.tag())?;
            let mut values = Vec::with_capacity(n);
            let mut counts = Vec::with_capacity(n);
            let block_rows = 256usize;
            let mut block: Vec<Vec<f64>> = Vec::new();
            for block_start in (0..n).step_by(block_rows) {
                let block_end = (block_start + block_rows).min(n);
                use rayon::prelude::*;
                block.clear();
                (block_start..block_end)
                    .into_par_iter()
                    .map(|a| distance_row(packed, a, k))
                    .collect_into_vec(&mut block);
                for (off, row) in block.iter_mut().enumerate() {
                    let a = block_start + off;
                    row[a] = if packed[a].is_some() { 0.0 } else { f64::NAN };
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for &z in &row[..t_c] {
                        if !z.is_nan() && z >= cutoff {
                            sum += z;
                            count += 1;
                        }
                    }
                    counts.push(count);
                    values.push(if count == 0 {
                        None
                    } else {
                        match divisor {
                            DivisorMode::Survivors => Some(sum / count as f64),
                            DivisorMode::Baseline => Some(sum / t_c as f64),
                        }
                    });
                    writer.write_row(row)?;
                }
            }
            writer.finish()?;
            indicators::AveragedDistanceSeries {
                approach,
                baseline_end: t_c,
                values,
                counts,
            }
        } else {
            let dm = distance_matrix_packed(packed, k, approach, cutoff);
            matio::write_matrix_bin(&bin_path, &dm.values, n, approach.tag())?;
            if self.cfg.output.distance_csv {
                matio::write_matrix_csv(
                    &self.path(&format!("distance_{}.csv", approach.as_str())),
                    &dm.values,
                    n,
                    None,
                )?;
            }
            if self.cfg.output.heatmaps {
                crate::render::save_heatmap(
                    &dm.values,
                    n,
                    0.0,
                    0.5,
                    Some(cutoff),
                    &self.path(&format!("distance_{}.png", approach.as_str())),
                )?;
            }
            averaged_distance(&dm, t_c, cutoff, divisor)?
        };

        let returns = self.returns.as_ref().expect("ingest ran");
        let grid = self.grid.as_ref().expect("ingest ran");
        let centers = grid.center_dates(&returns.dates);
        matio::write_series_csv(
            &self.path(&format!("averaged_distance_{}.csv", approach.as_str())),
            &centers,
            &avg.values,
            Some(&avg.counts),
        )?;
        self.averaged.insert(approach.tag(), avg);
        self.record(&stage_name, false, start.elapsed().as_secs_f64());
        Ok(())
    }

    // -- epoch states and snapshots ------------------------------------------

    fn epoch_grid(&mut self) -> Result<(usize, WindowGrid)> {
        let returns = self.returns.as_ref().expect("ingest ran");
        let anchor_idx = match self.cfg.windows.epoch_anchor {
            Some(anchor) => returns
                .dates
                .iter()
                .position(|d| *d >= anchor)
                .ok_or_else(|| Error::config(format!("epoch anchor {anchor} after last date")))?,
            None => 0,
        };
        let remaining = returns.n_dates() - anchor_idx;
        let t_ep = self.cfg.windows.t_ep;
        let base = build_window_grid(remaining, t_ep, t_ep)?;
        let windows: Vec<Window> = base
            .windows
            .iter()
            .map(|w| Window {
                start: w.start + anchor_idx,
                end: w.end + anchor_idx,
            })
            .collect();
        self.resolved.insert("epoch_anchor_index".into(), anchor_idx as i64);
        self.resolved.insert("n_epochs".into(), windows.len() as i64);
        Ok((
            anchor_idx,
            WindowGrid {
                t_ep,
                stride: t_ep,
                windows,
            },
        ))
    }

    fn epoch_matrices(&self, grid: &WindowGrid, approach: Approach) -> Result<Vec<ReducedRankCorr>> {
        let returns = self.returns.as_ref().expect("ingest ran");
        use rayon::prelude::*;
        grid.windows
            .par_iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut rc = crate::spectral::reduced_rank_pipeline(returns.window_block(w), approach)?;
                rc.window_index = i;
                Ok(rc)
            })
            .collect()
    }

    fn ensure_states(&mut self, approach: Approach) -> Result<()> {
        self.ensure_ingest()?;
        let stage_name = format!("states_{}", approach.as_str());
        let a = approach.as_str();
        let start = Instant::now();
        let (_, grid) = self.epoch_grid()?;
        if grid.len() < self.cfg.cluster.k {
            return Err(Error::config(format!(
                "{} epochs cannot support k = {}",
                grid.len(),
                self.cfg.cluster.k
            )));
        }
        let mats = self.epoch_matrices(&grid, approach)?;
        let points: Vec<Vec<f64>> = mats.iter().map(states::vectorize_for_clustering).collect();
        let assignment = states::kmeans(&points, &self.cfg.cluster)?;
        let typical = states::typical_state(&assignment, &mats);
        let mut centroid_refs = Vec::new();
        for ts in &typical {
            let name = format!("typical_state_{a}_{}.bin", ts.state);
            matio::write_symmetric_bin(&self.path(&name), &ts.matrix, approach.tag())?;
            if self.cfg.output.heatmaps {
                let dim = ts.matrix.dim();
                let values: Vec<f64> = (0..dim * dim)
                    .map(|idx| ts.matrix.get(idx / dim, idx % dim))
                    .collect();
                crate::render::save_heatmap(
                    &values,
                    dim,
                    -1.0,
                    1.0,
                    None,
                    &self.path(&format!("typical_state_{a}_{}.png", ts.state)),
                )?;
            }
            centroid_refs.push(name);
        }
        let returns = self.returns.as_ref().expect("ingest ran");
        let report = AssignmentReport::build(
            approach,
            &grid,
            &assignment,
            centroid_refs,
            &returns.dates,
            &self.cfg.cluster,
        );
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(self.path(&format!("states_{a}.json")))?),
            &report,
        )?;
        self.record(&stage_name, false, start.elapsed().as_secs_f64());
        Ok(())
    }

    fn ensure_snapshots(&mut self, approach: Approach) -> Result<()> {
        self.ensure_ingest()?;
        let stage_name = format!("snapshots_{}", approach.as_str());
        let a = approach.as_str();
        let start = Instant::now();
        let (_, grid) = self.epoch_grid()?;
        let mats = self.epoch_matrices(&grid, approach)?;
        let points: Vec<Vec<f64>> = mats.iter().map(states::vectorize_for_clustering).collect();
        let start_epochs = self
            .cfg
            .snapshots
            .start_epochs
            .clamp(self.cfg.cluster.k, points.len().max(self.cfg.cluster.k));
        self.resolved.insert("snapshot_start_epochs".into(), start_epochs as i64);
        let seq = states::snapshot_sequence(&points, &self.cfg.cluster, start_epochs)?;
        let transition = states::detect_transition(&seq);
        let report = SnapshotReport::build(approach, &grid, &seq, &transition, &self.returns.as_ref().unwrap().dates);
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(self.path(&format!("snapshots_{a}.json")))?),
            &report,
        )?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(self.path(&format!("transition_{a}.json")))?),
            &transition,
        )?;
        self.record(&stage_name, false, start.elapsed().as_secs_f64());
        Ok(())
    }

    // -- report --------------------------------------------------------------

    fn ensure_report(&mut self) -> Result<()> {
        let Some(events_path) = self.cfg.input.events.clone() else {
            return Ok(());
        };
        self.ensure_ingest()?;
        let start = Instant::now();
        let cal = EventCalendar::load(&events_path)?;
        let returns = self.returns.as_ref().expect("ingest ran");
        let grid = self.grid.as_ref().expect("ingest ran");
        let centers = grid.center_dates(&returns.dates);
        let approaches = self.cfg.analysis.approaches.clone();
        for approach in approaches {
            let a = approach.as_str();
            let names = [
                standard_series_name(approach),
                residual_series_name(approach),
                reduced_series_name(approach),
            ];
            for name in names {
                let csv_path = self.path(&format!("{name}.csv"));
                if !csv_path.exists() {
                    continue;
                }
                let values = read_series_values(&csv_path)?;
                let anns = annotate(&centers, &values, &cal);
                write_annotations(&self.path(&format!("events_{name}.csv")), &anns)?;
            }
            if let Some(avg) = self.averaged.get(&approach.tag()) {
                let anns = annotate(&centers, &avg.values, &cal);
                write_annotations(
                    &self.path(&format!("events_averaged_distance_{a}.csv")),
                    &anns,
                )?;
            }
        }
        self.record("report", false, start.elapsed().as_secs_f64());
        Ok(())
    }

    // -- orchestration -------------------------------------------------------

    pub fn execute(&mut self, select: StageSelect) -> Result<()> {
        match select {
            StageSelect::Ingest => self.ensure_ingest(),
            StageSelect::Indicators => {
                let approaches = self.cfg.analysis.approaches.clone();
                for a in approaches {
                    self.ensure_indicators(a)?;
                }
                self.ensure_sector_indices()
            }
            StageSelect::Distances => {
                let approaches = self.cfg.analysis.approaches.clone();
                for a in approaches {
                    self.ensure_distances(a)?;
                    self.drop_approach_cache(a);
                }
                Ok(())
            }
            StageSelect::States => {
                let approaches = self.cfg.analysis.approaches.clone();
                for a in approaches {
                    self.ensure_states(a)?;
                }
                Ok(())
            }
            StageSelect::Snapshots => {
                let approaches = self.cfg.analysis.approaches.clone();
                for a in approaches {
                    self.ensure_snapshots(a)?;
                }
                Ok(())
            }
            StageSelect::Report => self.ensure_report(),
            StageSelect::All => {
                let approaches = self.cfg.analysis.approaches.clone();
                self.ensure_ingest()?;
                for a in approaches.clone() {
                    self.ensure_indicators(a)?;
                    self.ensure_distances(a)?;
                    // Packed window matrices for one approach can reach a
                    // gigabyte at full scale; release them before starting
                    // the other approach.
                    self.drop_approach_cache(a);
                }
                self.ensure_sector_indices()?;
                for a in approaches.clone() {
                    self.ensure_states(a)?;
                }
                for a in approaches {
                    self.ensure_snapshots(a)?;
                }
                self.ensure_report()
            }
        }
    }

    fn drop_approach_cache(&mut self, approach: Approach) {
        self.approach_data.remove(&approach.tag());
    }

    /// Execute the selection, then write `manifest.json` and `timings.json`.
    /// On error the manifest carries status FAILED plus the error message,
    /// and partial outputs stay in place.
    pub fn run(&mut self, select: StageSelect) -> Result<Manifest> {
        let result = self.execute(select);
        let manifest = self.write_manifest(result.as_ref().err())?;
        result.map(|_| manifest)
    }

    fn write_manifest(&mut self, error: Option<&Error>) -> Result<Manifest> {
        let mut inputs = BTreeMap::new();
        for p in [Some(&self.cfg.input.prices), Some(&self.cfg.input.sectors), self.cfg.input.events.as_ref()]
            .into_iter()
            .flatten()
        {
            if p.exists() {
                inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        let mut outputs = BTreeMap::new();
        let mut names: Vec<String> = std::fs::read_dir(&self.out)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json" && n != "timings.json")
            .collect();
        names.sort();
        for n in names {
            outputs.insert(n.clone(), sha256_file(&self.path(&n))?);
        }
        let mut hasher = Sha256::new();
        for (n, h) in &outputs {
            hasher.update(n.as_bytes());
            hasher.update(b":");
            hasher.update(h.as_bytes());
            hasher.update(b"\n");
        }
        let manifest = Manifest {
            status: if error.is_some() { "FAILED" } else { "OK" }.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
            inputs,
            resolved: self.resolved.clone(),
            stages: self.stages.clone(),
            outputs,
            output_hash: format!("{:x}", hasher.finalize()),
            error: error.map(|e| e.to_string()),
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(self.path("manifest.json"))?),
            &manifest,
        )?;
        let mut timings: BTreeMap<String, f64> = self.timings.iter().cloned().collect();
        if let Some(kb) = peak_rss_kb() {
            timings.insert("peak_rss_kb".into(), kb);
        }
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(self.path("timings.json"))?),
            &timings,
        )?;
        Ok(manifest)
    }
}

/// Process-wide peak resident set size from /proc, where available.
fn peak_rss_kb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn standard_series_name(approach: Approach) -> &'static str {
    match approach {
        Approach::Covariance => "mean_cov_sigma",
        Approach::Correlation => "mean_corr_c",
    }
}

fn residual_series_name(approach: Approach) -> &'static str {
    match approach {
        Approach::Covariance => "mean_cov_sigma_b",
        Approach::Correlation => "mean_cov_sigma_l",
    }
}

fn reduced_series_name(approach: Approach) -> &'static str {
    match approach {
        Approach::Covariance => "mean_corr_c_b",
        Approach::Correlation => "mean_corr_c_l",
    }
}

fn read_bin_distance(path: &Path) -> Result<(Vec<f64>, usize, u32)> {
    matio::read_matrix_bin(path)
}

fn read_series_values(path: &Path) -> Result<Vec<Option<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = rec.get(1).unwrap_or("");
        values.push(if field.is_empty() {
            None
        } else {
            Some(field.parse().map_err(|e| Error::Format(format!("bad value {field}: {e}")))?)
        });
    }
    Ok(values)
}

fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label",
        "description",
        "event_date",
        "status",
        "nearest_timestamp",
        "offset_days",
        "value",
    ])?;
    for a in anns {
        w.write_record([
            a.label.clone(),
            a.description.clone(),
            a.event_date.to_string(),
            a.status.to_string(),
            a.nearest_timestamp.map(|d| d.to_string()).unwrap_or_default(),
            a.offset_days.map(|d| d.to_string()).unwrap_or_default(),
            a.value.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLabel {
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub approach: Approach,
    pub epochs: Vec<EpochLabel>,
    pub centroid_refs: Vec<String>,
    pub inertia: f64,
    pub degenerate: bool,
    pub config_echo: ClusterConfig,
}

impl AssignmentReport {
    fn build(
        approach: Approach,
        grid: &WindowGrid,
        assignment: &states::StateAssignment,
        centroid_refs: Vec<String>,
        dates: &[NaiveDate],
        cfg: &ClusterConfig,
    ) -> AssignmentReport {
        let epochs = grid
            .windows
            .iter()
            .zip(&assignment.labels)
            .map(|(w, &label)| EpochLabel {
                start_date: dates[w.start],
                end_date: dates[w.end - 1],
                label,
            })
            .collect();
        AssignmentReport {
            approach,
            epochs,
            centroid_refs,
            inertia: assignment.inertia,
            degenerate: assignment.degenerate,
            config_echo: cfg.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub n_epochs: usize,
    pub labels: Vec<usize>,
    pub alignment: Vec<usize>,
    pub inertia: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub approach: Approach,
    pub epoch_start_dates: Vec<NaiveDate>,
    pub snapshots: Vec<SnapshotEntry>,
    pub transition: states::TransitionReport,
}

impl SnapshotReport {
    fn build(
        approach: Approach,
        grid: &WindowGrid,
        seq: &states::SnapshotSequence,
        transition: &states::TransitionReport,
        dates: &[NaiveDate],
    ) -> SnapshotReport {
        SnapshotReport {
            approach,
            epoch_start_dates: grid.windows.iter().map(|w| dates[w.start]).collect(),
            snapshots: seq
                .snapshots
                .iter()
                .map(|s| SnapshotEntry {
                    n_epochs: s.n_epochs,
                    labels: s.assignment.labels.clone(),
                    alignment: s.alignment.clone(),
                    inertia: s.assignment.inertia,
                    degenerate: s.assignment.degenerate,
                })
                .collect(),
            transition: transition.clone(),
        }
    }
}
