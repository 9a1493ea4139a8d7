//! Synthetic regime-switching return panels with known ground truth, plus
//! an independent brute-force reimplementation of the reduced-rank pipeline
//! used as a cross-validation oracle.
//!
//! Generated returns follow a one-factor-plus-blocks model,
//! r_i(t) = beta_i f(t) + b_s g_s(t) + noise, with Gaussian innovations and
//! an analytically known population correlation matrix per regime.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DMatrixView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::spectral::{Approach, ReducedRankCorr, SymmetricMatrix, EPS_VAR};

/// One block of assets sharing a residual factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorBlock {
    /// Asset indices belonging to this block.
    pub members: Vec<usize>,
    /// Within-block residual correlation (0 <= rho < 1) when beta = 0.
    pub rho: f64,
}

/// One quasi-stationary regime of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSpec {
    /// Length in epochs of t_ep trading days each.
    pub duration_epochs: usize,
    /// Per-asset loading on the collective market factor.
    pub market_beta: Vec<f64>,
    /// Partition of the asset set into residual blocks.
    pub sector_blocks: Vec<SectorBlock>,
    /// Idiosyncratic volatility (> 0).
    pub noise_scale: f64,
}

impl RegimeSpec {
    /// Uniform market loading and a single uncorrelated block.
    pub fn plain(duration_epochs: usize, k_assets: usize, beta: f64, noise: f64) -> Self {
        RegimeSpec {
            duration_epochs,
            market_beta: vec![beta; k_assets],
            sector_blocks: vec![SectorBlock {
                members: (0..k_assets).collect(),
                rho: 0.0,
            }],
            noise_scale: noise,
        }
    }

    fn validate(&self, k_assets: usize) -> Result<()> {
        if self.duration_epochs == 0 {
            return Err(Error::config("regime duration must be >= 1 epoch".to_string()));
        }
        if self.market_beta.len() != k_assets {
            return Err(Error::config(format!(
                "market_beta has {} entries for {k_assets} assets",
                self.market_beta.len()
            )));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::config("noise_scale must be positive".to_string()));
        }
        let mut seen = vec![false; k_assets];
        for b in &self.sector_blocks {
            if !(0.0..1.0).contains(&b.rho) {
                return Err(Error::config(format!("block rho {} outside [0, 1)", b.rho)));
            }
            for &m in &b.members {
                if m >= k_assets || seen[m] {
                    return Err(Error::config(format!(
                        "blocks must partition the asset set (asset {m})"
                    )));
                }
                seen[m] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::config("blocks must cover every asset".to_string()));
        }
        Ok(())
    }

    /// Block factor loading reproducing `rho` when beta = 0.
    fn block_loading(&self, rho: f64) -> f64 {
        self.noise_scale * (rho / (1.0 - rho)).sqrt()
    }

    /// Closed-form population correlation matrix of this regime.
    pub fn population_correlation(&self, k_assets: usize) -> SymmetricMatrix {
        let mut block_of = vec![usize::MAX; k_assets];
        let mut loading = vec![0.0; k_assets];
        for (bi, b) in self.sector_blocks.iter().enumerate() {
            let bl = self.block_loading(b.rho);
            for &m in &b.members {
                block_of[m] = bi;
                loading[m] = bl;
            }
        }
        let noise2 = self.noise_scale * self.noise_scale;
        SymmetricMatrix::from_upper_fn(k_assets, |i, j| {
            if i == j {
                return 1.0;
            }
            let cov = self.market_beta[i] * self.market_beta[j]
                + if block_of[i] == block_of[j] {
                    loading[i] * loading[j]
                } else {
                    0.0
                };
            let vi = self.market_beta[i].powi(2) + loading[i].powi(2) + noise2;
            let vj = self.market_beta[j].powi(2) + loading[j].powi(2) + noise2;
            cov / (vi * vj).sqrt()
        })
    }
}

/// Generated panel plus ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub returns: ReturnPanel,
    /// Regime id per epoch.
    pub regime_of_epoch: Vec<usize>,
    /// Block id per asset in each regime (regime-major).
    pub block_of_asset: Vec<Vec<usize>>,
    pub t_ep: usize,
}

/// Synthetic weekday calendar starting 2000-01-03.
fn trading_dates(n: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
    while dates.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    dates
}

/// Generate a regime-switching return panel, deterministic per seed.
pub fn generate(
    specs: &[RegimeSpec],
    k_assets: usize,
    t_ep: usize,
    seed: u64,
) -> Result<SyntheticPanel> {
    if specs.is_empty() {
        return Err(Error::config("at least one regime required".to_string()));
    }
    if k_assets < 4 {
        return Err(Error::config("need at least 4 assets".to_string()));
    }
    for s in specs {
        s.validate(k_assets)?;
    }
    let total_epochs: usize = specs.iter().map(|s| s.duration_epochs).sum();
    let t_tot = total_epochs * t_ep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut returns = DMatrix::zeros(k_assets, t_tot);
    let mut regime_of_epoch = Vec::with_capacity(total_epochs);
    let mut block_of_asset = Vec::with_capacity(specs.len());
    let mut t0 = 0usize;
    for (ri, spec) in specs.iter().enumerate() {
        let mut block_of = vec![0usize; k_assets];
        let mut loading = vec![0.0; k_assets];
        for (bi, b) in spec.sector_blocks.iter().enumerate() {
            let bl = spec.block_loading(b.rho);
            for &m in &b.members {
                block_of[m] = bi;
                loading[m] = bl;
            }
        }
        block_of_asset.push(block_of.clone());
        let duration = spec.duration_epochs * t_ep;
        for t in t0..t0 + duration {
            let market: f64 = normal.sample(&mut rng);
            let block_factors: Vec<f64> = (0..spec.sector_blocks.len())
                .map(|_| normal.sample(&mut rng))
                .collect();
            for i in 0..k_assets {
                let eps: f64 = normal.sample(&mut rng);
                returns[(i, t)] = spec.market_beta[i] * market
                    + loading[i] * block_factors[block_of[i]]
                    + spec.noise_scale * eps;
            }
        }
        regime_of_epoch.extend(std::iter::repeat(ri).take(spec.duration_epochs));
        t0 += duration;
    }

    let tickers = (0..k_assets).map(|i| format!("A{i:03}")).collect();
    let dates = trading_dates(t_tot + 1);
    Ok(SyntheticPanel {
        returns: ReturnPanel {
            tickers,
            dates: dates[1..].to_vec(),
            returns,
        },
        regime_of_epoch,
        block_of_asset,
        t_ep,
    })
}

impl SyntheticPanel {
    /// Reconstruct prices from base 100 and write the production price-CSV
    /// schema, so synthetic data flows through the untouched pipeline.
    pub fn write_price_csv(&self, path: &std::path::Path) -> Result<()> {
        let rp = &self.returns;
        let t_tot = rp.n_dates();
        let dates = trading_dates(t_tot + 1);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "ticker", "adj_close"])?;
        for (i, ticker) in rp.tickers.iter().enumerate() {
            let mut price = 100.0f64;
            w.write_record([dates[0].to_string(), ticker.clone(), format!("{price:.12e}")])?;
            for t in 0..t_tot {
                price *= rp.returns[(i, t)].exp();
                w.write_record([dates[t + 1].to_string(), ticker.clone(), format!("{price:.12e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Sector CSV mapping each asset to its block in the first regime.
    pub fn write_sector_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["ticker", "sector_code", "sub_industry"])?;
        for (i, ticker) in self.returns.tickers.iter().enumerate() {
            let block = self.block_of_asset[0][i];
            w.write_record([
                ticker.clone(),
                format!("S{block}"),
                format!("sub{block}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Independent oracle: direct-summation moments plus a cyclic Jacobi
// eigensolver, sharing no code with the production path.
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (ascending eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    let tol = 1e-14 * scale;
    let max_sweeps = 100;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        if off <= tol {
            let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m[(i, i)], i)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let eigenvalues: Vec<f64> = pairs.iter().map(|(e, _)| *e).collect();
            let mut vectors = DMatrix::zeros(n, n);
            for (pos, &(_, src)) in pairs.iter().enumerate() {
                let mut col = v.column(src).clone_owned();
                let s: f64 = col.iter().sum();
                let flip = if s != 0.0 {
                    s < 0.0
                } else {
                    col.iter().find(|x| **x != 0.0).map(|x| *x < 0.0).unwrap_or(false)
                };
                if flip {
                    col.iter_mut().for_each(|x| *x = -*x);
                }
                vectors.column_mut(pos).copy_from(&col);
            }
            return Ok((eigenvalues, vectors));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = c * mpj - s * mqj;
                    m[(q, j)] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::Numerical("Jacobi sweeps did not converge".into()))
}

/// Brute-force reimplementation of the full reduced-rank construction.
/// Identical contract to the production pipeline; exists for
/// cross-validation only.
pub fn oracle_pipeline(block: DMatrixView<'_, f64>, approach: Approach) -> Result<ReducedRankCorr> {
    let (k, t) = block.shape();
    let tf = t as f64;
    // Direct double-loop moments.
    let means: Vec<f64> = (0..k)
        .map(|i| (0..t).map(|a| block[(i, a)]).sum::<f64>() / tf)
        .collect();
    let mut base = DMatrix::zeros(k, k);
    match approach {
        Approach::Covariance => {
            for i in 0..k {
                for j in 0..k {
                    let mut s = 0.0;
                    for a in 0..t {
                        s += (block[(i, a)] - means[i]) * (block[(j, a)] - means[j]);
                    }
                    base[(i, j)] = s / tf;
                }
            }
        }
        Approach::Correlation => {
            let sds: Vec<f64> = (0..k)
                .map(|i| {
                    let mut s = 0.0;
                    for a in 0..t {
                        let d = block[(i, a)] - means[i];
                        s += d * d;
                    }
                    (s / tf).sqrt()
                })
                .collect();
            for (i, sd) in sds.iter().enumerate() {
                if *sd == 0.0 {
                    return Err(Error::DegenerateWindow {
                        row: i,
                        ticker: None,
                        window: None,
                    });
                }
            }
            for i in 0..k {
                for j in 0..k {
                    let mut s = 0.0;
                    for a in 0..t {
                        s += (block[(i, a)] - means[i]) * (block[(j, a)] - means[j]);
                    }
                    base[(i, j)] = s / (tf * sds[i] * sds[j]);
                }
            }
            for i in 0..k {
                base[(i, i)] = 1.0;
            }
        }
    }
    // Symmetrize round-off from the double loop.
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (base[(i, j)] + base[(j, i)]);
            base[(i, j)] = v;
            base[(j, i)] = v;
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(&base)?;
    // Top eigenvalue with the same degeneracy tie-break as production.
    let top = eigenvalues[k - 1];
    let tie_tol = 1e-12 * top.abs().max(1.0);
    let mut best = k - 1;
    let mut best_score = vectors.column(k - 1).sum().abs();
    for i in (0..k - 1).rev() {
        if top - eigenvalues[i] > tie_tol {
            break;
        }
        let score = vectors.column(i).sum().abs();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    let kappa = eigenvalues[best];
    let u = vectors.column(best);
    let mut residual = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            residual[(i, j)] = base[(i, j)] - kappa * u[i] * u[j];
        }
    }
    let mut sigma = Vec::with_capacity(k);
    for i in 0..k {
        let var = residual[(i, i)];
        if var <= EPS_VAR {
            return Err(Error::DegenerateResidual {
                asset: i.to_string(),
            });
        }
        sigma.push(var.sqrt());
    }
    let mut corr = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            corr[(i, j)] = residual[(i, j)] / (sigma[i] * sigma[j]);
        }
    }
    for i in 0..k {
        corr[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (corr[(i, j)] + corr[(j, i)]);
            corr[(i, j)] = v;
            corr[(j, i)] = v;
        }
    }
    Ok(ReducedRankCorr {
        approach,
        matrix: SymmetricMatrix::new(corr)?,
        window_index: 0,
        sigma_diag: sigma,
    })
}
