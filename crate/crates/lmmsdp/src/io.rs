//! Market-data files, matrix CSVs, scenario files and run manifests.
//!
//! Volatilities in market files are percentages exactly as quoted (14.3
//! means 14.3%); times are in years and must sit on the calendar grid.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use lmmsdp_core::linalg::{BlockDiagMatrix, SymMatrix};
use lmmsdp_core::market::{DiscountCurve, MarketData, SwaptionQuote};
use lmmsdp_core::sensitivity::PerturbationScenario;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

/// Grid tolerance when converting years to period indices.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calendar {
    /// Period `δ` in years.
    pub period: f64,
    /// Number `M` of forward rates covered by the covariance.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSpec {
    /// Flat annually compounded rate.
    Flat { flat_rate: f64 },
    /// `(time in years, discount factor)` on the grid `δ, 2δ, …`.
    Points(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapletVol {
    /// `[expiry, vol]`.
    Pair(f64, f64),
    Full {
        expiry: f64,
        vol: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bid: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ask: Option<f64>,
    },
}

impl CapletVol {
    fn parts(&self) -> (f64, f64, Option<f64>, Option<f64>) {
        match *self {
            CapletVol::Pair(e, v) => (e, v, None, None),
            CapletVol::Full { expiry, vol, bid, ask } => (expiry, vol, bid, ask),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaptionVol {
    pub expiry: f64,
    pub tenor: f64,
    pub vol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ask: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketDataFile {
    pub calendar: Calendar,
    pub curve: CurveSpec,
    #[serde(default)]
    pub caplet_vols: Vec<CapletVol>,
    #[serde(default)]
    pub swaptions: Vec<SwaptionVol>,
}

/// Market data resolved onto the grid, with a label per instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMarket {
    pub market: MarketData,
    pub labels: Vec<String>,
}

impl ResolvedMarket {
    /// Index of the quote with the given grid expiry and tenor.
    pub fn find(&self, expiry: usize, tenor: usize) -> Option<usize> {
        self.market.quotes.iter().position(|q| q.expiry == expiry && q.tenor() == tenor)
    }
}

fn grid_index(years: f64, period: f64, what: &str) -> AppResult<usize> {
    let k = years / period;
    if !k.is_finite() || k < 0.5 || (k - k.round()).abs() > GRID_TOL * k.max(1.0) {
        return Err(AppError::Validation(format!("{what} {years} is not on the {period}-year grid")));
    }
    Ok(k.round() as usize)
}

fn percent(v: f64, what: &str) -> AppResult<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(AppError::Validation(format!("{what} must be a positive percentage")));
    }
    Ok(v / 100.0)
}

fn spread(bid: Option<f64>, ask: Option<f64>, what: &str) -> AppResult<Option<(f64, f64)>> {
    match (bid, ask) {
        (None, None) => Ok(None),
        (Some(b), Some(a)) => {
            let (b, a) = (percent(b, what)?, percent(a, what)?);
            if b > a {
                return Err(AppError::Validation(format!("{what}: bid above ask")));
            }
            Ok(Some((b, a)))
        }
        _ => Err(AppError::Validation(format!("{what}: bid and ask must be given together"))),
    }
}

/// `"5x5"` in years, or `"5Yx5Y"`.
pub fn format_years(v: f64) -> String {
    if (v - v.round()).abs() < 1e-12 {
        format!("{}Y", v.round() as i64)
    } else {
        format!("{v}Y")
    }
}

impl MarketDataFile {
    /// Validates and resolves every quote onto the grid. Duplicate pairs
    /// within the caplet list or within the swaption list are rejected.
    pub fn resolve(&self) -> AppResult<ResolvedMarket> {
        let delta = self.calendar.period;
        let m = self.calendar.horizon;
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(AppError::Validation("calendar period must be positive".into()));
        }
        if m == 0 {
            return Err(AppError::Validation("calendar horizon must be at least one period".into()));
        }
        let curve = match &self.curve {
            CurveSpec::Flat { flat_rate } => {
                if !(*flat_rate > -1.0) || !flat_rate.is_finite() {
                    return Err(AppError::Validation("flat rate must exceed -100%".into()));
                }
                DiscountCurve::flat_annual(*flat_rate, delta, m + 1)?
            }
            CurveSpec::Points(points) => {
                let mut discounts = Vec::with_capacity(points.len());
                for (i, &(t, b)) in points.iter().enumerate() {
                    let k = grid_index(t, delta, "curve time")?;
                    if k != i + 1 {
                        return Err(AppError::Validation(format!(
                            "curve point {} at {t}Y: expected consecutive grid times starting at {delta}Y",
                            i + 1
                        )));
                    }
                    discounts.push(b);
                }
                if discounts.len() < m + 1 {
                    return Err(AppError::Validation(format!(
                        "curve ends at {}Y but the horizon needs discount factors up to {}Y",
                        discounts.len() as f64 * delta,
                        (m + 1) as f64 * delta
                    )));
                }
                DiscountCurve::new(delta, discounts)?
            }
        };

        let mut quotes = Vec::new();
        let mut labels = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, c) in self.caplet_vols.iter().enumerate() {
            let (e, v, bid, ask) = c.parts();
            let what = format!("caplet_vols[{i}]");
            let s = grid_index(e, delta, &format!("{what} expiry"))?;
            if s > m {
                return Err(AppError::Validation(format!("{what}: expiry {e}Y is beyond the horizon")));
            }
            if !seen.insert(s) {
                return Err(AppError::Validation(format!("{what}: duplicate caplet expiry {e}Y")));
            }
            let mut q = SwaptionQuote::caplet(s, percent(v, &what)?);
            if let Some((b, a)) = spread(bid, ask, &what)? {
                q = q.with_spread(b, a);
            }
            quotes.push(q);
            labels.push(format!("caplet {}", format_years(e)));
        }
        let mut seen = BTreeSet::new();
        for (i, sw) in self.swaptions.iter().enumerate() {
            let what = format!("swaptions[{i}]");
            let s = grid_index(sw.expiry, delta, &format!("{what} expiry"))?;
            let l = grid_index(sw.tenor, delta, &format!("{what} tenor"))?;
            if s + l - 1 > m {
                return Err(AppError::Validation(format!(
                    "{what}: {}x{} runs past the horizon",
                    format_years(sw.expiry),
                    format_years(sw.tenor)
                )));
            }
            if !seen.insert((s, l)) {
                return Err(AppError::Validation(format!(
                    "{what}: duplicate swaption {}x{}",
                    format_years(sw.expiry),
                    format_years(sw.tenor)
                )));
            }
            let mut q = SwaptionQuote::new(s, l, percent(sw.vol, &what)?);
            if let Some((b, a)) = spread(sw.bid, sw.ask, &what)? {
                q = q.with_spread(b, a);
            }
            quotes.push(q);
            labels.push(format!("{}x{}", format_years(sw.expiry), format_years(sw.tenor)));
        }
        let market = MarketData { curve, horizon: m, quotes };
        market.instruments()?;
        Ok(ResolvedMarket { market, labels })
    }
}

fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

fn is_csv(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a market file (JSON, or CSV by extension) without resolving it.
pub fn read_market_file(path: &Path) -> AppResult<MarketDataFile> {
    let text = read_text(path)?;
    if is_csv(path) {
        market_from_csv(path, &text)
    } else {
        serde_json::from_str(&text)
            .map_err(|e| AppError::parse(path, format!("line {}, column {}: {e}", e.line(), e.column())))
    }
}

/// Reads, validates and resolves a market file.
pub fn parse_market_data(path: &Path) -> AppResult<ResolvedMarket> {
    read_market_file(path)?.resolve()
}

pub fn write_market_json(path: &Path, file: &MarketDataFile) -> AppResult<()> {
    let text = serde_json::to_string_pretty(file).expect("market data serializes");
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

/// CSV market layout, one record per row:
///
/// ```text
/// record,expiry,tenor,value,bid,ask
/// period,,,1,,
/// horizon,,,20,,
/// flat_rate,,,0.06,,
/// discount,1,,0.9434,,
/// caplet,1,,14.3,,
/// swaption,2,5,12.4,12.2,12.6
/// ```
fn market_from_csv(path: &Path, text: &str) -> AppResult<MarketDataFile> {
    #[derive(Deserialize)]
    struct Row {
        record: String,
        expiry: Option<f64>,
        tenor: Option<f64>,
        value: f64,
        bid: Option<f64>,
        ask: Option<f64>,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let (mut period, mut horizon, mut flat) = (None, None, None);
    let mut points = Vec::new();
    let mut caplets = Vec::new();
    let mut swaptions = Vec::new();
    for rec in rdr.deserialize::<Row>() {
        let row = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            AppError::parse(path, format!("line {line}: {e}"))
        })?;
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| AppError::parse(path, format!("{} record is missing field `{field}`", row.record)))
        };
        match row.record.as_str() {
            "period" => period = Some(row.value),
            "horizon" => {
                if row.value < 0.0 || row.value.fract() != 0.0 {
                    return Err(AppError::parse(path, "horizon must be a whole number of periods"));
                }
                horizon = Some(row.value as usize);
            }
            "flat_rate" => flat = Some(row.value),
            "discount" => points.push((need(row.expiry, "expiry")?, row.value)),
            "caplet" => caplets.push(match (row.bid, row.ask) {
                (None, None) => CapletVol::Pair(need(row.expiry, "expiry")?, row.value),
                (bid, ask) => CapletVol::Full { expiry: need(row.expiry, "expiry")?, vol: row.value, bid, ask },
            }),
            "swaption" => swaptions.push(SwaptionVol {
                expiry: need(row.expiry, "expiry")?,
                tenor: need(row.tenor, "tenor")?,
                vol: row.value,
                bid: row.bid,
                ask: row.ask,
            }),
            other => return Err(AppError::parse(path, format!("unknown record kind `{other}`"))),
        }
    }
    let curve = match (flat, points.is_empty()) {
        (Some(r), true) => CurveSpec::Flat { flat_rate: r },
        (None, false) => CurveSpec::Points(points),
        _ => return Err(AppError::parse(path, "give either one flat_rate record or discount records")),
    };
    Ok(MarketDataFile {
        calendar: Calendar {
            period: period.ok_or_else(|| AppError::parse(path, "missing period record"))?,
            horizon: horizon.ok_or_else(|| AppError::parse(path, "missing horizon record"))?,
        },
        curve,
        caplet_vols: caplets,
        swaptions,
    })
}

/// Parses `EXPIRYxTENOR` in years (`5x5`, `5Yx5Y`, `0.5x2`).
pub fn parse_target(s: &str) -> AppResult<(f64, f64)> {
    let lower = s.to_ascii_lowercase();
    let (a, b) = lower
        .split_once('x')
        .ok_or_else(|| AppError::Usage(format!("target `{s}` must look like EXPIRYxTENOR, e.g. 5x5")))?;
    let num = |t: &str| -> AppResult<f64> {
        t.trim().trim_end_matches('y').parse::<f64>().map_err(|_| AppError::Usage(format!("target `{s}` is not numeric")))
    };
    Ok((num(a)?, num(b)?))
}

/// Grid indices `(S, L)` of a target given in years.
pub fn target_indices(target: (f64, f64), period: f64) -> AppResult<(usize, usize)> {
    Ok((grid_index(target.0, period, "target expiry")?, grid_index(target.1, period, "target tenor")?))
}

/// Formats a float with 17 significant digits, which round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_to_csv(m: &SymMatrix) -> String {
    let n = m.dim();
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| fmt_f64(m.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a numeric CSV without a header.
pub fn read_rows_csv(path: &Path) -> AppResult<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| AppError::parse(path, e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| AppError::parse(path, format!("line {line}, field {}: `{f}` is not a number", j + 1)))
            })
            .collect::<AppResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_matrix_csv(path: &Path) -> AppResult<SymMatrix> {
    let rows = read_rows_csv(path)?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(AppError::parse(path, "expected a square matrix"));
    }
    SymMatrix::new(n, rows.into_iter().flatten().collect())
        .map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))
}

/// A vector given as one row or one column.
pub fn read_vector_csv(path: &Path) -> AppResult<Vec<f64>> {
    let rows = read_rows_csv(path)?;
    match rows.as_slice() {
        [row] => Ok(row.clone()),
        _ if rows.iter().all(|r| r.len() == 1) && !rows.is_empty() => Ok(rows.into_iter().map(|r| r[0]).collect()),
        _ => Err(AppError::parse(path, "expected a single row or a single column")),
    }
}

/// Reads a block-diagonal prior: one CSV for a single block, or a JSON list
/// of row-major matrices.
pub fn read_block_matrix(path: &Path) -> AppResult<BlockDiagMatrix> {
    if is_csv(path) {
        return Ok(BlockDiagMatrix::single(read_matrix_csv(path)?));
    }
    let blocks: Vec<Vec<Vec<f64>>> =
        serde_json::from_str(&read_text(path)?).map_err(|e| AppError::parse(path, e.to_string()))?;
    let blocks = blocks
        .into_iter()
        .map(|b| {
            let n = b.len();
            if b.iter().any(|r| r.len() != n) {
                return Err(AppError::parse(path, "every block must be square"));
            }
            SymMatrix::new(n, b.into_iter().flatten().collect()).map_err(AppError::from)
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(BlockDiagMatrix::new(blocks)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub name: String,
    /// Target moves in cumulative variance, one per instrument.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioFile {
    List(Vec<ScenarioEntry>),
    Wrapped { scenarios: Vec<ScenarioEntry> },
}

pub fn read_scenarios(path: &Path, instruments: usize) -> AppResult<Vec<PerturbationScenario>> {
    let file: ScenarioFile =
        serde_json::from_str(&read_text(path)?).map_err(|e| AppError::parse(path, format!("line {}: {e}", e.line())))?;
    let entries = match file {
        ScenarioFile::List(v) | ScenarioFile::Wrapped { scenarios: v } => v,
    };
    entries
        .into_iter()
        .map(|e| {
            if e.u.len() != instruments {
                return Err(AppError::Validation(format!(
                    "scenario `{}` has {} entries but the market has {instruments} instruments",
                    e.name,
                    e.u.len()
                )));
            }
            Ok(PerturbationScenario::new(e.name, e.u)?)
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> AppResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| AppError::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Output directory that records the digest of everything written to it.
#[derive(Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub written: Vec<FileDigest>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> AppResult<Self> {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> AppResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| AppError::io(&path, e))?;
        self.written.push(FileDigest { path: name.to_string(), sha256: sha256_hex(contents.as_bytes()) });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> AppResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write(name, &(text + "\n"))
    }

    /// Writes each block as `<stem>.csv`, or `<stem>_block<k>.csv` when
    /// there are several.
    pub fn write_blocks(&mut self, stem: &str, x: &BlockDiagMatrix) -> AppResult<()> {
        if x.num_blocks() == 1 {
            self.write(&format!("{stem}.csv"), &matrix_to_csv(x.block(0)))?;
        } else {
            for (k, b) in x.blocks().iter().enumerate() {
                self.write(&format!("{stem}_block{}.csv", k + 1), &matrix_to_csv(b))?;
            }
        }
        Ok(())
    }
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// The command with input paths made absolute.
    pub command: serde_json::Value,
    /// Command line as typed, for reference.
    pub argv: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub options: ManifestOptions,
    pub seed: Option<u64>,
    pub exit_code: i32,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestOptions {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn read_manifest(path: &Path) -> AppResult<RunManifest> {
    serde_json::from_str(&read_text(path)?).map_err(|e| AppError::parse(path, e.to_string()))
}

/// Digests of the given input files.
pub fn input_digests(paths: &[PathBuf]) -> AppResult<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: file_digest(p)? }))
        .collect()
}
