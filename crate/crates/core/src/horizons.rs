//! Solar-system ephemerides from the JPL Horizons API: query building, an
//! on-disk response cache, parsing of vector tables, and dataset assembly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetMeta, Splits, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::trajectory::{normalize, NormStats, RelationLabels, Trajectory};

pub const API_URL: &str = "https://ssd.jpl.nasa.gov/api/horizons.api";
/// Environment variable naming the default cache directory.
pub const CACHE_ENV: &str = "RELPOT_HORIZONS_CACHE";
const START_MARKER: &str = "$$SOE";
const END_MARKER: &str = "$$EOE";

/// One vector-table request: `target` relative to `origin`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EphemerisQuery {
    pub target: String,
    /// Body id of the coordinate center; `0` is the solar-system barycenter.
    pub origin: String,
    /// `YYYY-MM-DD`.
    pub start: String,
    pub stop: String,
    /// Count and unit, e.g. `10 d`.
    pub step: String,
}

fn check_date(s: &str) -> Result<()> {
    let parts: Vec<&str> = s.split('-').collect();
    let ok = parts.len() == 3
        && parts[0].len() == 4
        && parts[1].len() == 2
        && parts[2].len() == 2
        && parts.iter().all(|p| p.chars().all(|c| c.is_ascii_digit()));
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("date {s:?} is not YYYY-MM-DD")))
    }
}

impl EphemerisQuery {
    pub fn validate(&self) -> Result<()> {
        check_date(&self.start)?;
        check_date(&self.stop)?;
        if self.start >= self.stop {
            return Err(Error::Invalid(format!("start {} must precede stop {}", self.start, self.stop)));
        }
        let mut it = self.step.split_whitespace();
        let count = it.next().and_then(|c| c.parse::<u32>().ok());
        let unit = it.next();
        if !matches!(count, Some(c) if c > 0) || !matches!(unit, Some("d" | "h" | "m" | "y" | "mo")) || it.next().is_some() {
            return Err(Error::Invalid(format!("step {:?} must be a positive count and a unit", self.step)));
        }
        if self.target.is_empty() || self.origin.is_empty() {
            return Err(Error::Invalid("target and origin ids must be non-empty".into()));
        }
        Ok(())
    }

    /// API parameters, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, String)> {
        let quote = |s: &str| format!("'{s}'");
        vec![
            ("format", "text".into()),
            ("COMMAND", quote(&self.target)),
            ("OBJ_DATA", quote("NO")),
            ("MAKE_EPHEM", quote("YES")),
            ("EPHEM_TYPE", quote("VECTORS")),
            ("CENTER", quote(&format!("500@{}", self.origin))),
            ("START_TIME", quote(&self.start)),
            ("STOP_TIME", quote(&self.stop)),
            ("STEP_SIZE", quote(&self.step)),
            ("VEC_TABLE", quote("2")),
            ("REF_PLANE", quote("ECLIPTIC")),
            ("OUT_UNITS", quote("AU-D")),
            ("CSV_FORMAT", quote("YES")),
            ("VEC_LABELS", quote("NO")),
        ]
    }

    /// SHA-256 of the parameter list; names the cache entry.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.params() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Fetches a response body for a query.
pub trait Transport: Sync {
    fn fetch(&self, query: &EphemerisQuery) -> Result<String>;
}

/// HTTPS transport against the public API.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpTransport { agent, url: url.into() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(API_URL, Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn fetch(&self, query: &EphemerisQuery) -> Result<String> {
        let mut req = self.agent.get(&self.url);
        for (k, v) in query.params() {
            req = req.query(k, &v);
        }
        let mut resp = req.call().map_err(|e| Error::Http(format!("{} for target {}: {e}", self.url, query.target)))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Http(format!("reading response for target {}: {e}", query.target)))
    }
}

/// Serves responses from files named `<target>@<origin>.txt`; counts calls.
pub struct FixtureTransport {
    dir: PathBuf,
    calls: AtomicUsize,
}

impl FixtureTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureTransport { dir: dir.into(), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn file_name(query: &EphemerisQuery) -> String {
        format!("{}@{}.txt", query.target, query.origin)
    }
}

impl Transport for FixtureTransport {
    fn fetch(&self, query: &EphemerisQuery) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let p = self.dir.join(Self::file_name(query));
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }
}

/// One parsed row: Julian date (TDB) and `[x, y, z, vx, vy, vz]` in AU and
/// AU/day.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EphemerisRow {
    pub jd: f64,
    pub state: [f64; 6],
}

/// Rows between the data markers of a CSV vector table.
pub fn parse_vectors(text: &str) -> Result<Vec<EphemerisRow>> {
    let start = text
        .find(START_MARKER)
        .ok_or_else(|| Error::Parse(format!("missing data start marker {START_MARKER}")))?;
    let body_start = start + START_MARKER.len();
    let end = text[body_start..]
        .find(END_MARKER)
        .ok_or_else(|| Error::Parse(format!("missing data end marker {END_MARKER}")))?;
    let mut rows = Vec::new();
    for (k, line) in text[body_start..body_start + end].lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).filter(|f| !f.is_empty()).collect();
        if fields.len() < 8 {
            return Err(Error::Parse(format!("data line {k} has {} fields, expected 8: {line:?}", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse(format!("data line {k}: {s:?} is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("data line {k}: non-finite value")))
            }
        };
        let mut state = [0.0; 6];
        for (i, s) in state.iter_mut().enumerate() {
            *s = num(fields[2 + i])?;
        }
        rows.push(EphemerisRow { jd: num(fields[0])?, state });
    }
    if rows.is_empty() {
        return Err(Error::Parse("data section is empty".into()));
    }
    Ok(rows)
}

/// Transport plus an optional content cache keyed by [`EphemerisQuery::cache_key`].
pub struct EphemerisClient<T: Transport> {
    pub transport: T,
    pub cache_dir: Option<PathBuf>,
}

impl<T: Transport> EphemerisClient<T> {
    pub fn new(transport: T, cache_dir: Option<PathBuf>) -> Self {
        EphemerisClient { transport, cache_dir }
    }

    pub fn cache_path(&self, q: &EphemerisQuery) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{}.txt", q.cache_key())))
    }

    /// Response text, from the cache when present. Fresh responses are
    /// validated before they are cached.
    pub fn fetch_text(&self, q: &EphemerisQuery) -> Result<String> {
        q.validate()?;
        if let Some(p) = self.cache_path(q) {
            if p.exists() {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                parse_vectors(&text).map_err(|e| Error::Corrupt(format!("cache entry {}: {e}", p.display())))?;
                return Ok(text);
            }
        }
        let text = self.transport.fetch(q)?;
        parse_vectors(&text)?;
        if let Some(p) = self.cache_path(q) {
            write_atomic(&p, text.as_bytes())?;
        }
        Ok(text)
    }

    pub fn fetch(&self, q: &EphemerisQuery) -> Result<Vec<EphemerisRow>> {
        parse_vectors(&self.fetch_text(q)?)
    }
}

/// Writes through a unique temporary file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("entry"),
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::SeqCst)
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Body {
    pub id: String,
    pub name: String,
}

fn body(id: &str, name: &str) -> Body {
    Body { id: id.into(), name: name.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonsConfig {
    pub targets: Vec<Body>,
    /// Coordinate centers; each contributes its own set of windows.
    pub origins: Vec<String>,
    pub start: String,
    pub stop: String,
    pub step: String,
    /// States per trajectory.
    pub window: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Shuffles windows before splitting.
    pub seed: u64,
    /// Concurrent fetches.
    pub workers: usize,
}

impl Default for HorizonsConfig {
    fn default() -> Self {
        let targets = vec![
            body("10", "Sun"),
            body("199", "Mercury"),
            body("299", "Venus"),
            body("399", "Earth"),
            body("499", "Mars"),
            body("599", "Jupiter"),
            body("699", "Saturn"),
            body("799", "Uranus"),
            body("899", "Neptune"),
            body("301", "Moon"),
            body("503", "Ganymede"),
            body("606", "Titan"),
        ];
        let mut origins: Vec<String> = targets.iter().map(|b| b.id.clone()).collect();
        origins.push("0".into());
        HorizonsConfig {
            targets,
            origins,
            start: "1800-01-01".into(),
            stop: "2022-01-01".into(),
            step: "10 d".into(),
            window: 43,
            train_fraction: 0.8,
            val_fraction: 0.1,
            seed: 0,
            workers: 4,
        }
    }
}

impl HorizonsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.len() < 2 || self.origins.is_empty() {
            return Err(Error::Invalid("need at least two targets and one origin".into()));
        }
        if self.window < 2 {
            return Err(Error::Invalid(format!("window must be >= 2, got {}", self.window)));
        }
        let f = (self.train_fraction, self.val_fraction);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 <= 1.0) {
            return Err(Error::Invalid(format!("bad split fractions {f:?}")));
        }
        self.query("0", "0").validate()
    }

    pub fn query(&self, target: &str, origin: &str) -> EphemerisQuery {
        EphemerisQuery {
            target: target.into(),
            origin: origin.into(),
            start: self.start.clone(),
            stop: self.stop.clone(),
            step: self.step.clone(),
        }
    }

    /// Every query the dataset needs; a body is never queried against itself.
    pub fn queries(&self) -> Vec<EphemerisQuery> {
        self.origins
            .iter()
            .flat_map(|o| self.targets.iter().filter(move |t| &t.id != o).map(move |t| self.query(&t.id, o)))
            .collect()
    }

    fn step_days(&self) -> Option<f64> {
        let mut it = self.step.split_whitespace();
        let count: f64 = it.next()?.parse().ok()?;
        match it.next()? {
            "d" => Some(count),
            "h" => Some(count / 24.0),
            "m" => Some(count / 1440.0),
            _ => None,
        }
    }
}

/// Fetches (or reads from cache) every query, `workers` at a time.
pub fn fetch_all<T: Transport>(client: &EphemerisClient<T>, queries: &[EphemerisQuery], workers: usize) -> Result<Vec<Vec<EphemerisRow>>> {
    let results: Mutex<Vec<Option<Result<Vec<EphemerisRow>>>>> = Mutex::new((0..queries.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, queries.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= queries.len() {
                    break;
                }
                let r = client.fetch(&queries[k]);
                results.lock().expect("no poisoned workers")[k] = Some(r);
            });
        }
    });
    results.into_inner().expect("workers finished").into_iter().map(|r| r.expect("every query ran")).collect()
}

/// Builds `D = 6` trajectories: per origin, the targets become the nodes and
/// the aligned series is cut into non-overlapping windows. Windows are
/// shuffled with `cfg.seed`, split by fraction, and normalized with
/// train-split stats. A target equal to its origin sits at zero.
pub fn build_horizons_dataset<T: Transport>(cfg: &HorizonsConfig, client: &EphemerisClient<T>) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let queries = cfg.queries();
    let fetched = fetch_all(client, &queries, cfg.workers)?;
    let n = cfg.targets.len();
    let mut raw = Vec::new();
    let mut origins = Vec::new();
    let mut dt_days = None;
    let mut next = 0;
    for origin in &cfg.origins {
        let mut series: Vec<Option<&Vec<EphemerisRow>>> = Vec::with_capacity(n);
        for t in &cfg.targets {
            if &t.id == origin {
                series.push(None);
            } else {
                series.push(Some(&fetched[next]));
                next += 1;
            }
        }
        let reference = series
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Invalid(format!("origin {origin} has no other targets")))?;
        let len = reference.len();
        for (t, s) in cfg.targets.iter().zip(&series) {
            let Some(s) = s else { continue };
            if s.len() != len || s.iter().zip(reference.iter()).any(|(a, b)| (a.jd - b.jd).abs() > 1e-6) {
                return Err(Error::Invalid(format!(
                    "epochs of target {} ({}) relative to origin {origin} do not align with the other targets",
                    t.name, t.id
                )));
            }
        }
        if len >= 2 {
            let dt = reference[1].jd - reference[0].jd;
            if reference.windows(2).any(|w| ((w[1].jd - w[0].jd) - dt).abs() > 1e-6) {
                return Err(Error::Invalid(format!("epochs relative to origin {origin} are not uniformly spaced")));
            }
            if let Some(expect) = cfg.step_days() {
                if (dt - expect).abs() > 1e-6 {
                    return Err(Error::Invalid(format!("epoch spacing {dt} d differs from step {}", cfg.step)));
                }
            }
            dt_days.get_or_insert(dt);
        }
        for w in 0..len / cfg.window {
            let mut states = Vec::with_capacity(cfg.window * n * 6);
            for t in w * cfg.window..(w + 1) * cfg.window {
                for s in &series {
                    match s {
                        Some(rows) => states.extend(rows[t].state.iter().map(|&v| v as f32)),
                        None => states.extend([0.0f32; 6]),
                    }
                }
            }
            raw.push(Trajectory::new(cfg.window, n, 6, states, true)?);
            origins.push(origin.clone());
        }
    }
    if raw.len() < 3 {
        return Err(Error::Invalid(format!("only {} windows; need at least 3 for the splits", raw.len())));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let total = raw.len();
    let n_train = ((total as f64 * cfg.train_fraction).round() as usize).clamp(1, total - 2);
    let n_val = ((total as f64 * cfg.val_fraction).round() as usize).clamp(1, total - n_train - 1);
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    let stats = NormStats::compute(splits.train.iter().map(|&i| &raw[i]), cfg.window)?;
    let trajectories = raw.iter().map(|t| normalize(t, &stats)).collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        kind: "horizons".into(),
        seed: cfg.seed,
        dt_unit: dt_days.unwrap_or(0.0),
        stats_steps: cfg.window,
        config: serde_json::to_value(cfg)?,
        origins,
    };
    TrajectoryDataset::new(trajectories, vec![RelationLabels::unlabeled(); total], stats, splits, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn table(rows: &[(f64, [f64; 6])]) -> String {
        let mut s = String::from("*******\nTarget body name: Test\n$$SOE\n");
        for (jd, st) in rows {
            s.push_str(&format!(
                "{jd:.9}, A.D. 2000-Jan-01 00:00:00.0000, {:.15E}, {:.15E}, {:.15E}, {:.15E}, {:.15E}, {:.15E},\n",
                st[0], st[1], st[2], st[3], st[4], st[5]
            ));
        }
        s.push_str("$$EOE\n*******\n");
        s
    }

    struct MapTransport {
        responses: HashMap<String, String>,
        calls: AtomicUsize,
    }

    impl Transport for MapTransport {
        fn fetch(&self, q: &EphemerisQuery) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.responses
                .get(&format!("{}@{}", q.target, q.origin))
                .cloned()
                .ok_or_else(|| Error::Http(format!("no response for {}", q.target)))
        }
    }

    fn small_cfg(window: usize) -> HorizonsConfig {
        HorizonsConfig {
            targets: vec![body("1", "A"), body("2", "B"), body("3", "C")],
            origins: vec!["0".into()],
            window,
            workers: 2,
            ..HorizonsConfig::default()
        }
    }

    fn responses(len: usize, skew: Option<&str>) -> HashMap<String, String> {
        ["1", "2", "3"]
            .iter()
            .map(|id| {
                let k: f64 = id.parse().unwrap();
                let rows: Vec<(f64, [f64; 6])> = (0..len)
                    .map(|t| {
                        let jd = 2_400_000.5 + 10.0 * t as f64 + if Some(*id) == skew { 1.0 } else { 0.0 };
                        (jd, [k, t as f64 * 0.01, 0.0, 0.0, 0.001 * k, 0.0])
                    })
                    .collect();
                (format!("{id}@0"), table(&rows))
            })
            .collect()
    }

    #[test]
    fn parses_rows() {
        let rows = parse_vectors(&table(&[(1.5, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), (2.5, [0.0; 6])])).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].state, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rows[1].jd, 2.5);
    }

    #[test]
    fn missing_marker_is_named() {
        let text = table(&[(1.0, [0.0; 6])]).replace("$$EOE", "");
        let err = parse_vectors(&text).unwrap_err().to_string();
        assert!(err.contains("$$EOE"), "{err}");
        let err = parse_vectors("no data here").unwrap_err().to_string();
        assert!(err.contains("$$SOE"), "{err}");
        assert!(parse_vectors("$$SOE\n1.0, x, 1, 2\n$$EOE").is_err());
    }

    #[test]
    fn query_validation_and_keys() {
        let q = small_cfg(43).query("399", "0");
        q.validate().unwrap();
        let mut bad = q.clone();
        bad.stop = "1700-01-01".into();
        assert!(bad.validate().is_err());
        bad = q.clone();
        bad.step = "0 d".into();
        assert!(bad.validate().is_err());
        assert_eq!(q.cache_key(), q.clone().cache_key());
        assert_ne!(q.cache_key(), small_cfg(43).query("499", "0").cache_key());
        assert!(q.params().iter().any(|(k, v)| *k == "CENTER" && v == "'500@0'"));
    }

    #[test]
    fn second_fetch_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let t = MapTransport { responses: responses(5, None), calls: AtomicUsize::new(0) };
        let client = EphemerisClient::new(t, Some(dir.path().to_path_buf()));
        let q = small_cfg(43).query("1", "0");
        let a = client.fetch_text(&q).unwrap();
        let b = client.fetch_text(&q).unwrap();
        assert_eq!(a, b);
        assert_eq!(client.transport.calls.load(Ordering::SeqCst), 1);
        assert_eq!(fs::read(client.cache_path(&q).unwrap()).unwrap(), a.as_bytes());
        fs::write(client.cache_path(&q).unwrap(), "garbage").unwrap();
        assert!(matches!(client.fetch_text(&q), Err(Error::Corrupt(_))));
    }

    #[test]
    fn windows_are_non_overlapping_and_complete() {
        let t = MapTransport { responses: responses(86, None), calls: AtomicUsize::new(0) };
        let client = EphemerisClient::new(t, None);
        let mut cfg = small_cfg(20);
        cfg.origins = vec!["0".into(), "3".into()];
        let mut res = responses(86, None);
        // origin 3 sees targets 1 and 2
        for id in ["1", "2"] {
            let v = res[&format!("{id}@0")].clone();
            res.insert(format!("{id}@3"), v);
        }
        let client = EphemerisClient::new(MapTransport { responses: res, calls: AtomicUsize::new(0) }, client.cache_dir);
        let ds = build_horizons_dataset(&cfg, &client).unwrap();
        assert_eq!(ds.len(), 2 * (86 / 20));
        assert_eq!(ds.shape(), (20, 3, 6));
        assert_eq!(ds.meta.dt_unit, 10.0);
        assert_eq!(ds.meta.origins.iter().filter(|o| *o == "3").count(), 4);
        assert_eq!(client.transport.calls.load(Ordering::SeqCst), 3 + 2);
        ds.validate().unwrap();
    }

    #[test]
    fn misaligned_epochs_are_rejected() {
        let client = EphemerisClient::new(MapTransport { responses: responses(86, Some("2")), calls: AtomicUsize::new(0) }, None);
        let err = build_horizons_dataset(&small_cfg(43), &client).unwrap_err().to_string();
        assert!(err.contains("align"), "{err}");
    }

    #[test]
    fn self_target_is_not_queried() {
        let cfg = HorizonsConfig::default();
        assert_eq!(cfg.queries().len(), 12 * 11 + 12);
        assert!(cfg.queries().iter().all(|q| q.target != q.origin));
    }
}
