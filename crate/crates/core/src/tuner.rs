//! Per-layer profiling over tile height and LMUL, with a JSON-lines cache.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::conv::{conv_forward, conv_reference_with_magnitude, ConvLayer, ReferenceOutput};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelKind, Lmul, VectorEnv, WeightSource, MAX_TILE};
use crate::manifest::{prune_for, LoadedLayer};
use crate::packer::ConvGeometry;
use crate::tensor::{Matrix, Tensor};

pub const DEFAULT_REPEATS: usize = 9;
pub const DEFAULT_WARMUPS: usize = 3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Every legal `(t, lmul)` for `kind`, ordered by LMUL then `t`.
pub fn enumerate_candidates(kind: KernelKind, rows: usize, vlen_bits: usize) -> Result<Vec<KernelConfig>> {
    if rows == 0 {
        return Err(Error::tune("a layer needs at least one output row"));
    }
    let mut out = Vec::new();
    for lmul in Lmul::ALL {
        let env = VectorEnv::new(vlen_bits, lmul)?;
        for t in 1..=MAX_TILE.min(rows) {
            if KernelConfig::fits_register_budget(t, lmul) {
                out.push(KernelConfig::new(kind, t, env)?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneCandidate {
    pub config: KernelConfig,
    /// `None` when the candidate was disqualified before timing.
    pub median_ns: Option<u64>,
    pub repeats: usize,
    pub warmups: usize,
    pub max_rel_err: f64,
}

impl TuneCandidate {
    pub fn disqualified(&self) -> bool {
        self.median_ns.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub vlen_bits: usize,
    pub workers: usize,
    pub host: String,
}

impl EnvFingerprint {
    pub fn current(vlen_bits: usize, workers: usize) -> Self {
        EnvFingerprint {
            vlen_bits,
            workers,
            host: host_id(),
        }
    }
}

/// Hostname plus target triple pieces.
pub fn host_id() -> String {
    let name = fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| fs::read_to_string("/etc/hostname"))
        .ok()
        .or_else(|| std::env::var("HOSTNAME").ok())
        .or_else(|| std::env::var("COMPUTERNAME").ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    format!("{name}/{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub key: String,
    pub winner: KernelConfig,
    pub median_ns: u64,
    pub env: EnvFingerprint,
    pub candidates: Vec<TuneCandidate>,
}

/// Weights a layer is tuned with.
#[derive(Clone, Debug)]
pub enum TuneWeights {
    /// Dense weights pruned to `n:m` afresh for every candidate tile height.
    Reprune { dense: Matrix, n: usize, m: usize },
    /// Weights used as given. Column-wise weights pin `t` to their tile height.
    Fixed(WeightSource),
}

impl TuneWeights {
    fn rows(&self) -> usize {
        match self {
            TuneWeights::Reprune { dense, .. } => dense.rows,
            TuneWeights::Fixed(s) => s.rows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            TuneWeights::Reprune { dense, .. } => dense.cols,
            TuneWeights::Fixed(s) => s.cols(),
        }
    }

    fn sparsity_key(&self) -> String {
        match self {
            TuneWeights::Reprune { n, m, .. } => format!("nm{n}:{m}"),
            TuneWeights::Fixed(WeightSource::Dense(_)) => "dense".into(),
            TuneWeights::Fixed(WeightSource::ColumnWise(s)) => {
                format!("cw{}:{}/{}", s.tile_t, s.kept_columns_total(), s.num_tiles() * s.cols)
            }
            TuneWeights::Fixed(WeightSource::RowWise(r)) => format!("rw{}/{}", r.nnz(), r.rows * r.cols),
        }
    }

    fn pinned_tile(&self, kind: KernelKind) -> Option<usize> {
        match (self, kind) {
            (TuneWeights::Fixed(WeightSource::ColumnWise(s)), KernelKind::ColumnWise) => Some(s.tile_t),
            _ => None,
        }
    }

    /// Sources differ per `t` only when column-wise pruning happens here.
    fn variant(&self, kind: KernelKind, t: usize) -> usize {
        match (self, kind) {
            (TuneWeights::Reprune { .. }, KernelKind::ColumnWise | KernelKind::Dense) => t,
            _ => 0,
        }
    }

    fn source(&self, kind: KernelKind, t: usize) -> Result<WeightSource> {
        match self {
            TuneWeights::Reprune { dense, n, m } => prune_for(dense, *n, *m, kind, t),
            TuneWeights::Fixed(s) => Ok(s.clone()),
        }
    }
}

/// One layer to tune: its geometry, weights and a sample CNHW input.
#[derive(Clone, Debug)]
pub struct TuneProblem {
    pub geometry: ConvGeometry,
    pub kind: KernelKind,
    pub weights: TuneWeights,
    pub bias: Option<Vec<f32>>,
    pub input: Tensor,
    pub vlen_bits: usize,
}

impl TuneProblem {
    /// Problem for a manifest layer's `"auto"` config.
    pub fn for_layer(layer: &LoadedLayer, geometry: ConvGeometry, input: Tensor, vlen_bits: usize) -> Result<Self> {
        Ok(TuneProblem {
            geometry,
            kind: layer.auto_kind()?,
            weights: layer.tune_weights()?,
            bias: layer.bias.clone(),
            input,
            vlen_bits,
        })
    }

    pub fn key(&self) -> String {
        shape_key(
            &self.geometry,
            self.kind,
            self.weights.rows(),
            self.weights.cols(),
            &self.weights.sparsity_key(),
        )
    }

    /// Legal candidates, restricted to the pinned tile height if any.
    pub fn candidates(&self) -> Result<Vec<KernelConfig>> {
        let mut all = enumerate_candidates(self.kind, self.weights.rows(), self.vlen_bits)?;
        if let Some(t) = self.weights.pinned_tile(self.kind) {
            all.retain(|c| c.t == t);
        }
        Ok(all)
    }
}

pub fn shape_key(g: &ConvGeometry, kind: KernelKind, rows: usize, cols: usize, sparsity: &str) -> String {
    format!(
        "{kind}|n{} c{} {}x{} k{}x{} s{}x{} p{}x{}|{rows}x{cols}|{sparsity}",
        g.batch, g.in_channels, g.in_h, g.in_w, g.kernel_h, g.kernel_w, g.stride_h, g.stride_w, g.pad_h, g.pad_w
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOptions {
    pub repeats: usize,
    pub warmups: usize,
    pub tolerance: f64,
    /// Worker count recorded in the fingerprint. Tuning itself is single-threaded.
    pub workers: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            repeats: DEFAULT_REPEATS,
            warmups: DEFAULT_WARMUPS,
            tolerance: DEFAULT_TOLERANCE,
            workers: 1,
        }
    }
}

/// Test hooks into the measurement loop.
pub trait TuneHooks {
    /// Extra wall time charged to every timed run of `cfg`.
    fn delay(&self, _cfg: &KernelConfig) -> Duration {
        Duration::ZERO
    }

    /// Lets a test corrupt the output checked against the oracle.
    fn perturb(&self, _cfg: &KernelConfig, _output: &mut Tensor) {}
}

pub struct NoHooks;

impl TuneHooks for NoHooks {}

pub fn tune_layer(problem: &TuneProblem, opts: &TuneOptions) -> Result<TuneReport> {
    tune_with(problem, &problem.candidates()?, opts, &NoHooks)
}

/// Verifies then times each candidate; the fastest verified one wins, ties
/// going to the smaller `t`, then the smaller LMUL.
pub fn tune_with(
    problem: &TuneProblem,
    candidates: &[KernelConfig],
    opts: &TuneOptions,
    hooks: &dyn TuneHooks,
) -> Result<TuneReport> {
    if opts.repeats < 3 {
        return Err(Error::tune(format!("need at least 3 repeats, got {}", opts.repeats)));
    }
    if candidates.is_empty() {
        return Err(Error::tune("no candidates to profile"));
    }
    let mut oracles: HashMap<usize, (WeightSource, ReferenceOutput)> = HashMap::new();
    let mut measured = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        let variant = problem.weights.variant(cfg.kind, cfg.t);
        let (source, reference) = match oracles.entry(variant) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let source = problem.weights.source(cfg.kind, cfg.t)?;
                let reference = conv_reference_with_magnitude(
                    &problem.geometry,
                    &source.to_dense(),
                    problem.bias.as_deref(),
                    &problem.input,
                )?;
                e.insert((source, reference))
            }
        };
        let layer = ConvLayer::new(problem.geometry, source.clone(), problem.bias.clone(), *cfg)?;

        let mut out = conv_forward(&layer, &problem.input, 1)?;
        hooks.perturb(cfg, &mut out);
        let err = reference.max_relative_error(&out)?;
        if err.is_nan() || err > opts.tolerance {
            measured.push(TuneCandidate {
                config: *cfg,
                median_ns: None,
                repeats: 0,
                warmups: 0,
                max_rel_err: err,
            });
            continue;
        }

        for _ in 0..opts.warmups {
            std::hint::black_box(conv_forward(&layer, &problem.input, 1)?);
        }
        let mut times = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let start = Instant::now();
            std::hint::black_box(conv_forward(&layer, &problem.input, 1)?);
            let extra = hooks.delay(cfg);
            if !extra.is_zero() {
                std::thread::sleep(extra);
            }
            times.push(start.elapsed().as_nanos() as u64);
        }
        measured.push(TuneCandidate {
            config: *cfg,
            median_ns: Some(median(&mut times).max(1)),
            repeats: opts.repeats,
            warmups: opts.warmups,
            max_rel_err: err,
        });
    }

    let best = measured
        .iter()
        .filter_map(|c| c.median_ns.map(|m| (m, c.config)))
        .min_by_key(|(m, c)| (*m, c.t, c.env.lmul))
        .ok_or_else(|| {
            Error::tune(format!(
                "all {} candidates failed verification for {}",
                measured.len(),
                problem.key()
            ))
        })?;
    Ok(TuneReport {
        key: problem.key(),
        winner: best.1,
        median_ns: best.0,
        env: EnvFingerprint::current(problem.vlen_bits, opts.workers),
        candidates: measured,
    })
}

fn median(times: &mut [u64]) -> u64 {
    times.sort_unstable();
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheLookup {
    Hit(TuneReport),
    /// Recorded under a different environment; should be retuned.
    Stale(TuneReport),
    Miss,
}

/// JSON-lines file of tuning reports, one per shape key.
#[derive(Clone, Debug)]
pub struct TuneCache {
    path: PathBuf,
}

impl TuneCache {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        TuneCache { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in file order. A missing file is an empty cache.
    pub fn load(&self) -> Result<Vec<TuneReport>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        parse_cache(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}:{msg}", self.path.display())),
            other => other,
        })
    }

    pub fn get(&self, key: &str, env: &EnvFingerprint) -> Result<CacheLookup> {
        let found = self.load()?.into_iter().rev().find(|r| r.key == key);
        Ok(match found {
            Some(r) if &r.env == env => CacheLookup::Hit(r),
            Some(r) => CacheLookup::Stale(r),
            None => CacheLookup::Miss,
        })
    }

    /// Inserts or replaces the record for `report.key` while holding an
    /// exclusive lock on a sidecar lock file.
    pub fn put(&self, report: &TuneReport) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.lock_path())?;
        lock.lock()?;
        let mut records = self.load()?;
        match records.iter_mut().find(|r| r.key == report.key) {
            Some(r) => *r = report.clone(),
            None => records.push(report.clone()),
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for r in &records {
                let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
                writeln!(f, "{line}")?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        lock.unlock()?;
        Ok(())
    }

    fn lock_path(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        self.path.with_file_name(name)
    }
}

pub fn parse_cache(text: &str) -> Result<Vec<TuneReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{seeded, uniform_matrix, uniform_tensor};
    use crate::tensor::{Dims4, Layout};

    fn problem(cin: usize, cout: usize, size: usize, kernel: usize, kind: KernelKind) -> TuneProblem {
        let mut rng = seeded(5);
        let dims = Dims4::new(1, cin, size, size);
        let g = ConvGeometry::new(dims, (kernel, kernel), (1, 1), (kernel / 2, kernel / 2)).unwrap();
        TuneProblem {
            geometry: g,
            kind,
            weights: TuneWeights::Reprune {
                dense: uniform_matrix(cout, g.k_rows(), &mut rng),
                n: 4,
                m: 8,
            },
            bias: None,
            input: uniform_tensor(dims, Layout::Cnhw, &mut rng),
            vlen_bits: 256,
        }
    }

    fn quick() -> TuneOptions {
        TuneOptions {
            repeats: 3,
            warmups: 0,
            ..TuneOptions::default()
        }
    }

    #[test]
    fn enumeration_respects_budget_and_rows() {
        let all = enumerate_candidates(KernelKind::ColumnWise, 64, 256).unwrap();
        assert_eq!(all.len(), 31 + 15 + 7 + 3);
        let m8: Vec<_> = all.iter().filter(|c| c.env.lmul == Lmul::M8).map(|c| c.t).collect();
        assert_eq!(m8, vec![1, 2, 3]);
        let m4 = all.iter().filter(|c| c.env.lmul == Lmul::M4).count();
        assert_eq!(m4, 7);
        let small = enumerate_candidates(KernelKind::ColumnWise, 2, 256).unwrap();
        assert!(small.iter().all(|c| c.t <= 2));
        assert_eq!(small.len(), 8);
        assert!(enumerate_candidates(KernelKind::ColumnWise, 0, 256).is_err());
    }

    #[test]
    fn single_candidate_wins() {
        let p = problem(4, 4, 5, 3, KernelKind::ColumnWise);
        let only = [KernelConfig::new(KernelKind::ColumnWise, 2, VectorEnv::new(256, Lmul::M1).unwrap()).unwrap()];
        let r = tune_with(&p, &only, &quick(), &NoHooks).unwrap();
        assert_eq!(r.winner, only[0]);
        assert_eq!(r.candidates.len(), 1);
        assert!(r.median_ns > 0);
    }

    struct Slow(usize);

    impl TuneHooks for Slow {
        fn delay(&self, cfg: &KernelConfig) -> Duration {
            if cfg.t == self.0 {
                Duration::from_millis(20)
            } else {
                Duration::ZERO
            }
        }
    }

    #[test]
    fn injected_delay_flips_the_winner() {
        let p = problem(8, 8, 6, 3, KernelKind::ColumnWise);
        let env = VectorEnv::new(256, Lmul::M1).unwrap();
        let pair = [
            KernelConfig::new(KernelKind::ColumnWise, 2, env).unwrap(),
            KernelConfig::new(KernelKind::ColumnWise, 4, env).unwrap(),
        ];
        let a = tune_with(&p, &pair, &quick(), &Slow(2)).unwrap();
        assert_eq!(a.winner.t, 4);
        let b = tune_with(&p, &pair, &quick(), &Slow(4)).unwrap();
        assert_eq!(b.winner.t, 2);
    }

    struct Corrupt;

    impl TuneHooks for Corrupt {
        fn perturb(&self, cfg: &KernelConfig, out: &mut Tensor) {
            if cfg.t != 3 {
                out.data_mut()[0] += 1.0;
            }
        }
    }

    #[test]
    fn miscomputing_candidates_are_disqualified() {
        let p = problem(4, 8, 5, 1, KernelKind::ColumnWise);
        let r = tune_with(&p, &p.candidates().unwrap(), &quick(), &Corrupt).unwrap();
        assert_eq!(r.winner.t, 3);
        assert!(r
            .candidates
            .iter()
            .filter(|c| c.config.t != 3)
            .all(TuneCandidate::disqualified));
        struct All;
        impl TuneHooks for All {
            fn perturb(&self, _: &KernelConfig, out: &mut Tensor) {
                out.data_mut()[0] = f32::NAN;
            }
        }
        assert!(matches!(
            tune_with(&p, &p.candidates().unwrap(), &quick(), &All),
            Err(Error::Tune(_))
        ));
    }

    #[test]
    fn winner_has_minimal_median() {
        let p = problem(8, 16, 6, 3, KernelKind::ColumnWise);
        let r = tune_layer(&p, &quick()).unwrap();
        assert_eq!(r.candidates.len(), p.candidates().unwrap().len());
        assert!(r.candidates.iter().all(|c| c.median_ns.unwrap() >= r.median_ns));
        assert!(r
            .candidates
            .iter()
            .any(|c| c.config == r.winner && c.median_ns == Some(r.median_ns)));
    }

    #[test]
    fn pinned_tile_restricts_candidates() {
        let mut p = problem(4, 8, 5, 1, KernelKind::ColumnWise);
        let TuneWeights::Reprune { dense, .. } = &p.weights else {
            unreachable!()
        };
        let sw = crate::pruner::SparseWeight::prune(
            dense,
            &crate::pruner::PruneSpec::new(2, 4, 4, crate::pruner::PruneMode::ColumnWise).unwrap(),
        )
        .unwrap();
        p.weights = TuneWeights::Fixed(WeightSource::ColumnWise(sw));
        let c = p.candidates().unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|c| c.t == 4));
        assert!(p.key().contains("cw4:"));
    }

    #[test]
    fn repeats_below_three_are_rejected() {
        let p = problem(4, 4, 4, 1, KernelKind::Dense);
        let opts = TuneOptions { repeats: 2, ..quick() };
        assert!(tune_layer(&p, &opts).is_err());
    }

    fn dummy_report(key: &str, host: &str, t: usize) -> TuneReport {
        let cfg = KernelConfig::new(KernelKind::ColumnWise, t, VectorEnv::new(256, Lmul::M2).unwrap()).unwrap();
        TuneReport {
            key: key.into(),
            winner: cfg,
            median_ns: 1234,
            env: EnvFingerprint {
                vlen_bits: 256,
                workers: 4,
                host: host.into(),
            },
            candidates: vec![TuneCandidate {
                config: cfg,
                median_ns: Some(1234),
                repeats: 9,
                warmups: 3,
                max_rel_err: 0.0,
            }],
        }
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = std::env::temp_dir().join(format!("cwnm-cache-{}", std::process::id()));
        let cache = TuneCache::new(dir.join("tune.jsonl"));
        let a = dummy_report("a", "h1", 4);
        let env = a.env.clone();
        assert_eq!(cache.get("a", &env).unwrap(), CacheLookup::Miss);
        cache.put(&a).unwrap();
        cache.put(&dummy_report("b", "h1", 2)).unwrap();
        assert_eq!(cache.get("a", &env).unwrap(), CacheLookup::Hit(a.clone()));
        let replaced = dummy_report("a", "h1", 6);
        cache.put(&replaced).unwrap();
        assert_eq!(cache.load().unwrap().len(), 2);
        assert_eq!(cache.get("a", &env).unwrap(), CacheLookup::Hit(replaced.clone()));
        let other = EnvFingerprint {
            host: "h2".into(),
            ..env
        };
        assert_eq!(cache.get("a", &other).unwrap(), CacheLookup::Stale(replaced));
        let text = fs::read_to_string(cache.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"winner\":{\"kind\":\"column_wise\",\"t\":6"));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corrupted_cache_reports_the_line() {
        let good = serde_json::to_string(&dummy_report("a", "h", 1)).unwrap();
        let text = format!("{good}\n{{not json\n");
        match parse_cache(&text) {
            Err(Error::Parse(msg)) => assert!(msg.starts_with("line 2:"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
