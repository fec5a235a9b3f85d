use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use cwnm_core::kernels::{KernelConfig, DEFAULT_VLEN_BITS};
use cwnm_core::manifest::{build_layers, ConfigChoice, LoadedLayer, Manifest};
use cwnm_core::packer::ConvGeometry;
use cwnm_core::random::{seeded, uniform_tensor};
use cwnm_core::tensor::{read_tensor, write_tensor, Dims4, Layout};
use cwnm_core::tuner::{
    tune_layer, CacheLookup, EnvFingerprint, TuneCache, TuneOptions, TuneProblem, DEFAULT_REPEATS, DEFAULT_TOLERANCE,
    DEFAULT_WARMUPS,
};
use cwnm_core::{run_model, ConvLayer};

const CACHE_NAME: &str = "tune_cache.jsonl";

#[derive(Args)]
pub struct ConvArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Input tensor, NHWC or CNHW. The output is written in the same layout.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; CWNM_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
    /// Check every layer against the direct-convolution reference.
    #[arg(long)]
    verify: bool,
    /// Tuning cache for "auto" layers [default: next to the manifest].
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Repeats when an "auto" layer has to be tuned on the spot.
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = crate::default_seed())]
    seed: u64,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("shape_source").required(true).args(["input", "shape"])))]
pub struct TuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Tuning cache [default: next to the manifest].
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUPS)]
    warmups: usize,
    /// Model input whose shape drives the layer geometries.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Model input shape as N,C,H,W.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<Dims4>,
    /// Worker count the results are recorded for; CWNM_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = crate::default_seed())]
    seed: u64,
    /// Retune layers even when the cache already has them.
    #[arg(long)]
    force: bool,
}

fn parse_shape(s: &str) -> Result<Dims4, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n, c, h, w] if n * c * h * w > 0 => Ok(Dims4::new(n, c, h, w)),
        _ => Err(format!("expected four positive sizes N,C,H,W, got {s:?}")),
    }
}

fn cache_path(manifest: &Path, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join(CACHE_NAME))
}

#[derive(Default)]
struct TuneTally {
    tuned: usize,
    cached: usize,
}

/// Resolves `"auto"` layers through the cache, tuning misses and stale entries.
struct AutoConfig {
    cache: TuneCache,
    env: EnvFingerprint,
    opts: TuneOptions,
    seed: u64,
    force: bool,
    to_stdout: bool,
    tally: TuneTally,
}

impl AutoConfig {
    fn say(&self, msg: String) {
        if self.to_stdout {
            println!("{msg}");
        } else {
            eprintln!("{msg}");
        }
    }

    fn choose(&mut self, i: usize, layer: &LoadedLayer, g: &ConvGeometry) -> cwnm_core::Result<KernelConfig> {
        if let ConfigChoice::Fixed(cfg) = layer.spec.kernel_config {
            return Ok(cfg);
        }
        let sample = uniform_tensor(
            g.input_dims(),
            Layout::Cnhw,
            &mut seeded(self.seed.wrapping_add(i as u64)),
        );
        let problem = TuneProblem::for_layer(layer, *g, sample, DEFAULT_VLEN_BITS)?;
        let key = problem.key();
        match self.cache.get(&key, &self.env)? {
            CacheLookup::Hit(report) if !self.force => {
                self.tally.cached += 1;
                self.say(format!("layer {i}: cached {} ({} ns)", report.winner, report.median_ns));
                return Ok(report.winner);
            }
            CacheLookup::Stale(report) => {
                eprintln!(
                    "warning: layer {i} was tuned on {} with {} workers at VLEN {}; retuning here",
                    report.env.host, report.env.workers, report.env.vlen_bits
                );
            }
            _ => {}
        }
        let start = Instant::now();
        let report = tune_layer(&problem, &self.opts)?;
        self.cache.put(&report)?;
        self.tally.tuned += 1;
        self.say(format!(
            "layer {i}: tuned {} ({} ns) over {} candidates in {:.1}s",
            report.winner,
            report.median_ns,
            report.candidates.len(),
            start.elapsed().as_secs_f64()
        ));
        Ok(report.winner)
    }
}

fn load(manifest: &Path) -> Result<Vec<LoadedLayer>> {
    let m = Manifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if m.layers.is_empty() {
        bail!("{} has no layers", manifest.display());
    }
    Ok(m.load_layers()?)
}

fn build(loaded: &[LoadedLayer], input: Dims4, auto: &mut AutoConfig) -> Result<Vec<ConvLayer>> {
    Ok(build_layers(loaded, input, |i, l, g| auto.choose(i, l, g))?)
}

pub fn conv(args: ConvArgs) -> Result<ExitCode> {
    let loaded = load(&args.manifest)?;
    let input = read_tensor(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let layout = input.layout();
    let x = match layout {
        Layout::Nhwc => input,
        Layout::Cnhw => input.convert_layout(Layout::Nhwc)?,
        Layout::RowMajor2D => bail!("model input must be a 4-D tensor"),
    };
    let threads = crate::resolve_threads(args.threads);
    let mut auto = AutoConfig {
        cache: TuneCache::new(cache_path(&args.manifest, args.cache)),
        env: EnvFingerprint::current(DEFAULT_VLEN_BITS, threads),
        opts: TuneOptions {
            repeats: args.repeats,
            workers: threads,
            ..TuneOptions::default()
        },
        seed: args.seed,
        force: false,
        to_stdout: false,
        tally: TuneTally::default(),
    };
    let layers = build(&loaded, x.dims4()?, &mut auto)?;

    let start = Instant::now();
    let (y, errors) = if args.verify {
        let (y, errors) = cwnm_core::conv::run_model_verified(&layers, &x, threads)?;
        (y, Some(errors))
    } else {
        (run_model(&layers, &x, threads)?, None)
    };
    let elapsed = start.elapsed();
    let y = y.convert_layout(layout)?;
    write_tensor(&y, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "ran {} layers on {:?} -> {:?} ({layout}) with {threads} threads in {:.3} ms",
        layers.len(),
        x.dims(),
        y.dims(),
        elapsed.as_secs_f64() * 1e3
    );
    for (i, l) in layers.iter().enumerate() {
        println!("  layer {i}: {}", l.config);
    }
    println!("wrote {}", args.out.display());

    let Some(errors) = errors else {
        return Ok(ExitCode::SUCCESS);
    };
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let per_layer: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    println!("max relative error {worst:.3e} (per layer: {})", per_layer.join(", "));
    if worst <= DEFAULT_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: relative error {worst:.3e} exceeds {DEFAULT_TOLERANCE:e}");
        Ok(ExitCode::FAILURE)
    }
}

pub fn tune(args: TuneArgs) -> Result<()> {
    let loaded = load(&args.manifest)?;
    let dims = match (&args.input, args.shape) {
        (Some(path), _) => read_tensor(path)
            .with_context(|| format!("reading {}", path.display()))?
            .dims4()?,
        (None, Some(d)) => d,
        (None, None) => unreachable!("clap requires one"),
    };
    let threads = crate::resolve_threads(args.threads);
    let mut auto = AutoConfig {
        cache: TuneCache::new(cache_path(&args.manifest, args.cache)),
        env: EnvFingerprint::current(DEFAULT_VLEN_BITS, threads),
        opts: TuneOptions {
            repeats: args.repeats,
            warmups: args.warmups,
            workers: threads,
            ..TuneOptions::default()
        },
        seed: args.seed,
        force: args.force,
        to_stdout: true,
        tally: TuneTally::default(),
    };
    let layers = build(&loaded, dims, &mut auto)?;
    let fixed = layers.len() - auto.tally.tuned - auto.tally.cached;
    println!(
        "{} tuned, {} cached, {fixed} fixed; cache {}",
        auto.tally.tuned,
        auto.tally.cached,
        auto.cache.path().display()
    );
    Ok(())
}
