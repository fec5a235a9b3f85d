//! JSON model manifests: an ordered list of convolution layers backed by
//! weight files.
//!
//! ```json
//! { "layers": [
//!   { "weights_file": "conv1.cwsw", "bias_file": "conv1.bias",
//!     "kernel": 3, "stride": 1, "padding": 1, "relu": true,
//!     "kernel_config": { "kind": "column_wise", "t": 8, "lmul": 2 } },
//!   { "weights_file": "conv2.cwnm", "stride": [2, 2], "padding": 1,
//!     "prune": { "sparsity": 0.5 }, "kernel_config": "auto" }
//! ] }
//! ```

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelKind, WeightSource};
use crate::packer::ConvGeometry;
use crate::pruner::{select_mask_rowwise, PruneMode, PruneSpec, RowSparseWeight, SparseWeight, SPARSE_MAGIC};
use crate::tensor::{read_tensor, Dims4, Matrix, TENSOR_MAGIC};
use crate::tuner::TuneWeights;

/// A scalar applied to both axes, or an explicit `[h, w]` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair(pub usize, pub usize);

impl Serialize for Pair {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == self.1 {
            s.serialize_u64(self.0 as u64)
        } else {
            [self.0, self.1].serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Pair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(usize),
            Two([usize; 2]),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(v) => Pair(v, v),
            Raw::Two([h, w]) => Pair(h, w),
        })
    }
}

/// A fixed kernel configuration, or `"auto"` to consult the tuning cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigChoice {
    Auto,
    Fixed(KernelConfig),
}

impl Serialize for ConfigChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ConfigChoice::Auto => s.serialize_str("auto"),
            ConfigChoice::Fixed(c) => c.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ConfigChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            Fixed(KernelConfig),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "auto" => Ok(ConfigChoice::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "kernel_config must be \"auto\" or an object, got \"{w}\""
            ))),
            Raw::Fixed(c) => Ok(ConfigChoice::Fixed(c)),
        }
    }
}

/// Prune dense weights at load time. `m` defaults to [`DEFAULT_GROUP`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl PruneRequest {
    pub fn resolve(&self) -> Result<(usize, usize)> {
        let m = self.m.unwrap_or(DEFAULT_GROUP);
        let n = match (self.n, self.sparsity) {
            (Some(n), None) => n,
            (None, Some(s)) => PruneSpec::from_ratio(s, m, 1, PruneMode::ColumnWise)?.n,
            _ => return Err(Error::prune("give exactly one of n or sparsity")),
        };
        PruneSpec::new(n, m, 1, PruneMode::ColumnWise)?;
        Ok((n, m))
    }
}

pub const DEFAULT_GROUP: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weights_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_file: Option<PathBuf>,
    /// Kernel extent; inferred as square from the weight columns when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Pair>,
    #[serde(default = "unit_pair")]
    pub stride: Pair,
    #[serde(default = "zero_pair")]
    pub padding: Pair,
    #[serde(default)]
    pub relu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneRequest>,
    pub kernel_config: ConfigChoice,
}

fn unit_pair() -> Pair {
    Pair(1, 1)
}

fn zero_pair() -> Pair {
    Pair(0, 0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerSpec>,
}

impl Manifest {
    /// Reads a manifest; relative file paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for layer in &mut manifest.layers {
            layer.weights_file = base.join(&layer.weights_file);
            if let Some(b) = &mut layer.bias_file {
                *b = base.join(&*b);
            }
        }
        Ok(manifest)
    }

    pub fn load_layers(&self) -> Result<Vec<LoadedLayer>> {
        self.layers.iter().map(LoadedLayer::load).collect()
    }
}

/// Weights as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredWeights {
    Dense(Matrix),
    Sparse(SparseWeight),
}

/// Reads either a `CWSW` sparse weight file or a `CWNM` dense matrix.
pub fn read_weights(path: impl AsRef<Path>) -> Result<StoredWeights> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    File::open(path)?.read_exact(&mut magic)?;
    if magic == SPARSE_MAGIC {
        Ok(StoredWeights::Sparse(SparseWeight::read_file(path)?))
    } else if magic == TENSOR_MAGIC {
        Ok(StoredWeights::Dense(Matrix::from_weight_tensor(read_tensor(path)?)?))
    } else {
        Err(Error::format(format!(
            "{}: not a weight file (magic {magic:?})",
            path.display()
        )))
    }
}

#[derive(Clone, Debug)]
pub struct LoadedLayer {
    pub spec: LayerSpec,
    pub weights: StoredWeights,
    pub bias: Option<Vec<f32>>,
}

impl LoadedLayer {
    pub fn load(spec: &LayerSpec) -> Result<Self> {
        let weights = read_weights(&spec.weights_file)?;
        let bias = spec
            .bias_file
            .as_ref()
            .map(|p| read_tensor(p).map(|t| t.into_data()))
            .transpose()?;
        Ok(LoadedLayer {
            spec: spec.clone(),
            weights,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        match &self.weights {
            StoredWeights::Dense(m) => m.rows,
            StoredWeights::Sparse(s) => s.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match &self.weights {
            StoredWeights::Dense(m) => m.cols,
            StoredWeights::Sparse(s) => s.cols,
        }
    }

    /// Tile height fixed by pre-pruned weights, if any.
    pub fn fixed_tile(&self) -> Option<usize> {
        match &self.weights {
            StoredWeights::Sparse(s) => Some(s.tile_t),
            StoredWeights::Dense(_) => None,
        }
    }

    /// `(n, m)` the layer is pruned with, if it is pruned at load time.
    pub fn prune_nm(&self) -> Result<Option<(usize, usize)>> {
        match (&self.weights, &self.spec.prune) {
            (StoredWeights::Dense(_), Some(req)) => req.resolve().map(Some),
            _ => Ok(None),
        }
    }

    pub fn geometry(&self, input: Dims4) -> Result<ConvGeometry> {
        let kernel = match self.spec.kernel {
            Some(Pair(h, w)) => (h, w),
            None => {
                let taps = self.cols() / input.c.max(1);
                let side = (taps as f64).sqrt().round() as usize;
                if side * side * input.c != self.cols() {
                    return Err(Error::shape(format!(
                        "cannot infer a square kernel: {} columns for {} input channels",
                        self.cols(),
                        input.c
                    )));
                }
                (side, side)
            }
        };
        let g = ConvGeometry::new(
            input,
            kernel,
            (self.spec.stride.0, self.spec.stride.1),
            (self.spec.padding.0, self.spec.padding.1),
        )?;
        if g.k_rows() != self.cols() {
            return Err(Error::shape(format!(
                "weights have {} columns but the layer needs {}",
                self.cols(),
                g.k_rows()
            )));
        }
        Ok(g)
    }

    /// Kind profiled for an `"auto"` layer: column-wise when the layer is
    /// sparse, dense otherwise.
    pub fn auto_kind(&self) -> Result<KernelKind> {
        Ok(match (&self.weights, self.prune_nm()?) {
            (StoredWeights::Sparse(_), _) | (_, Some(_)) => KernelKind::ColumnWise,
            _ => KernelKind::Dense,
        })
    }

    /// Weights handed to the tuner.
    pub fn tune_weights(&self) -> Result<TuneWeights> {
        Ok(match (&self.weights, self.prune_nm()?) {
            (StoredWeights::Dense(dense), Some((n, m))) => TuneWeights::Reprune {
                dense: dense.clone(),
                n,
                m,
            },
            (StoredWeights::Dense(dense), None) => TuneWeights::Fixed(WeightSource::Dense(dense.clone())),
            (StoredWeights::Sparse(s), _) => TuneWeights::Fixed(WeightSource::ColumnWise(s.clone())),
        })
    }

    /// Weights for one kernel kind and tile height. Dense weights with a
    /// prune request are pruned here: column-wise at tile height `t`, or
    /// row-wise for the conventional N:M kernels.
    pub fn source_for(&self, kind: KernelKind, t: usize) -> Result<WeightSource> {
        match &self.weights {
            StoredWeights::Sparse(s) => Ok(WeightSource::ColumnWise(s.clone())),
            StoredWeights::Dense(m) => match self.prune_nm()? {
                None => Ok(WeightSource::Dense(m.clone())),
                Some((n, mm)) => prune_for(m, n, mm, kind, t),
            },
        }
    }
}

/// Prunes dense weights in the form a kernel kind consumes.
pub fn prune_for(w: &Matrix, n: usize, m: usize, kind: KernelKind, t: usize) -> Result<WeightSource> {
    match kind {
        KernelKind::InnerProductNM | KernelKind::OuterProductNM => {
            let mask = select_mask_rowwise(w, n, m)?;
            Ok(WeightSource::RowWise(RowSparseWeight::compress(w, &mask)?))
        }
        KernelKind::ColumnWise | KernelKind::Dense => {
            let spec = PruneSpec::new(n, m, t, PruneMode::ColumnWise)?;
            Ok(WeightSource::ColumnWise(SparseWeight::prune(w, &spec)?))
        }
    }
}

/// Chains the layers from `input`, asking `choose` for each layer's config.
pub fn build_layers(
    layers: &[LoadedLayer],
    input: Dims4,
    mut choose: impl FnMut(usize, &LoadedLayer, &ConvGeometry) -> Result<KernelConfig>,
) -> Result<Vec<ConvLayer>> {
    let mut dims = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let g = layer.geometry(dims)?;
        let cfg = choose(i, layer, &g)?;
        let source = layer.source_for(cfg.kind, cfg.t)?;
        let conv = ConvLayer::new(g, source, layer.bias.clone(), cfg)
            .map_err(|e| Error::config(format!("layer {i}: {e}")))?
            .with_relu(layer.spec.relu);
        dims = conv.output_dims();
        out.push(conv);
    }
    Ok(out)
}
