//! Desk-scale ResNet-50 convolution shapes used by the benchmarks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::ConvGeometry;
use crate::tensor::Dims4;

const DEFAULT_SHAPES: &str = include_str!("../data/stage_shapes.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageShape {
    pub name: String,
    pub group: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square input extent.
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub batch: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
struct ShapeFile {
    shapes: Vec<StageShape>,
}

impl StageShape {
    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(
            Dims4::new(self.batch, self.in_channels, self.size, self.size),
            (self.kernel, self.kernel),
            (self.stride, self.stride),
            (self.padding, self.padding),
        )
    }

    pub fn is_stem(&self) -> bool {
        self.group == "stem"
    }

    /// Convolutions with a spatial kernel: the ones where im2col does real work.
    pub fn is_spatial(&self) -> bool {
        self.kernel > 1
    }
}

pub fn parse_shapes(json: &str) -> Result<Vec<StageShape>> {
    let file: ShapeFile = serde_json::from_str(json).map_err(|e| Error::Parse(format!("shape file: {e}")))?;
    for s in &file.shapes {
        s.geometry()?;
    }
    Ok(file.shapes)
}

/// The built-in shape table.
pub fn desk_shapes() -> Vec<StageShape> {
    parse_shapes(DEFAULT_SHAPES).expect("built-in shape table is valid")
}

/// The twelve Stage1..4 layers (everything but the stem).
pub fn stage_shapes() -> Vec<StageShape> {
    desk_shapes().into_iter().filter(|s| !s.is_stem()).collect()
}

/// Stem plus the 3x3 layer of each stage.
pub fn packing_shapes() -> Vec<StageShape> {
    desk_shapes().into_iter().filter(|s| s.is_spatial()).collect()
}
