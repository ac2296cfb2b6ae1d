//! Flat parameter storage for the local recommender and its on-disk format.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamBlock;

/// Parameter blocks in storage and serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    UserEmbedding,
    NeighborWeight,
    ConvWeight,
    ConvBias,
    ItemEmbedding,
    Mlp1Weight,
    Mlp1Bias,
    Mlp2Weight,
    Mlp2Bias,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::UserEmbedding,
        Block::NeighborWeight,
        Block::ConvWeight,
        Block::ConvBias,
        Block::ItemEmbedding,
        Block::Mlp1Weight,
        Block::Mlp1Bias,
        Block::Mlp2Weight,
        Block::Mlp2Bias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::UserEmbedding => "user_embedding",
            Block::NeighborWeight => "neighbor_weight",
            Block::ConvWeight => "conv_weight",
            Block::ConvBias => "conv_bias",
            Block::ItemEmbedding => "item_embedding",
            Block::Mlp1Weight => "mlp1_weight",
            Block::Mlp1Bias => "mlp1_bias",
            Block::Mlp2Weight => "mlp2_weight",
            Block::Mlp2Bias => "mlp2_bias",
        }
    }

    pub fn component(self) -> ComponentTag {
        match self {
            Block::UserEmbedding | Block::NeighborWeight | Block::ConvWeight | Block::ConvBias => {
                ComponentTag::User
            }
            Block::ItemEmbedding => ComponentTag::Item,
            Block::Mlp1Weight | Block::Mlp1Bias => ComponentTag::Mlp1,
            Block::Mlp2Weight | Block::Mlp2Bias => ComponentTag::Mlp2,
        }
    }
}

/// The four parts of the model that carry separate vulnerability levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentTag {
    User,
    Item,
    Mlp1,
    Mlp2,
}

impl ComponentTag {
    /// Storage order.
    pub const ALL: [ComponentTag; 4] = [
        ComponentTag::User,
        ComponentTag::Item,
        ComponentTag::Mlp1,
        ComponentTag::Mlp2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentTag::User => "user",
            ComponentTag::Item => "item",
            ComponentTag::Mlp1 => "mlp1",
            ComponentTag::Mlp2 => "mlp2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Embedding width `d`.
    pub dim: usize,
    /// Raw user feature width.
    pub user_dim: usize,
    /// Raw item feature width.
    pub item_dim: usize,
}

impl ParamLayout {
    pub fn new(dim: usize, user_dim: usize, item_dim: usize) -> Self {
        Self {
            dim,
            user_dim,
            item_dim,
        }
    }

    pub fn shape(&self, block: Block) -> (usize, usize) {
        let d = self.dim;
        match block {
            Block::UserEmbedding => (d, self.user_dim),
            Block::NeighborWeight | Block::ConvWeight => (d, d),
            Block::ConvBias | Block::Mlp1Bias => (d, 1),
            Block::ItemEmbedding => (d, self.item_dim),
            Block::Mlp1Weight => (d, 2 * d),
            Block::Mlp2Weight => (1, d),
            Block::Mlp2Bias => (1, 1),
        }
    }

    pub fn block_len(&self, block: Block) -> usize {
        let (r, c) = self.shape(block);
        r * c
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let mut start = 0;
        for b in Block::ALL {
            let len = self.block_len(b);
            if b == block {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("every block is in Block::ALL")
    }

    /// Components occupy contiguous ranges because blocks are ordered by component.
    pub fn component_range(&self, tag: ComponentTag) -> Range<usize> {
        let blocks: Vec<Block> = Block::ALL
            .into_iter()
            .filter(|b| b.component() == tag)
            .collect();
        let first = self.range(blocks[0]);
        let last = self.range(*blocks.last().expect("non-empty"));
        first.start..last.end
    }

    pub fn component_len(&self, tag: ComponentTag) -> usize {
        self.component_range(tag).len()
    }

    pub fn total_len(&self) -> usize {
        Block::ALL.iter().map(|&b| self.block_len(b)).sum()
    }

    pub fn component_of(&self, index: usize) -> Option<ComponentTag> {
        ComponentTag::ALL
            .into_iter()
            .find(|&t| self.component_range(t).contains(&index))
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        Block::ALL
            .into_iter()
            .map(|b| ParamBlock {
                name: b.name().to_string(),
                range: self.range(b),
            })
            .collect()
    }
}

/// How [`ParamSet::init`] scales its standard-normal draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Every entry N(0, 1).
    Standard,
    /// Weight matrices N(0, 1/fan_in), biases N(0, 1). Same draws as
    /// `Standard`, rescaled.
    #[default]
    Lecun,
}

/// All trainable parameters of one local recommender, stored flat in
/// [`Block::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.total_len()],
        }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "layout needs {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Every entry i.i.d. standard normal.
    pub fn init_normal<R: Rng + ?Sized>(layout: ParamLayout, rng: &mut R) -> Self {
        let values = (0..layout.total_len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { layout, values }
    }

    pub fn init<R: Rng + ?Sized>(layout: ParamLayout, scheme: InitScheme, rng: &mut R) -> Self {
        let mut params = Self::init_normal(layout, rng);
        if scheme == InitScheme::Lecun {
            for block in Block::ALL {
                let (_, cols) = layout.shape(block);
                if cols > 1 {
                    let scale = (cols as f64).sqrt().recip();
                    params.block_mut(block).iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[self.layout.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let range = self.layout.range(block);
        &mut self.values[range]
    }

    pub fn component(&self, tag: ComponentTag) -> &[f64] {
        &self.values[self.layout.component_range(tag)]
    }

    pub fn component_mut(&mut self, tag: ComponentTag) -> &mut [f64] {
        let range = self.layout.component_range(tag);
        &mut self.values[range]
    }

    pub fn fill(&mut self, value: f64) {
        self.values.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.layout == other.layout
    }

    /// Little-endian bytes of the flat values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// JSON header of a serialized [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub format: String,
    pub version: u32,
    pub layout: ParamLayout,
    pub blocks: Vec<BlockShape>,
    pub len: usize,
    #[serde(default)]
    pub round: Option<usize>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub master_seed: Option<u64>,
}

pub const PARAM_FORMAT: &str = "fedrec-paramset";

impl ParamHeader {
    pub fn for_layout(layout: ParamLayout) -> Self {
        Self {
            format: PARAM_FORMAT.to_string(),
            version: 1,
            layout,
            blocks: Block::ALL
                .into_iter()
                .map(|b| {
                    let (rows, cols) = layout.shape(b);
                    BlockShape {
                        name: b.name().to_string(),
                        rows,
                        cols,
                        offset: layout.range(b).start,
                    }
                })
                .collect(),
            len: layout.total_len(),
            round: None,
            config_hash: None,
            master_seed: None,
        }
    }
}

/// Writes `u64 LE header length`, the JSON header, then `len` little-endian
/// `f64` values.
pub fn write_params<W: Write>(out: &mut W, params: &ParamSet, header: &ParamHeader) -> Result<()> {
    if header.layout != params.layout || header.len != params.len() {
        return Err(Error::Shape("header does not describe these parameters".into()));
    }
    let json = serde_json::to_vec(header)?;
    let io = |e| Error::io("<param stream>", e);
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    out.write_all(&params.to_le_bytes()).map_err(io)?;
    Ok(())
}

pub fn read_params<R: Read>(input: &mut R) -> Result<(ParamSet, ParamHeader)> {
    let io = |e| Error::io("<param stream>", e);
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(Error::Data(format!("implausible header length {header_len}")));
    }
    let mut json = vec![0u8; header_len];
    input.read_exact(&mut json).map_err(io)?;
    let header: ParamHeader = serde_json::from_slice(&json)?;
    if header.format != PARAM_FORMAT {
        return Err(Error::Data(format!("unexpected format {:?}", header.format)));
    }
    let expected = ParamHeader {
        round: header.round,
        config_hash: header.config_hash.clone(),
        master_seed: header.master_seed,
        ..ParamHeader::for_layout(header.layout)
    };
    if header != expected {
        return Err(Error::Shape("header blocks disagree with its layout".into()));
    }
    let mut raw = vec![0u8; header.len * 8];
    input.read_exact(&mut raw).map_err(io)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((ParamSet::from_values(header.layout, values)?, header))
}
