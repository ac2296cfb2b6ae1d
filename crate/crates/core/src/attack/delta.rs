//! Pseudo-gradients recovered from uploads, and their on-disk archive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{RoundInfo, RoundObserver};
use crate::recommender::{ComponentTag, ParamLayout, ParamSet};

/// Which components an attacker looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentMask {
    Full,
    User,
    Item,
    /// Both MLP layers.
    Mlp,
    Mlp1,
    Mlp2,
}

impl ComponentMask {
    pub const ALL: [ComponentMask; 6] = [
        ComponentMask::Full,
        ComponentMask::User,
        ComponentMask::Item,
        ComponentMask::Mlp,
        ComponentMask::Mlp1,
        ComponentMask::Mlp2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentMask::Full => "full",
            ComponentMask::User => "user",
            ComponentMask::Item => "item",
            ComponentMask::Mlp => "mlp",
            ComponentMask::Mlp1 => "mlp1",
            ComponentMask::Mlp2 => "mlp2",
        }
    }

    /// Covered components in serialization order.
    pub fn components(self) -> &'static [ComponentTag] {
        use ComponentTag::*;
        match self {
            ComponentMask::Full => &[User, Item, Mlp1, Mlp2],
            ComponentMask::User => &[User],
            ComponentMask::Item => &[Item],
            ComponentMask::Mlp => &[Mlp1, Mlp2],
            ComponentMask::Mlp1 => &[Mlp1],
            ComponentMask::Mlp2 => &[Mlp2],
        }
    }

    pub fn ranges(self, layout: &ParamLayout) -> Vec<Range<usize>> {
        self.components().iter().map(|&t| layout.component_range(t)).collect()
    }

    pub fn len(self, layout: &ParamLayout) -> usize {
        self.ranges(layout).iter().map(Range::len).sum()
    }

    /// True if every component of `self` is also in `other`.
    pub fn within(self, other: ComponentMask) -> bool {
        self.components().iter().all(|t| other.components().contains(t))
    }
}

impl std::fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `(broadcast − upload) / lr` over the masked components.
pub fn compute_delta(
    broadcast: &ParamSet,
    upload: &ParamSet,
    learning_rate: f64,
    mask: ComponentMask,
) -> Result<Vec<f64>> {
    if !(learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "pseudo-gradients need a positive learning rate, got {learning_rate}"
        )));
    }
    if !broadcast.congruent(upload) {
        return Err(Error::Shape("broadcast and upload layouts differ".into()));
    }
    let mut out = Vec::with_capacity(mask.len(broadcast.layout()));
    for range in mask.ranges(broadcast.layout()) {
        let b = &broadcast.as_slice()[range.clone()];
        let u = &upload.as_slice()[range];
        out.extend(b.iter().zip(u).map(|(b, u)| (b - u) / learning_rate));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRecord {
    pub user_id: u32,
    pub round: u64,
    pub mask: ComponentMask,
    pub delta: Vec<f64>,
}

pub const DELTA_FORMAT: &str = "fedrec-deltas";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format: String,
    pub version: u32,
    pub layout: ParamLayout,
    pub mask: ComponentMask,
    /// Length of every record payload.
    pub len: usize,
    pub records: usize,
    pub learning_rate: f64,
    pub config_hash: String,
    pub master_seed: u64,
}

/// Deltas of one training run, one mask, at most one record per user,
/// ordered by user id.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaArchive {
    pub layout: ParamLayout,
    pub mask: ComponentMask,
    pub learning_rate: f64,
    pub config_hash: String,
    pub master_seed: u64,
    records: Vec<DeltaRecord>,
}

impl DeltaArchive {
    pub fn new(layout: ParamLayout, mask: ComponentMask, learning_rate: f64) -> Self {
        Self {
            layout,
            mask,
            learning_rate,
            config_hash: String::new(),
            master_seed: 0,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[DeltaRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: DeltaRecord) -> Result<()> {
        if record.mask != self.mask || record.delta.len() != self.mask.len(&self.layout) {
            return Err(Error::Shape(format!(
                "record for user {} does not match archive mask {}",
                record.user_id, self.mask
            )));
        }
        match self.records.binary_search_by_key(&record.user_id, |r| r.user_id) {
            Ok(i) => self.records[i] = record,
            Err(i) => self.records.insert(i, record),
        }
        Ok(())
    }

    /// Narrows every record to `mask`, which must lie within the archive's.
    pub fn restrict(&self, mask: ComponentMask) -> Result<DeltaArchive> {
        if !mask.within(self.mask) {
            return Err(Error::Config(format!("cannot narrow {} deltas to {}", self.mask, mask)));
        }
        // offsets of each wanted component inside the stored payload
        let mut offset = 0;
        let mut spans = Vec::new();
        for &tag in self.mask.components() {
            let len = self.layout.component_len(tag);
            if mask.components().contains(&tag) {
                spans.push(offset..offset + len);
            }
            offset += len;
        }
        let records = self
            .records
            .iter()
            .map(|r| DeltaRecord {
                user_id: r.user_id,
                round: r.round,
                mask,
                delta: spans.iter().flat_map(|s| r.delta[s.clone()].iter().copied()).collect(),
            })
            .collect();
        Ok(DeltaArchive {
            layout: self.layout,
            mask,
            learning_rate: self.learning_rate,
            config_hash: self.config_hash.clone(),
            master_seed: self.master_seed,
            records,
        })
    }

    pub fn header(&self) -> ArchiveHeader {
        ArchiveHeader {
            format: DELTA_FORMAT.into(),
            version: 1,
            layout: self.layout,
            mask: self.mask,
            len: self.mask.len(&self.layout),
            records: self.records.len(),
            learning_rate: self.learning_rate,
            config_hash: self.config_hash.clone(),
            master_seed: self.master_seed,
        }
    }

    /// Header length (u64 LE), JSON header, then per record: user id (u32 LE),
    /// round (u64 LE) and the f64 LE payload.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let io = |e| Error::io("<delta stream>", e);
        let json = serde_json::to_vec(&self.header())?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        for r in &self.records {
            out.write_all(&r.user_id.to_le_bytes()).map_err(io)?;
            out.write_all(&r.round.to_le_bytes()).map_err(io)?;
            let mut buf = Vec::with_capacity(r.delta.len() * 8);
            for v in &r.delta {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let io = |e| Error::io("<delta stream>", e);
        let mut word = [0u8; 8];
        input.read_exact(&mut word).map_err(io)?;
        let header_len = u64::from_le_bytes(word) as usize;
        if header_len > 1 << 20 {
            return Err(Error::Data(format!("implausible header length {header_len}")));
        }
        let mut json = vec![0u8; header_len];
        input.read_exact(&mut json).map_err(io)?;
        let header: ArchiveHeader = serde_json::from_slice(&json)?;
        if header.format != DELTA_FORMAT || header.len != header.mask.len(&header.layout) {
            return Err(Error::Data("not a delta archive for its declared layout".into()));
        }
        let mut archive = DeltaArchive::new(header.layout, header.mask, header.learning_rate);
        archive.config_hash = header.config_hash;
        archive.master_seed = header.master_seed;
        let mut payload = vec![0u8; header.len * 8];
        for _ in 0..header.records {
            let mut id = [0u8; 4];
            input.read_exact(&mut id).map_err(io)?;
            input.read_exact(&mut word).map_err(io)?;
            input.read_exact(&mut payload).map_err(io)?;
            archive.insert(DeltaRecord {
                user_id: u32::from_le_bytes(id),
                round: u64::from_le_bytes(word),
                mask: header.mask,
                delta: payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            })?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarvestMode {
    /// Each user's most recent delta in the window.
    #[default]
    Latest,
    /// Mean of each user's deltas in the window.
    Average,
}

/// Which rounds feed the archive: the last `window` rounds of training.
/// The default window is wide enough that, at client fraction 0.5, almost
/// every user has uploaded at least once inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestSpec {
    pub window: usize,
    pub mode: HarvestMode,
}

impl Default for HarvestSpec {
    fn default() -> Self {
        Self { window: 10, mode: HarvestMode::Latest }
    }
}

/// Round observer that records full-model deltas from `first_round` on.
pub struct DeltaHarvester {
    first_round: usize,
    learning_rate: f64,
    mode: HarvestMode,
    layout: ParamLayout,
    acc: BTreeMap<u32, (u64, u32, Vec<f64>)>,
}

impl DeltaHarvester {
    pub fn new(layout: ParamLayout, learning_rate: f64, total_rounds: usize, spec: HarvestSpec) -> Self {
        Self {
            first_round: total_rounds.saturating_sub(spec.window.max(1)),
            learning_rate,
            mode: spec.mode,
            layout,
            acc: BTreeMap::new(),
        }
    }

    pub fn finish(self) -> Result<DeltaArchive> {
        let mut archive = DeltaArchive::new(self.layout, ComponentMask::Full, self.learning_rate);
        for (user_id, (round, count, mut delta)) in self.acc {
            if count > 1 {
                let n = f64::from(count);
                delta.iter_mut().for_each(|v| *v /= n);
            }
            archive.insert(DeltaRecord { user_id, round, mask: ComponentMask::Full, delta })?;
        }
        Ok(archive)
    }
}

impl RoundObserver for DeltaHarvester {
    fn observe(&mut self, info: &RoundInfo<'_>) -> Result<()> {
        if info.round < self.first_round {
            return Ok(());
        }
        for upload in info.uploads {
            let delta = compute_delta(info.broadcast, &upload.params, self.learning_rate, ComponentMask::Full)?;
            let round = info.round as u64;
            match (self.mode, self.acc.get_mut(&upload.user_id)) {
                (HarvestMode::Average, Some(entry)) => {
                    entry.0 = round;
                    entry.1 += 1;
                    entry.2.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
                }
                _ => {
                    self.acc.insert(upload.user_id, (round, 1, delta));
                }
            }
        }
        Ok(())
    }
}
