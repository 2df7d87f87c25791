//! Bag collections, triplet sampling and the on-disk dataset format.
//!
//! File layout: the magic `WLRNBAG1`, one text header line
//! `{num_objects=.., views_per_object=.., n=.., patch_side=32, split=..}`,
//! then one record per bag: `object_id`, `view_id` and `n` as little-endian
//! `u32`, the `n` patches as `3x32x32` little-endian `f32` (channel-major,
//! row-major), and the `n` keypoint centres as `(x, y)` `f32` pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{Patch, PATCH_CHANNELS, PATCH_SIDE};
use crate::tensor::Tensor;

use super::bag::PatchBag;

pub const DATASET_MAGIC: &[u8; 8] = b"WLRNBAG1";
const MAX_HEADER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Bags of one split, all of the same size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub split: Split,
    pub bag_size: usize,
    pub bags: Vec<PatchBag>,
}

/// Indices of an (anchor, positive, negative) triplet into a dataset's bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Anchor and positive are two views of one object; negative shows another.
#[derive(Debug, Clone, Copy)]
pub struct BagTriplet<'a> {
    pub anchor: &'a PatchBag,
    pub positive: &'a PatchBag,
    pub negative: &'a PatchBag,
}

impl BagDataset {
    /// Checks bag sizes and that every object has at least two views.
    pub fn new(split: Split, bag_size: usize, bags: Vec<PatchBag>) -> Result<Self> {
        let ds = Self { split, bag_size, bags };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bag_size == 0 {
            return Err(Error::InvalidArgument("bag size must be positive".into()));
        }
        for b in &self.bags {
            if b.len() != self.bag_size || b.keypoints.len() != self.bag_size {
                return Err(Error::InvalidArgument(format!(
                    "bag of object {} view {} has {} patches, dataset size is {}",
                    b.object_id,
                    b.view_id,
                    b.len(),
                    self.bag_size
                )));
            }
        }
        for (obj, views) in self.objects() {
            if views.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "object {obj} has only {} view(s)",
                    views.len()
                )));
            }
        }
        Ok(())
    }

    /// Bag indices grouped by object id, in ascending id order.
    pub fn objects(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, b) in self.bags.iter().enumerate() {
            map.entry(b.object_id).or_default().push(i);
        }
        map
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.objects().into_keys().collect()
    }

    pub fn views_per_object(&self) -> usize {
        self.objects().values().map(Vec::len).max().unwrap_or(0)
    }

    pub fn triplet(&self, t: TripletIndex) -> BagTriplet<'_> {
        BagTriplet {
            anchor: &self.bags[t.anchor],
            positive: &self.bags[t.positive],
            negative: &self.bags[t.negative],
        }
    }
}

/// Draws an anchor object uniformly, two distinct views of it, and a bag of
/// a uniformly chosen different object.
pub fn sample_triplet<R: Rng + ?Sized>(dataset: &BagDataset, rng: &mut R) -> Result<TripletIndex> {
    let objects: Vec<Vec<usize>> = dataset.objects().into_values().collect();
    if objects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "triplets need at least 2 objects, dataset has {}",
            objects.len()
        )));
    }
    let eligible: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "no object has two views to form a positive pair".into(),
        ));
    }
    let a_obj = eligible[rng.random_range(0..eligible.len())];
    let views = &objects[a_obj];
    let ai = rng.random_range(0..views.len());
    let mut pi = rng.random_range(0..views.len() - 1);
    if pi >= ai {
        pi += 1;
    }
    let mut n_obj = rng.random_range(0..objects.len() - 1);
    if n_obj >= a_obj {
        n_obj += 1;
    }
    let negs = &objects[n_obj];
    Ok(TripletIndex {
        anchor: views[ai],
        positive: views[pi],
        negative: negs[rng.random_range(0..negs.len())],
    })
}

fn header_line(ds: &BagDataset) -> String {
    format!(
        "{{num_objects={}, views_per_object={}, n={}, patch_side={PATCH_SIDE}, split={}}}\n",
        ds.objects().len(),
        ds.views_per_object(),
        ds.bag_size,
        ds.split
    )
}

pub fn save_dataset(dataset: &BagDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let header = header_line(dataset);
    let per_bag = 12 + 4 * dataset.bag_size * (Patch::LEN + 2);
    let mut bytes = Vec::with_capacity(8 + header.len() + dataset.bags.len() * per_bag);
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(header.as_bytes());
    for b in &dataset.bags {
        bytes.extend_from_slice(&b.object_id.to_le_bytes());
        bytes.extend_from_slice(&b.view_id.to_le_bytes());
        bytes.extend_from_slice(&(b.len() as u32).to_le_bytes());
        for p in &b.patches {
            for &v in p.pixels().data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &(x, y) in &b.keypoints {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
            bytes.extend_from_slice(&(y as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

struct Header {
    num_objects: usize,
    views_per_object: usize,
    n: usize,
    split: Split,
}

fn parse_header(text: &str) -> Result<Header> {
    let inner = text
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "header must be enclosed in braces".into(),
        })?;
    let mut fields = BTreeMap::new();
    for part in inner.split(',') {
        let (k, v) = part.trim().split_once('=').ok_or_else(|| Error::Format {
            offset: 8,
            message: format!("header field {part:?} lacks '='"),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: 8,
                message: format!("header field {key} missing or not a number"),
            })
    };
    if num("patch_side")? != PATCH_SIDE {
        return format_err(8, format!("patch side must be {PATCH_SIDE}"));
    }
    let split = fields
        .get("split")
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "header field split missing".into(),
        })?
        .parse()?;
    Ok(Header {
        num_objects: num("num_objects")?,
        views_per_object: num("views_per_object")?,
        n: num("n")?,
        split,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < len {
            return format_err(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            );
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let b = self.take(4 * count, what)?;
        let vals: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return format_err(start + 4 * i, format!("non-finite value in {what}"));
        }
        Ok(vals)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<BagDataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return format_err(0, "missing WLRNBAG1 magic");
    }
    let end = bytes.len().min(8 + MAX_HEADER);
    let Some(nl) = bytes[8..end].iter().position(|&b| b == b'\n') else {
        return format_err(8, "header line is unterminated");
    };
    let text = std::str::from_utf8(&bytes[8..8 + nl]).map_err(|_| Error::Format {
        offset: 8,
        message: "header is not UTF-8".into(),
    })?;
    let header = parse_header(text)?;
    if header.n == 0 {
        return format_err(8, "bag size n must be positive");
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 8 + nl + 1,
    };
    let mut bags = Vec::new();
    while r.pos < bytes.len() {
        let record = r.pos;
        let object_id = r.u32("object id")?;
        let view_id = r.u32("view id")?;
        let n = r.u32("bag size")? as usize;
        if n != header.n {
            return format_err(
                record + 8,
                format!(
                    "bag of object {object_id} view {view_id} has n = {n}, header says {}",
                    header.n
                ),
            );
        }
        let mut patches = Vec::with_capacity(n);
        for _ in 0..n {
            let data = r.f32s(Patch::LEN, "patch payload")?;
            let t = Tensor::new(&[PATCH_CHANNELS, PATCH_SIDE, PATCH_SIDE], data)?;
            patches.push(Patch::new(t)?);
        }
        let coords = r.f32s(2 * n, "keypoints")?;
        let keypoints = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        bags.push(PatchBag {
            object_id,
            view_id,
            patches,
            keypoints,
        });
    }
    let ds = BagDataset::new(header.split, header.n, bags)?;
    if ds.objects().len() != header.num_objects {
        return format_err(
            8,
            format!(
                "header declares {} objects, file holds {}",
                header.num_objects,
                ds.objects().len()
            ),
        );
    }
    if ds.views_per_object() != header.views_per_object {
        return format_err(
            8,
            format!(
                "header declares {} views per object, file holds {}",
                header.views_per_object,
                ds.views_per_object()
            ),
        );
    }
    Ok(ds)
}
