//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json                key-sorted UTF-8 JSON
//! <dir>/episodes/<id>/clip.bin       u32-LE header T,H,W then f32-LE rgb
//! <dir>/episodes/<id>/masks.rle      u32-LE header N,T,H,W then runs
//! <dir>/episodes/<id>/query.json     query, targets, attributes, MC block
//! ```
//!
//! Mask runs are stored per instance per frame as `n_runs` followed by the
//! alternating background-first counts. All integers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{episode_seed, generate_episode, split_dataset, InstanceInfo, QueryEpisode, SplitLists, CLIP_FPS};
use crate::config::RunConfig;
use crate::encoder::VideoClip;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rle::{rle_decode, rle_encode};

pub const MANIFEST_VERSION: u32 = 1;

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub base_seed: u64,
    pub config_digest: String,
    pub splits: SplitLists,
    /// Episode id to directory path relative to the dataset root.
    pub episodes: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn split_ids(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(Error::InvalidArgument {
                op: "split_ids",
                msg: format!("unknown split {other:?}, expected train|val|test"),
            }),
        }
    }
}

/// The JSON sidecar carrying everything that is not pixels or masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuerySidecar {
    id: String,
    fps: f64,
    query: String,
    target_ids: Vec<usize>,
    instances: Vec<InstanceInfo>,
    mc_question: String,
    mc_options: Vec<String>,
    mc_key: usize,
}

pub(crate) fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Bounds-checked little-endian reader; every failure names the file.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                path_str(self.path),
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                path_str(self.path),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + clip.data().len() * 4);
    push_u32(&mut buf, clip.frames as u32);
    push_u32(&mut buf, clip.height as u32);
    push_u32(&mut buf, clip.width as u32);
    for &v in clip.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_clip(path: &Path, id: &str) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = Reader::new(&bytes, path);
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = t * h * w * 3;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()? as f64);
    }
    r.finish()?;
    VideoClip::new(id, t, h, w, CLIP_FPS, data)
        .map_err(|e| Error::format(path_str(path), e.to_string()))
}

pub fn write_masks(path: &Path, tracklets: &[Vec<Mask>]) -> Result<()> {
    let n = tracklets.len();
    let t = tracklets.first().map_or(0, Vec::len);
    let (h, w) = tracklets
        .first()
        .and_then(|tr| tr.first())
        .map_or((0, 0), |m| (m.h, m.w));
    let mut buf = Vec::new();
    push_u32(&mut buf, n as u32);
    push_u32(&mut buf, t as u32);
    push_u32(&mut buf, h as u32);
    push_u32(&mut buf, w as u32);
    for tr in tracklets {
        for mask in tr {
            let runs = rle_encode(mask);
            push_u32(&mut buf, runs.len() as u32);
            for c in runs {
                push_u32(&mut buf, c);
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_masks(path: &Path) -> Result<Vec<Vec<Mask>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = Reader::new(&bytes, path);
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut tracklets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let n_runs = r.u32()? as usize;
            let mut runs = Vec::with_capacity(n_runs);
            for _ in 0..n_runs {
                runs.push(r.u32()?);
            }
            let mask = rle_decode(h, w, &runs)
                .map_err(|e| Error::format(path_str(path), e.to_string()))?;
            frames.push(mask);
        }
        tracklets.push(frames);
    }
    r.finish()?;
    Ok(tracklets)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path_str(path), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path_str(path), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path_str(path), e))
}

fn episode_dir(root: &Path, id: &str) -> PathBuf {
    root.join("episodes").join(id)
}

pub fn write_episode(root: &Path, ep: &QueryEpisode) -> Result<()> {
    let dir = episode_dir(root, &ep.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(path_str(&dir), e))?;
    write_clip(&dir.join("clip.bin"), &ep.clip)?;
    write_masks(&dir.join("masks.rle"), &ep.tracklets)?;
    write_json(
        &dir.join("query.json"),
        &QuerySidecar {
            id: ep.id.clone(),
            fps: ep.clip.fps,
            query: ep.query.clone(),
            target_ids: ep.target_ids.clone(),
            instances: ep.instances.clone(),
            mc_question: ep.mc_question.clone(),
            mc_options: ep.mc_options.clone(),
            mc_key: ep.mc_key,
        },
    )
}

pub fn read_episode(root: &Path, id: &str) -> Result<QueryEpisode> {
    let dir = episode_dir(root, id);
    let side: QuerySidecar = read_json(&dir.join("query.json"))?;
    if side.id != id {
        return Err(Error::format(
            path_str(&dir.join("query.json")),
            format!("episode id {:?} does not match directory {id:?}", side.id),
        ));
    }
    let clip = read_clip(&dir.join("clip.bin"), id)?;
    let tracklets = read_masks(&dir.join("masks.rle"))?;
    if side.target_ids.iter().any(|&t| t >= side.instances.len())
        || tracklets.len() != side.instances.len()
    {
        return Err(Error::format(
            path_str(&dir),
            format!(
                "inconsistent episode: {} instances, {} tracklets, targets {:?}",
                side.instances.len(),
                tracklets.len(),
                side.target_ids
            ),
        ));
    }
    Ok(QueryEpisode {
        id: side.id,
        clip,
        query: side.query,
        target_ids: side.target_ids,
        instances: side.instances,
        tracklets,
        mc_question: side.mc_question,
        mc_options: side.mc_options,
        mc_key: side.mc_key,
    })
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_json(&root.join("manifest.json"), manifest)
}

/// Loads and verifies the manifest: version check plus existence of every
/// listed episode file.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            path_str(&path),
            format!(
                "manifest version {} unsupported, expected {MANIFEST_VERSION}",
                manifest.version
            ),
        ));
    }
    for split in [
        &manifest.splits.train,
        &manifest.splits.val,
        &manifest.splits.test,
    ] {
        for id in split {
            if !manifest.episodes.contains_key(id) {
                return Err(Error::format(
                    path_str(&path),
                    format!("split references unknown episode {id:?}"),
                ));
            }
        }
    }
    for (id, rel) in &manifest.episodes {
        let dir = root.join(rel);
        for file in ["clip.bin", "masks.rle", "query.json"] {
            let p = dir.join(file);
            if !p.is_file() {
                return Err(Error::format(
                    path_str(&p),
                    format!("missing file for episode {id:?}"),
                ));
            }
        }
    }
    Ok(manifest)
}

/// Generates a whole dataset under `root`: every episode first, the
/// manifest last, so a complete manifest implies complete episode files.
/// Episode seeds derive from the base seed and the episode index, making
/// output independent of generation order.
pub fn generate_dataset(cfg: &RunConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let ids: Vec<String> = (0..cfg.n_episodes).map(|i| format!("ep{i:05}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let ep = generate_episode(episode_seed(cfg.seed, i as u64), id, &cfg.generator)?;
        write_episode(root, &ep)?;
    }
    let [tr, va, te] = cfg.split_ratios;
    let splits = split_dataset(&ids, (tr, va, te), cfg.seed)?;
    let episodes: BTreeMap<String, String> = ids
        .iter()
        .map(|id| (id.clone(), format!("episodes/{id}")))
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        base_seed: cfg.seed,
        config_digest: cfg.digest(),
        splits,
        episodes,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
