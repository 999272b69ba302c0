//! Continual task streams built from COCO-style annotations.
//!
//! Builders return a [`Manifest`]: the stream with image references instead
//! of pixels. [`Manifest::resolve`] turns it into a [`TaskStream`] given an
//! image loader.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{Image, Sample, TaskSplit, TaskStream};

pub const MANIFEST_VERSION: u32 = 1;

pub const RATT_TASKS_V1: &str = include_str!("../data/ratt_tasks_v1.txt");
pub const CONTCAP_TASKS_V1: &str = include_str!("../data/contcap_tasks_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Contcap,
    Ratt,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub file: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mode: SplitMode,
    pub seed: u64,
    pub tasks: Vec<ManifestTask>,
}

impl Manifest {
    /// Loads every image and builds the in-memory stream.
    pub fn resolve<E>(&self, mut load: impl FnMut(&ManifestEntry) -> core::result::Result<Image, E>) -> core::result::Result<TaskStream, E>
    where
        E: From<Error>,
    {
        let mut stream = TaskStream::default();
        for (t, task) in self.tasks.iter().enumerate() {
            let mut conv = |entries: &[ManifestEntry]| -> core::result::Result<Vec<Sample>, E> {
                entries
                    .iter()
                    .map(|e| Ok(Sample::new(e.image_id.clone(), load(e)?, e.captions.clone(), t)?))
                    .collect()
            };
            let split = TaskSplit { train: conv(&task.train)?, val: conv(&task.val)?, test: conv(&task.test)? };
            stream.names.push(task.name.clone());
            stream.tasks.push(split);
        }
        Ok(stream)
    }

    /// (train, val, test) sizes per task.
    pub fn counts(&self) -> Vec<(String, usize, usize, usize)> {
        self.tasks.iter().map(|t| (t.name.clone(), t.train.len(), t.val.len(), t.test.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub categories: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub task_defs: Vec<TaskDef>,
    pub caption_min: usize,
    pub caption_keep: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn ratt(seed: u64) -> Self {
        Self::with_defs(SplitMode::Ratt, parse_task_defs(RATT_TASKS_V1).expect("bundled RATT task file"), seed)
    }

    pub fn contcap(seed: u64) -> Self {
        Self::with_defs(SplitMode::Contcap, parse_task_defs(CONTCAP_TASKS_V1).expect("bundled ContCap task file"), seed)
    }

    pub fn with_defs(mode: SplitMode, task_defs: Vec<TaskDef>, seed: u64) -> Self {
        Self { mode, task_defs, caption_min: 5, caption_keep: 5, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.task_defs.is_empty() {
            return Err(Error::Split("no task definitions".into()));
        }
        if self.caption_keep == 0 || self.caption_keep > self.caption_min {
            return Err(Error::Split(format!(
                "caption_keep ({}) must be in 1..=caption_min ({})",
                self.caption_keep, self.caption_min
            )));
        }
        if let Some(t) = self.task_defs.iter().find(|t| t.categories.is_empty()) {
            return Err(Error::Split(format!("task `{}` has no categories", t.name)));
        }
        Ok(())
    }
}

/// Parses `name: id id id` lines; `#` starts a comment.
pub fn parse_task_defs(text: &str) -> Result<Vec<TaskDef>> {
    let mut defs = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, ids) = line
            .rsplit_once(':')
            .ok_or_else(|| Error::Split(format!("task definition without `:` in `{line}`")))?;
        let categories = ids
            .split_whitespace()
            .map(|s| s.parse::<u32>().map_err(|_| Error::Split(format!("bad category id `{s}`"))))
            .collect::<Result<BTreeSet<_>>>()?;
        defs.push(TaskDef { name: name.trim().to_string(), categories });
    }
    Ok(defs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub id: u64,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub image_id: u64,
    pub category_id: u32,
}

/// Caption and instance annotations of one COCO split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CocoAnnotations {
    pub captions: Vec<CaptionRecord>,
    pub instances: Vec<InstanceRecord>,
    /// image id → file name, when the annotation file lists images.
    pub file_names: BTreeMap<u64, String>,
}

struct Candidate {
    image_id: u64,
    categories: BTreeSet<u32>,
    captions: Vec<String>,
}

/// Images that carry instances, with their first `caption_keep` captions in
/// caption-id order; images with fewer than `caption_min` captions are dropped.
fn candidates(ann: &CocoAnnotations, spec: &SplitSpec) -> Result<Vec<Candidate>> {
    if ann.instances.is_empty() {
        return Err(Error::Split("missing instance annotations".into()));
    }
    let mut cats: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for inst in &ann.instances {
        cats.entry(inst.image_id).or_default().insert(inst.category_id);
    }
    let mut caps: BTreeMap<u64, Vec<(u64, &str)>> = BTreeMap::new();
    for c in &ann.captions {
        caps.entry(c.image_id).or_default().push((c.id, c.caption.as_str()));
    }
    let mut out = Vec::new();
    for (image_id, categories) in cats {
        let Some(list) = caps.get_mut(&image_id) else { continue };
        list.retain(|(_, c)| !c.trim().is_empty());
        if list.len() < spec.caption_min {
            continue;
        }
        list.sort_by_key(|(id, _)| *id);
        let captions = list.iter().take(spec.caption_keep).map(|(_, c)| c.trim().to_string()).collect();
        out.push(Candidate { image_id, categories, captions });
    }
    Ok(out)
}

/// Assigns candidates to tasks; `dedup` keeps each image only in the earliest
/// matching task.
fn assign(cands: &[Candidate], spec: &SplitSpec, dedup: bool) -> Vec<Vec<usize>> {
    let mut per_task = alloc::vec![Vec::new(); spec.task_defs.len()];
    for (i, c) in cands.iter().enumerate() {
        for (t, def) in spec.task_defs.iter().enumerate() {
            if !def.categories.is_disjoint(&c.categories) {
                per_task[t].push(i);
                if dedup {
                    break;
                }
            }
        }
    }
    per_task
}

fn entry(c: &Candidate, ann: &CocoAnnotations) -> ManifestEntry {
    let file = ann.file_names.get(&c.image_id).cloned().unwrap_or_else(|| format!("{:012}.jpg", c.image_id));
    ManifestEntry { image_id: c.image_id.to_string(), file, captions: c.captions.clone() }
}

fn build(train: &CocoAnnotations, val: &CocoAnnotations, spec: &SplitSpec, dedup: bool) -> Result<Manifest> {
    spec.validate()?;
    let train_c = candidates(train, spec)?;
    let val_c = candidates(val, spec)?;
    let train_a = assign(&train_c, spec, dedup);
    let val_a = assign(&val_c, spec, dedup);
    let mut tasks = Vec::with_capacity(spec.task_defs.len());
    for (t, def) in spec.task_defs.iter().enumerate() {
        if train_a[t].is_empty() {
            return Err(Error::Split(format!("task `{}` matches no images", def.name)));
        }
        let mut held: Vec<ManifestEntry> = val_a[t].iter().map(|&i| entry(&val_c[i], val)).collect();
        rng::shuffle(&mut rng::seeded(&[spec.seed, 0x7A11, t as u64]), &mut held);
        let test = held.split_off(held.len().div_ceil(2));
        tasks.push(ManifestTask {
            name: def.name.clone(),
            train: train_a[t].iter().map(|&i| entry(&train_c[i], train)).collect(),
            val: held,
            test,
        });
    }
    Ok(Manifest { version: MANIFEST_VERSION, mode: spec.mode, seed: spec.seed, tasks })
}

/// RATT protocol: an image belongs to the first task (in declared order)
/// whose category set it touches, so tasks are image-disjoint. Training
/// images come from `train`; `val` is shuffled with the `SplitSpec` seed and halved
/// into validation and test.
pub fn build_ratt_split(train: &CocoAnnotations, val: &CocoAnnotations, spec: &SplitSpec) -> Result<Manifest> {
    build(train, val, spec, true)
}

/// ContCap protocol: one task per class, an image joins every task whose
/// class it contains.
pub fn build_contcap_split(train: &CocoAnnotations, val: &CocoAnnotations, spec: &SplitSpec) -> Result<Manifest> {
    build(train, val, spec, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ann(images: &[(u64, &[u32], usize)]) -> CocoAnnotations {
        let mut a = CocoAnnotations::default();
        let mut cid = 1000;
        for &(img, cats, ncap) in images {
            for &c in cats {
                a.instances.push(InstanceRecord { image_id: img, category_id: c });
            }
            // captions inserted in descending id order to exercise sorting
            for k in (0..ncap).rev() {
                a.captions.push(CaptionRecord { image_id: img, id: cid + k as u64, caption: format!("caption {k} of {img}") });
            }
            cid += 100;
        }
        a
    }

    fn two_task_spec(mode: SplitMode) -> SplitSpec {
        SplitSpec::with_defs(mode, parse_task_defs("A: 1 2\nB: 3").unwrap(), 5)
    }

    #[test]
    fn bundled_task_files_parse() {
        let ratt = SplitSpec::ratt(0);
        let names: Vec<_> = ratt.task_defs.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["Transport", "Animals", "Sports", "Food", "Interior"]);
        let cc = SplitSpec::contcap(0);
        let names: Vec<_> = cc.task_defs.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["person", "sports ball", "tv", "toilet", "bottle"]);
        assert_eq!(cc.task_defs[1].categories.iter().copied().collect::<Vec<_>>(), vec![37]);
    }

    #[test]
    fn ratt_overlap_goes_to_earliest_task() {
        // 8 images; image 4 carries categories of both tasks.
        let train = ann(&[(1, &[1], 5), (2, &[2], 6), (3, &[1, 2], 5), (4, &[2, 3], 5), (5, &[3], 5), (6, &[3], 7), (7, &[3], 4), (8, &[9], 5)]);
        let val = ann(&[(11, &[1], 5), (12, &[3], 5), (13, &[3], 5)]);
        let m = build_ratt_split(&train, &val, &two_task_spec(SplitMode::Ratt)).unwrap();
        let ids = |t: usize| m.tasks[t].train.iter().map(|e| e.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(0), ["1", "2", "3", "4"]);
        assert_eq!(ids(1), ["5", "6"]);
        for e in m.tasks.iter().flat_map(|t| &t.train) {
            assert_eq!(e.captions.len(), 5);
        }
        // first five captions by caption id
        assert_eq!(m.tasks[1].train[1].captions[0], "caption 0 of 6");
        assert_eq!(m.tasks[1].train[1].captions[4], "caption 4 of 6");
        assert_eq!((m.tasks[1].val.len(), m.tasks[1].test.len()), (1, 1));
        assert_eq!((m.tasks[0].val.len(), m.tasks[0].test.len()), (1, 0));
    }

    #[test]
    fn contcap_keeps_shared_images_in_every_class() {
        let spec = SplitSpec::with_defs(SplitMode::Contcap, parse_task_defs("person: 1\ntv: 72").unwrap(), 0);
        let train = ann(&[(1, &[1, 72], 5), (2, &[1], 5), (3, &[72], 4), (4, &[72], 5)]);
        let val = ann(&[(9, &[1], 5)]);
        let m = build_contcap_split(&train, &val, &spec).unwrap();
        let ids = |t: usize| m.tasks[t].train.iter().map(|e| e.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(0), ["1", "2"]);
        assert_eq!(ids(1), ["1", "4"]);
    }

    #[test]
    fn val_test_halves_partition_validation() {
        let imgs: Vec<(u64, &[u32], usize)> = (0..11).map(|i| (100 + i, &[1u32][..], 5)).collect();
        let train = ann(&[(1, &[1], 5), (2, &[3], 5)]);
        let val = ann(&imgs);
        let m = build_ratt_split(&train, &val, &two_task_spec(SplitMode::Ratt)).unwrap();
        let t = &m.tasks[0];
        assert_eq!((t.val.len(), t.test.len()), (6, 5));
        let mut all: Vec<_> = t.val.iter().chain(&t.test).map(|e| e.image_id.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 11);
        assert_eq!(m, build_ratt_split(&train, &val, &two_task_spec(SplitMode::Ratt)).unwrap());
    }

    #[test]
    fn errors() {
        let train = ann(&[(1, &[1], 5)]);
        let val = ann(&[(2, &[1], 5)]);
        let err = build_ratt_split(&train, &val, &two_task_spec(SplitMode::Ratt)).unwrap_err();
        assert!(matches!(err, Error::Split(ref s) if s.contains("`B`")));
        let mut no_inst = train.clone();
        no_inst.instances.clear();
        assert!(build_ratt_split(&no_inst, &val, &two_task_spec(SplitMode::Ratt)).is_err());
        let mut bad = two_task_spec(SplitMode::Ratt);
        bad.caption_keep = 6;
        assert!(build_ratt_split(&train, &val, &bad).is_err());
    }
}
