//! Procedurally rendered two-object scenes with template captions.
//!
//! A scene is fully described by a compact text code (stored as the `file`
//! of a manifest entry), so images are re-rendered on load instead of being
//! written to disk.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng;
use crate::split::{Manifest, ManifestEntry, ManifestTask, SplitMode, MANIFEST_VERSION};
use crate::types::{Image, TaskStream};

pub const SCENE_PREFIX: &str = "synthetic:";
pub const IMAGE_SIZE: usize = 32;

pub const SHAPES: [&str; 10] = ["circle", "square", "triangle", "diamond", "cross", "ring", "frame", "bar", "pillar", "dot"];

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.15, 0.8]),
    ("orange", [1.0, 0.55, 0.0]),
    ("white", [0.97, 0.97, 0.97]),
    ("cyan", [0.1, 0.9, 0.9]),
];

const BACKGROUNDS: [[f32; 3]; 3] = [[0.0, 0.0, 0.0], [0.25, 0.25, 0.25], [0.05, 0.05, 0.25]];
const VERBS: [&str; 5] = ["sitting", "resting", "floating", "lying", "hovering"];

/// Every word the caption templates can produce.
pub fn vocabulary_words() -> Vec<&'static str> {
    let mut words: Vec<&str> = Vec::new();
    words.extend(SHAPES);
    words.extend(COLORS.iter().map(|c| c.0));
    words.extend(VERBS);
    words.extend(["a", "an", "the", "and", "there", "is", "above", "below", "to", "left", "right", "of", "over", "under", "beside"]);
    // prompt template words
    words.extend(["An", "image", "attributes", "actions"]);
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

    fn phrase(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
        }
    }

    fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub cx: i32,
    pub cy: i32,
    pub radius: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub background: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn code(&self) -> String {
        let mut s = format!("{SCENE_PREFIX}{}", self.background);
        for o in &self.objects {
            s.push_str(&format!(":{},{},{},{},{}", o.shape, o.color, o.cx, o.cy, o.radius));
        }
        s
    }

    pub fn parse(code: &str) -> Result<Self> {
        let bad = || Error::InvalidSample(format!("malformed scene code `{code}`"));
        let body = code.strip_prefix(SCENE_PREFIX).ok_or_else(bad)?;
        let mut parts = body.split(':');
        let background: usize = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        if background >= BACKGROUNDS.len() {
            return Err(bad());
        }
        let mut objects = Vec::new();
        for p in parts {
            let f: Vec<i32> = p.split(',').map(|x| x.parse::<i32>()).collect::<core::result::Result<_, _>>().map_err(|_| bad())?;
            if f.len() != 5 || f[0] < 0 || f[0] as usize >= SHAPES.len() || f[1] < 0 || f[1] as usize >= COLORS.len() {
                return Err(bad());
            }
            objects.push(SceneObject { shape: f[0] as usize, color: f[1] as usize, cx: f[2], cy: f[3], radius: f[4] });
        }
        if objects.is_empty() {
            return Err(bad());
        }
        Ok(Self { background, objects })
    }

    pub fn render(&self, size: usize) -> Image {
        let mut img = Image::filled(size, size, BACKGROUNDS[self.background]);
        for o in &self.objects {
            let rgb = COLORS[o.color].1;
            for y in 0..size as i32 {
                for x in 0..size as i32 {
                    if covers(o.shape, x - o.cx, y - o.cy, o.radius) {
                        img.set_pixel(y as usize, x as usize, rgb);
                    }
                }
            }
        }
        img
    }
}

fn covers(shape: usize, dx: i32, dy: i32, r: i32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d2 = dx * dx + dy * dy;
    match SHAPES[shape] {
        "circle" => d2 <= r * r,
        "square" => ax < r && ay < r,
        "triangle" => dy >= -r && dy <= r && 2 * ax <= dy + r,
        "diamond" => ax + ay <= r,
        "cross" => (ax <= 1 && ay <= r) || (ay <= 1 && ax <= r),
        "ring" => d2 <= r * r && d2 >= (r - 2) * (r - 2),
        "frame" => ax.max(ay) <= r && ax.max(ay) >= r - 1,
        "bar" => ax <= r && ay <= 1,
        "pillar" => ay <= r && ax <= 1,
        "dot" => 4 * d2 <= r * r,
        _ => false,
    }
}

/// Shape indices owned by each task: shape `i` goes to task `i % n_tasks`.
pub fn task_shapes(n_tasks: usize) -> Vec<Vec<usize>> {
    (0..n_tasks).map(|t| (0..SHAPES.len()).filter(|i| i % n_tasks == t).collect()).collect()
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn make_scene<R: RngCore>(r: &mut R, shapes: &[usize]) -> (Scene, [String; 5]) {
    let relation = Relation::ALL[rng::below(r, 4)];
    let radius = 5;
    let jitter = |r: &mut R| rng::below(r, 5) as i32 - 2;
    // first object is the subject of `relation`
    let (a, b) = match relation {
        Relation::Above => ((16, 8), (16, 24)),
        Relation::Below => ((16, 24), (16, 8)),
        Relation::LeftOf => ((8, 16), (24, 16)),
        Relation::RightOf => ((24, 16), (8, 16)),
    };
    let sa = shapes[rng::below(r, shapes.len())];
    let sb = shapes[rng::below(r, shapes.len())];
    let ca = rng::below(r, COLORS.len());
    let mut cb = rng::below(r, COLORS.len() - 1);
    if cb >= ca {
        cb += 1;
    }
    let objects = alloc::vec![
        SceneObject { shape: sa, color: ca, cx: a.0 + jitter(r), cy: a.1 + jitter(r), radius },
        SceneObject { shape: sb, color: cb, cx: b.0 + jitter(r), cy: b.1 + jitter(r), radius },
    ];
    let scene = Scene { background: rng::below(r, BACKGROUNDS.len()), objects };
    let (na, nb) = (SHAPES[sa], SHAPES[sb]);
    let (ka, kb) = (COLORS[ca].0, COLORS[cb].0);
    let mut verb = || VERBS[rng::below(r, VERBS.len())];
    let rel = relation.phrase();
    let inv = relation.inverse().phrase();
    let captions = [
        format!("{} {ka} {na} {} {rel} {} {kb} {nb}", article(ka), verb(), article(kb)),
        format!("{} {kb} {nb} {} {inv} {} {ka} {na}", article(kb), verb(), article(ka)),
        format!("{} {ka} {na} and {} {kb} {nb}", article(ka), article(kb)),
        format!("there is {} {ka} {na} {rel} {} {kb} {nb}", article(ka), article(kb)),
        format!("{} {kb} {nb} {} {inv} the {ka} {na}", article(kb), verb()),
    ];
    (scene, captions)
}

/// Renders a synthetic stream with every image re-created from its scene code.
pub fn resolve_stream(manifest: &Manifest) -> Result<TaskStream> {
    manifest.resolve(|e| Ok::<_, Error>(Scene::parse(&e.file)?.render(IMAGE_SIZE)))
}

/// Builds a deterministic synthetic task stream manifest.
///
/// Each task owns a disjoint subset of shape categories. A quarter of every
/// task's samples is held out and halved into validation and test (validation
/// takes the odd sample).
pub fn build_synthetic_stream(n_tasks: usize, samples_per_task: usize, seed: u64) -> Result<Manifest> {
    if n_tasks < 2 || n_tasks > SHAPES.len() {
        return Err(Error::Config(format!("synthetic stream needs 2..={} tasks, got {n_tasks}", SHAPES.len())));
    }
    if samples_per_task < 8 {
        return Err(Error::Config(format!("synthetic stream needs at least 8 samples per task, got {samples_per_task}")));
    }
    let held_out = samples_per_task / 4;
    let n_val = held_out.div_ceil(2);
    let n_test = held_out - n_val;
    let mut tasks = Vec::with_capacity(n_tasks);
    for (t, shapes) in task_shapes(n_tasks).iter().enumerate() {
        let mut r = rng::seeded(&[seed, 0x5CE7E, t as u64]);
        let mut entries = Vec::with_capacity(samples_per_task);
        for k in 0..samples_per_task {
            let (scene, captions) = make_scene(&mut r, shapes);
            entries.push(ManifestEntry {
                image_id: format!("syn-{seed}-{t}-{k}"),
                file: scene.code(),
                captions: captions.into_iter().collect(),
            });
        }
        let test = entries.split_off(samples_per_task - n_test);
        let val = entries.split_off(samples_per_task - n_test - n_val);
        let name = shapes.iter().map(|&s| SHAPES[s]).collect::<Vec<_>>().join("+");
        tasks.push(ManifestTask { name, train: entries, val, test });
    }
    Ok(Manifest { version: MANIFEST_VERSION, mode: SplitMode::Synthetic, seed, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(build_synthetic_stream(3, 64, 7).unwrap(), build_synthetic_stream(3, 64, 7).unwrap());
        assert_ne!(build_synthetic_stream(3, 64, 7).unwrap(), build_synthetic_stream(3, 64, 8).unwrap());
    }

    #[test]
    fn counts_and_task_ids() {
        let m = build_synthetic_stream(2, 8, 1).unwrap();
        let total: usize = m.tasks.iter().map(|t| t.train.len() + t.val.len() + t.test.len()).sum();
        assert_eq!(total, 16);
        assert_eq!(m.tasks.len(), 2);
        assert_eq!((m.tasks[0].train.len(), m.tasks[0].val.len(), m.tasks[0].test.len()), (6, 1, 1));
    }

    #[test]
    fn every_caption_names_a_task_category() {
        let m = build_synthetic_stream(3, 64, 7).unwrap();
        for (t, shapes) in task_shapes(3).iter().enumerate() {
            let task = &m.tasks[t];
            for e in task.train.iter().chain(&task.val).chain(&task.test) {
                assert_eq!(e.captions.len(), 5);
                for c in &e.captions {
                    assert!(shapes.iter().any(|&s| c.split(' ').any(|w| w == SHAPES[s])), "{c}");
                }
            }
        }
    }

    #[test]
    fn task_categories_are_disjoint() {
        let parts = task_shapes(5);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn scene_code_round_trips_and_renders_two_objects() {
        let m = build_synthetic_stream(2, 8, 3).unwrap();
        let code = &m.tasks[1].train[0].file;
        let scene = Scene::parse(code).unwrap();
        assert_eq!(&scene.code(), code);
        assert_eq!(scene.objects.len(), 2);
        let img = scene.render(IMAGE_SIZE);
        let bg = BACKGROUNDS[scene.background];
        let colored = (0..IMAGE_SIZE * IMAGE_SIZE).filter(|&i| img.pixel(i / IMAGE_SIZE, i % IMAGE_SIZE) != bg).count();
        assert!(colored > 10);
        assert!(Scene::parse("synthetic:9:0,0,1,1,5").is_err());
        assert!(Scene::parse("nope").is_err());
    }

    #[test]
    fn arguments_validated() {
        assert!(build_synthetic_stream(1, 64, 0).is_err());
        assert!(build_synthetic_stream(3, 7, 0).is_err());
    }
}
