//! Procedural interaction-clip datasets: generation, the on-disk layout,
//! loaders into training sets, and the familiar/unfamiliar object split.
//!
//! A dataset directory holds `manifest.json`, `clips/<id>.htk`,
//! `inactive/<object>_<k>.htk` and `annotations.jsonl`.

mod scene;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{keypoints_to_heatmap, union_gt, KeypointAnnotation};
use crate::tensor::{read_tensor, write_tensor_bytes, Tensor};
use crate::train::{HeatmapSample, Sample, TrainSet};

pub use scene::{
    clip_states, contact_start, gen_object, render, render_clip, FrameState, Manipulator, ObjectInstance, Part,
    PartBox, MAX_ACTIONS, MAX_CLASSES,
};

pub const DATASET_FORMAT: &str = "htk-dataset-1";

/// An object class and the actions it affords. The class's position in
/// [`GenConfig::objects`] selects its layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectClass {
    pub name: String,
    pub affords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub image_size: usize,
    pub frames: usize,
    /// Training clips per (object, action) cell.
    pub train_per_cell: usize,
    /// Test clips per (object, action) cell.
    pub test_per_cell: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub actions: Vec<String>,
    pub objects: Vec<ObjectClass>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let actions: Vec<String> = ["grasp", "press", "twist"].map(String::from).to_vec();
        let objects = ["mug", "kettle", "drawer", "lamp"]
            .map(|name| ObjectClass { name: name.into(), affords: actions.clone() })
            .to_vec();
        GenConfig {
            seed: 0,
            image_size: 64,
            frames: 8,
            train_per_cell: 60,
            test_per_cell: 15,
            noise: 0.02,
            actions,
            objects,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.objects.len() < 2 || self.actions.len() < 2 {
            return bad("need at least two objects and two actions".into());
        }
        if self.objects.len() > MAX_CLASSES {
            return bad(format!("at most {MAX_CLASSES} object classes have layouts"));
        }
        if self.actions.len() > MAX_ACTIONS {
            return bad(format!("at most {MAX_ACTIONS} actions have part colors"));
        }
        let unique = |names: Vec<&String>| names.iter().collect::<BTreeSet<_>>().len() == names.len();
        if !unique(self.actions.iter().collect()) || !unique(self.objects.iter().map(|o| &o.name).collect()) {
            return bad("object and action names must be unique".into());
        }
        for o in &self.objects {
            if o.name.is_empty() || o.name.contains(['/', '_']) {
                return bad(format!("object name {:?} may not be empty or contain '/' or '_'", o.name));
            }
            for a in &o.affords {
                if !self.actions.contains(a) {
                    return bad(format!("object {} affords unknown action {a}", o.name));
                }
            }
        }
        for a in &self.actions {
            let n = self.objects.iter().filter(|o| o.affords.contains(a)).count();
            if n < 2 {
                return bad(format!("action {a} is afforded by {n} objects, need at least 2"));
            }
        }
        if self.frames < 3 {
            return bad(format!("frames must be at least 3, got {}", self.frames));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        if self.train_per_cell == 0 || self.test_per_cell == 0 {
            return bad("train_per_cell and test_per_cell must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        Ok(())
    }

    fn affords(&self, object: usize) -> Vec<usize> {
        let o = &self.objects[object];
        (0..self.actions.len()).filter(|&a| o.affords.contains(&self.actions[a])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InactiveEntry {
    pub id: String,
    pub object: String,
    pub split: Split,
    pub file: String,
    pub sha256: String,
    /// Hotspot part of every afforded action.
    pub hotspots: BTreeMap<String, PartBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub object: String,
    pub action: String,
    /// Id of the paired inactive image.
    pub inactive: String,
    pub split: Split,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub config_hash: String,
    pub config: GenConfig,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    /// Classes held out as unfamiliar; empty for a full dataset.
    pub unfamiliar: Vec<String>,
    pub inactive: Vec<InactiveEntry>,
    pub clips: Vec<ClipEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON serialization.
pub fn json_hash<S: Serialize>(value: &S) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Seed for one generated item, independent of generation order.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn inactive_id(object: &str, k: usize) -> String {
    format!("{object}_{k}")
}

pub fn clip_id(object: &str, k: usize, action: &str) -> String {
    format!("{object}_{k}_{action}")
}

/// Everything generated for one object instance.
struct InstanceOutput {
    inactive: InactiveEntry,
    inactive_bytes: Vec<u8>,
    clips: Vec<(ClipEntry, Vec<u8>)>,
    annotations: Vec<KeypointAnnotation>,
}

fn gen_instance(cfg: &GenConfig, object: usize, k: usize) -> Result<InstanceOutput> {
    let name = &cfg.objects[object].name;
    let id = inactive_id(name, k);
    let split = if k < cfg.train_per_cell { Split::Train } else { Split::Test };
    let affords = cfg.affords(object);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &id));
    let obj = gen_object(object, &affords, cfg.image_size, cfg.noise, &mut rng)?;
    let image = render(&obj, &FrameState::default());
    let inactive_bytes = write_tensor_bytes(&image);
    let mut hotspots = BTreeMap::new();
    let mut annotations = Vec::new();
    for &a in &affords {
        let part = obj.hotspot(a).expect("afforded action has a part");
        let action = &cfg.actions[a];
        hotspots.insert(action.clone(), part.bbox);
        let [cx, cy] = part.bbox.center();
        let r = part.bbox.radius() - 1.0;
        let jittered = [cx + rng.random_range(-r..=r) / 2.0, cy + rng.random_range(-r..=r) / 2.0];
        for (annotator, point) in [[cx, cy], jittered].into_iter().enumerate() {
            annotations.push(KeypointAnnotation {
                image: id.clone(),
                action: action.clone(),
                annotator: annotator as u32,
                points: vec![point],
            });
        }
    }
    let mut clips = Vec::new();
    for &a in &affords {
        let action = &cfg.actions[a];
        let cid = clip_id(name, k, action);
        let mut clip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &cid));
        let states = clip_states(&obj, a, cfg.frames, &mut clip_rng)?;
        let bytes = write_tensor_bytes(&render_clip(&obj, &states)?);
        clips.push((
            ClipEntry {
                file: format!("clips/{cid}.htk"),
                sha256: sha256_hex(&bytes),
                id: cid,
                object: name.clone(),
                action: action.clone(),
                inactive: id.clone(),
                split,
            },
            bytes,
        ));
    }
    Ok(InstanceOutput {
        inactive: InactiveEntry {
            file: format!("inactive/{id}.htk"),
            sha256: sha256_hex(&inactive_bytes),
            id,
            object: name.clone(),
            split,
            hotspots,
        },
        inactive_bytes,
        clips,
        annotations,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the dataset described by `cfg` into `root`. The output is a
/// pure function of `cfg`; instances are generated in parallel inside the
/// current rayon pool.
pub fn gen_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["clips", "inactive"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let per_class = cfg.train_per_cell + cfg.test_per_cell;
    let jobs: Vec<(usize, usize)> = (0..cfg.objects.len()).flat_map(|o| (0..per_class).map(move |k| (o, k))).collect();
    let outputs = jobs
        .par_iter()
        .map(|&(o, k)| {
            let out = gen_instance(cfg, o, k)?;
            write_file(&root.join(&out.inactive.file), &out.inactive_bytes)?;
            for (entry, bytes) in &out.clips {
                write_file(&root.join(&entry.file), bytes)?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config_hash: json_hash(cfg)?,
        config: cfg.clone(),
        actions: cfg.actions.clone(),
        objects: cfg.objects.iter().map(|o| o.name.clone()).collect(),
        unfamiliar: Vec::new(),
        inactive: Vec::new(),
        clips: Vec::new(),
    };
    let mut annotations = Vec::new();
    for out in outputs {
        manifest.inactive.push(out.inactive);
        manifest.clips.extend(out.clips.into_iter().map(|(e, _)| e));
        annotations.extend(out.annotations);
    }
    write_jsonl(&root.join("annotations.jsonl"), &annotations)?;
    manifest.save(root)?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format { path, detail: format!("unsupported dataset format {:?}", m.format) });
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_file(&root.join("manifest.json"), &bytes)
    }

    /// SHA-256 of the manifest; it covers every file through the per-entry
    /// content hashes.
    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }

    pub fn action_index(&self, action: &str) -> Result<usize> {
        self.actions
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown action {action}")))
    }

    pub fn object_index(&self, object: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == object)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object {object}")))
    }

    pub fn inactive_in(&self, split: Split) -> impl Iterator<Item = &InactiveEntry> {
        self.inactive.iter().filter(move |e| e.split == split)
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |e| e.split == split)
    }

    /// Checks that every referenced file exists and matches its hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let files =
            self.inactive.iter().map(|e| (&e.file, &e.sha256)).chain(self.clips.iter().map(|e| (&e.file, &e.sha256)));
        for (file, hash) in files {
            let path = root.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if &sha256_hex(&bytes) != hash {
                return Err(Error::Format { path, detail: "content hash mismatch".into() });
            }
        }
        Ok(())
    }
}

/// Splits off `holdout` classes. The train manifest keeps every item of the
/// familiar classes; the test manifest keeps the test-split items of the
/// holdout classes.
pub fn novel_object_split(
    manifest: &DatasetManifest,
    holdout: &[String],
) -> Result<(DatasetManifest, DatasetManifest)> {
    let held: BTreeSet<&String> = holdout.iter().collect();
    for h in &held {
        manifest.object_index(h)?;
    }
    if held.len() >= manifest.objects.len() {
        return Err(Error::InvalidArgument("holdout leaves no familiar object".into()));
    }
    let familiar_actions: BTreeSet<&String> =
        manifest.clips.iter().filter(|c| !held.contains(&c.object)).map(|c| &c.action).collect();
    for c in manifest.clips.iter().filter(|c| held.contains(&c.object)) {
        if !familiar_actions.contains(&c.action) {
            return Err(Error::InvalidArgument(format!(
                "action {} has no familiar exemplar once {} is held out",
                c.action, c.object
            )));
        }
    }
    let mut train = manifest.clone();
    train.inactive.retain(|e| !held.contains(&e.object));
    train.clips.retain(|e| !held.contains(&e.object));
    let mut test = manifest.clone();
    test.inactive.retain(|e| held.contains(&e.object) && e.split == Split::Test);
    test.clips.retain(|e| held.contains(&e.object) && e.split == Split::Test);
    let mut unfamiliar = manifest.unfamiliar.clone();
    unfamiliar.extend(held.iter().map(|s| s.to_string()));
    unfamiliar.sort();
    unfamiliar.dedup();
    train.unfamiliar = unfamiliar.clone();
    test.unfamiliar = unfamiliar;
    Ok((train, test))
}

/// Loads a stored f32 tensor and checks its extents.
pub fn load_tensor(root: &Path, file: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let path: PathBuf = root.join(file);
    let t: Tensor<f32> = read_tensor(&path)?.into_tensor();
    if t.shape() != shape {
        return Err(Error::Format { path, detail: format!("expected extents {shape:?}, found {:?}", t.shape()) });
    }
    Ok(t)
}

impl DatasetManifest {
    fn image_shape(&self) -> Vec<usize> {
        vec![3, self.config.image_size, self.config.image_size]
    }

    fn clip_shape(&self) -> Vec<usize> {
        vec![self.config.frames, 3, self.config.image_size, self.config.image_size]
    }

    /// Inactive images of `split`, in manifest order.
    pub fn load_inactive(&self, root: &Path, split: Split) -> Result<Vec<(InactiveEntry, Tensor<f32>)>> {
        let shape = self.image_shape();
        self.inactive_in(split).map(|e| Ok((e.clone(), load_tensor(root, &e.file, &shape)?))).collect()
    }

    /// Clips of `split`, in manifest order.
    pub fn load_clips(&self, root: &Path, split: Split) -> Result<Vec<(ClipEntry, Tensor<f32>)>> {
        let shape = self.clip_shape();
        self.clips_in(split).map(|e| Ok((e.clone(), load_tensor(root, &e.file, &shape)?))).collect()
    }

    /// Clips of `split` with their paired inactive images, labels indexed
    /// into this manifest's vocabularies.
    pub fn load_train_set(&self, root: &Path, split: Split) -> Result<TrainSet<f32>> {
        let mut set = TrainSet { samples: Vec::new(), inactive: Vec::new(), inactive_object: Vec::new() };
        let mut slot: BTreeMap<String, usize> = BTreeMap::new();
        let by_id: BTreeMap<&str, &InactiveEntry> = self.inactive.iter().map(|e| (e.id.as_str(), e)).collect();
        let image_shape = self.image_shape();
        for (entry, clip) in self.load_clips(root, split)? {
            let object = self.object_index(&entry.object)?;
            let inactive = match slot.get(&entry.inactive) {
                Some(&i) => Some(i),
                None => match by_id.get(entry.inactive.as_str()) {
                    Some(ie) => {
                        set.inactive.push(load_tensor(root, &ie.file, &image_shape)?);
                        set.inactive_object.push(object);
                        slot.insert(entry.inactive.clone(), set.inactive.len() - 1);
                        Some(set.inactive.len() - 1)
                    }
                    None => None,
                },
            };
            set.samples.push(Sample { clip, action: self.action_index(&entry.action)?, object, inactive });
        }
        Ok(set)
    }

    /// Supervised targets for the image-to-heatmap baseline: one unit-max
    /// ground-truth map per action, zero for actions the object does not
    /// afford.
    pub fn heatmap_samples(
        &self,
        root: &Path,
        split: Split,
        annotations: &[KeypointAnnotation],
        sigma_frac: f64,
    ) -> Result<Vec<HeatmapSample>> {
        let s = self.config.image_size;
        let sigma = sigma_frac * s as f64;
        let mut grouped: BTreeMap<(&str, &str), Vec<&KeypointAnnotation>> = BTreeMap::new();
        for a in annotations {
            grouped.entry((a.image.as_str(), a.action.as_str())).or_default().push(a);
        }
        self.load_inactive(root, split)?
            .into_iter()
            .map(|(entry, image)| {
                let mut target = vec![0.0f32; self.actions.len() * s * s];
                for (k, action) in self.actions.iter().enumerate() {
                    let Some(anns) = grouped.get(&(entry.id.as_str(), action.as_str())) else {
                        continue;
                    };
                    let maps = anns
                        .iter()
                        .map(|a| keypoints_to_heatmap(&a.points, sigma, s, s))
                        .collect::<Result<Vec<_>>>()?;
                    let gt = union_gt(&maps)?.to_unit_max();
                    for (t, &v) in target[k * s * s..(k + 1) * s * s].iter_mut().zip(gt.data()) {
                        *t = v as f32;
                    }
                }
                Ok(HeatmapSample { image, target: Tensor::new(vec![self.actions.len(), s, s], target)? })
            })
            .collect()
    }
}

/// Reads `annotations.jsonl`.
pub fn read_annotations(root: &Path) -> Result<Vec<KeypointAnnotation>> {
    let path = root.join("annotations.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format { path: path.clone(), detail: format!("line {}: {e}", i + 1) })?,
        );
    }
    Ok(out)
}

/// Partitions object classes round-robin into `splits` holdout groups,
/// so every class is unfamiliar in exactly one split.
pub fn rotating_holdouts(objects: &[String], splits: usize) -> Result<Vec<Vec<String>>> {
    if splits < 1 || splits > objects.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {splits} holdout splits from {} classes",
            objects.len()
        )));
    }
    let mut groups = vec![Vec::new(); splits];
    for (i, o) in objects.iter().enumerate() {
        groups[i % splits].push(o.clone());
    }
    Ok(groups)
}

/// Annotations of the images listed in `manifest` for `split`.
pub fn annotations_for(
    manifest: &DatasetManifest,
    split: Split,
    annotations: &[KeypointAnnotation],
) -> Vec<KeypointAnnotation> {
    let ids: BTreeSet<&str> = manifest.inactive_in(split).map(|e| e.id.as_str()).collect();
    annotations.iter().filter(|a| ids.contains(a.image.as_str())).cloned().collect()
}

/// Writes JSON lines, one record per item.
pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let mut line = serde_json::to_vec(item)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
