//! Identity-labelled image datasets: `<root>/<identity_name>/<image>.png`
//! with plain-text split manifests (train/val/test identity lists, split
//! 80/10/10 by identity).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::synthface;

/// In-memory dataset: images stacked `[N,3,S,S]`, labels indexing
/// `identities`.
pub struct Dataset {
    pub identities: Vec<String>,
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn image(&self, i: usize) -> Array3<f32> {
        self.images.index_axis(ndarray::Axis(0), i).to_owned()
    }

    /// Indices of every image belonging to one identity label.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }
}

/// Identity lists for the three splits, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

const SPLIT_FILES: [(&str, fn(&Splits) -> &Vec<String>); 3] = [
    ("split_train.txt", |s| &s.train),
    ("split_val.txt", |s| &s.val),
    ("split_test.txt", |s| &s.test),
];

/// Lists identity directories under `root`, sorted by name.
pub fn list_identities(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no identity directories under {}",
            root.display()
        )));
    }
    Ok(ids)
}

/// Splits identities 80/10/10 with a seeded shuffle and writes the three
/// manifest files into `root`. Val/test each receive at least one identity
/// when three or more exist.
pub fn write_split_manifests(root: &Path, seed: u64) -> Result<Splits> {
    let mut ids = list_identities(root)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_test = (n / 10).max(if n >= 3 { 1 } else { 0 });
    let n_val = (n / 10).max(if n >= 3 { 1 } else { 0 });
    let n_train = n - n_val - n_test;
    let splits = Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    for (file, get) in SPLIT_FILES {
        std::fs::write(root.join(file), get(&splits).join("\n") + "\n")?;
    }
    Ok(splits)
}

/// Reads previously written manifests.
pub fn load_split_manifests(root: &Path) -> Result<Splits> {
    let read = |file: &str| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(root.join(file))
            .map_err(|e| Error::Data(format!("missing split manifest {file}: {e}")))?;
        Ok(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    };
    Ok(Splits {
        train: read("split_train.txt")?,
        val: read("split_val.txt")?,
        test: read("split_test.txt")?,
    })
}

/// Loads the images of the listed identities, resizing to `size` if needed.
/// Labels index into the returned identity list (sorted by name).
pub fn load_identities(root: &Path, identities: &[String], size: usize) -> Result<Dataset> {
    let mut ids: Vec<String> = identities.to_vec();
    ids.sort();
    let mut images: Vec<Array3<f32>> = Vec::new();
    let mut labels = Vec::new();
    for (label, id) in ids.iter().enumerate() {
        let dir = root.join(id);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::Data(format!("identity dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .png images under {}", dir.display())));
        }
        for f in files {
            let mut img = imageio::load_png(&f)?;
            if img.shape()[1] != size || img.shape()[2] != size {
                img = imageio::resize_bilinear(&img, size, size);
            }
            images.push(img);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(Dataset {
        identities: ids,
        images: imageio::images_to_batch(&images),
        labels,
    })
}

/// Loads a whole split by name ("train"/"val"/"test").
pub fn load_split(root: &Path, split: &str, size: usize) -> Result<Dataset> {
    let splits = load_split_manifests(root)?;
    let ids = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    load_identities(root, ids, size)
}

/// Settings for the generated desk-scale corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 20,
            images_per_identity: 12,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Renders a synthetic identity corpus under `root` (one directory per
/// identity) and writes split manifests. Returns the split lists.
pub fn generate_synthetic_dataset(root: &Path, spec: &SynthSpec) -> Result<Splits> {
    if spec.n_identities < 3 {
        return Err(Error::Config("need at least 3 identities for train/val/test".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    for i in 0..spec.n_identities {
        let id = synthface::FaceIdentity::sample(&mut rng);
        let dir = root.join(format!("id{i:03}"));
        std::fs::create_dir_all(&dir)?;
        for j in 0..spec.images_per_identity {
            let nu = synthface::Nuisance::sample(&mut rng);
            let img = synthface::render(&id, &nu, spec.image_size);
            imageio::save_png(&dir.join(format!("img{j:03}.png")), &img)?;
        }
    }
    write_split_manifests(root, spec.seed)
}

/// An in-memory synthetic dataset without touching disk (tests).
pub fn synthetic_in_memory(spec: &SynthSpec) -> Dataset {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut identities = Vec::new();
    for i in 0..spec.n_identities {
        let id = synthface::FaceIdentity::sample(&mut rng);
        identities.push(format!("id{i:03}"));
        for _ in 0..spec.images_per_identity {
            let nu = synthface::Nuisance::sample(&mut rng);
            images.push(synthface::render(&id, &nu, spec.image_size));
            labels.push(i);
        }
    }
    Dataset {
        identities,
        images: imageio::images_to_batch(&images),
        labels,
    }
}

/// Groups image indices by identity label.
pub fn by_identity(ds: &Dataset) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map
}
