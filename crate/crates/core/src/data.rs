//! Synthetic ellipsoid phantoms, intensity normalization, the CV2V volume
//! format, dataset splits and the on-disk dataset layout.
//!
//! CV2V layout (all little-endian):
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 4            | magic `CV2V`                            |
//! | 2            | format version (`u16`, currently 1)     |
//! | 1            | dtype: 0 = `f32` image, 1 = `u8` labels |
//! | 1            | ndim: 3 for `(D, H, W)`, 4 for `(C, D, H, W)` |
//! | 4 * ndim     | extents (`u32`)                         |
//! | 12           | spacing in mm (3 x `f32`)               |
//! | rest         | voxels in raster order (w fastest)      |

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub const MAGIC: &[u8; 4] = b"CV2V";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub shape: [usize; 3],
    /// 2 = single lesion, 3 = nested outer/inner zones.
    pub num_classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Mean intensity of each class before normalization.
    pub contrast: Vec<f64>,
    pub cases: usize,
    pub spacing: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            shape: [32, 32, 32],
            num_classes: 3,
            noise: 0.1,
            contrast: vec![0.2, 0.5, 0.8],
            cases: 20,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("classes must be 2 or 3, got {}", self.num_classes)));
        }
        if self.contrast.len() != self.num_classes {
            return Err(Error::Config(format!(
                "need one contrast value per class ({}), got {}",
                self.num_classes,
                self.contrast.len()
            )));
        }
        if self.shape.iter().any(|&e| e < 4) {
            return Err(Error::Config(format!("volume shape {:?} too small", self.shape)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.cases == 0 {
            return Err(Error::Config("case count must be positive".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub image: Volume<f32>,
    pub label: LabelVolume,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Rotated ellipsoid; `contains` tests voxel centers in index space.
#[derive(Clone, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for a in 0..3 {
            let u = self.rot[a][0] * d[0] + self.rot[a][1] * d[1] + self.rot[a][2] * d[2];
            s += (u / self.radii[a]).powi(2);
        }
        s <= 1.0
    }
}

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut q = [0.0f64; 4];
    let mut norm = 0.0;
    while norm < 1e-6 {
        for v in q.iter_mut() {
            *v = normal.sample(rng);
        }
        norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic phantom number `index` of `spec`.
pub fn generate_case(spec: &SynthSpec, index: usize) -> Result<Case> {
    spec.validate()?;
    let mut rng = case_rng(spec.seed, index);
    let [d, h, w] = spec.shape;
    let ext = [d as f64, h as f64, w as f64];

    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for a in 0..3 {
        center[a] = ext[a] * rng.random_range(0.4..0.6);
        radii[a] = ext[a] * rng.random_range(0.18..0.32);
    }
    let outer = Ellipsoid {
        center,
        radii,
        rot: random_rotation(&mut rng),
    };
    let inner = if spec.num_classes == 3 {
        let scale = rng.random_range(0.45..0.6);
        let mut c = outer.center;
        for a in 0..3 {
            c[a] += outer.radii[a] * rng.random_range(-0.2..0.2);
        }
        Some(Ellipsoid {
            center: c,
            radii: outer.radii.map(|r| r * scale),
            rot: outer.rot,
        })
    } else {
        None
    };

    let n = d * h * w;
    let mut labels = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                if outer.contains(p) {
                    // The inner zone is clipped to the outer one so nesting holds exactly.
                    let in_inner = inner.as_ref().is_some_and(|e| e.contains(p));
                    labels[(z * h + y) * w + x] = if in_inner { 2 } else { 1 };
                }
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let mut v = spec.contrast[l as usize];
            if spec.noise > 0.0 {
                v += spec.noise * noise.sample(&mut rng);
            }
            v as f32
        })
        .collect();
    let image = normalize_intensity(&Volume::new(1, spec.shape, spec.spacing, raw)?);
    Ok(Case {
        id: case_id(index),
        index,
        seed: spec.seed,
        image,
        label: LabelVolume::new(1, spec.shape, spec.spacing, labels)?,
    })
}

/// Min-max rescaling to `[0, 1]`; a constant volume becomes all zeros.
pub fn normalize_intensity(volume: &Volume<f32>) -> Volume<f32> {
    let data = volume.data();
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = volume.clone();
    let range = hi as f64 - lo as f64;
    for v in out.data_mut() {
        *v = if range > 0.0 {
            ((*v as f64 - lo as f64) / range) as f32
        } else {
            0.0
        };
    }
    out
}

/// Voxel types storable in CV2V files.
pub trait VoxelType: crate::tensor::Element {
    const DTYPE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl VoxelType for f32 {
    const DTYPE: u8 = 0;
    const SIZE: usize = 4;

    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl VoxelType for u8 {
    const DTYPE: u8 = 1;
    const SIZE: usize = 1;

    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Serializes a volume; spacing is stored as `f32`.
pub fn encode_volume<T: VoxelType>(volume: &Volume<T>) -> Vec<u8> {
    let dims = volume.dims();
    let mut extents = Vec::with_capacity(4);
    if volume.channels() != 1 {
        extents.push(volume.channels());
    }
    extents.extend_from_slice(&dims);
    let mut out = Vec::with_capacity(8 + 4 * extents.len() + 12 + volume.data().len() * T::SIZE);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.push(extents.len() as u8);
    for e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in volume.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &v in volume.data() {
        v.put(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{}: needed {} bytes at offset {}, file has {}",
                self.what,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_volume<T: VoxelType>(bytes: &[u8], what: &str) -> Result<Volume<T>> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(4).map_err(|_| Error::BadMagic(what.into()))? != MAGIC {
        return Err(Error::BadMagic(what.into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE {
        return Err(Error::Malformed(format!("{what}: dtype code {dtype}, expected {}", T::DTYPE)));
    }
    let ndim = r.take(1)?[0] as usize;
    if ndim != 3 && ndim != 4 {
        return Err(Error::Malformed(format!("{what}: ndim {ndim}")));
    }
    let mut extents = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        extents.push(r.u32()? as usize);
    }
    let mut spacing = [0.0f64; 3];
    for s in spacing.iter_mut() {
        *s = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
    }
    let channels = if ndim == 4 { extents[0] } else { 1 };
    let dims = [extents[ndim - 3], extents[ndim - 2], extents[ndim - 1]];
    let count = channels
        .checked_mul(dims.iter().product::<usize>())
        .ok_or_else(|| Error::Malformed(format!("{what}: extents overflow")))?;
    let payload = r.take(count * T::SIZE)?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{what}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::take).collect();
    Volume::new(channels, dims, spacing, data).map_err(|e| Error::Malformed(format!("{what}: {e}")))
}

pub fn write_volume<T: VoxelType>(path: &Path, volume: &Volume<T>) -> Result<()> {
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume<T: VoxelType>(path: &Path) -> Result<Volume<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

/// Case indices of each subset, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, subset: Subset) -> &[usize] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    pub fn subset_of(&self, index: usize) -> Option<Subset> {
        [Subset::Train, Subset::Val, Subset::Test]
            .into_iter()
            .find(|&s| self.get(s).contains(&index))
    }
}

/// Percent ratios `(train, val, test)`.
///
/// Counts are `floor(n * train / 100)` and `floor(n * val / 100)`; the test
/// set takes every remaining case. The test percentage is only checked for
/// range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 55.0,
            val: 20.0,
            test: 30.0,
        }
    }
}

impl SplitRatios {
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(r.is_finite() && (0.0..=100.0).contains(r))) {
            return Err(Error::Config(format!("split ratios must lie in [0, 100], got {all:?}")));
        }
        if self.train + self.val > 100.0 {
            return Err(Error::Config(format!(
                "train + val ratios exceed 100: {} + {}",
                self.train, self.val
            )));
        }
        let train = (n as f64 * self.train / 100.0).floor() as usize;
        let val = (n as f64 * self.val / 100.0).floor() as usize;
        if train == 0 {
            return Err(Error::Config(format!("{n} cases leave no training case")));
        }
        Ok((train, val, n - train - val))
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test.
pub fn make_split(n: usize, ratios: SplitRatios, seed: u64) -> Result<Split> {
    let (nt, nv, _) = ratios.counts(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..nt].to_vec();
    let mut val = order[nt..nt + nv].to_vec();
    let mut test = order[nt + nv..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub subset: Subset,
}

/// A dataset directory: `manifest.csv` plus `images/` and `labels/`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
            if rec.len() != 4 {
                return Err(Error::Malformed(format!("{}: expected 4 columns", path.display())));
            }
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                image: PathBuf::from(&rec[1]),
                label: PathBuf::from(&rec[2]),
                subset: rec[3].parse()?,
            });
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("{} lists no cases", path.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self, subset: Subset) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.subset == subset)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<(Volume<f32>, LabelVolume)> {
        let image = read_volume(&self.root.join(&entry.image))?;
        let label: LabelVolume = read_volume(&self.root.join(&entry.label))?;
        if image.dims() != label.dims() {
            return Err(Error::Shape(format!(
                "{}: image {:?} vs label {:?}",
                entry.id,
                image.dims(),
                label.dims()
            )));
        }
        Ok((image, label))
    }
}

/// Generates every case of `spec` into `root` and writes the manifest.
pub fn write_dataset(root: &Path, spec: &SynthSpec, ratios: SplitRatios) -> Result<Dataset> {
    spec.validate()?;
    let split = make_split(spec.cases, ratios, spec.seed)?;
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(spec.cases);
    for index in 0..spec.cases {
        let case = generate_case(spec, index)?;
        let image = PathBuf::from("images").join(format!("{}.cv2v", case.id));
        let label = PathBuf::from("labels").join(format!("{}.cv2v", case.id));
        write_volume(&root.join(&image), &case.image)?;
        write_volume(&root.join(&label), &case.label)?;
        entries.push(ManifestEntry {
            id: case.id,
            image,
            label,
            subset: split.subset_of(index).expect("split covers every case"),
        });
    }
    let path = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Malformed(format!("{}: {e}", path.display()));
    w.write_record(["case_id", "image", "label", "split"]).map_err(csv_err)?;
    for e in &entries {
        w.write_record([
            e.id.as_str(),
            &e.image.to_string_lossy(),
            &e.label.to_string_lossy(),
            e.subset.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = Volume::new(1, [1, 1, 3], [1.0; 3], vec![2.0f32, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_intensity(&v).data(), &[0.0, 0.5, 1.0]);
        let u = Volume::new(1, [1, 1, 3], [1.0; 3], vec![0.0f32, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_intensity(&u), u);
        let c = Volume::new(1, [1, 1, 3], [1.0; 3], vec![3.0f32; 3]).unwrap();
        assert_eq!(normalize_intensity(&c).data(), &[0.0; 3]);
    }

    #[test]
    fn header_is_32_bytes() {
        let v = Volume::filled(1, [4, 4, 4], [1.0, 1.0, 2.0], 0.5f32);
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), 32 + 256);
        assert_eq!(&bytes[..4], b"CV2V");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 3);
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &2.0f32.to_le_bytes());
        assert_eq!(decode_volume::<f32>(&bytes, "mem").unwrap(), v);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let v = Volume::filled(1, [2, 2, 2], [1.0; 3], 3u8);
        let good = encode_volume(&v);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume::<u8>(&bad, "m"), Err(Error::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_volume::<u8>(&bad, "m"), Err(Error::BadVersion(9))));
        assert!(matches!(decode_volume::<u8>(&good[..good.len() - 1], "m"), Err(Error::Truncated(_))));
        assert!(matches!(decode_volume::<f32>(&good, "m"), Err(Error::Malformed(_))));
        assert!(matches!(decode_volume::<u8>(&good[..2], "m"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn split_counts() {
        let s = make_split(20, SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (11, 4, 5));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(s, make_split(20, SplitRatios::default(), 1).unwrap());
        let bad = SplitRatios {
            train: 80.0,
            val: 30.0,
            test: 0.0,
        };
        assert!(make_split(20, bad, 1).is_err());
    }

    #[test]
    fn generated_cases_are_valid() {
        let spec = SynthSpec {
            shape: [16, 16, 16],
            ..SynthSpec::default()
        };
        let a = generate_case(&spec, 3).unwrap();
        assert_eq!(a, generate_case(&spec, 3).unwrap());
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.label.data().iter().all(|&l| l < 3));
        assert!(a.label.data().contains(&2));
        assert_ne!(a.image, generate_case(&spec, 4).unwrap().image);
    }
}
