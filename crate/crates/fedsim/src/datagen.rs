//! Deterministic synthetic generator for three heterogeneous client datasets:
//! skewed sizes, a per-client intensity shift, and tumor labels on exactly
//! one client. Organ-only clients still have tumors in their images; the
//! tumor region is simply labeled as organ, which is what creates the
//! multi-task conflict between clients.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FedSimError, Result};
use crate::model::Batch;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ORGAN: u8 = 1;
pub const CLASS_TUMOR: u8 = 2;

const TUMOR_PROBABILITY: f64 = 0.7;
const ORGAN_INTENSITY: f64 = 0.5;
const TUMOR_EXTRA_INTENSITY: f64 = 0.3;

/// Recipe for one client's synthetic dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClientDatasetSpec {
    pub client_id: u32,
    pub n_total: usize,
    pub image_size: usize,
    pub has_tumor_labels: bool,
    pub intensity_shift: f64,
    pub noise_sigma: f64,
    pub organ_radius_range: (usize, usize),
    pub tumor_radius_range: (usize, usize),
    pub seed: u64,
}

/// One image with its per-pixel labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

/// A client's data, already split 60/20/20.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub height: usize,
    pub width: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub label_space: BTreeSet<u8>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    /// Borrows the given training samples as a model batch.
    pub fn train_batch(&self, indices: &[usize]) -> Result<Batch<'_>> {
        let images: Vec<&[f64]> = indices.iter().map(|&i| &self.train[i].image[..]).collect();
        let labels: Vec<&[u8]> = indices.iter().map(|&i| &self.train[i].labels[..]).collect();
        Batch::new(images, labels, self.height, self.width, &self.label_space)
    }
}

/// Tags keeping RNG streams for different purposes independent even when the
/// same (seed, stream) pair occurs.
pub(crate) const RNG_TAG_DATA: u64 = 1;
pub(crate) const RNG_TAG_SHUFFLE: u64 = 2;
pub(crate) const RNG_TAG_INIT: u64 = 3;

/// Derives an independent RNG stream from (seed, stream id, purpose tag).
pub(crate) fn derive_rng(seed: u64, stream: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&tag.to_le_bytes());
    key[24..32].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn validate(spec: &ClientDatasetSpec) -> Result<()> {
    if spec.n_total < 5 {
        return Err(FedSimError::Usage(format!(
            "n_total {} < 5",
            spec.n_total
        )));
    }
    let (o_min, o_max) = spec.organ_radius_range;
    let (t_min, t_max) = spec.tumor_radius_range;
    if o_min < 2 || o_min > o_max {
        return Err(FedSimError::Usage("bad organ radius range".into()));
    }
    if t_min < 1 || t_min > t_max {
        return Err(FedSimError::Usage("bad tumor radius range".into()));
    }
    if 2 * o_max + 1 > spec.image_size {
        return Err(FedSimError::Usage(format!(
            "organ radius {} does not fit image size {}",
            o_max, spec.image_size
        )));
    }
    if t_max + 1 > o_min {
        return Err(FedSimError::Usage(format!(
            "tumor radius {} cannot sit strictly inside the smallest organ radius {}",
            t_max, o_min
        )));
    }
    Ok(())
}

fn generate_sample(spec: &ClientDatasetSpec, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.image_size;
    let rx = rng.random_range(spec.organ_radius_range.0..=spec.organ_radius_range.1);
    let ry = rng.random_range(spec.organ_radius_range.0..=spec.organ_radius_range.1);
    let cx = rng.random_range(rx..=(n - 1 - rx));
    let cy = rng.random_range(ry..=(n - 1 - ry));

    let has_tumor = rng.random_range(0.0..1.0) < TUMOR_PROBABILITY;
    let mut tumor: Option<(usize, usize, usize)> = None; // (tx, ty, rt)
    if has_tumor {
        let min_r = rx.min(ry);
        let rt = rng
            .random_range(spec.tumor_radius_range.0..=spec.tumor_radius_range.1)
            .min(min_r - 1);
        // Jittered placement; the dilated tumor disc must stay inside the
        // organ ellipse so the tumor is strictly interior.
        let m = min_r.saturating_sub(rt + 1) as i64;
        let mut center = (cx, cy);
        for _ in 0..8 {
            let jx = rng.random_range(-m..=m);
            let jy = rng.random_range(-m..=m);
            let wx = (jx.unsigned_abs() as usize + rt + 1) as f64 / rx as f64;
            let wy = (jy.unsigned_abs() as usize + rt + 1) as f64 / ry as f64;
            if wx * wx + wy * wy <= 1.0 {
                center = ((cx as i64 + jx) as usize, (cy as i64 + jy) as usize);
                break;
            }
        }
        tumor = Some((center.0, center.1, rt));
    }

    let mut image = vec![0.0f64; n * n];
    let mut labels = vec![CLASS_BACKGROUND; n * n];
    for y in 0..n {
        for x in 0..n {
            // One noise draw per pixel keeps the stream layout fixed whether
            // or not the pixel ends up inside a region.
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
            let ex = (x as f64 - cx as f64) / rx as f64;
            let ey = (y as f64 - cy as f64) / ry as f64;
            let in_organ = ex * ex + ey * ey <= 1.0;
            let in_tumor = tumor.is_some_and(|(tx, ty, rt)| {
                let dx = x as f64 - tx as f64;
                let dy = y as f64 - ty as f64;
                dx * dx + dy * dy <= (rt * rt) as f64
            });
            let v = if in_tumor {
                ORGAN_INTENSITY + TUMOR_EXTRA_INTENSITY + spec.intensity_shift
            } else if in_organ {
                ORGAN_INTENSITY + spec.intensity_shift
            } else {
                noise
            };
            if in_tumor {
                labels[y * n + x] = if spec.has_tumor_labels {
                    CLASS_TUMOR
                } else {
                    CLASS_ORGAN
                };
            } else if in_organ {
                labels[y * n + x] = CLASS_ORGAN;
            }
            image[y * n + x] = v.clamp(-1.0, 1.0);
        }
    }
    Sample { image, labels }
}

/// Generates a client dataset, fully determined by the spec (including seed).
pub fn generate(spec: &ClientDatasetSpec) -> Result<ClientDataset> {
    validate(spec)?;
    let mut rng = derive_rng(spec.seed, spec.client_id as u64, RNG_TAG_DATA);
    let samples: Vec<Sample> = (0..spec.n_total)
        .map(|_| generate_sample(spec, &mut rng))
        .collect();

    let n_train = (spec.n_total as f64 * 0.6).floor() as usize;
    let n_val = (spec.n_total as f64 * 0.2).floor() as usize;
    let mut it = samples.into_iter();
    let train: Vec<Sample> = it.by_ref().take(n_train).collect();
    let val: Vec<Sample> = it.by_ref().take(n_val).collect();
    let test: Vec<Sample> = it.collect();

    let mut label_space: BTreeSet<u8> = [CLASS_BACKGROUND, CLASS_ORGAN].into_iter().collect();
    if spec.has_tumor_labels {
        label_space.insert(CLASS_TUMOR);
    }
    Ok(ClientDataset {
        client_id: spec.client_id,
        height: spec.image_size,
        width: spec.image_size,
        train,
        val,
        test,
        label_space,
    })
}

/// The default three-client benchmark: sizes 80/275/30 (train 48/165/18),
/// tumor labels only on the large middle client, and the strongest domain
/// shift on the smallest client (dimmest organs, cleanest images). The two
/// big clients carry heavy acquisition noise, so a model trained only on
/// them places its decision boundary above the small client's dim organs.
pub fn default_benchmark(seed: u64) -> Vec<ClientDatasetSpec> {
    let base = ClientDatasetSpec {
        client_id: 0,
        n_total: 80,
        image_size: 32,
        has_tumor_labels: false,
        intensity_shift: 0.0,
        noise_sigma: 2.0,
        organ_radius_range: (5, 9),
        tumor_radius_range: (2, 4),
        seed,
    };
    vec![
        ClientDatasetSpec {
            client_id: 0,
            n_total: 80,
            has_tumor_labels: false,
            intensity_shift: 0.0,
            noise_sigma: 0.3,
            tumor_radius_range: (1, 1),
            ..base.clone()
        },
        ClientDatasetSpec {
            client_id: 1,
            n_total: 275,
            has_tumor_labels: true,
            intensity_shift: 0.1,
            noise_sigma: 0.3,
            tumor_radius_range: (3, 4),
            ..base.clone()
        },
        ClientDatasetSpec {
            client_id: 2,
            n_total: 30,
            has_tumor_labels: false,
            intensity_shift: -0.15,
            noise_sigma: 0.12,
            tumor_radius_range: (1, 1),
            ..base
        },
    ]
}

// ---------------------------------------------------------------------------
// Flat binary export/import so a dataset can be pinned across runs.
//
// Layout (all integers big-endian):
//   magic "FSDS", version u32 (=1), client_count u32
//   per client:
//     client_id u32, height u32, width u32
//     label_space: count u32, then count x u8
//     train/val/test counts: 3 x u32
//     samples in train, val, test order:
//       image  H*W x f64 (IEEE-754 BE)
//       labels H*W x u8
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"FSDS";
const DATASET_VERSION: u32 = 1;

pub fn export_datasets(datasets: &[ClientDataset], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_be_bytes())?;
    w.write_all(&(datasets.len() as u32).to_be_bytes())?;
    for ds in datasets {
        w.write_all(&ds.client_id.to_be_bytes())?;
        w.write_all(&(ds.height as u32).to_be_bytes())?;
        w.write_all(&(ds.width as u32).to_be_bytes())?;
        w.write_all(&(ds.label_space.len() as u32).to_be_bytes())?;
        for &c in &ds.label_space {
            w.write_all(&[c])?;
        }
        for split in [&ds.train, &ds.val, &ds.test] {
            w.write_all(&(split.len() as u32).to_be_bytes())?;
        }
        for split in [&ds.train, &ds.val, &ds.test] {
            for s in split {
                for &v in &s.image {
                    w.write_all(&v.to_be_bytes())?;
                }
                w.write_all(&s.labels)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn import_datasets(path: &Path) -> Result<Vec<ClientDataset>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(FedSimError::Encoding("bad dataset magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(FedSimError::Encoding(format!(
            "unsupported dataset version {version}"
        )));
    }
    let client_count = read_u32(&mut r)? as usize;
    let mut datasets = Vec::with_capacity(client_count);
    for _ in 0..client_count {
        let client_id = read_u32(&mut r)?;
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let space_len = read_u32(&mut r)? as usize;
        let mut label_space = BTreeSet::new();
        for _ in 0..space_len {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            label_space.insert(b[0]);
        }
        let counts = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
        for &count in &counts {
            let mut split = Vec::with_capacity(count);
            for _ in 0..count {
                let mut image = vec![0.0f64; height * width];
                for v in image.iter_mut() {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    *v = f64::from_be_bytes(b);
                }
                let mut labels = vec![0u8; height * width];
                r.read_exact(&mut labels)?;
                split.push(Sample { image, labels });
            }
            splits.push(split);
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        datasets.push(ClientDataset {
            client_id,
            height,
            width,
            train,
            val,
            test,
            label_space,
        });
    }
    Ok(datasets)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn gen_default() -> Vec<ClientDataset> {
        default_benchmark(42)
            .iter()
            .map(|s| generate(s).unwrap())
            .collect()
    }

    #[test]
    fn test_generation_is_deterministic() {
        let spec = &default_benchmark(7)[1];
        let a = generate(spec).unwrap();
        let b = generate(spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_organ_only_clients_have_no_tumor_labels() {
        let datasets = gen_default();
        for ds in [&datasets[0], &datasets[2]] {
            for split in [&ds.train, &ds.val, &ds.test] {
                for s in split {
                    assert!(s.labels.iter().all(|&l| l != CLASS_TUMOR));
                }
            }
            assert!(!ds.label_space.contains(&CLASS_TUMOR));
        }
        assert!(datasets[1].label_space.contains(&CLASS_TUMOR));
    }

    #[test]
    fn test_default_benchmark_split_sizes() {
        let datasets = gen_default();
        let train: Vec<usize> = datasets.iter().map(|d| d.n_train()).collect();
        assert_eq!(train, vec![48, 165, 18]);
        let val: Vec<usize> = datasets.iter().map(|d| d.val.len()).collect();
        assert_eq!(val, vec![16, 55, 6]);
        let test: Vec<usize> = datasets.iter().map(|d| d.test.len()).collect();
        assert_eq!(test, vec![16, 55, 6]);
    }

    #[test]
    fn test_organ_nonempty_and_tumor_strictly_inside() {
        let datasets = gen_default();
        for ds in &datasets {
            for split in [&ds.train, &ds.val, &ds.test] {
                for s in split {
                    assert!(s.labels.contains(&CLASS_ORGAN));
                    // every 4-neighbor of a tumor pixel is organ or tumor
                    let n = ds.width;
                    for y in 0..ds.height {
                        for x in 0..n {
                            if s.labels[y * n + x] != CLASS_TUMOR {
                                continue;
                            }
                            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                assert!(
                                    yy >= 0 && yy < ds.height as i64 && xx >= 0 && xx < n as i64,
                                    "tumor touches the border"
                                );
                                let l = s.labels[yy as usize * n + xx as usize];
                                assert_ne!(l, CLASS_BACKGROUND, "tumor touches background");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn test_images_clipped_and_splits_disjoint() {
        let datasets = gen_default();
        for ds in &datasets {
            let mut seen: HashSet<Vec<u64>> = HashSet::new();
            for split in [&ds.train, &ds.val, &ds.test] {
                for s in split {
                    assert!(s.image.iter().all(|&v| (-1.0..=1.0).contains(&v)));
                    let key: Vec<u64> = s.image.iter().map(|v| v.to_bits()).collect();
                    assert!(seen.insert(key), "duplicate image across splits");
                }
            }
        }
    }

    #[test]
    fn test_intensity_shift_visible_in_sample_means() {
        let datasets = gen_default();
        let mean_of = |ds: &ClientDataset| -> f64 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for s in &ds.test {
                sum += s.image.iter().sum::<f64>();
                count += s.image.len();
            }
            sum / count as f64
        };
        let foreground_fraction = |ds: &ClientDataset| -> f64 {
            let mut fg = 0usize;
            let mut count = 0usize;
            for s in &ds.test {
                fg += s.labels.iter().filter(|&&l| l != CLASS_BACKGROUND).count();
                count += s.labels.len();
            }
            fg as f64 / count as f64
        };
        // client C sits 0.15 below client A on foreground pixels
        let gap = mean_of(&datasets[0]) - mean_of(&datasets[2]);
        let expected = 0.15 * 0.5 * (foreground_fraction(&datasets[0]) + foreground_fraction(&datasets[2]));
        assert!(
            (gap - expected).abs() < 0.02,
            "gap {gap} vs expected {expected}"
        );
    }

    #[test]
    fn test_radius_validation() {
        let mut spec = default_benchmark(1)[0].clone();
        spec.organ_radius_range = (5, 20);
        assert!(generate(&spec).is_err());
        let mut spec2 = default_benchmark(1)[0].clone();
        spec2.tumor_radius_range = (5, 5);
        assert!(generate(&spec2).is_err());
        let mut spec3 = default_benchmark(1)[0].clone();
        spec3.n_total = 3;
        assert!(generate(&spec3).is_err());
    }

    #[test]
    fn test_export_import_roundtrip() {
        let datasets = gen_default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.fsds");
        export_datasets(&datasets, &path).unwrap();
        let back = import_datasets(&path).unwrap();
        assert_eq!(datasets, back);
    }
}
