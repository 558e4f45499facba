//! Dataset ingestion and synthesis: IDX files, unit-ball samples, linear
//! regression pairs, synthetic classification tasks and client partitioners.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::svd::Matrix;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetTargets {
    Labels(Vec<usize>),
    Values(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Tensor,
    pub targets: DatasetTargets,
    /// Class count for labeled data; zero for regression.
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.targets {
            DatasetTargets::Labels(l) => Ok(l),
            DatasetTargets::Values(_) => Err(Error::Dataset("expected labeled data".into())),
        }
    }

    pub fn values(&self) -> Result<&Tensor> {
        match &self.targets {
            DatasetTargets::Values(v) => Ok(v),
            DatasetTargets::Labels(_) => Err(Error::Dataset("expected regression data".into())),
        }
    }

    /// Rows selected by index, preserving target kind.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.gather(indices);
        let targets = match &self.targets {
            DatasetTargets::Labels(l) => {
                DatasetTargets::Labels(indices.iter().map(|&i| l[i]).collect())
            }
            DatasetTargets::Values(v) => DatasetTargets::Values(v.gather(indices)),
        };
        Ok(Dataset {
            name: self.name.clone(),
            inputs,
            targets,
            classes: self.classes,
        })
    }
}

/// Per-client index lists into a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

fn read_be_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(Error::Dataset(format!("truncated at byte {}", *pos)));
    }
    let v = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

/// Load an IDX image/label pair. Pixels are scaled to [0, 1]; labels are
/// validated against `classes`.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let mut pos = 0usize;
    let magic = read_be_u32(&image_bytes, &mut pos)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&image_bytes, &mut pos)? as usize;
    let rows = read_be_u32(&image_bytes, &mut pos)? as usize;
    let cols = read_be_u32(&image_bytes, &mut pos)? as usize;
    let need = count * rows * cols;
    if image_bytes.len() < pos + need {
        return Err(Error::Dataset(format!(
            "truncated at byte {}: need {} pixel bytes",
            image_bytes.len(),
            need
        )));
    }
    let pixels: Vec<f64> = image_bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();

    let label_bytes = read_file(labels_path)?;
    let mut lpos = 0usize;
    let lmagic = read_be_u32(&label_bytes, &mut lpos)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_be_u32(&label_bytes, &mut lpos)? as usize;
    if lcount != count {
        return Err(Error::Dataset(format!(
            "{count} images but {lcount} labels"
        )));
    }
    if label_bytes.len() < lpos + lcount {
        return Err(Error::Dataset(format!(
            "truncated at byte {}: need {lcount} label bytes",
            label_bytes.len()
        )));
    }
    let labels: Vec<usize> = label_bytes[lpos..lpos + lcount]
        .iter()
        .map(|&b| b as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(Dataset {
        name: "idx".into(),
        inputs: Tensor::from_vec(&[count, 1, rows, cols], pixels)?,
        targets: DatasetTargets::Labels(labels),
        classes,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Write a dataset of [0,1] images back out as an IDX pair.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.inputs.shape();
    let (rows, cols) = match shape {
        [_, 1, r, c] => (*r, *c),
        _ => {
            return Err(Error::Dataset(format!(
                "IDX export needs single-channel images, got {shape:?}"
            )))
        }
    };
    let labels = dataset.labels()?;
    let mut img = Vec::with_capacity(16 + dataset.inputs.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Uniform samples from the solid n-dimensional unit ball: gaussian direction
/// normalized, radius `U^(1/n)`.
pub fn sample_unit_ball(n: usize, count: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(count * n);
    for _ in 0..count {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A zero vector has probability zero; guard anyway.
        let norm = if norm == 0.0 { 1.0 } else { norm };
        let radius = rng.next_f64().powf(1.0 / n as f64);
        for v in &mut dir {
            *v = *v / norm * radius;
        }
        data.extend_from_slice(&dir);
    }
    Tensor::from_vec(&[count, n], data).expect("shape matches construction")
}

/// Regression pairs `(x, A x)` with `x` uniform in the unit ball.
pub fn make_linear_task(a: &Matrix, count: usize, rng: &mut Rng) -> Dataset {
    let n = a.cols();
    let inputs = sample_unit_ball(n, count, rng);
    let mut targets = Vec::with_capacity(count * a.rows());
    for s in 0..count {
        targets.extend(a.mul_vec(inputs.sample(s)));
    }
    Dataset {
        name: "linear".into(),
        inputs,
        targets: DatasetTargets::Values(
            Tensor::from_vec(&[count, a.rows()], targets).expect("shape matches"),
        ),
        classes: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Blobs,
    Rings,
}

/// Separable-with-noise synthetic classification data. Classes are assigned
/// round-robin so counts stay balanced within one.
pub fn make_classification_task(
    mode: TaskMode,
    classes: usize,
    dim: usize,
    count: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig("need at least two dimensions".into()));
    }
    let mut inputs = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    match mode {
        TaskMode::Blobs => {
            // Deterministic centroids: unit directions scaled away from the
            // origin, one per class.
            let mut centroids = Vec::with_capacity(classes);
            for _ in 0..classes {
                let mut c: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
                let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                for v in &mut c {
                    *v = *v / norm * 3.0;
                }
                centroids.push(c);
            }
            for s in 0..count {
                let class = s % classes;
                for d in 0..dim {
                    inputs.push(centroids[class][d] + noise * rng.next_gaussian());
                }
                labels.push(class);
            }
        }
        TaskMode::Rings => {
            for s in 0..count {
                let class = s % classes;
                let radius = 1.0 + 2.0 * class as f64 + noise * rng.next_gaussian();
                let angle = rng.gen_range_f64(0.0, std::f64::consts::TAU);
                inputs.push(radius * angle.cos());
                inputs.push(radius * angle.sin());
                for _ in 2..dim {
                    inputs.push(noise * rng.next_gaussian());
                }
                labels.push(class);
            }
        }
    }
    Ok(Dataset {
        name: format!("{mode:?}").to_lowercase(),
        inputs: Tensor::from_vec(&[count, dim], inputs)?,
        targets: DatasetTargets::Labels(labels),
        classes,
    })
}

/// Disjoint, exhaustive, seeded random split into near-equal shards.
pub fn partition_iid(len: usize, num_clients: usize, rng: &mut Rng) -> Result<Partition> {
    if num_clients == 0 || num_clients > len {
        return Err(Error::InvalidConfig(format!(
            "cannot split {len} samples into {num_clients} shards"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    let base = len / num_clients;
    let extra = len % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut cursor = 0usize;
    for i in 0..num_clients {
        let size = base + usize::from(i < extra);
        shards.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(Partition { shards })
}

/// Label-skewed split: per-client class proportions drawn from a symmetric
/// Dirichlet, then each class's samples allocated by largest remainder.
/// Resamples up to ten times if some client ends up empty.
pub fn partition_label_skew(
    labels: &[usize],
    classes: usize,
    num_clients: usize,
    concentration: f64,
    rng: &mut Rng,
) -> Result<Partition> {
    if concentration <= 0.0 {
        return Err(Error::InvalidConfig(
            "concentration must be positive".into(),
        ));
    }
    for _attempt in 0..10 {
        let mut proportions = Vec::with_capacity(num_clients);
        for _ in 0..num_clients {
            proportions.push(dirichlet(concentration, classes, rng));
        }
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class in 0..classes {
            let mut members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            rng.shuffle(&mut members);
            // Client weights for this class, renormalized.
            let weights: Vec<f64> = proportions.iter().map(|p| p[class]).collect();
            let quotas = largest_remainder(&weights, members.len());
            let mut cursor = 0usize;
            for (client, &q) in quotas.iter().enumerate() {
                shards[client].extend_from_slice(&members[cursor..cursor + q]);
                cursor += q;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(Partition { shards });
        }
    }
    Err(Error::Dataset(
        "label-skew split left a client empty after 10 attempts".into(),
    ))
}

/// Integer quotas proportional to weights, summing exactly to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut q = vec![0usize; weights.len()];
        if let Some(first) = q.first_mut() {
            *first = total;
        }
        return q;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

fn dirichlet(concentration: f64, classes: usize, rng: &mut Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..classes).map(|_| gamma_sample(concentration, rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / classes as f64; classes];
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

/// Marsaglia-Tsang gamma sampler (unit scale); small shapes route through the
/// `G(a) = G(a + 1) * U^(1/a)` boost.
fn gamma_sample(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let g = gamma_sample(shape + 1.0, rng);
        let u = rng.next_f64().max(f64::MIN_POSITIVE);
        return g * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.next_gaussian();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.next_f64().max(f64::MIN_POSITIVE);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// Seven-segment digit glyphs rendered at 28x28 with jitter and pixel noise:
/// a self-contained stand-in for scanned-digit data.
pub fn synthesize_digits(count: usize, noise: f64, rng: &mut Rng) -> Dataset {
    // Segment endpoints on a 16x24 glyph box: (x0, y0, x1, y1).
    const SEGMENTS: [(f64, f64, f64, f64); 7] = [
        (2.0, 2.0, 14.0, 2.0),   // a: top
        (14.0, 2.0, 14.0, 12.0), // b: top right
        (14.0, 12.0, 14.0, 22.0), // c: bottom right
        (2.0, 22.0, 14.0, 22.0), // d: bottom
        (2.0, 12.0, 2.0, 22.0),  // e: bottom left
        (2.0, 2.0, 2.0, 12.0),   // f: top left
        (2.0, 12.0, 14.0, 12.0), // g: middle
    ];
    const GLYPHS: [[bool; 7]; 10] = [
        [true, true, true, true, true, true, false],    // 0
        [false, true, true, false, false, false, false], // 1
        [true, true, false, true, true, false, true],   // 2
        [true, true, true, true, false, false, true],   // 3
        [false, true, true, false, false, true, true],  // 4
        [true, false, true, true, false, true, true],   // 5
        [true, false, true, true, true, true, true],    // 6
        [true, true, true, false, false, false, false], // 7
        [true, true, true, true, true, true, true],     // 8
        [true, true, true, true, false, true, true],    // 9
    ];
    let mut data = Vec::with_capacity(count * 28 * 28);
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let digit = s % 10;
        let dx = 6.0 + rng.gen_range_f64(-2.0, 2.0);
        let dy = 2.0 + rng.gen_range_f64(-1.5, 1.5);
        let thickness = rng.gen_range_f64(1.2, 2.2);
        let scale = rng.gen_range_f64(0.85, 1.1);
        for py in 0..28 {
            for px in 0..28 {
                let gx = (px as f64 - dx) / scale;
                let gy = (py as f64 - dy) / scale;
                let mut v: f64 = 0.0;
                for (si, seg) in SEGMENTS.iter().enumerate() {
                    if !GLYPHS[digit][si] {
                        continue;
                    }
                    let d = point_segment_distance(gx, gy, seg.0, seg.1, seg.2, seg.3);
                    v = v.max((thickness - d).clamp(0.0, 1.0));
                }
                if noise > 0.0 {
                    v += noise * rng.next_gaussian();
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(digit);
    }
    Dataset {
        name: "synth_digits".into(),
        inputs: Tensor::from_vec(&[count, 1, 28, 28], data).expect("shape matches"),
        targets: DatasetTargets::Labels(labels),
        classes: 10,
    }
}

fn point_segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let vx = x1 - x0;
    let vy = y1 - y0;
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((px - x0) * vx + (py - y0) * vy) / len2
    }
    .clamp(0.0, 1.0);
    let cx = x0 + t * vx;
    let cy = y0 + t * vy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    #[test]
    fn unit_ball_samples_stay_inside() {
        let mut rng = Rng::new(1);
        let samples = sample_unit_ball(5, 2000, &mut rng);
        for s in 0..2000 {
            let norm: f64 = samples.sample(s).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn unit_ball_mean_is_near_zero() {
        let mut rng = Rng::new(2);
        let n = 10_000;
        let samples = sample_unit_ball(5, n, &mut rng);
        for d in 0..5 {
            let mean: f64 = (0..n).map(|s| samples.sample(s)[d]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "dim {d} mean {mean}");
        }
    }

    #[test]
    fn unit_ball_radial_cdf_follows_power_law() {
        // Kolmogorov-Smirnov against F(r) = r^5 at significance 0.01.
        let mut rng = Rng::new(3);
        let n = 10_000usize;
        let samples = sample_unit_ball(5, n, &mut rng);
        let mut radii: Vec<f64> = (0..n)
            .map(|s| samples.sample(s).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        radii.sort_by(f64::total_cmp);
        let mut d_stat: f64 = 0.0;
        for (i, &r) in radii.iter().enumerate() {
            let cdf = r.powi(5);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.6276 / (n as f64).sqrt();
        assert!(d_stat < critical, "KS statistic {d_stat} >= {critical}");
    }

    #[test]
    fn linear_task_identity_map_reproduces_inputs() {
        let mut rng = Rng::new(4);
        let a = Matrix::identity(4);
        let ds = make_linear_task(&a, 50, &mut rng);
        assert_eq!(ds.values().unwrap().data(), ds.inputs.data());
    }

    #[test]
    fn linear_task_diagonal_action_on_basis() {
        let a = Matrix::diagonal(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let y = a.mul_vec(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(y, vec![5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn blobs_without_noise_are_nearest_centroid_separable() {
        let mut rng = Rng::substream(5, StreamId::Data, &[0]);
        let ds = make_classification_task(TaskMode::Blobs, 4, 6, 200, 0.0, &mut rng).unwrap();
        // Zero noise puts every sample exactly on its centroid: nearest
        // centroid (here: first occurrence of each class) is perfect.
        let labels = ds.labels().unwrap();
        let mut centroids: Vec<Option<Vec<f64>>> = vec![None; 4];
        for s in 0..ds.len() {
            let c = labels[s];
            if centroids[c].is_none() {
                centroids[c] = Some(ds.inputs.sample(s).to_vec());
            }
        }
        for s in 0..ds.len() {
            let x = ds.inputs.sample(s);
            let mut best = (f64::INFINITY, 0usize);
            for (c, cent) in centroids.iter().enumerate() {
                let cent = cent.as_ref().unwrap();
                let d: f64 = x.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assert_eq!(best.1, labels[s]);
        }
    }

    #[test]
    fn classification_classes_balanced_within_one() {
        let mut rng = Rng::new(6);
        let ds = make_classification_task(TaskMode::Rings, 3, 2, 100, 0.05, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for &l in ds.labels().unwrap() {
            counts[l] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_classification_task(TaskMode::Blobs, 3, 4, 60, 0.3, &mut Rng::new(9)).unwrap();
        let b = make_classification_task(TaskMode::Blobs, 3, 4, 60, 0.3, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iid_partition_is_disjoint_and_exhaustive() {
        let mut rng = Rng::new(7);
        let part = partition_iid(101, 10, &mut rng).unwrap();
        let sizes: Vec<usize> = part.shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 11).count(), 1);
        assert_eq!(sizes.iter().filter(|&&s| s == 10).count(), 9);
        let mut all: Vec<usize> = part.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn even_split_gives_equal_shards() {
        let mut rng = Rng::new(8);
        let part = partition_iid(100, 10, &mut rng).unwrap();
        assert!(part.shards.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn label_skew_partition_properties() {
        let mut rng = Rng::new(10);
        let ds = make_classification_task(TaskMode::Blobs, 4, 4, 400, 0.5, &mut rng).unwrap();
        let labels = ds.labels().unwrap();
        let part = partition_label_skew(labels, 4, 8, 0.5, &mut rng).unwrap();
        let mut all: Vec<usize> = part.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        assert!(part.shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn high_concentration_approaches_iid_proportions() {
        let mut rng = Rng::new(11);
        let ds = make_classification_task(TaskMode::Blobs, 2, 4, 1000, 0.5, &mut rng).unwrap();
        let labels = ds.labels().unwrap();
        let part = partition_label_skew(labels, 2, 4, 1e6, &mut rng).unwrap();
        for shard in &part.shards {
            let ones = shard.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let frac = ones / shard.len() as f64;
            assert!((frac - 0.5).abs() < 0.05, "class fraction {frac}");
        }
    }

    #[test]
    fn largest_remainder_quota_example() {
        // Shares (0.1, 0.1, 0.1, 0.1, 0.6) over 10 clients: (1, 1, 1, 1, 6).
        let q = largest_remainder(&[0.1, 0.1, 0.1, 0.1, 0.6], 10);
        assert_eq!(q, vec![1, 1, 1, 1, 6]);
    }

    #[test]
    fn digits_roundtrip_through_idx_files() {
        let dir = std::env::temp_dir().join("fjord_idx_test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(12);
        let ds = synthesize_digits(40, 0.05, &mut rng);
        let img = dir.join("images-idx3-ubyte");
        let lab = dir.join("labels-idx1-ubyte");
        write_idx(&ds, &img, &lab).unwrap();
        let loaded = load_idx(&img, &lab, 10).unwrap();
        assert_eq!(loaded.len(), 40);
        assert_eq!(loaded.inputs.shape(), &[40, 1, 28, 28]);
        assert_eq!(loaded.labels().unwrap(), ds.labels().unwrap());
        // Quantization to bytes costs at most half a step.
        for (a, b) in loaded.inputs.data().iter().zip(ds.inputs.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        // Truncated image file reports the byte offset.
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_idx(&img, &lab, 10).unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn idx_label_out_of_range_is_rejected() {
        let dir = std::env::temp_dir().join("fjord_idx_badlabel");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(13);
        let ds = synthesize_digits(10, 0.0, &mut rng);
        let img = dir.join("images-idx3-ubyte");
        let lab = dir.join("labels-idx1-ubyte");
        write_idx(&ds, &img, &lab).unwrap();
        let err = load_idx(&img, &lab, 5).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn all_zero_image_stays_zero_after_scaling() {
        let dir = std::env::temp_dir().join("fjord_idx_zero");
        fs::create_dir_all(&dir).unwrap();
        let ds = Dataset {
            name: "zero".into(),
            inputs: Tensor::zeros(&[1, 1, 28, 28]),
            targets: DatasetTargets::Labels(vec![0]),
            classes: 10,
        };
        let img = dir.join("images-idx3-ubyte");
        let lab = dir.join("labels-idx1-ubyte");
        write_idx(&ds, &img, &lab).unwrap();
        let loaded = load_idx(&img, &lab, 10).unwrap();
        assert!(loaded.inputs.data().iter().all(|&v| v == 0.0));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn digit_glyphs_are_distinct() {
        let mut rng = Rng::new(14);
        let ds = synthesize_digits(10, 0.0, &mut rng);
        // No two noiseless glyph renderings of different digits coincide.
        for a in 0..10 {
            for b in (a + 1)..10 {
                let diff: f64 = ds
                    .inputs
                    .sample(a)
                    .iter()
                    .zip(ds.inputs.sample(b))
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 1.0, "digits {a} and {b} look identical");
            }
        }
    }
}
