//! Multi-view dataset ingestion, min-max normalization from training
//! statistics, one-vs-all evaluation splits, and synthetic data generation.
//!
//! On-disk layout: a directory with `manifest.json` describing the views,
//! a labels file (one integer per line), and optionally a split file (one
//! `train`/`test` token per line). View matrices are CSV (decimal text) or
//! binary (magic "MVOCC1", u32 rows, u32 dim, little-endian f32 row-major).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub name: String,
    pub view_names: Vec<String>,
    /// One [n, d_v] matrix per view, shared row order.
    pub views: Vec<Tensor>,
    /// Class label per row.
    pub labels: Vec<i64>,
    /// Predefined train/test assignment, if the source ships one.
    pub split: Option<Vec<SplitTag>>,
}

impl MultiViewDataset {
    pub fn new(
        name: String,
        view_names: Vec<String>,
        views: Vec<Tensor>,
        labels: Vec<i64>,
        split: Option<Vec<SplitTag>>,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Arity(format!(
                "dataset '{name}' needs at least 2 views, got {}",
                views.len()
            )));
        }
        if view_names.len() != views.len() {
            return Err(Error::Arity("one name per view required".into()));
        }
        let (n, _) = views[0].dims2()?;
        for (vn, v) in view_names.iter().zip(&views) {
            let (rows, _) = v.dims2()?;
            if rows != n {
                return Err(Error::Data(format!(
                    "row-count mismatch: view '{}' has {} rows, view '{}' has {}",
                    view_names[0], n, vn, rows
                )));
            }
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "label count {} does not match row count {n}",
                labels.len()
            )));
        }
        if let Some(s) = &split {
            if s.len() != n {
                return Err(Error::Data(format!(
                    "split count {} does not match row count {n}",
                    s.len()
                )));
            }
        }
        Ok(Self {
            name,
            view_names,
            views,
            labels,
            split,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.views[0].dims2().map(|(n, _)| n).unwrap_or(0)
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views
            .iter()
            .map(|v| v.dims2().map(|(_, d)| d).unwrap_or(0))
            .collect()
    }

    /// Distinct class labels in order of first appearance.
    pub fn classes(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for &l in &self.labels {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    name: String,
    dim: usize,
    file: String,
    format: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    views: Vec<ViewEntry>,
    labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_file: Option<String>,
}

const BIN_MAGIC: &[u8; 6] = b"MVOCC1";

fn load_csv_view(path: &Path, dim: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut width = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: cannot parse '{}' as a number",
                    path.display(),
                    lineno + 1,
                    field.trim()
                ))
            })?;
            data.push(v);
            width += 1;
        }
        if width != dim {
            return Err(Error::Data(format!(
                "{}: line {}: expected {dim} columns, found {width}",
                path.display(),
                lineno + 1
            )));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Tensor::new(vec![rows, dim], data)
}

fn load_binary_view(path: &Path, dim: usize) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 14 || &bytes[..6] != BIN_MAGIC {
        return Err(Error::Data(format!(
            "{}: missing MVOCC1 magic header",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if cols != dim {
        return Err(Error::Data(format!(
            "{}: header dim {cols} disagrees with manifest dim {dim}",
            path.display()
        )));
    }
    let want = 14 + rows * cols * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "{}: expected {want} bytes for {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| {
            Error::Data(format!(
                "{}: line {}: cannot parse '{line}' as an integer label",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    Ok(out)
}

fn load_split(path: &Path) -> Result<Vec<SplitTag>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        match line.trim().to_ascii_lowercase().as_str() {
            "" => continue,
            "train" => out.push(SplitTag::Train),
            "test" => out.push(SplitTag::Test),
            other => {
                return Err(Error::Data(format!(
                    "{}: line {}: expected 'train' or 'test', found '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Load a dataset directory via its `manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut views = Vec::new();
    let mut view_names = Vec::new();
    for entry in &manifest.views {
        let path = dir.join(&entry.file);
        let t = match entry.format.as_str() {
            "csv" => load_csv_view(&path, entry.dim)?,
            "binary" => load_binary_view(&path, entry.dim)?,
            other => {
                return Err(Error::Data(format!(
                    "view '{}': unknown format '{other}' (expected csv or binary)",
                    entry.name
                )))
            }
        };
        views.push(t);
        view_names.push(entry.name.clone());
    }
    let labels = load_labels(&dir.join(&manifest.labels_file))?;
    let split = match &manifest.split_file {
        Some(f) => Some(load_split(&dir.join(f))?),
        None => None,
    };
    MultiViewDataset::new(manifest.name, view_names, views, labels, split)
}

/// Write a dataset directory (manifest + per-view files + labels + split).
pub fn save_dataset(ds: &MultiViewDataset, dir: &Path, format: &str) -> Result<()> {
    if format != "csv" && format != "binary" {
        return Err(Error::Config(format!(
            "unknown dataset format '{format}' (expected csv or binary)"
        )));
    }
    fs::create_dir_all(dir)?;
    let ext = if format == "csv" { "csv" } else { "bin" };
    let mut entries = Vec::new();
    for (name, view) in ds.view_names.iter().zip(&ds.views) {
        let (rows, dim) = view.dims2()?;
        let file = format!("{name}.{ext}");
        let path = dir.join(&file);
        if format == "csv" {
            let mut out = String::new();
            for i in 0..rows {
                let fields: Vec<String> = view.row(i).iter().map(|v| format!("{v}")).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            fs::write(&path, out)?;
        } else {
            let mut bytes = Vec::with_capacity(14 + rows * dim * 4);
            bytes.extend_from_slice(BIN_MAGIC);
            bytes.extend_from_slice(&(rows as u32).to_le_bytes());
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            for &v in view.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            fs::write(&path, bytes)?;
        }
        entries.push(ViewEntry {
            name: name.clone(),
            dim,
            file,
            format: format.to_string(),
        });
    }
    let mut labels_out = Vec::new();
    for l in &ds.labels {
        writeln!(&mut labels_out, "{l}").unwrap();
    }
    fs::write(dir.join("labels.txt"), labels_out)?;
    let split_file = if let Some(split) = &ds.split {
        let mut out = String::new();
        for tag in split {
            out.push_str(match tag {
                SplitTag::Train => "train\n",
                SplitTag::Test => "test\n",
            });
        }
        fs::write(dir.join("split.txt"), out)?;
        Some("split.txt".to_string())
    } else {
        None
    };
    let manifest = Manifest {
        name: ds.name.clone(),
        views: entries,
        labels_file: "labels.txt".to_string(),
        split_file,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Per-view, per-feature training minima and maxima.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mins: Vec<Vec<f64>>,
    pub maxs: Vec<Vec<f64>>,
}

pub fn normalize_fit(train_views: &[Tensor]) -> Result<NormStats> {
    let mut mins = Vec::new();
    let mut maxs = Vec::new();
    for view in train_views {
        let (n, d) = view.dims2()?;
        if n == 0 {
            return Err(Error::Data("normalize_fit: empty training view".into()));
        }
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..n {
            for (j, &v) in view.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        mins.push(lo);
        maxs.push(hi);
    }
    Ok(NormStats { mins, maxs })
}

/// x' = 2 (x - min) / (max - min) - 1; constant features map to 0;
/// out-of-range values are not clipped.
pub fn normalize_apply(stats: &NormStats, views: &[Tensor]) -> Result<Vec<Tensor>> {
    if views.len() != stats.mins.len() {
        return Err(Error::Arity(format!(
            "normalize_apply: {} views but stats for {}",
            views.len(),
            stats.mins.len()
        )));
    }
    let mut out = Vec::new();
    for (v, view) in views.iter().enumerate() {
        let (n, d) = view.dims2()?;
        if d != stats.mins[v].len() {
            return Err(Error::Shape(format!(
                "normalize_apply: view {v} has dim {d}, stats have {}",
                stats.mins[v].len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for (j, &x) in view.row(i).iter().enumerate() {
                let (lo, hi) = (stats.mins[v][j], stats.maxs[v][j]);
                data.push(if hi > lo {
                    2.0 * (x - lo) / (hi - lo) - 1.0
                } else {
                    0.0
                });
            }
        }
        out.push(Tensor::new(vec![n, d], data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub train_views: Vec<Tensor>,
    pub test_views: Vec<Tensor>,
    /// +1 for held-out positive rows, -1 for every other class.
    pub test_labels: Vec<i8>,
}

fn gather_rows(views: &[Tensor], idx: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for view in views {
        let (_, d) = view.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(view.row(i));
        }
        out.push(Tensor::new(vec![idx.len(), d], data)?);
    }
    Ok(out)
}

/// One-vs-all protocol: train on `ratio` of the positive class, test on the
/// held-out positives (+1) plus every other class (-1). A predefined split
/// overrides the random draw.
pub fn one_vs_all_split(
    ds: &MultiViewDataset,
    positive_class: i64,
    ratio: f64,
    rng: &mut Rng,
) -> Result<SplitData> {
    let pos_idx: Vec<usize> = (0..ds.n_rows())
        .filter(|&i| ds.labels[i] == positive_class)
        .collect();
    if pos_idx.is_empty() {
        return Err(Error::Data(format!(
            "class {positive_class} absent from dataset '{}'",
            ds.name
        )));
    }
    if pos_idx.len() < 2 {
        return Err(Error::Data(format!(
            "class {positive_class} has fewer than 2 rows"
        )));
    }
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = if let Some(split) = &ds.split {
        let train: Vec<usize> = pos_idx
            .iter()
            .copied()
            .filter(|&i| split[i] == SplitTag::Train)
            .collect();
        if train.is_empty() {
            return Err(Error::Data(format!(
                "predefined split has no training rows for class {positive_class}"
            )));
        }
        let test: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| split[i] == SplitTag::Test)
            .collect();
        (train, test)
    } else {
        let mut shuffled = pos_idx.clone();
        rng.shuffle(&mut shuffled);
        let n_train = ((ratio * pos_idx.len() as f64).round() as usize).clamp(1, pos_idx.len() - 1);
        let mut train: Vec<usize> = shuffled[..n_train].to_vec();
        train.sort_unstable();
        let mut held_out: Vec<usize> = shuffled[n_train..].to_vec();
        held_out.extend((0..ds.n_rows()).filter(|&i| ds.labels[i] != positive_class));
        held_out.sort_unstable();
        (train, held_out)
    };
    let test_labels: Vec<i8> = test_idx
        .iter()
        .map(|&i| {
            if ds.labels[i] == positive_class {
                1
            } else {
                -1
            }
        })
        .collect();
    Ok(SplitData {
        train_views: gather_rows(&ds.views, &train_idx)?,
        test_views: gather_rows(&ds.views, &test_idx)?,
        test_labels,
    })
}

/// Rows of `class` that would enter training under the protocol.
pub fn training_eligible(ds: &MultiViewDataset, class: i64, ratio: f64) -> usize {
    let count = ds.labels.iter().filter(|&&l| l == class).count();
    match &ds.split {
        Some(split) => (0..ds.n_rows())
            .filter(|&i| ds.labels[i] == class && split[i] == SplitTag::Train)
            .count(),
        None => (ratio * count as f64).round() as usize,
    }
}

/// First `limit` classes (in order of first appearance) with more than
/// `min_train` training-eligible rows.
pub fn qualified_classes(
    ds: &MultiViewDataset,
    ratio: f64,
    min_train: usize,
    limit: usize,
) -> Vec<i64> {
    ds.classes()
        .into_iter()
        .filter(|&c| training_eligible(ds, c, ratio) > min_train)
        .take(limit)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Per-view output dimensions; the last `noise_views` carry no signal.
    pub dims: Vec<usize>,
    pub latent: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Latent-space mean shift of the negative class.
    pub delta: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub noise_views: usize,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Config("synth: need at least 2 views".into()));
        }
        if self.dims.contains(&0) || self.latent == 0 {
            return Err(Error::Config("synth: zero dimension".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("synth: sigma must be >= 0".into()));
        }
        if self.n_pos < 2 || self.n_neg == 0 {
            return Err(Error::Config("synth: counts must be positive".into()));
        }
        if self.noise_views >= self.dims.len() {
            return Err(Error::Config(
                "synth: at least one view must carry signal".into(),
            ));
        }
        Ok(())
    }
}

/// Positive rows: z ~ N(0, I_L), view v = A_v z + sigma * eps. Negative rows:
/// latent mean shifted by delta along the normalized all-ones direction.
/// Trailing noise views are class-independent Gaussian noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let v_total = spec.dims.len();
    let v_signal = v_total - spec.noise_views;
    let l = spec.latent;

    // Per-view mixing maps, entries N(0, 1/L) so outputs have unit-ish scale.
    let scale = 1.0 / (l as f64).sqrt();
    let maps: Vec<Vec<f64>> = (0..v_signal)
        .map(|v| {
            (0..spec.dims[v] * l)
                .map(|_| rng.gaussian() * scale)
                .collect()
        })
        .collect();

    let n = spec.n_pos + spec.n_neg;
    let mut views: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| Vec::with_capacity(n * d))
        .collect();
    let mut labels = Vec::with_capacity(n);
    let shift = spec.delta / (l as f64).sqrt();
    let noise_std = (1.0 + spec.sigma * spec.sigma).sqrt();
    for row in 0..n {
        let positive = row < spec.n_pos;
        let z: Vec<f64> = (0..l)
            .map(|_| rng.gaussian() + if positive { 0.0 } else { shift })
            .collect();
        for v in 0..v_total {
            let d = spec.dims[v];
            if v < v_signal {
                for i in 0..d {
                    let mean: f64 = (0..l).map(|j| maps[v][i * l + j] * z[j]).sum();
                    views[v].push(mean + spec.sigma * rng.gaussian());
                }
            } else {
                for _ in 0..d {
                    views[v].push(noise_std * rng.gaussian());
                }
            }
        }
        labels.push(if positive { 1 } else { -1 });
    }
    let tensors: Result<Vec<Tensor>> = views
        .into_iter()
        .zip(&spec.dims)
        .map(|(data, &d)| Tensor::new(vec![n, d], data))
        .collect();
    let view_names = (0..v_total).map(|v| format!("view{v}")).collect();
    MultiViewDataset::new("synth".to_string(), view_names, tensors?, labels, None)
}
