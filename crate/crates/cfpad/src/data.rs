//! Datasets: manifest files, frame sampling, class-balanced batch streams,
//! and a synthetic multi-domain generator for desk-scale cross-domain runs.
//!
//! Manifest format: `# cfpad manifest v1`, a tab-separated column header
//! `path video_id frame_id label domain_tag`, then one row per frame.
//! Images live under `dataset_name/video_id/frame_id.png` as lossless 8-bit
//! RGB.
//!
//! The synthetic generator plays the role of the multi-dataset protocols:
//! every domain applies its own color/noise transform (the style), while
//! attack samples additionally receive a class-causal pattern drawn by a
//! pattern function shared verbatim across domains.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::types::LabeledBatch;

pub const MANIFEST_HEADER: &str = "# cfpad manifest v1";
pub const MANIFEST_COLUMNS: &str = "path\tvideo_id\tframe_id\tlabel\tdomain_tag";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub video_id: String,
    pub frame_id: u64,
    pub label: u8,
    pub domain_tag: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: String, entries: Vec<ManifestEntry>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| e.label > 1) {
            return Err(Error::Data(format!(
                "manifest {name}: label {} of {} is not 0/1",
                bad.label, bad.video_id
            )));
        }
        Ok(Self { name, entries })
    }

    pub fn has_both_classes(&self) -> bool {
        let mut seen = [false, false];
        for e in &self.entries {
            seen[e.label as usize] = true;
        }
        seen[0] && seen[1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        writeln!(out, "# name = {}", self.name).expect("string write");
        out.push_str(MANIFEST_COLUMNS);
        out.push('\n');
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.path.display(),
                e.video_id,
                e.frame_id,
                e.label,
                e.domain_tag
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a manifest. Relative image paths are resolved against the
    /// manifest file's directory. Row order is preserved.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let src = path.display().to_string();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Parse {
                    path: src,
                    line: 1,
                    msg: format!(
                        "expected version header `{MANIFEST_HEADER}`, found `{}`",
                        other.map(|(_, l)| l.trim()).unwrap_or("<eof>")
                    ),
                })
            }
        }
        let mut name = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "dataset".to_string());
        let mut entries = Vec::new();
        let mut saw_columns = false;
        for (idx, raw) in lines {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("# name = ") {
                name = v.trim().to_string();
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if !saw_columns {
                if line != MANIFEST_COLUMNS {
                    return Err(Error::Parse {
                        path: src,
                        line: idx + 1,
                        msg: format!("expected column header `{MANIFEST_COLUMNS}`"),
                    });
                }
                saw_columns = true;
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg,
            };
            if parts.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, found {}", parts.len())));
            }
            let rel = PathBuf::from(parts[0]);
            let resolved = if rel.is_absolute() { rel } else { base.join(rel) };
            entries.push(ManifestEntry {
                path: resolved,
                video_id: parts[1].to_string(),
                frame_id: parts[2]
                    .parse()
                    .map_err(|e| err(format!("bad frame_id `{}`: {e}", parts[2])))?,
                label: {
                    let l: u8 = parts[3]
                        .parse()
                        .map_err(|e| err(format!("bad label `{}`: {e}", parts[3])))?;
                    if l > 1 {
                        return Err(err(format!("label must be 0 or 1, got {l}")));
                    }
                    l
                },
                domain_tag: parts[4]
                    .parse()
                    .map_err(|e| err(format!("bad domain_tag `{}`: {e}", parts[4])))?,
            });
        }
        if !saw_columns {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 2,
                msg: "missing column header".into(),
            });
        }
        DatasetManifest::new(name, entries)
    }

    /// Concatenate several manifests (multi-source training protocols).
    pub fn merge(manifests: Vec<DatasetManifest>) -> Result<Self> {
        let name = manifests
            .iter()
            .map(|m| m.name.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let entries = manifests.into_iter().flat_map(|m| m.entries).collect();
        DatasetManifest::new(name, entries)
    }
}

/// `n` frame indices evenly spaced over `0..video_frame_count`, first frame
/// included, deduplicated when the video is shorter than `n`.
pub fn sample_frames(video_frame_count: usize, n: usize) -> Vec<usize> {
    assert!(video_frame_count >= 1 && n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let idx = i * video_frame_count / n;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Image loading
// ---------------------------------------------------------------------------

/// A manifest with every referenced image decoded to `[3, S, S]` f64 planes
/// in `[0, 1]`, kept in memory for the training loop.
pub struct LoadedDataset {
    pub entries: Vec<ManifestEntry>,
    images: Vec<Vec<f64>>,
    image_size: usize,
}

impl LoadedDataset {
    pub fn load(manifest: &DatasetManifest, image_size: usize) -> Result<Self> {
        let images: Vec<Vec<f64>> = manifest
            .entries
            .iter()
            .map(|e| load_image_planes(&e.path, image_size))
            .collect::<Result<_>>()?;
        Ok(Self {
            entries: manifest.entries.clone(),
            images,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Assemble the batch for the given entry indices.
    pub fn gather(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        let mut tags = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            labels.push(self.entries[i].label);
            tags.push(self.entries[i].domain_tag);
            ids.push(self.entries[i].video_id.clone());
        }
        let images = Tensor4::from_vec(data, indices.len(), 3, s, s)?;
        LabeledBatch::new(images, labels, Some(tags), Some(ids))
    }
}

/// Decode one image to channel-major f64 planes in `[0, 1]`, resizing
/// (bilinear) when the stored extent differs.
pub fn load_image_planes(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(
            &img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let mut planes = vec![0.0f64; 3 * size * size];
    for (x, y, pixel) in img.enumerate_pixels() {
        let base = y as usize * size + x as usize;
        for c in 0..3 {
            planes[c * size * size + base] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(planes)
}

// ---------------------------------------------------------------------------
// Balanced batches
// ---------------------------------------------------------------------------

/// Stream of class-balanced batches: every batch holds exactly
/// `batch_size / 2` samples of each class. One epoch walks the larger class
/// once in shuffled order without repeats; the smaller class is resampled
/// with replacement. A trailing remainder of the larger class that cannot
/// fill half a batch is dropped. If the larger class has fewer samples than
/// half a batch, a single batch is drawn with replacement from both.
pub fn balanced_batches<'a, R: Rng>(
    dataset: &'a LoadedDataset,
    batch_size: usize,
    rng: &'a mut R,
) -> Result<BalancedBatchIter<'a, R>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be even and >= 2, got {batch_size}"
        )));
    }
    let mut bona: Vec<usize> = Vec::new();
    let mut attack: Vec<usize> = Vec::new();
    for (i, e) in dataset.entries.iter().enumerate() {
        if e.label == 1 {
            bona.push(i);
        } else {
            attack.push(i);
        }
    }
    if bona.is_empty() || attack.is_empty() {
        return Err(Error::Data(format!(
            "balanced sampling needs both classes: {} bona fide, {} attack",
            bona.len(),
            attack.len()
        )));
    }
    let half = batch_size / 2;
    let (larger, smaller) = if bona.len() >= attack.len() {
        (bona, attack)
    } else {
        (attack, bona)
    };
    Ok(BalancedBatchIter {
        dataset,
        larger,
        smaller,
        half,
        cursor: 0,
        rng,
        shuffled: false,
    })
}

pub struct BalancedBatchIter<'a, R: Rng> {
    dataset: &'a LoadedDataset,
    larger: Vec<usize>,
    smaller: Vec<usize>,
    half: usize,
    cursor: usize,
    rng: &'a mut R,
    shuffled: bool,
}

impl<R: Rng> Iterator for BalancedBatchIter<'_, R> {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.shuffled {
            self.larger.shuffle(self.rng);
            self.shuffled = true;
            if self.larger.len() < self.half {
                // degenerate case: one batch, both classes with replacement
                let mut indices = Vec::with_capacity(2 * self.half);
                for _ in 0..self.half {
                    indices.push(self.larger[self.rng.random_range(0..self.larger.len())]);
                }
                for _ in 0..self.half {
                    indices.push(self.smaller[self.rng.random_range(0..self.smaller.len())]);
                }
                self.cursor = self.larger.len(); // exhaust
                return Some(self.dataset.gather(&indices));
            }
        }
        if self.cursor + self.half > self.larger.len() {
            return None;
        }
        let mut indices = Vec::with_capacity(2 * self.half);
        indices.extend_from_slice(&self.larger[self.cursor..self.cursor + self.half]);
        self.cursor += self.half;
        for _ in 0..self.half {
            indices.push(self.smaller[self.rng.random_range(0..self.smaller.len())]);
        }
        Some(self.dataset.gather(&indices))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Class-causal pattern stamped onto attack frames. The pattern functions
/// take no domain information: the causal signal is identical across
/// domains by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackPattern {
    /// High-frequency sinusoidal grid, like screen moire.
    MoireGrid,
    /// Contrast flattening toward mid-gray, like a matte print.
    FlatTexture,
    /// Additive bright frame around the border, like a display bezel.
    BorderFrame,
}

impl AttackPattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackPattern::MoireGrid => "moire_grid",
            AttackPattern::FlatTexture => "flat_texture",
            AttackPattern::BorderFrame => "border_frame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "moire_grid" => Some(AttackPattern::MoireGrid),
            "flat_texture" => Some(AttackPattern::FlatTexture),
            "border_frame" => Some(AttackPattern::BorderFrame),
            _ => None,
        }
    }
}

/// Style knobs of one synthetic capture domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomainSpec {
    pub channel_mean_shift: [f64; 3],
    pub channel_scale: [f64; 3],
    pub noise_sigma: f64,
    pub attack_pattern: AttackPattern,
    pub pattern_strength: f64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.channel_scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "channel_scale must be > 0, got {:?}",
                self.channel_scale
            )));
        }
        if self.pattern_strength < 0.0 || !self.pattern_strength.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pattern_strength must be >= 0, got {}",
                self.pattern_strength
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Apply the class-causal pattern in place. `img` is channel-major
/// `[3, s, s]` in [0, 1] space (clamping happens at quantization).
pub fn apply_attack_pattern(img: &mut [f64], s: usize, pattern: AttackPattern, strength: f64) {
    match pattern {
        AttackPattern::MoireGrid => {
            let freq = 8.0;
            for y in 0..s {
                for x in 0..s {
                    let v = (2.0 * std::f64::consts::PI * freq * x as f64 / s as f64).sin()
                        * (2.0 * std::f64::consts::PI * freq * y as f64 / s as f64).sin();
                    let add = strength * 0.5 * v;
                    for c in 0..3 {
                        img[c * s * s + y * s + x] += add;
                    }
                }
            }
        }
        AttackPattern::FlatTexture => {
            let blend = strength.min(1.0);
            for v in img.iter_mut() {
                *v += blend * (0.5 - *v);
            }
        }
        AttackPattern::BorderFrame => {
            let width = (s as f64 * 0.08).ceil().max(2.0) as usize;
            for y in 0..s {
                for x in 0..s {
                    let on_border =
                        y < width || x < width || y >= s - width || x >= s - width;
                    if on_border {
                        for c in 0..3 {
                            img[c * s * s + y * s + x] += strength * 0.5;
                        }
                    }
                }
            }
        }
    }
}

/// Render one frame of one video in [0, 1] f64 planes, before quantization.
///
/// The base texture (smooth gradient plus soft blobs) identifies the video;
/// frames add small jitter. The domain style (per-channel affine + noise)
/// is applied to every frame, and the attack pattern only to attacks.
#[allow(clippy::too_many_arguments)]
fn render_frame<R: Rng>(
    spec: &SyntheticDomainSpec,
    s: usize,
    video_basis: &VideoBasis,
    frame: u64,
    label: u8,
    rng: &mut R,
) -> Vec<f64> {
    let mut img = vec![0.0f64; 3 * s * s];
    let jitter = 0.01 * frame as f64;
    for y in 0..s {
        for x in 0..s {
            let xf = x as f64 / s as f64;
            let yf = y as f64 / s as f64;
            let mut v = 0.45
                + video_basis.gx * (xf - 0.5)
                + video_basis.gy * (yf - 0.5)
                + jitter * (xf + yf - 1.0);
            for blob in &video_basis.blobs {
                let d2 = (xf - blob.0).powi(2) + (yf - blob.1).powi(2);
                v += blob.2 * (-d2 / 0.02).exp();
            }
            for c in 0..3 {
                img[c * s * s + y * s + x] = v;
            }
        }
    }
    // domain style: per-channel affine then pixel noise
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    for c in 0..3 {
        let plane = &mut img[c * s * s..(c + 1) * s * s];
        for v in plane.iter_mut() {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = *v * spec.channel_scale[c] + spec.channel_mean_shift[c] + n;
        }
    }
    if label == 0 {
        apply_attack_pattern(&mut img, s, spec.attack_pattern, spec.pattern_strength);
    }
    img
}

struct VideoBasis {
    gx: f64,
    gy: f64,
    blobs: Vec<(f64, f64, f64)>,
}

/// Generate a synthetic domain: PNG frames under
/// `out_dir/<name>/<video_id>/<frame_id>.png` plus the manifest at
/// `out_dir/<name>.tsv`. Labels alternate per video (even = bona fide).
/// Regeneration with the same seed state is byte-identical.
pub fn synth_generate<R: Rng>(
    spec: &SyntheticDomainSpec,
    name: &str,
    domain_tag: u32,
    n_videos: usize,
    frames_per_video: usize,
    image_size: usize,
    out_dir: &Path,
    rng: &mut R,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_videos < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_videos must be >= 2 so both classes appear, got {n_videos}"
        )));
    }
    if spec.pattern_strength == 0.0 {
        eprintln!(
            "warning: {name}: pattern_strength = 0, bona fide and attack distributions coincide"
        );
    }
    let mut entries = Vec::new();
    for v in 0..n_videos {
        let label = if v % 2 == 0 { 1u8 } else { 0u8 };
        let video_id = format!("{name}_v{v:03}");
        let basis = VideoBasis {
            gx: rng.random_range(-0.25..0.25),
            gy: rng.random_range(-0.25..0.25),
            blobs: (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.15..0.85),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect(),
        };
        let video_dir = out_dir.join(name).join(&video_id);
        std::fs::create_dir_all(&video_dir)?;
        for f in 0..frames_per_video as u64 {
            let img = render_frame(spec, image_size, &basis, f, label, rng);
            let path = video_dir.join(format!("{f}.png"));
            write_png(&path, &img, image_size)?;
            entries.push(ManifestEntry {
                path,
                video_id: video_id.clone(),
                frame_id: f,
                label,
                domain_tag,
            });
        }
    }
    let manifest = DatasetManifest::new(name.to_string(), entries)?;
    manifest.save(&out_dir.join(format!("{name}.tsv")))?;
    Ok(manifest)
}

fn write_png(path: &Path, planes: &[f64], s: usize) -> Result<()> {
    let mut img = image::RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = planes[c * s * s + y * s + x].clamp(0.0, 1.0);
                px[c] = (v * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synth spec files
// ---------------------------------------------------------------------------

pub const SYNTHSPEC_HEADER: &str = "# cfpad synthspec v1";

/// One `[section]` of a synth spec file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthJob {
    pub name: String,
    pub domain_tag: u32,
    pub spec: SyntheticDomainSpec,
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
}

/// Parse a sectioned synth spec:
///
/// ```text
/// # cfpad synthspec v1
/// [domain_a]
/// channel_mean_shift = 0.05, -0.02, 0.0
/// channel_scale = 1.0, 0.95, 1.1
/// noise_sigma = 0.03
/// attack_pattern = moire_grid
/// pattern_strength = 0.5
/// n_videos = 24
/// frames_per_video = 4
/// image_size = 64
/// ```
pub fn parse_synthspec(text: &str, source: &str) -> Result<Vec<SynthJob>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == SYNTHSPEC_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                msg: format!(
                    "expected version header `{SYNTHSPEC_HEADER}`, found `{}`",
                    other.map(|(_, l)| l.trim()).unwrap_or("<eof>")
                ),
            })
        }
    }
    let mut jobs: Vec<SynthJob> = Vec::new();
    let mut tag = 0u32;
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.into(),
            line: idx + 1,
            msg,
        };
        if let Some(section) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            jobs.push(SynthJob {
                name: section.trim().to_string(),
                domain_tag: tag,
                spec: SyntheticDomainSpec {
                    channel_mean_shift: [0.0; 3],
                    channel_scale: [1.0; 3],
                    noise_sigma: 0.0,
                    attack_pattern: AttackPattern::MoireGrid,
                    pattern_strength: 0.5,
                },
                n_videos: 8,
                frames_per_video: 4,
                image_size: 64,
            });
            tag += 1;
            continue;
        }
        let job = jobs
            .last_mut()
            .ok_or_else(|| err("key before any [section]".into()))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let parse_triple = |v: &str| -> std::result::Result<[f64; 3], String> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("expected 3 comma-separated values, found {}", parts.len()));
            }
            let mut out = [0.0; 3];
            for (i, p) in parts.iter().enumerate() {
                out[i] = p.parse().map_err(|e| format!("bad number `{p}`: {e}"))?;
            }
            Ok(out)
        };
        match key {
            "channel_mean_shift" => {
                job.spec.channel_mean_shift = parse_triple(value).map_err(err)?
            }
            "channel_scale" => job.spec.channel_scale = parse_triple(value).map_err(err)?,
            "noise_sigma" => {
                job.spec.noise_sigma =
                    value.parse().map_err(|e| err(format!("bad noise_sigma: {e}")))?
            }
            "attack_pattern" => {
                job.spec.attack_pattern = AttackPattern::parse(value)
                    .ok_or_else(|| err(format!("unknown attack_pattern `{value}`")))?
            }
            "pattern_strength" => {
                job.spec.pattern_strength = value
                    .parse()
                    .map_err(|e| err(format!("bad pattern_strength: {e}")))?
            }
            "n_videos" => {
                job.n_videos = value.parse().map_err(|e| err(format!("bad n_videos: {e}")))?
            }
            "frames_per_video" => {
                job.frames_per_video = value
                    .parse()
                    .map_err(|e| err(format!("bad frames_per_video: {e}")))?
            }
            "image_size" => {
                job.image_size =
                    value.parse().map_err(|e| err(format!("bad image_size: {e}")))?
            }
            "domain_tag" => {
                job.domain_tag =
                    value.parse().map_err(|e| err(format!("bad domain_tag: {e}")))?
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    if jobs.is_empty() {
        return Err(Error::Parse {
            path: source.into(),
            line: 1,
            msg: "synth spec defines no domains".into(),
        });
    }
    let mut names = HashSet::new();
    for j in &jobs {
        j.spec.validate()?;
        if !names.insert(j.name.clone()) {
            return Err(Error::Data(format!("duplicate domain name `{}`", j.name)));
        }
    }
    Ok(jobs)
}
