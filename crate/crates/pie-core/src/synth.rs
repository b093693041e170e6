//! Synthetic data: labeled Gaussian latent worlds, procedurally rendered
//! grayscale "pathology blob" images, region masks, and bit-exact PGM I/O.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::oracle::Condition;
use crate::pie::RoiMask;
use crate::state::{Shape, State};

/// One labeled class of a latent world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub mean: Vec<f64>,
    pub prior: f64,
}

/// Labeled isotropic-Gaussian latent world: per-class means, one shared
/// variance, class priors on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldJson", into = "WorldJson")]
pub struct LatentWorld {
    dim: usize,
    var: f64,
    classes: Vec<ClassSpec>,
}

#[derive(Serialize, Deserialize)]
struct WorldJson {
    dim: usize,
    var: f64,
    classes: Vec<ClassSpec>,
}

impl TryFrom<WorldJson> for LatentWorld {
    type Error = PieError;
    fn try_from(j: WorldJson) -> Result<Self> {
        LatentWorld::new(j.dim, j.var, j.classes)
    }
}

impl From<LatentWorld> for WorldJson {
    fn from(w: LatentWorld) -> Self {
        WorldJson {
            dim: w.dim,
            var: w.var,
            classes: w.classes,
        }
    }
}

impl LatentWorld {
    pub fn new(dim: usize, var: f64, classes: Vec<ClassSpec>) -> Result<Self> {
        if dim == 0 {
            return Err(PieError::invalid("world dimension must be positive"));
        }
        if !(var.is_finite() && var >= 0.0) {
            return Err(PieError::invalid(format!("variance must be >= 0, got {var}")));
        }
        if classes.len() < 2 {
            return Err(PieError::invalid("world needs at least 2 classes"));
        }
        for c in &classes {
            if c.mean.len() != dim {
                return Err(PieError::invalid(format!(
                    "class '{}' mean has dim {}, world dim is {dim}",
                    c.name,
                    c.mean.len()
                )));
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(PieError::invalid(format!("class '{}' mean not finite", c.name)));
            }
            if !(c.prior.is_finite() && c.prior >= 0.0) {
                return Err(PieError::invalid(format!("class '{}' prior invalid", c.name)));
            }
        }
        let total: f64 = classes.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PieError::invalid(format!(
                "class priors must sum to 1, got {total}"
            )));
        }
        Ok(LatentWorld { dim, var, classes })
    }

    /// Two-class world: `healthy` at the origin, `disease` at `separation`
    /// along the first coordinate, shared unit-free variance `var`.
    pub fn two_class(dim: usize, separation: f64, var: f64) -> Self {
        Self::two_class_with_priors(dim, separation, var, 0.5)
    }

    pub fn two_class_with_priors(dim: usize, separation: f64, var: f64, healthy_prior: f64) -> Self {
        let mut disease_mean = vec![0.0; dim];
        disease_mean[0] = separation;
        LatentWorld::new(
            dim,
            var,
            vec![
                ClassSpec {
                    name: "healthy".to_string(),
                    mean: vec![0.0; dim],
                    prior: healthy_prior,
                },
                ClassSpec {
                    name: "disease".to_string(),
                    mean: disease_mean,
                    prior: 1.0 - healthy_prior,
                },
            ],
        )
        .expect("two-class world construction")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world serialization")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Result<Condition> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .map(Condition)
            .ok_or_else(|| PieError::UnknownClass(name.to_string()))
    }

    pub fn mean(&self, y: Condition) -> Result<&[f64]> {
        self.classes
            .get(y.0)
            .map(|c| c.mean.as_slice())
            .ok_or_else(|| PieError::UnknownClass(format!("index {}", y.0)))
    }

    /// Draw one latent state of class `y`.
    pub fn sample_latent(&self, y: Condition, rng: &mut impl Rng) -> Result<State> {
        let mean = self.mean(y)?;
        let sd = self.var.sqrt();
        let values = mean
            .iter()
            .map(|&m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        State::flat(values)
    }
}

/// Procedural grayscale image family: a smooth background plus one radial
/// blob whose radius and brightness scale with a severity knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobImageSpec {
    /// Grid side (images are square).
    pub grid: usize,
    /// Background level in [0, 1].
    pub background: f64,
    /// Amplitude of the smooth diagonal background gradient.
    pub gradient_amplitude: f64,
    /// Blob center (row, col).
    pub center: (f64, f64),
    /// Blob radius in pixels at severity 1.
    pub r_max: f64,
    /// Peak intensity added at the blob center at severity 1.
    pub peak: f64,
    /// Per-pixel noise standard deviation.
    pub noise_std: f64,
}

impl Default for BlobImageSpec {
    fn default() -> Self {
        BlobImageSpec {
            grid: 32,
            background: 0.15,
            gradient_amplitude: 0.1,
            center: (16.0, 16.0),
            r_max: 9.0,
            peak: 0.7,
            noise_std: 0.01,
        }
    }
}

/// One labeled rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    pub state: State,
    pub class: Condition,
    pub severity: f64,
}

/// Class index conventions for blob datasets.
pub const HEALTHY: Condition = Condition(0);
pub const DISEASE: Condition = Condition(1);

/// Severity at or above this renders as the disease class.
pub const SEVERITY_CLASS_THRESHOLD: f64 = 0.5;

/// Render one image at the given severity. Severity scales both the blob
/// radius and its brightness; pixels are clamped to [0, 1].
pub fn render_blob(spec: &BlobImageSpec, severity: f64, rng: &mut impl Rng) -> Result<State> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(PieError::invalid(format!(
            "severity must be in [0, 1], got {severity}"
        )));
    }
    let n = spec.grid;
    let radius = severity * spec.r_max;
    let amp = severity * spec.peak;
    let mut values = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let ramp = (r + c) as f64 / (2 * n - 2).max(1) as f64;
            let mut v = spec.background + spec.gradient_amplitude * ramp;
            let d = ((r as f64 - spec.center.0).powi(2) + (c as f64 - spec.center.1).powi(2)).sqrt();
            if radius > 0.0 && d < radius {
                // smooth radial bump, full height at the center, zero at the rim
                v += amp * 0.5 * (1.0 + (std::f64::consts::PI * d / radius).cos());
            }
            if spec.noise_std > 0.0 {
                v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            values.push(v.clamp(0.0, 1.0));
        }
    }
    State::grid(n, n, values)
}

/// Render `n_per_severity` images at each severity in `severities`, labeling
/// by the severity threshold. The raw severity is retained on each item.
pub fn make_dataset(
    spec: &BlobImageSpec,
    n_per_severity: usize,
    severities: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<BlobSample>> {
    let mut out = Vec::with_capacity(n_per_severity * severities.len());
    for &severity in severities {
        for _ in 0..n_per_severity {
            let class = if severity >= SEVERITY_CLASS_THRESHOLD {
                DISEASE
            } else {
                HEALTHY
            };
            out.push(BlobSample {
                state: render_blob(spec, severity, rng)?,
                class,
                severity,
            });
        }
    }
    Ok(out)
}

/// Disk region mask: 1 inside `radius - soft_edge_width`, 0 outside
/// `radius + soft_edge_width`, cosine ramp between.
pub fn disk_mask(grid: usize, center: (f64, f64), radius: f64, soft_edge_width: f64) -> Result<RoiMask> {
    if radius <= 0.0 {
        return Err(PieError::invalid(format!("mask radius must be > 0, got {radius}")));
    }
    let w = soft_edge_width.max(0.0);
    let mut values = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let d = ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt();
            let m = if d <= radius - w {
                1.0
            } else if d >= radius + w {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * (d - (radius - w)) / (2.0 * w)).cos())
            };
            values.push(m);
        }
    }
    RoiMask::new(State::grid(grid, grid, values)?)
}

/// Write a state with values in [0, 1] as a binary PGM (P5, maxval 255,
/// row-major).
pub fn write_image(path: &Path, state: &State) -> Result<()> {
    let (rows, cols) = match state.shape() {
        Shape::Grid { rows, cols } => (rows, cols),
        Shape::Flat(d) => (1, d),
    };
    if let Some(v) = state.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PieError::invalid(format!(
            "image values must be in [0, 1] to write, found {v}"
        )));
    }
    let mut buf = Vec::with_capacity(32 + rows * cols);
    write!(&mut buf, "P5\n{cols} {rows}\n255\n")?;
    buf.extend(state.values().iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a binary PGM written by [`write_image`] back into a grid state.
pub fn read_image(path: &Path) -> Result<State> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<State> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(PieError::Parse {
            offset: 0,
            message: format!("expected magic 'P5', got {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let cols = parse_dim(bytes, &mut pos, "width")?;
    let rows = parse_dim(bytes, &mut pos, "height")?;
    let maxval = parse_dim(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PieError::Parse {
            offset: pos,
            message: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PieError::Parse {
            offset: pos,
            message: "missing whitespace before pixel payload".to_string(),
        });
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = rows * cols;
    if payload.len() != expected {
        return Err(PieError::Parse {
            offset: pos,
            message: format!(
                "payload has {} bytes, expected {expected} ({cols}x{rows})",
                payload.len()
            ),
        });
    }
    let values = payload.iter().map(|&b| b as f64 / 255.0).collect();
    State::grid(rows, cols, values)
}

fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    // skip whitespace and '#' comment lines
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return Err(PieError::Parse {
            offset: *pos,
            message: "unexpected end of header".to_string(),
        });
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let start_err = *pos;
    let tok = take_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| PieError::Parse {
            offset: start_err,
            message: format!("invalid {what} field"),
        })
}
