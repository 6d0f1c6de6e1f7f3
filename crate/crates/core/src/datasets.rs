//! The 2-D toy distributions, evaluation lattices, attack-setting input
//! pipelines and CSV ingestion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{detection_attack, AttackConfig, BoxBounds, Direction};
use crate::error::{Error, Result};
use crate::metrics::AttackSetting;
use crate::model::Mlp;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Rect {
    pub const fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Self {
        Self { x_lo, x_hi, y_lo, y_hi }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.x_lo, self.x_hi) || !ok(self.y_lo, self.y_hi) {
            return Err(Error::Config(format!("degenerate rectangle {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_lo..=self.x_hi).contains(&x) && (self.y_lo..=self.y_hi).contains(&y)
    }

    pub fn area(&self) -> f64 {
        (self.x_hi - self.x_lo) * (self.y_hi - self.y_lo)
    }

    /// The ℓ∞ ε-neighbourhood of the rectangle.
    pub fn dilate(&self, eps: f64) -> Rect {
        Rect::new(self.x_lo - eps, self.x_hi + eps, self.y_lo - eps, self.y_hi + eps)
    }

    /// ℓ∞ distance between two closed rectangles (0 if they intersect).
    pub fn linf_distance(&self, other: &Rect) -> f64 {
        let gap = |a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64| (b_lo - a_hi).max(a_lo - b_hi).max(0.0);
        gap(self.x_lo, self.x_hi, other.x_lo, other.x_hi).max(gap(self.y_lo, self.y_hi, other.y_lo, other.y_hi))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [rng.gen_range(self.x_lo..=self.x_hi), rng.gen_range(self.y_lo..=self.y_hi)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub class0: Rect,
    pub class1: Rect,
    pub oe: Vec<Rect>,
    pub epsilon: f64,
    /// Points drawn per distribution: each ID class, and the OE union.
    pub n_per_region: usize,
    pub domain: Rect,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            class0: Rect::new(0.0, 3.0, 1.5, 4.5),
            class1: Rect::new(-3.0, 0.0, -4.5, -1.5),
            oe: vec![Rect::new(-7.0, -4.0, 4.0, 7.0), Rect::new(4.0, 7.0, -7.0, -4.0)],
            epsilon: 1.5,
            n_per_region: 1000,
            domain: Rect::new(-10.0, 10.0, -10.0, 10.0),
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.oe.is_empty() {
            return Err(Error::Config("toy data needs at least one OE rectangle".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon)));
        }
        let regions = self.regions();
        for r in &regions {
            r.validate()?;
            let d = &self.domain;
            if !(d.contains(r.x_lo, r.y_lo) && d.contains(r.x_hi, r.y_hi)) {
                return Err(Error::Config(format!("region {r:?} leaves the domain")));
            }
        }
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                if a.linf_distance(b) == 0.0 {
                    return Err(Error::Config(format!("regions {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(())
    }

    fn regions(&self) -> Vec<Rect> {
        let mut v = vec![self.class0, self.class1];
        v.extend(self.oe.iter().copied());
        v
    }

    /// Smallest ℓ∞ gap between any ε-dilated ID region and any ε-dilated OE
    /// region. Positive means a perfectly robust classifier-detector exists.
    pub fn separation_margin(&self) -> f64 {
        let e = self.epsilon;
        [self.class0, self.class1]
            .iter()
            .flat_map(|c| self.oe.iter().map(move |o| c.dilate(e).linf_distance(&o.dilate(e))))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self) -> BoxBounds {
        BoxBounds {
            lo: vec![self.domain.x_lo, self.domain.y_lo],
            hi: vec![self.domain.x_hi, self.domain.y_hi],
        }
    }

    fn sample_oe<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        // uniform over the union: pick a rectangle with probability ∝ area
        let total: f64 = self.oe.iter().map(Rect::area).sum();
        let mut u = rng.gen_range(0.0..total);
        for r in &self.oe {
            if u < r.area() {
                return r.sample(rng);
            }
            u -= r.area();
        }
        self.oe[self.oe.len() - 1].sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Id,
    Oe,
    Ood,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Id => "id",
            Origin::Oe => "oe",
            Origin::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub origin: Origin,
}

impl LabeledSet {
    /// Labels must be present exactly when `origin` is `Id`.
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, origin: Origin) -> Result<Self> {
        if !features.is_matrix() {
            return Err(Error::Contract(format!("features must be a matrix, got shape {:?}", features.shape())));
        }
        match (&labels, origin) {
            (Some(l), Origin::Id) if l.len() != features.rows() => {
                return Err(Error::dim("LabeledSet", &[features.rows()], &[l.len()]))
            }
            (Some(_), Origin::Id) | (None, Origin::Oe | Origin::Ood) => {}
            (None, Origin::Id) => return Err(Error::Schema("ID set without labels".into())),
            (Some(_), o) => return Err(Error::Schema(format!("{} set must not carry labels", o.name()))),
        }
        Ok(Self {
            features,
            labels,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        self.labels.as_deref().unwrap_or(&[])
    }
}

fn points_to_tensor(points: Vec<[f64; 2]>) -> Tensor {
    let n = points.len();
    Tensor::matrix(n, 2, points.into_iter().flatten().collect()).expect("n×2 points")
}

fn sample_id<R: Rng + ?Sized>(spec: &ToySpec, n0: usize, n1: usize, rng: &mut R) -> LabeledSet {
    let mut pts = Vec::with_capacity(n0 + n1);
    pts.extend((0..n0).map(|_| spec.class0.sample(rng)));
    pts.extend((0..n1).map(|_| spec.class1.sample(rng)));
    let labels = [vec![0; n0], vec![1; n1]].concat();
    LabeledSet::new(points_to_tensor(pts), Some(labels), Origin::Id).expect("labels match rows")
}

fn sample_oe_set<R: Rng + ?Sized>(spec: &ToySpec, n: usize, origin: Origin, rng: &mut R) -> LabeledSet {
    let pts = (0..n).map(|_| spec.sample_oe(rng)).collect();
    LabeledSet::new(points_to_tensor(pts), None, origin).expect("unlabeled set")
}

/// Training sets: `n_per_region` points of each class (class 0 rows first)
/// and `n_per_region` OE points drawn uniformly over the OE union.
pub fn sample_toy(spec: &ToySpec, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_per_region;
    let id = sample_id(spec, n, n, &mut rng);
    let oe = sample_oe_set(spec, n, Origin::Oe, &mut rng);
    Ok((id, oe))
}

/// `n` fresh test ID points, split evenly between the classes (class 0 takes
/// the odd one out).
pub fn sample_toy_id_test(spec: &ToySpec, seed: u64, n: usize) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_id(spec, n - n / 2, n / 2, &mut rng))
}

/// `n` fresh test OOD points from the OE rectangles.
pub fn sample_toy_ood_test(spec: &ToySpec, seed: u64, n: usize) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_oe_set(spec, n, Origin::Ood, &mut rng))
}

/// Lattice coordinate `i` of `r` over `[lo, hi]`, with both ends exact.
fn lattice(lo: f64, hi: f64, r: usize, i: usize) -> f64 {
    if i + 1 == r {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (r - 1) as f64
    }
}

/// `r×r` lattice over the domain, row-major with y in the outer loop.
pub fn grid(spec: &ToySpec, resolution: usize) -> Result<Tensor> {
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution must be ≥ 2, got {resolution}")));
    }
    let d = &spec.domain;
    let mut data = Vec::with_capacity(resolution * resolution * 2);
    for iy in 0..resolution {
        let y = lattice(d.y_lo, d.y_hi, resolution, iy);
        for ix in 0..resolution {
            data.push(lattice(d.x_lo, d.x_hi, resolution, ix));
            data.push(y);
        }
    }
    Tensor::matrix(resolution * resolution, 2, data)
}

/// Clean and attacked copies of an ID/OOD pair. ID points are attacked
/// towards OOD and OOD points towards ID, each once; the four settings are
/// assembled from these.
#[derive(Debug, Clone)]
pub struct SettingInputs {
    pub id_clean: Tensor,
    pub ood_clean: Tensor,
    pub id_attacked: Tensor,
    pub ood_attacked: Tensor,
}

impl SettingInputs {
    /// Runs the ID→OOD attack first, then the OOD→ID attack, from one RNG.
    pub fn build<R: Rng + ?Sized>(
        model: &Mlp,
        id: &Tensor,
        ood: &Tensor,
        cfg: &AttackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let id_attacked = detection_attack(model, id, Direction::IdToOod, cfg, rng)?.adversarial;
        let ood_attacked = detection_attack(model, ood, Direction::OodToId, cfg, rng)?.adversarial;
        Ok(Self {
            id_clean: id.clone(),
            ood_clean: ood.clone(),
            id_attacked,
            ood_attacked,
        })
    }

    pub fn inputs(&self, setting: AttackSetting) -> (&Tensor, &Tensor) {
        let id = if setting.attacks_id() { &self.id_attacked } else { &self.id_clean };
        let ood = if setting.attacks_ood() { &self.ood_attacked } else { &self.ood_clean };
        (id, ood)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Feature columns in order; `None` takes every column except the label.
    pub feature_columns: Option<Vec<String>>,
    pub label_column: String,
    pub origin: Origin,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            feature_columns: None,
            label_column: "label".into(),
            origin: Origin::Id,
        }
    }
}

impl CsvSchema {
    pub fn for_origin(origin: Origin) -> Self {
        Self {
            origin,
            ..Self::default()
        }
    }
}

/// Reads a headered numeric CSV. A label column is required for ID data and
/// ignored otherwise.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = header.iter().position(|h| *h == schema.label_column);
    if schema.origin == Origin::Id && label_idx.is_none() {
        return Err(Error::Schema(format!(
            "{}: ID data needs a {:?} column",
            path.display(),
            schema.label_column
        )));
    }
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Schema(format!("{}: missing column {c:?}", path.display())))
            })
            .collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&i| Some(i) != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::Schema(format!("{}: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for &j in &feature_idx {
            let cell = &record[j];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("column {:?}: {cell:?} is not a number", header[j]),
            })?;
            data.push(v);
        }
        if schema.origin == Origin::Id {
            let j = label_idx.expect("checked above");
            let cell = &record[j];
            let y: usize = cell.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("label {cell:?} is not a class index"),
            })?;
            labels.push(y);
        }
        rows += 1;
    }
    let features = Tensor::matrix(rows, feature_idx.len(), data)?;
    let labels = (schema.origin == Origin::Id).then_some(labels);
    LabeledSet::new(features, labels, schema.origin)
}

/// Writes `x0..x{d-1}` (and `label` when present) with shortest round-trip
/// float formatting.
pub fn write_csv(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = set.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if set.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..set.len() {
        let mut row: Vec<String> = set.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &set.labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
