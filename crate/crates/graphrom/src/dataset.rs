//! Design-of-experiments sampling and synthetic transonic surface cases.
//!
//! Provides Latin-hypercube sampling over an (angle-of-attack, Mach) box,
//! seeded train/validation/test splitting, a procedural swept-plate test
//! case with an analytic pseudo-shock pressure law, and a JSON manifest
//! tying generated samples to their operating points and split labels.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::training::FlowSample;

/// Design-of-experiments description: parameter box, sample count, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Doe {
    /// Angle-of-attack range in degrees, `[min, max]`.
    pub aoa_range: [f64; 2],
    /// Freestream Mach number range, `[min, max]`.
    pub mach_range: [f64; 2],
    /// Number of design points.
    pub n_samples: usize,
    /// RNG seed for stratified sampling.
    pub seed: u64,
}

impl Default for Doe {
    fn default() -> Self {
        Self {
            aoa_range: [0.0, 5.0],
            mach_range: [0.70, 0.84],
            n_samples: 70,
            seed: 0,
        }
    }
}

impl Doe {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("DOE needs at least one sample".into()));
        }
        for (name, range) in [("AoA", self.aoa_range), ("Mach", self.mach_range)] {
            if !range.iter().all(|v| v.is_finite()) || range[0] >= range[1] {
                return Err(Error::InvalidArgument(format!(
                    "invalid {name} range [{}, {}]: need finite min < max",
                    range[0], range[1]
                )));
            }
        }
        Ok(())
    }
}

/// Draw a Latin-hypercube sample of `(aoa, mach)` pairs from the design box.
///
/// Each dimension is divided into `n_samples` equal strata; every stratum
/// receives exactly one point, jittered uniformly within the stratum, and the
/// two dimensions are paired through independent seeded permutations.
pub fn lhs_sample(doe: &Doe) -> Result<Vec<(f64, f64)>> {
    doe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(doe.seed);
    let n = doe.n_samples;
    let mut columns = [doe.aoa_range, doe.mach_range]
        .iter()
        .map(|range| {
            let width = (range[1] - range[0]) / n as f64;
            let mut values: Vec<f64> = (0..n)
                .map(|k| {
                    let jitter: f64 = rng.random();
                    range[0] + (k as f64 + jitter) * width
                })
                .collect();
            values.shuffle(&mut rng);
            values
        })
        .collect::<Vec<_>>();
    let machs = columns.pop().expect("two columns");
    let aoas = columns.pop().expect("two columns");
    Ok(aoas.into_iter().zip(machs).collect())
}

/// How to size the train/validation/test partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Exact subset sizes; must sum to the number of samples.
    Counts([usize; 3]),
    /// Fractions of the total; must sum to 1. Sizes are rounded half-to-even
    /// and the test subset absorbs the remainder.
    Fractions([f64; 3]),
}

/// Disjoint, exhaustive index partition of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_half_even(x: f64) -> usize {
    let floor = x.floor();
    let frac = x - floor;
    let base = floor as usize;
    if frac > 0.5 || (frac == 0.5 && base % 2 == 1) {
        base + 1
    } else {
        base
    }
}

/// Partition `0..n` into shuffled train/val/test index sets.
pub fn split(n: usize, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let sizes = match spec {
        SplitSpec::Counts(counts) => {
            let total: usize = counts.iter().sum();
            if total != n {
                return Err(Error::InvalidArgument(format!(
                    "split counts {counts:?} sum to {total}, expected {n}"
                )));
            }
            *counts
        }
        SplitSpec::Fractions(fractions) => {
            if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
                || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::InvalidArgument(format!(
                    "split fractions {fractions:?} must be non-negative and sum to 1"
                )));
            }
            let train = round_half_even(n as f64 * fractions[0]);
            let val = round_half_even(n as f64 * fractions[1]);
            if train + val > n {
                return Err(Error::InvalidArgument(format!(
                    "split fractions {fractions:?} round past {n} samples"
                )));
            }
            [train, val, n - train - val]
        }
    };
    if sizes[0] == 0 {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |count: usize, order: &mut std::vec::Drain<'_, usize>| {
        let mut indices: Vec<usize> = order.take(count).collect();
        indices.sort_unstable();
        indices
    };
    let mut drain = order.drain(..);
    Ok(Splits {
        train: take(sizes[0], &mut drain),
        val: take(sizes[1], &mut drain),
        test: take(sizes[2], &mut drain),
    })
}

/// Procedural swept, tapered plate with an analytic transonic-like load law.
///
/// The planform lies in the z = 0 plane: the leading edge sweeps back
/// linearly with span and the local chord tapers toward the tip. Pressure
/// follows a hyperbolic-tangent pseudo-shock whose chordwise position moves
/// with Mach and incidence; skin friction follows a smooth boundary-layer
/// power law that dips across the pseudo-shock. All fields are infinitely
/// differentiable, so analytic gradients are available for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    /// Chordwise node count.
    pub nx: usize,
    /// Spanwise node count.
    pub ny: usize,
    /// Root chord length.
    pub chord: f64,
    /// Span length.
    pub span: f64,
    /// Leading-edge sweep angle in degrees.
    pub sweep_deg: f64,
    /// Tip chord as a fraction of the root chord, in (0, 1].
    pub taper: f64,
    /// Pseudo-shock half-thickness as a fraction of local chord.
    pub shock_delta: f64,
    /// Pressure jump amplitude across the pseudo-shock.
    pub load_scale: f64,
    /// Shock-position law intercept at (AoA, Mach) = (0, 0.70).
    pub shock_x0: f64,
    /// Shock-position sensitivity to Mach.
    pub shock_per_mach: f64,
    /// Shock-position sensitivity to AoA in degrees.
    pub shock_per_aoa: f64,
}

/// Base suction level at zero incidence.
const CP_BASE: f64 = -0.6;
/// Suction growth per degree of incidence.
const CP_PER_AOA: f64 = -0.08;
/// Leading-edge skin-friction level.
const CF_LEVEL: f64 = 0.004;
/// Relative skin-friction dip at the pseudo-shock foot.
const CF_DIP: f64 = 0.5;
/// Reference Mach at which the shock-position law is anchored.
const MACH_ANCHOR: f64 = 0.70;

impl Default for SyntheticCase {
    fn default() -> Self {
        Self {
            nx: 30,
            ny: 30,
            chord: 1.0,
            span: 1.2,
            sweep_deg: 20.0,
            taper: 0.6,
            shock_delta: 0.08,
            load_scale: 0.45,
            shock_x0: 0.35,
            shock_per_mach: 1.8,
            shock_per_aoa: 0.02,
        }
    }
}

impl SyntheticCase {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "case grid {}x{} too small: need at least 2x2 nodes",
                self.nx, self.ny
            )));
        }
        let positive = [
            ("chord", self.chord),
            ("span", self.span),
            ("taper", self.taper),
            ("shock_delta", self.shock_delta),
        ];
        for (name, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {value}")));
            }
        }
        if self.taper > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "taper must lie in (0, 1], got {}",
                self.taper
            )));
        }
        if !(-80.0..=80.0).contains(&self.sweep_deg) {
            return Err(Error::InvalidArgument(format!(
                "sweep must lie in [-80, 80] degrees, got {}",
                self.sweep_deg
            )));
        }
        for (name, value) in [
            ("load_scale", self.load_scale),
            ("shock_x0", self.shock_x0),
            ("shock_per_mach", self.shock_per_mach),
            ("shock_per_aoa", self.shock_per_aoa),
        ] {
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite, got {value}")));
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    fn tan_sweep(&self) -> f64 {
        self.sweep_deg.to_radians().tan()
    }

    /// Local chord at spanwise fraction `t` in [0, 1].
    fn local_chord(&self, t: f64) -> f64 {
        self.chord * (1.0 - (1.0 - self.taper) * t)
    }

    /// Node position for grid indices `(i, j)`; `i` runs chordwise.
    fn node(&self, i: usize, j: usize) -> [f64; 3] {
        let xi = i as f64 / (self.nx - 1) as f64;
        let t = j as f64 / (self.ny - 1) as f64;
        let y = t * self.span;
        let x = y * self.tan_sweep() + xi * self.local_chord(t);
        [x, y, 0.0]
    }

    /// Chordwise fraction and spanwise fraction for a physical position.
    fn fractions_at(&self, x: f64, y: f64) -> (f64, f64) {
        let t = y / self.span;
        let xi = (x - y * self.tan_sweep()) / self.local_chord(t);
        (xi, t)
    }

    /// Build the triangulated plate mesh. Grid quads are split into two
    /// triangles with consistent winding so every normal points along +z.
    pub fn build_mesh(&self) -> Result<SurfaceMesh> {
        self.validate()?;
        let nodes: Vec<[f64; 3]> = (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| self.node(i, j)))
            .collect();
        let index = |i: usize, j: usize| j * self.nx + i;
        let mut cells = Vec::with_capacity(2 * (self.nx - 1) * (self.ny - 1));
        for j in 0..self.ny - 1 {
            for i in 0..self.nx - 1 {
                let (a, b) = (index(i, j), index(i + 1, j));
                let (c, d) = (index(i + 1, j + 1), index(i, j + 1));
                cells.push([a, b, c]);
                cells.push([a, c, d]);
            }
        }
        SurfaceMesh::new(nodes, cells)
    }

    /// Chordwise pseudo-shock position for an operating point, clamped to
    /// keep the front strictly inside the chord.
    pub fn shock_position(&self, aoa: f64, mach: f64) -> f64 {
        let xs = self.shock_x0
            + self.shock_per_mach * (mach - MACH_ANCHOR)
            + self.shock_per_aoa * aoa;
        xs.clamp(0.05, 0.95)
    }

    /// Smooth spanwise load modulation, 1 at the root tapering to 0.75 at
    /// the tip.
    fn span_modulation(t: f64) -> f64 {
        1.0 - 0.25 * t * t
    }

    /// Pressure coefficient at chordwise/spanwise fractions `(xi, t)`.
    fn cp_at(&self, xi: f64, t: f64, aoa: f64, mach: f64) -> f64 {
        let u = (xi - self.shock_position(aoa, mach)) / self.shock_delta;
        CP_BASE + CP_PER_AOA * aoa - self.load_scale * u.tanh() * Self::span_modulation(t)
    }

    /// Skin-friction vector at `(xi, t)`: a decaying chordwise power law
    /// that dips across the pseudo-shock, plus small smooth cross-flow and
    /// normal components.
    fn cf_at(&self, xi: f64, t: f64, aoa: f64, mach: f64) -> [f64; 3] {
        let u = (xi - self.shock_position(aoa, mach)) / self.shock_delta;
        let sech2 = 1.0 / (u.cosh() * u.cosh());
        let cfx = CF_LEVEL * (1.0 + xi).powf(-0.2) * (1.0 - CF_DIP * sech2);
        let cfy = 0.1 * CF_LEVEL * (std::f64::consts::PI * t).sin() * (1.0 - xi);
        let cfz = 0.05 * CF_LEVEL * xi * (1.0 - t * t);
        [cfx, cfy, cfz]
    }

    /// Node-wise target fields (Cp, Cfx, Cfy, Cfz) for one operating point.
    pub fn fields(&self, aoa: f64, mach: f64) -> Result<Array2<f64>> {
        self.validate()?;
        let mut values = Array2::zeros((self.n_nodes(), 4));
        for j in 0..self.ny {
            let t = j as f64 / (self.ny - 1) as f64;
            for i in 0..self.nx {
                let xi = i as f64 / (self.nx - 1) as f64;
                let row = j * self.nx + i;
                values[[row, 0]] = self.cp_at(xi, t, aoa, mach);
                let cf = self.cf_at(xi, t, aoa, mach);
                for (c, value) in cf.iter().enumerate() {
                    values[[row, 1 + c]] = *value;
                }
            }
        }
        Ok(values)
    }

    /// Generate one labelled flow sample at an operating point.
    pub fn sample(&self, aoa: f64, mach: f64) -> Result<FlowSample> {
        Ok(FlowSample { aoa, mach, targets: self.fields(aoa, mach)? })
    }

    /// Analytic spatial gradient of Cp at a physical position on the plate.
    pub fn cp_gradient(&self, x: f64, y: f64, aoa: f64, mach: f64) -> [f64; 3] {
        let (xi, t) = self.fractions_at(x, y);
        let chord = self.local_chord(t);
        let dchord_dt = -self.chord * (1.0 - self.taper);
        let dxi_dx = 1.0 / chord;
        let dxi_dy = -self.tan_sweep() / chord - xi * dchord_dt / (self.span * chord);
        let dmod_dy = -0.5 * t / self.span;
        let u = (xi - self.shock_position(aoa, mach)) / self.shock_delta;
        let sech2 = 1.0 / (u.cosh() * u.cosh());
        let front = -self.load_scale * sech2 / self.shock_delta;
        let modulation = Self::span_modulation(t);
        [
            front * modulation * dxi_dx,
            front * modulation * dxi_dy - self.load_scale * u.tanh() * dmod_dy,
            0.0,
        ]
    }
}

/// Split label for one design point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// One generated sample in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Design-point index, also used in generated file names.
    pub index: usize,
    pub aoa: f64,
    pub mach: f64,
    pub split: SplitLabel,
}

/// Dataset manifest: the design, the generating case, and per-sample rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub doe: Doe,
    pub case: SyntheticCase,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Assemble a manifest from a design, its sampled points, and a split.
    pub fn new(
        doe: Doe,
        case: SyntheticCase,
        points: &[(f64, f64)],
        splits: &Splits,
    ) -> Result<Self> {
        if points.len() != doe.n_samples {
            return Err(Error::InvalidArgument(format!(
                "{} design points for a DOE of {}",
                points.len(),
                doe.n_samples
            )));
        }
        let mut labels = vec![None; points.len()];
        for (indices, label) in [
            (&splits.train, SplitLabel::Train),
            (&splits.val, SplitLabel::Val),
            (&splits.test, SplitLabel::Test),
        ] {
            for &i in indices {
                let slot = labels.get_mut(i).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "split index {i} out of range for {} samples",
                        points.len()
                    ))
                })?;
                if slot.is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} appears in more than one subset"
                    )));
                }
                *slot = Some(label);
            }
        }
        let entries = points
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(index, (&(aoa, mach), label))| {
                let split = label.ok_or_else(|| {
                    Error::InvalidArgument(format!("design point {index} missing from the split"))
                })?;
                Ok(ManifestEntry { index, aoa, mach, split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { doe, case, entries })
    }

    /// Indices labelled with one split subset, in design order.
    pub fn indices(&self, label: SplitLabel) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == label).map(|e| e.index).collect()
    }

    /// Samples labelled with one split subset, generated in design order.
    pub fn samples(&self, label: SplitLabel) -> Result<Vec<FlowSample>> {
        self.entries
            .iter()
            .filter(|e| e.split == label)
            .map(|e| self.case.sample(e.aoa, e.mach))
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}
