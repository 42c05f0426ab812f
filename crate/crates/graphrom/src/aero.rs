//! Aerodynamic force and moment coefficients from surface pressure and
//! skin-friction fields.
//!
//! Per-cell loads use cell-centered quadrature (node averages), summed with a
//! deterministic pairwise tree so results are bit-identical regardless of
//! thread count. Lift and drag are reported in wind axes; the pitching moment
//! is taken about a y-directed axis through the moment reference point.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;

/// Reference quantities that nondimensionalize forces and moments.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AeroReference {
    /// Reference chord length (m).
    pub chord: f64,
    /// Reference area (m²).
    pub area: f64,
    /// Moment reference point (m).
    pub moment_point: [f64; 3],
    /// Angle of attack in degrees; the freestream lies in the x–z plane.
    pub alpha_deg: f64,
}

impl AeroReference {
    pub fn validate(&self) -> Result<()> {
        if !(self.chord > 0.0 && self.chord.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference chord must be positive, got {}",
                self.chord
            )));
        }
        if !(self.area > 0.0 && self.area.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference area must be positive, got {}",
                self.area
            )));
        }
        Ok(())
    }

    /// Unit freestream direction in the x–z plane.
    pub fn freestream(&self) -> [f64; 3] {
        let a = self.alpha_deg.to_radians();
        [a.cos(), 0.0, a.sin()]
    }

    /// Unit lift direction: perpendicular to the freestream in the x–z plane.
    pub fn lift_direction(&self) -> [f64; 3] {
        let a = self.alpha_deg.to_radians();
        [-a.sin(), 0.0, a.cos()]
    }
}

/// Integrated coefficients in wind axes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Coefficients {
    pub cl: f64,
    pub cd: f64,
    /// Sideforce coefficient (body y); reported for completeness.
    pub cy: f64,
    pub cmy: f64,
}

/// Chordwise placement of the moment reference point: leading-edge x plus
/// `fraction * chord`, at span station `span_y` (root plane by default) on
/// the z = 0 axis.
pub fn moment_reference(
    mesh: &SurfaceMesh,
    fraction: f64,
    chord: f64,
    span_y: f64,
) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "moment reference fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let leading_edge_x = mesh
        .nodes()
        .iter()
        .map(|n| n[0])
        .fold(f64::INFINITY, f64::min);
    Ok([leading_edge_x + fraction * chord, span_y, 0.0])
}

/// Per-cell load vector and pitching-moment contribution, packed as
/// `[fx, fy, fz, my]` for the pairwise reduction.
fn cell_load(
    mesh: &SurfaceMesh,
    cp: &ArrayView1<'_, f64>,
    cf: &ArrayView2<'_, f64>,
    moment_point: [f64; 3],
    cell: usize,
) -> [f64; 4] {
    let [a, b, c] = mesh.cells()[cell];
    let area = mesh.cell_areas()[cell];
    let normal = mesh.cell_normals()[cell];
    let cp_c = (cp[a] + cp[b] + cp[c]) / 3.0;
    let mut f = [0.0; 3];
    let mut centroid = [0.0; 3];
    for k in 0..3 {
        let cf_c = (cf[[a, k]] + cf[[b, k]] + cf[[c, k]]) / 3.0;
        f[k] = (-cp_c * normal[k] + cf_c) * area;
        centroid[k] =
            (mesh.nodes()[a][k] + mesh.nodes()[b][k] + mesh.nodes()[c][k]) / 3.0;
    }
    let r = [
        centroid[0] - moment_point[0],
        centroid[1] - moment_point[1],
        centroid[2] - moment_point[2],
    ];
    let my = r[2] * f[0] - r[0] * f[2];
    [f[0], f[1], f[2], my]
}

/// Pairwise tree sum with a shape fixed by the slice length, so the result is
/// independent of how work is split across threads.
fn pairwise_sum(terms: &[[f64; 4]]) -> [f64; 4] {
    if terms.len() <= 64 {
        let mut acc = [0.0; 4];
        for t in terms {
            for k in 0..4 {
                acc[k] += t[k];
            }
        }
        return acc;
    }
    let mid = terms.len() / 2;
    let (lo, hi) = rayon::join(|| pairwise_sum(&terms[..mid]), || pairwise_sum(&terms[mid..]));
    [lo[0] + hi[0], lo[1] + hi[1], lo[2] + hi[2], lo[3] + hi[3]]
}

/// Integrate pressure and skin-friction fields into CL, CD, CY, CMy.
pub fn integrate_coefficients(
    mesh: &SurfaceMesh,
    cp: &ArrayView1<'_, f64>,
    cf: &ArrayView2<'_, f64>,
    reference: &AeroReference,
) -> Result<Coefficients> {
    reference.validate()?;
    if cp.len() != mesh.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} cp values for {} mesh nodes",
            cp.len(),
            mesh.n_nodes()
        )));
    }
    if cf.dim() != (mesh.n_nodes(), 3) {
        return Err(Error::ShapeMismatch(format!(
            "cf shape {:?}, expected ({}, 3)",
            cf.dim(),
            mesh.n_nodes()
        )));
    }
    let terms: Vec<[f64; 4]> = (0..mesh.n_cells())
        .map(|cell| cell_load(mesh, cp, cf, reference.moment_point, cell))
        .collect();
    let [fx, fy, fz, my] = pairwise_sum(&terms);
    let force = [fx / reference.area, fy / reference.area, fz / reference.area];
    let drag_dir = reference.freestream();
    let lift_dir = reference.lift_direction();
    let dot = |u: [f64; 3], v: [f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    Ok(Coefficients {
        cl: dot(force, lift_dir),
        cd: dot(force, drag_dir),
        cy: force[1],
        cmy: my / (reference.area * reference.chord),
    })
}

/// Linear influence of the node fields on CMy: `cmy = cp_weights . cp +
/// sum_k cf_weights[., k] . cf[., k]`.
///
/// The coefficient is linear in both fields, so these fixed weight vectors
/// give the exact value and, in training, its gradient for free.
#[derive(Debug, Clone)]
pub struct CmyInfluence {
    pub cp_weights: Array1<f64>,
    pub cf_weights: Array2<f64>,
}

impl CmyInfluence {
    pub fn build(mesh: &SurfaceMesh, reference: &AeroReference) -> Result<Self> {
        reference.validate()?;
        let scale = 1.0 / (reference.area * reference.chord);
        let mut cp_weights = Array1::zeros(mesh.n_nodes());
        let mut cf_weights = Array2::zeros((mesh.n_nodes(), 3));
        for (cell, &[a, b, c]) in mesh.cells().iter().enumerate() {
            let area = mesh.cell_areas()[cell];
            let normal = mesh.cell_normals()[cell];
            let mut centroid = [0.0; 3];
            for k in 0..3 {
                centroid[k] =
                    (mesh.nodes()[a][k] + mesh.nodes()[b][k] + mesh.nodes()[c][k]) / 3.0;
            }
            let r = [
                centroid[0] - reference.moment_point[0],
                centroid[1] - reference.moment_point[1],
                centroid[2] - reference.moment_point[2],
            ];
            // my = r_z * f_x - r_x * f_z with f = (-cp n + cf) A, split per node.
            let third = area * scale / 3.0;
            let cp_term = third * (r[2] * -normal[0] - r[0] * -normal[2]);
            for &node in &[a, b, c] {
                cp_weights[node] += cp_term;
                cf_weights[[node, 0]] += third * r[2];
                cf_weights[[node, 2]] -= third * r[0];
            }
        }
        Ok(CmyInfluence {
            cp_weights,
            cf_weights,
        })
    }

    pub fn evaluate(&self, cp: &ArrayView1<'_, f64>, cf: &ArrayView2<'_, f64>) -> Result<f64> {
        if cp.len() != self.cp_weights.len() || cf.dim() != self.cf_weights.dim() {
            return Err(Error::ShapeMismatch(
                "field sizes do not match influence weights".into(),
            ));
        }
        Ok(self.cp_weights.dot(cp) + (&self.cf_weights * cf).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Unit square in the z = 0 plane, normals +z, split into two triangles.
    fn flat_plate() -> SurfaceMesh {
        SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn plate_reference(moment_point: [f64; 3]) -> AeroReference {
        AeroReference {
            chord: 1.0,
            area: 1.0,
            moment_point,
            alpha_deg: 0.0,
        }
    }

    #[test]
    fn uniform_suction_on_flat_plate_gives_unit_lift() {
        let mesh = flat_plate();
        let cp = Array1::from_elem(4, -1.0);
        let cf = Array2::zeros((4, 3));
        let c = integrate_coefficients(
            &mesh,
            &cp.view(),
            &cf.view(),
            &plate_reference([0.5, 0.5, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(c.cl, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.cd, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_streamwise_friction_gives_unit_drag() {
        let mesh = flat_plate();
        let cp = Array1::zeros(4);
        let mut cf = Array2::zeros((4, 3));
        cf.column_mut(0).fill(1.0);
        let c = integrate_coefficients(
            &mesh,
            &cp.view(),
            &cf.view(),
            &plate_reference([0.5, 0.5, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(c.cd, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.cl, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_load_about_centroid_has_zero_moment() {
        let mesh = flat_plate();
        let cp = Array1::from_elem(4, -0.7);
        let cf = Array2::zeros((4, 3));
        let c = integrate_coefficients(
            &mesh,
            &cp.view(),
            &cf.view(),
            &plate_reference([0.5, 0.5, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(c.cmy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn moment_reference_offsets_along_chord() {
        let mesh = flat_plate();
        let p = moment_reference(&mesh, 0.30, 0.4064, 0.0).unwrap();
        assert_relative_eq!(p[0], 0.12192, epsilon = 1e-12);
        let p = moment_reference(&mesh, 0.0, 0.4064, 0.0).unwrap();
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-12);
        let p = moment_reference(&mesh, 0.25, 0.1412, 0.0).unwrap();
        assert_relative_eq!(p[0], 0.0353, epsilon = 1e-12);
        assert!(moment_reference(&mesh, 1.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn coefficients_are_linear_in_fields() {
        let mesh = flat_plate();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reference = AeroReference {
            chord: 0.8,
            area: 1.3,
            moment_point: [0.2, 0.1, 0.05],
            alpha_deg: 4.0,
        };
        let rand_fields = |rng: &mut ChaCha8Rng| {
            (
                Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.1..0.1)),
            )
        };
        let (cp1, cf1) = rand_fields(&mut rng);
        let (cp2, cf2) = rand_fields(&mut rng);
        let (a, b) = (0.37, -1.21);
        let eval = |cp: &Array1<f64>, cf: &Array2<f64>| {
            integrate_coefficients(&mesh, &cp.view(), &cf.view(), &reference).unwrap()
        };
        let c1 = eval(&cp1, &cf1);
        let c2 = eval(&cp2, &cf2);
        let mixed = eval(&(a * &cp1 + b * &cp2), &(a * &cf1 + b * &cf2));
        assert_relative_eq!(mixed.cl, a * c1.cl + b * c2.cl, epsilon = 1e-12);
        assert_relative_eq!(mixed.cd, a * c1.cd + b * c2.cd, epsilon = 1e-12);
        assert_relative_eq!(mixed.cmy, a * c1.cmy + b * c2.cmy, epsilon = 1e-12);
    }

    /// Sphere via octahedron subdivision; every refinement halves edge length.
    fn sphere_mesh(levels: u32) -> SurfaceMesh {
        let mut nodes: Vec<[f64; 3]> = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        // Outward-wound octahedron faces.
        let mut cells: Vec<[usize; 3]> = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        for _ in 0..levels {
            let mut midpoint = std::collections::HashMap::new();
            let mut next = Vec::with_capacity(cells.len() * 4);
            for &[a, b, c] in &cells {
                let mut mid = |i: usize, j: usize, nodes: &mut Vec<[f64; 3]>| {
                    let key = (i.min(j), i.max(j));
                    *midpoint.entry(key).or_insert_with(|| {
                        let p = [
                            (nodes[i][0] + nodes[j][0]) / 2.0,
                            (nodes[i][1] + nodes[j][1]) / 2.0,
                            (nodes[i][2] + nodes[j][2]) / 2.0,
                        ];
                        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                        nodes.push([p[0] / norm, p[1] / norm, p[2] / norm]);
                        nodes.len() - 1
                    })
                };
                let ab = mid(a, b, &mut nodes);
                let bc = mid(b, c, &mut nodes);
                let ca = mid(c, a, &mut nodes);
                next.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            }
            cells = next;
        }
        SurfaceMesh::new(nodes, cells).unwrap()
    }

    #[test]
    fn sphere_force_converges_under_refinement() {
        // cp = z on the unit sphere: F = -Int z r_hat dA = (0, 0, -4 pi / 3).
        let exact = -4.0 * std::f64::consts::PI / 3.0;
        let reference = AeroReference {
            chord: 1.0,
            area: 1.0,
            moment_point: [0.0; 3],
            alpha_deg: 0.0,
        };
        let mut errors = Vec::new();
        for levels in [2, 3, 4] {
            let mesh = sphere_mesh(levels);
            let cp = Array1::from_iter(mesh.nodes().iter().map(|n| n[2]));
            let cf = Array2::zeros((mesh.n_nodes(), 3));
            let c = integrate_coefficients(&mesh, &cp.view(), &cf.view(), &reference).unwrap();
            errors.push((c.cl - exact).abs());
        }
        assert!(
            errors[1] <= errors[0] / 1.8 && errors[2] <= errors[1] / 1.8,
            "errors not decreasing at first order: {errors:?}"
        );
    }

    #[test]
    fn rotating_configuration_and_freestream_together_preserves_coefficients() {
        let mesh = flat_plate();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cp = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..0.0));
        let cf = Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.05..0.05));
        let alpha = 3.0f64;
        let reference = AeroReference {
            chord: 1.0,
            area: 1.0,
            moment_point: [0.3, 0.5, 0.0],
            alpha_deg: alpha,
        };
        let base = integrate_coefficients(&mesh, &cp.view(), &cf.view(), &reference).unwrap();

        // Rotate everything by phi about the +y axis.
        let phi = 17.0f64.to_radians();
        let rot = |p: [f64; 3]| {
            [
                p[0] * phi.cos() + p[2] * phi.sin(),
                p[1],
                -p[0] * phi.sin() + p[2] * phi.cos(),
            ]
        };
        let nodes = mesh.nodes().iter().map(|&n| rot(n)).collect();
        let rotated = SurfaceMesh::new(nodes, mesh.cells().to_vec()).unwrap();
        let mut cf_rot = Array2::zeros((4, 3));
        for i in 0..4 {
            let v = rot([cf[[i, 0]], cf[[i, 1]], cf[[i, 2]]]);
            for k in 0..3 {
                cf_rot[[i, k]] = v[k];
            }
        }
        let u_rot = rot(reference.freestream());
        let reference_rot = AeroReference {
            moment_point: rot(reference.moment_point),
            alpha_deg: u_rot[2].atan2(u_rot[0]).to_degrees(),
            ..reference
        };
        let turned =
            integrate_coefficients(&rotated, &cp.view(), &cf_rot.view(), &reference_rot).unwrap();
        assert_relative_eq!(turned.cl, base.cl, epsilon = 1e-10);
        assert_relative_eq!(turned.cd, base.cd, epsilon = 1e-10);
        assert_relative_eq!(turned.cmy, base.cmy, epsilon = 1e-10);
    }

    #[test]
    fn influence_weights_reproduce_integrated_moment() {
        let mesh = flat_plate();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reference = AeroReference {
            chord: 0.4064,
            area: 0.3303,
            moment_point: [0.12192, 0.0, 0.0],
            alpha_deg: 2.5,
        };
        let cp = Array1::from_shape_fn(4, |_| rng.random_range(-1.5..0.5));
        let cf = Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.02..0.02));
        let direct = integrate_coefficients(&mesh, &cp.view(), &cf.view(), &reference)
            .unwrap()
            .cmy;
        let influence = CmyInfluence::build(&mesh, &reference).unwrap();
        let via_weights = influence.evaluate(&cp.view(), &cf.view()).unwrap();
        assert_relative_eq!(via_weights, direct, epsilon = 1e-13);
    }

    #[test]
    fn bad_reference_values_are_rejected() {
        let mesh = flat_plate();
        let cp = Array1::zeros(4);
        let cf = Array2::zeros((4, 3));
        let bad = AeroReference {
            chord: -1.0,
            area: 1.0,
            moment_point: [0.0; 3],
            alpha_deg: 0.0,
        };
        assert!(integrate_coefficients(&mesh, &cp.view(), &cf.view(), &bad).is_err());

        let ok = plate_reference([0.0; 3]);
        let short = Array1::zeros(3);
        assert!(integrate_coefficients(&mesh, &short.view(), &cf.view(), &ok).is_err());
    }
}
