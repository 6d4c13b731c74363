use nalgebra::Vector3;

/// Generalized winding number of a closed, outward-oriented triangle mesh at
/// `p` (≈1 inside, ≈0 outside), summing signed solid angles with the Van
/// Oosterom–Strackee formula. Zero-area faces are skipped.
pub fn winding_number(p: &Vector3<f64>, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> f64 {
    let mut total = 0.0;
    for f in faces {
        let (v0, v1, v2) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        if (v1 - v0).cross(&(v2 - v0)).norm_squared() == 0.0 {
            continue;
        }
        let (a, b, c) = (v0 - p, v1 - p, v2 - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

/// Fraction of `points` whose winding number exceeds 0.5.
pub fn penetration_fraction(points: &[Vector3<f64>], vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let degenerate = faces.iter().filter(|f| {
        let (v0, v1, v2) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        (v1 - v0).cross(&(v2 - v0)).norm_squared() == 0.0
    });
    let skipped = degenerate.count();
    if skipped > 0 {
        log::warn!("penetration_fraction: skipping {skipped} degenerate faces");
    }
    let inside = points.iter().filter(|p| winding_number(p, vertices, faces) > 0.5).count();
    inside as f64 / points.len() as f64
}
