use crate::error::{contract, Error, Result};

/// Five facial landmarks `(x, y)` in pixels, ordered as the ArcFace
/// protocol (left eye, right eye, nose, left mouth, right mouth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmarks5 {
    points: [[f64; 2]; 5],
}

/// Reference 5-point template in a 112x112 aligned crop.
pub const ARCFACE_TEMPLATE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

impl Landmarks5 {
    pub fn new(points: [[f64; 2]; 5]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract("landmark coordinates must be finite"));
        }
        if points.iter().all(|p| p == &points[0]) {
            return Err(Error::DegenerateGeometry("all five landmarks coincide".into()));
        }
        Ok(Self { points })
    }

    /// The canonical template mapped into a square box of side `size`
    /// whose top-left corner is `origin`.
    pub fn template_in_box(origin: [f64; 2], size: f64) -> Self {
        let k = size / 112.0;
        let mut points = ARCFACE_TEMPLATE_112;
        for p in &mut points {
            p[0] = origin[0] + p[0] * k;
            p[1] = origin[1] + p[1] * k;
        }
        Self { points }
    }

    pub fn points(&self) -> &[[f64; 2]; 5] {
        &self.points
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        Self::new(self.points.map(f))
    }

    fn centroid(&self) -> [f64; 2] {
        let mut c = [0.0; 2];
        for p in &self.points {
            c[0] += p[0] / 5.0;
            c[1] += p[1] / 5.0;
        }
        c
    }
}

/// Least-squares similarity `dst ~ A src + t` with `A = [[a, -b], [b, a]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    /// `sqrt(|det A|)`.
    pub raw_scale: f64,
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Similarity {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.linear;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.translation[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn rotation_rad(&self) -> f64 {
        self.linear[1][0].atan2(self.linear[0][0])
    }
}

/// Closed-form Umeyama fit restricted to proper similarities (2-D).
pub fn estimate_similarity(src: &Landmarks5, dst: &Landmarks5) -> Result<Similarity> {
    let (cs, cd) = (src.centroid(), dst.centroid());
    let (mut var, mut dot, mut cross) = (0.0, 0.0, 0.0);
    let mut spread_dst = 0.0;
    for (p, q) in src.points.iter().zip(&dst.points) {
        let (x, y) = (p[0] - cs[0], p[1] - cs[1]);
        let (u, v) = (q[0] - cd[0], q[1] - cd[1]);
        var += x * x + y * y;
        spread_dst += u * u + v * v;
        dot += x * u + y * v;
        cross += x * v - y * u;
    }
    if var <= 1e-18 || spread_dst <= 1e-18 {
        return Err(Error::DegenerateGeometry(
            "landmark set has no spatial extent".into(),
        ));
    }
    let (a, b) = (dot / var, cross / var);
    let raw_scale = (a * a + b * b).sqrt();
    if raw_scale <= 1e-12 {
        return Err(Error::DegenerateGeometry(
            "fitted similarity has zero scale".into(),
        ));
    }
    let linear = [[a, -b], [b, a]];
    let translation = [
        cd[0] - (a * cs[0] - b * cs[1]),
        cd[1] - (b * cs[0] + a * cs[1]),
    ];
    Ok(Similarity {
        raw_scale,
        linear,
        translation,
    })
}

pub const MIN_PASTE_SCALE: f64 = 0.2;
pub const MAX_PASTE_SCALE: f64 = 5.0;

/// `clip(1 / raw_scale, 0.2, 5.0)`, where `raw_scale` comes from an
/// image-to-patch fit.
pub fn patch_to_image_scale(raw_scale: f64) -> Result<f64> {
    if raw_scale.is_nan() || raw_scale <= 0.0 {
        return Err(contract(format!("raw scale must be positive, got {raw_scale}")));
    }
    Ok((1.0 / raw_scale).clamp(MIN_PASTE_SCALE, MAX_PASTE_SCALE))
}

// Offsets within this distance of an integer are treated as that integer
// before flooring, so exact placements do not lose a pixel to rounding.
const SNAP: f64 = 1e-9;

fn snap_floor(v: f64) -> i64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r as i64
    } else {
        v.floor() as i64
    }
}

/// Mean landmark residual `(1/5) sum (dst - s * src)`, floored to integers.
/// Returned as `(x, y)`.
pub fn translation_offset(src: &Landmarks5, dst: &Landmarks5, scale: f64) -> (i64, i64) {
    let mut d = [0.0; 2];
    for (p, q) in src.points.iter().zip(&dst.points) {
        d[0] += (q[0] - scale * p[0]) / 5.0;
        d[1] += (q[1] - scale * p[1]) / 5.0;
    }
    (snap_floor(d[0]), snap_floor(d[1]))
}
