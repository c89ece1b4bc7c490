//! Procedural face-like images for desk-scale experiments. Each identity is a
//! parameter vector (skin/hair/eye colors, geometry); images of one identity
//! differ only in nuisance factors (shift, scale, lighting, background), so a
//! small classifier can learn identities and a verifier's embeddings cluster.
//!
//! Nothing here pretends to be a real face corpus; it exists to exercise the
//! training and evaluation machinery end to end.

use ndarray::Array3;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FaceIdentity {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub hairline: f32,
    pub eye_color: [f32; 3],
    pub eye_radius: f32,
    pub eye_sep: f32,
    pub eye_height: f32,
    pub brow_tilt: f32,
    pub brow_drop: f32,
    pub mouth_color: [f32; 3],
    pub mouth_width: f32,
    pub mouth_curve: f32,
    pub mouth_height: f32,
    pub nose_len: f32,
    pub face_rx: f32,
    pub face_ry: f32,
}

impl FaceIdentity {
    /// Draws one identity. Color palettes are kept far apart so identity is
    /// strongly encoded in low-frequency appearance.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin_base = rng.gen_range(0.35..0.95);
        let skin = [
            skin_base,
            skin_base * rng.gen_range(0.72..0.92),
            skin_base * rng.gen_range(0.55..0.8),
        ];
        let hair = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.8),
            rng.gen_range(0.05..0.9),
        ];
        let eye_color = [
            rng.gen_range(0.05..0.6),
            rng.gen_range(0.15..0.7),
            rng.gen_range(0.2..0.95),
        ];
        let mouth_color = [rng.gen_range(0.5..0.95), rng.gen_range(0.1..0.4), rng.gen_range(0.15..0.45)];
        Self {
            skin,
            hair,
            hairline: rng.gen_range(-0.62..-0.38),
            eye_color,
            eye_radius: rng.gen_range(0.055..0.105),
            eye_sep: rng.gen_range(0.26..0.42),
            eye_height: rng.gen_range(-0.3..-0.12),
            brow_tilt: rng.gen_range(-0.12..0.12),
            brow_drop: rng.gen_range(0.1..0.17),
            mouth_color,
            mouth_width: rng.gen_range(0.18..0.38),
            mouth_curve: rng.gen_range(-0.1..0.14),
            mouth_height: rng.gen_range(0.42..0.58),
            nose_len: rng.gen_range(0.18..0.34),
            face_rx: rng.gen_range(0.56..0.72),
            face_ry: rng.gen_range(0.72..0.88),
        }
    }
}

/// Per-image variation that does not change identity.
#[derive(Debug, Clone)]
pub struct Nuisance {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub brightness: f32,
    pub gain: [f32; 3],
    pub bg_top: [f32; 3],
    pub bg_bottom: [f32; 3],
}

impl Nuisance {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dx: rng.gen_range(-0.06..0.06),
            dy: rng.gen_range(-0.06..0.06),
            scale: rng.gen_range(0.92..1.08),
            brightness: rng.gen_range(-0.06..0.06),
            gain: [
                rng.gen_range(0.95..1.05),
                rng.gen_range(0.95..1.05),
                rng.gen_range(0.95..1.05),
            ],
            bg_top: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            bg_bottom: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        }
    }

    pub fn neutral() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            brightness: 0.0,
            gain: [1.0; 3],
            bg_top: [0.55, 0.6, 0.7],
            bg_bottom: [0.35, 0.4, 0.5],
        }
    }
}

/// Color at face-local coordinates (u, v) in [-1, 1]^2, in [0, 1] RGB.
fn shade(id: &FaceIdentity, nu: &Nuisance, u: f32, v: f32, vv_bg: f32) -> [f32; 3] {
    // background gradient
    let t = vv_bg;
    let mut color = [
        nu.bg_top[0] * (1.0 - t) + nu.bg_bottom[0] * t,
        nu.bg_top[1] * (1.0 - t) + nu.bg_bottom[1] * t,
        nu.bg_top[2] * (1.0 - t) + nu.bg_bottom[2] * t,
    ];

    let inside = |x: f32, y: f32, rx: f32, ry: f32| (x / rx).powi(2) + (y / ry).powi(2) <= 1.0;

    // hair sits behind the face: a slightly larger ellipse above the hairline
    if inside(u, v, id.face_rx * 1.14, id.face_ry * 1.12) && v < id.hairline + 0.32 {
        color = id.hair;
    }
    if inside(u, v, id.face_rx, id.face_ry) {
        color = id.skin;
        // hair fringe overlapping the forehead
        if v < id.hairline {
            color = id.hair;
        }
        // eyes
        for side in [-1.0f32, 1.0] {
            let ex = side * id.eye_sep;
            let ey = id.eye_height;
            if inside(u - ex, v - ey, id.eye_radius * 1.6, id.eye_radius) {
                color = [0.95, 0.95, 0.93]; // sclera
            }
            if inside(u - ex, v - ey, id.eye_radius * 0.8, id.eye_radius * 0.8) {
                color = id.eye_color;
            }
            if inside(u - ex, v - ey, id.eye_radius * 0.35, id.eye_radius * 0.35) {
                color = [0.05, 0.05, 0.05];
            }
            // brow: a tilted bar above the eye
            let bx = u - ex;
            let by = v - (ey - id.brow_drop) - side * id.brow_tilt * bx;
            if bx.abs() < id.eye_radius * 1.9 && by.abs() < 0.028 {
                color = [
                    id.hair[0] * 0.6,
                    id.hair[1] * 0.6,
                    id.hair[2] * 0.6,
                ];
            }
        }
        // nose: vertical wedge from between the eyes
        let nose_top = id.eye_height + 0.1;
        if v >= nose_top && v <= nose_top + id.nose_len {
            let w = 0.015 + 0.05 * (v - nose_top) / id.nose_len;
            if u.abs() < w {
                color = [id.skin[0] * 0.82, id.skin[1] * 0.8, id.skin[2] * 0.78];
            }
        }
        // mouth: curved horizontal band
        let mx = u / id.mouth_width;
        if mx.abs() <= 1.0 {
            let my = v - (id.mouth_height + id.mouth_curve * mx * mx);
            if my.abs() < 0.035 {
                color = id.mouth_color;
            }
        }
    }

    [
        (color[0] * nu.gain[0] + nu.brightness).clamp(0.0, 1.0),
        (color[1] * nu.gain[1] + nu.brightness).clamp(0.0, 1.0),
        (color[2] * nu.gain[2] + nu.brightness).clamp(0.0, 1.0),
    ]
}

/// Renders one face at `size`×`size` into a [-1,1] `[3,H,W]` array, with 2x
/// supersampling for smooth edges.
pub fn render(id: &FaceIdentity, nu: &Nuisance, size: usize) -> Array3<f32> {
    let ss = 2 * size;
    let mut hi = Array3::<f32>::zeros((3, ss, ss));
    for y in 0..ss {
        for x in 0..ss {
            // pixel center in [-1, 1], then nuisance shift/scale
            let px = (x as f32 + 0.5) / ss as f32 * 2.0 - 1.0;
            let py = (y as f32 + 0.5) / ss as f32 * 2.0 - 1.0;
            let u = (px - nu.dx) / nu.scale;
            let v = (py - nu.dy) / nu.scale;
            let c = shade(id, nu, u, v, (y as f32 + 0.5) / ss as f32);
            for ci in 0..3 {
                hi[[ci, y, x]] = c[ci];
            }
        }
    }
    let mut out = Array3::<f32>::zeros((3, size, size));
    for ci in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let s = hi[[ci, 2 * y, 2 * x]]
                    + hi[[ci, 2 * y, 2 * x + 1]]
                    + hi[[ci, 2 * y + 1, 2 * x]]
                    + hi[[ci, 2 * y + 1, 2 * x + 1]];
                out[[ci, y, x]] = (s * 0.25) * 2.0 - 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn render_is_deterministic_and_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let id = FaceIdentity::sample(&mut rng);
        let nu = Nuisance::sample(&mut rng);
        let a = render(&id, &nu, 32);
        let b = render(&id, &nu, 32);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.shape(), &[3, 32, 32]);
    }

    #[test]
    fn identities_differ_more_than_nuisances() {
        // Central-crop distances: different identities under one nuisance
        // must exceed one identity under different nuisances, on average.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let ids: Vec<FaceIdentity> = (0..5).map(|_| FaceIdentity::sample(&mut rng)).collect();
        let nus: Vec<Nuisance> = (0..3).map(|_| Nuisance::sample(&mut rng)).collect();
        let center = |img: &Array3<f32>| img.slice(ndarray::s![.., 8..24, 8..24]).to_owned();
        let dist = |a: &Array3<f32>, b: &Array3<f32>| {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32
        };
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let a = center(&render(id, &nus[0], 32));
            let b = center(&render(id, &nus[1], 32));
            intra.push(dist(&a, &b));
            for other in ids.iter().skip(i + 1) {
                let c = center(&render(other, &nus[0], 32));
                inter.push(dist(&a, &c));
            }
        }
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!(
            mean(&inter) > 1.5 * mean(&intra),
            "identity signal too weak: inter {} vs intra {}",
            mean(&inter),
            mean(&intra)
        );
    }
}
