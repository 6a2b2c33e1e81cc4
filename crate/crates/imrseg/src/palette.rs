//! Canonical class names and colors shared by the toy embedding provider
//! and the synthetic dataset generator.
//!
//! The toy provider's premise is that objects of a class are drawn in that
//! class's canonical color, so both sides must agree on the mapping. Colors
//! are spaced 30 degrees apart in hue at fixed saturation/value, which keeps
//! every pair of classes well separated in RGB.

/// The twelve canonical shape classes, in fold order.
pub const CANONICAL_CLASSES: [&str; 12] = [
    "circle", "square", "triangle", "ring", "cross", "diamond", "bar", "frame", "ell", "tee",
    "chevron", "dots",
];

const SATURATION: f64 = 0.85;
const VALUE: f64 = 0.95;

/// Canonical RGB color (each channel in [0,1]) for a class label.
///
/// Known classes get one of twelve evenly spaced hues; unknown labels fall
/// back to a hue derived from a stable hash of the name so that arbitrary
/// datasets still get a deterministic color.
pub fn canonical_color(class: &str) -> [f64; 3] {
    let hue = match CANONICAL_CLASSES.iter().position(|c| *c == class) {
        Some(i) => i as f64 * 30.0,
        None => (fnv1a(class.as_bytes()) % 360) as f64,
    };
    hsv_to_rgb(hue, SATURATION, VALUE)
}

/// Quantize a color to the 8-bit values actually written into PNGs.
/// The generator draws with these so that disk round-trips are exact.
pub fn quantized_color(class: &str) -> [u8; 3] {
    let c = canonical_color(class);
    [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// FNV-1a, used only to derive stable fallback hues.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h_deg.rem_euclid(360.0)) / 60.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_colors_are_pairwise_separated() {
        // The toy embedding's color kernel needs min pairwise RGB distance
        // comfortably above its bandwidth.
        let colors: Vec<[f64; 3]> = CANONICAL_CLASSES.iter().map(|c| canonical_color(c)).collect();
        for i in 0..colors.len() {
            for j in (i + 1)..colors.len() {
                let d: f64 = (0..3).map(|k| (colors[i][k] - colors[j][k]).powi(2)).sum::<f64>().sqrt();
                assert!(d > 0.3, "classes {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn unknown_class_color_is_deterministic() {
        assert_eq!(canonical_color("zebra"), canonical_color("zebra"));
    }
}
